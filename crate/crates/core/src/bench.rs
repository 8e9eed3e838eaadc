//! Packed-vs-float convolution latency harness.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::{pack, unpack};
use crate::error::{Error, Result};
use crate::kernels::{bconv2d, float_conv_oracle, ConvSpec};
use crate::tensor::{DenseTensor, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub case: BenchCase,
    pub threads: usize,
    pub runs: usize,
    pub packed_ms: f64,
    pub oracle_ms: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.oracle_ms / self.packed_ms
    }
}

pub fn default_cases() -> Vec<BenchCase> {
    [64, 128, 256]
        .iter()
        .map(|&c| BenchCase { c_in: c, c_out: c, k: 3, h: 64, w: 64 })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_ms(mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

/// Times one case. The packed timing includes binarizing the activation;
/// weights are packed once up front.
pub fn bench_case(case: BenchCase, runs: usize, threads: usize, seed: u64) -> Result<BenchRow> {
    if runs == 0 {
        return Err(Error::Invalid("runs must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseTensor::from_fn(Shape::new(1, case.c_in, case.h, case.w), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let w = DenseTensor::from_fn(Shape::new(case.c_out, case.c_in, case.k, case.k), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let spec = ConvSpec::same(case.k, 1, 1);
    let wb = pack(&w, 0.0)?;
    let xs = unpack(&pack(&x, 0.0)?);
    let ws = unpack(&wb);
    pool.install(|| -> Result<BenchRow> {
        // warm-up
        std::hint::black_box(bconv2d(&pack(&x, 0.0)?, &wb, 1.0, &spec)?);
        let mut packed = Vec::with_capacity(runs);
        let mut oracle = Vec::with_capacity(runs);
        for _ in 0..runs {
            let mut res = Ok(());
            packed.push(time_ms(|| {
                res = pack(&x, 0.0).and_then(|xb| bconv2d(&xb, &wb, 1.0, &spec)).map(|o| {
                    std::hint::black_box(o);
                })
            }));
            res?;
            let mut res = Ok(());
            oracle.push(time_ms(|| {
                res = float_conv_oracle(&xs, &ws, &spec).map(|o| {
                    std::hint::black_box(o);
                })
            }));
            res?;
        }
        Ok(BenchRow { case, threads, runs, packed_ms: median(packed), oracle_ms: median(oracle) })
    })
}

pub fn bench(cases: &[BenchCase], runs: usize, threads: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &t in threads {
        for &c in cases {
            rows.push(bench_case(c, runs, t, seed)?);
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wtr.write_record(["c_in", "c_out", "k", "h", "w", "threads", "runs", "packed_ms", "oracle_ms", "speedup"])
        .map_err(err)?;
    for r in rows {
        wtr.write_record([
            r.case.c_in.to_string(),
            r.case.c_out.to_string(),
            r.case.k.to_string(),
            r.case.h.to_string(),
            r.case.w.to_string(),
            r.threads.to_string(),
            r.runs.to_string(),
            format!("{:.4}", r.packed_ms),
            format!("{:.4}", r.oracle_ms),
            format!("{:.2}", r.speedup()),
        ])
        .map_err(err)?;
    }
    wtr.flush()?;
    Ok(())
}
