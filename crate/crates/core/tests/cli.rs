use bivm::cli::{run, EXIT_FAILED, EXIT_USAGE};

fn call(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("bivm").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(call(&["verify", "--frobnicate"]).0, EXIT_USAGE);
    assert_eq!(call(&["no-such-command"]).0, EXIT_USAGE);
    assert_eq!(call(&["profile", "--size", "288"]).0, EXIT_USAGE);
    assert_eq!(call(&["verify", "--suite", "everything"]).0, EXIT_USAGE);
    assert_eq!(call(&["train-toy", "--stage", "7", "--data", "x"]).0, EXIT_USAGE);
}

#[test]
fn profile_prints_storage_and_flops() {
    let (code, out) = call(&["profile", "--model", "bivm", "--size", "288x512"]);
    assert_eq!(code, 0);
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    let cols: Vec<f64> = total.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((cols[0] - 0.32).abs() / 0.32 <= 0.25, "{total}");
    assert!((cols[1] - 0.67).abs() / 0.67 <= 0.15, "{total}");
}

#[test]
fn verify_suite_reports_each_check() {
    let (code, out) = call(&["verify", "--suite", "theorem2"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("PASS theorem2"));
}

#[test]
fn missing_input_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let (code, _) = call(&["infer", "--model", "toy", "--in", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_FAILED);
}

#[test]
fn synth_train_infer_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert_eq!(call(&["synth", "--out", &p("data"), "--clips", "2", "--frames", "4"]).0, 0);
    let (code, out) = call(&["train-toy", "--stage", "1", "--data", &p("data"), "--steps", "2", "--out", &p("m.bvm"), "--log", &p("log.csv")]);
    assert_eq!(code, 0, "{out}");
    let log = std::fs::read_to_string(p("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2 + 2);

    let (code, out) = call(&["infer", "--model", &p("m.bvm"), "--in", &p("data/clip_000/img"), "--out", &p("out"), "--dump-mask"]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_dir(p("out/alpha")).unwrap().count(), 4);
    let densities: Vec<(usize, f64)> = out
        .lines()
        .filter_map(|l| l.strip_prefix("mask x"))
        .map(|l| {
            let k = l.split(':').next().unwrap().parse().unwrap();
            (k, l.rsplit(' ').next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(densities.iter().map(|d| d.0).collect::<Vec<_>>(), [2, 4, 8, 16]);
    for k in [2, 4, 8, 16] {
        assert_eq!(std::fs::read_dir(p(&format!("out/mask_x{k}"))).unwrap().count(), 4);
    }

    let (code, out) = call(&["evaluate", "--model", &p("m.bvm"), "--data", &p("data")]);
    assert_eq!(code, 0);
    assert!(out.starts_with("mad_x1e3,mse_x1e3,grad_div1e3,conn_div1e3,dtssd_x1e2,mse_fg_x1e3\n"));
}
