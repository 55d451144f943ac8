use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_confound-mf"));
    cmd.env_remove("CONFOUND_MF_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("valid JSON")
}

fn synth(dir: &Path, n: usize, p: usize, noise: &str) {
    run(bin().args(["synth", "linear", "--n", &n.to_string(), "--p", &p.to_string(), "--noise", noise, "--seed", "4"])
        .arg("--out-dir")
        .arg(dir));
}

#[test]
fn synth_complete_diagnose_ate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 120, 40, "bernoulli");
    for f in ["X.csv", "schema.json", "data.csv", "U.csv", "V.csv"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let schema = fs::read_to_string(d.join("schema.json")).unwrap();
    assert!(schema.contains("bernoulli"));

    let out = run(bin()
        .args(["complete", "--cv", "--grid-size", "5", "--max-truncation-rank", "8", "--seed", "1"])
        .arg("--input")
        .arg(d.join("X.csv"))
        .arg("--schema")
        .arg(d.join("schema.json"))
        .arg("--output")
        .arg(d.join("phi.csv"))
        .arg("--confounders")
        .arg(d.join("U_hat.csv")));
    let summary = json(&out.stdout);
    let rank = summary["rank"].as_u64().unwrap();
    assert!((1..=8).contains(&rank), "{summary}");
    assert_eq!(summary["lambda_grid"].as_array().unwrap().len(), 5);
    let phi = fs::read_to_string(d.join("phi.csv")).unwrap();
    assert_eq!(phi.lines().count(), 121);
    let u_hat = fs::read_to_string(d.join("U_hat.csv")).unwrap();
    assert_eq!(u_hat.lines().next().unwrap().split(',').count() as u64, rank);

    let out = run(bin()
        .arg("diagnose")
        .arg("--u-true")
        .arg(d.join("U.csv"))
        .arg("--u-hat")
        .arg(d.join("U_hat.csv"))
        .arg("--phi")
        .arg(d.join("phi.csv"))
        .arg("--data")
        .arg(d.join("data.csv")));
    let report = json(&out.stdout);
    let angle = report["angle"].as_f64().unwrap();
    let dist = report["projection_distance"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&angle) && angle <= dist + 1e-12);
    assert!(report["spikiness"].as_f64().unwrap() >= 1.0);
    assert!(report["residual_energy"].as_f64().unwrap() > 0.0);

    let report_path = d.join("ate.json");
    run(bin()
        .args(["ate", "--method", "ols"])
        .arg("--data")
        .arg(d.join("data.csv"))
        .arg("--covariates")
        .arg(d.join("U.csv"))
        .arg("--output")
        .arg(&report_path));
    let report = json(&fs::read(&report_path).unwrap());
    assert_eq!(report["n_used"].as_u64().unwrap(), 120);
    let tau = report["tau_hat"].as_f64().unwrap();
    assert!((tau - 2.0).abs() < 1.0, "{tau}");
}

#[test]
fn complete_with_fixed_lambda_matches_between_runs_and_solvers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 40, 15, "gaussian");
    let run_complete = |solver: &str, name: &str| {
        let out = run(bin()
            .args(["complete", "--lambda", "40", "--loss", "gaussian", "--rel-tol", "1e-12", "--max-iters", "20000"])
            .args(["--solver", solver])
            .arg("--input")
            .arg(d.join("X.csv"))
            .arg("--output")
            .arg(d.join(name)));
        (json(&out.stdout), fs::read_to_string(d.join(name)).unwrap())
    };
    let (a, phi_a) = run_complete("convex", "a.csv");
    let (b, phi_b) = run_complete("convex", "b.csv");
    assert_eq!(phi_a, phi_b);
    assert_eq!(a, b);
    let (f, _) = run_complete("factored", "f.csv");
    let (oa, of) = (a["objective"].as_f64().unwrap(), f["objective"].as_f64().unwrap());
    assert!((oa - of).abs() < 1e-6 * oa, "{oa} vs {of}");
    assert_eq!(a["rank"], f["rank"]);
}

#[test]
fn complete_reads_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.csv"), "a,b,c\n1,2,NA\n2,4,6\nNA,6,9\n4,NA,12\n").unwrap();
    let out = run(bin()
        .args(["complete", "--lambda", "0.01", "--rel-tol", "1e-12", "--max-iters", "50000"])
        .arg("--input")
        .arg(d.join("m.csv"))
        .arg("--output")
        .arg(d.join("phi.csv")));
    assert_eq!(json(&out.stdout)["rank"].as_u64().unwrap(), 1);
    let phi = fs::read_to_string(d.join("phi.csv")).unwrap();
    let mut lines = phi.lines();
    assert_eq!(lines.next().unwrap(), "a,b,c");
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((first[2] - 3.0).abs() < 0.05, "{first:?}");
}

#[test]
fn ate_methods_run_on_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 10, "gaussian");
    for method in ["ols", "ridge", "lasso", "ipw", "dr", "match", "psmatch"] {
        let out = run(bin()
            .args(["ate", "--method", method, "--penalty", "0.1"])
            .arg("--data")
            .arg(d.join("data.csv"))
            .arg("--covariates")
            .arg(d.join("U.csv")));
        let report = json(&out.stdout);
        assert!(report["tau_hat"].as_f64().unwrap().is_finite(), "{method}");
    }
    let out = run(bin().args(["ate", "--method", "ols"]).arg("--data").arg(d.join("data.csv")));
    assert!(json(&out.stdout)["tau_hat"].as_f64().unwrap().is_finite());
}

#[test]
fn twins_standin_and_experiment_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(bin().args(["synth", "twins-standin", "--pairs", "50", "--seed", "2"]).arg("--out").arg(d.join("t.csv")));
    let twins = fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(twins.starts_with("pair_id,gestat10,weight_lighter,weight_heavier,mortality_lighter,mortality_heavier"));
    assert_eq!(twins.lines().count(), 51);

    let cfg = r#"{
        "scenario": "linear_gaussian",
        "schedule": {"kind": "pairs", "pairs": [[60, 10]]},
        "estimators": ["oracle", "ols"],
        "replications": 2,
        "seed": 1
    }"#;
    fs::write(d.join("cfg.json"), cfg).unwrap();
    let experiment = |seed: Option<&str>, out: &str| {
        let mut cmd = bin();
        cmd.arg("experiment").arg("--config").arg(d.join("cfg.json")).arg("--out").arg(d.join(out));
        if let Some(s) = seed {
            cmd.env("CONFOUND_MF_SEED", s);
        }
        run(&mut cmd);
        fs::read_to_string(d.join(out)).unwrap()
    };
    let base = experiment(None, "a.csv");
    assert_eq!(base, experiment(Some("1"), "b.csv"));
    assert_ne!(base, experiment(Some("2"), "c.csv"));
    assert_eq!(base.lines().count(), 3);
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.csv"), "a,b\n1,x\n").unwrap();
    let out = bin()
        .args(["complete", "--lambda", "1"])
        .arg("--input")
        .arg(d.join("bad.csv"))
        .arg("--output")
        .arg(d.join("o.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = bin().args(["complete", "--lambda", "1", "--cv", "--input", "x", "--output", "y"]).output().unwrap();
    assert!(!out.status.success());

    fs::write(d.join("cfg.json"), r#"{"scenario": "twins", "schedule": {"kind": "pairs", "pairs": [[10, 2]]}, "estimators": ["mice:lr"]}"#)
        .unwrap();
    let out = bin().arg("experiment").arg("--config").arg(d.join("cfg.json")).arg("--out").arg(d.join("r.csv")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mice:lr"));
}
