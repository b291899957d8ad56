use std::path::Path;
use std::process::{Command, Output};

use dissipnet_core::certkit::QsrSpec;
use dissipnet_core::{Activation, DenseMatrix, Mlp, PipelineConfig, QsrFamily};
use serde_json::Value;

fn dissipnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dissipnet"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A contractive 4-8-4 net, small enough to certify against a gain bound.
fn small_model(dir: &Path, config_digest: Option<String>) -> std::path::PathBuf {
    let net = Mlp::random(&[4, 8, 4], Activation::LeakyRelu { a: 0.2 }, 3).unwrap();
    let net = net
        .with_weights(net.weights().map(|w| w.scale(0.3)).collect())
        .unwrap();
    let path = dir.join("model.json");
    net.save(&path, config_digest).unwrap();
    path
}

/// `Q = R = q I`, `S = 0`, written as a JSON supply-rate file.
fn gain_qsr_file(dir: &Path, q: f64) -> std::path::PathBuf {
    let qsr = QsrFamily::Fixed {
        qsr: QsrSpec::new(
            DenseMatrix::scaled_identity(2, q),
            DenseMatrix::zeros(2, 2),
            DenseMatrix::scaled_identity(2, q),
        )
        .unwrap(),
    };
    let path = dir.join(format!("gain{q}.json"));
    std::fs::write(&path, serde_json::to_string(&qsr).unwrap()).unwrap();
    path
}

#[test]
fn simulate_writes_trajectories_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let o = dissipnet(&["simulate", "--out", p(dir.path()), "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["status"], "ok");
    let text = std::fs::read_to_string(dir.path().join("ground_truth.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,z0,z1,z2,z3");
    assert!(dir.path().join("d1_traj0.csv").is_file());
    assert!(dir.path().join("d2_traj2.csv").is_file());
    let cfg = PipelineConfig::load(&dir.path().join("config.json")).unwrap();
    assert_ne!(cfg.seeds.d1, PipelineConfig::desk().seeds.d1);
}

#[test]
fn verify_writes_a_certificate_that_rechecks() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), None);
    let qsr = gain_qsr_file(dir.path(), 0.5);
    let o = dissipnet(&["verify", "--model", p(&model), "--qsr", p(&qsr)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["feasible"], true);
    let cert = dir.path().join("model.certificate.json");
    assert!(cert.is_file());

    let o = dissipnet(&["verify", "--model", p(&model), "--certificate", p(&cert)]);
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["feasible"], true);

    // Any other model is refused against this certificate.
    let other = Mlp::random(&[4, 8, 4], Activation::Tanh, 4).unwrap();
    let other_path = dir.path().join("other.json");
    other.save(&other_path, None).unwrap();
    let o = dissipnet(&["verify", "--model", p(&other_path), "--certificate", p(&cert)]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_json(&o);
    assert_eq!(e["status"], "error");
    assert_eq!(e["kind"], "digest");
}

#[test]
fn verify_reports_infeasible_strict_passivity() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), None);
    let out = dir.path().join("sp.json");
    let o = dissipnet(&[
        "verify",
        "--model",
        p(&model),
        "--qsr",
        "strict_passivity",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["feasible"], false);
    assert!(v["min_eig"].as_f64().unwrap() < 0.0);
    assert!(out.is_file());
}

#[test]
fn verify_refuses_models_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::desk();
    let model = small_model(dir.path(), Some(cfg.digest()));
    let mut other = cfg.clone();
    other.reseed(99);
    let cfg_path = dir.path().join("other.json");
    other.save(&cfg_path).unwrap();
    let o = dissipnet(&[
        "verify",
        "--model",
        p(&model),
        "--qsr",
        "passivity",
        "--config",
        p(&cfg_path),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["kind"], "digest");

    let same = dir.path().join("same.json");
    cfg.save(&same).unwrap();
    let o = dissipnet(&["verify", "--model", p(&model), "--qsr", "l2_gain:5", "--config", p(&same)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn perturb_writes_model_certificate_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let net = Mlp::random(&[4, 8, 4], Activation::LeakyRelu { a: 0.2 }, 3).unwrap();
    let net = net
        .with_weights(net.weights().map(|w| w.scale(3.0)).collect())
        .unwrap();
    let model = dir.path().join("big.json");
    net.save(&model, None).unwrap();
    let qsr_path = gain_qsr_file(dir.path(), 0.02);
    let out = dir.path().join("out");
    let o = dissipnet(&["perturb", "--model", p(&model), "--qsr", p(&qsr_path), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout_json(&o)["perturbation_norm"].as_f64().unwrap() > 0.0);
    let trace = std::fs::read_to_string(out.join("solver_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,gap,norm,rho");

    let o = dissipnet(&[
        "verify",
        "--model",
        p(&out.join("perturbed.json")),
        "--certificate",
        p(&out.join("certificate.json")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["feasible"], true);
}

#[test]
fn bad_input_exits_with_a_json_error() {
    let o = dissipnet(&["simulate", "--out", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["kind"], "usage");

    let o = dissipnet(&["verify", "--model", "/nonexistent/model.json", "--qsr", "passivity"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["status"], "error");

    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path(), None);
    let o = dissipnet(&["verify", "--model", p(&model), "--qsr", "sector:1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = dissipnet(&["--help"]);
    assert!(o.status.success());
}

#[test]
fn pipeline_runs_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::desk();
    cfg.baseline_training.epochs = 100;
    cfg.bias_training.epochs = 40;
    cfg.qsr = QsrFamily::Fixed {
        qsr: QsrSpec::new(
            DenseMatrix::scaled_identity(2, 0.1),
            DenseMatrix::zeros(2, 2),
            DenseMatrix::scaled_identity(2, 0.1),
        )
        .unwrap(),
    };
    let cfg_path = dir.path().join("c.json");
    cfg.save(&cfg_path).unwrap();
    let out = dir.path().join("run1");
    let o = dissipnet(&["pipeline", "--config", p(&cfg_path), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["ml_bitwise_equal"], true);
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "complete");
    assert_eq!(report["config_digest"], cfg.digest());

    let o = dissipnet(&[
        "compare",
        "--model",
        p(&out.join("baseline.json")),
        "--model",
        p(&out.join("final.json")),
        "--config",
        p(&cfg_path),
        "--out",
        p(&dir.path().join("cmp")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("cmp/metrics.json").is_file());
    assert!(dir.path().join("cmp/rollout1.csv").is_file());
}
