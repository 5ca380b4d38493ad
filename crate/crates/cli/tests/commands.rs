use std::path::Path;
use std::process::{Command, Output};

fn hrkan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrkan"))
        .args(args)
        .env("HRKAN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes() {
    let out = hrkan(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn report_on_missing_run_fails() {
    let out = hrkan(&["report", "/definitely/not/a/run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/a/run"));
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "task = \"poisson\"\nlearning_rate = 1.0\n");
    let out = hrkan(&["pde", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_config_names_path() {
    let out = hrkan(&["fit1d", "--config", "/no/such/config.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.toml"));
}

#[test]
fn wrong_subcommand_for_task_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "task = \"f1\"\n");
    assert!(!hrkan(&["pde", "--config", &cfg]).status.success());
}

#[test]
fn oracle_writes_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fx.json");
    let out = hrkan(&["oracle", "--seed", "2", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["seed"], 2);
    assert!(v["kl_toy_expectation"].as_f64().unwrap().is_finite());
}

#[test]
fn pde_run_sample_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "task = \"poisson\"\n[train]\niterations = 30\nreset_every = 0\nfinal_phase_iters = 0\n[data]\ntrain_grid = 8\n[inference]\nsamples = 4\ntest_grid = 6\n",
    );
    let out = hrkan(&["pde", "--config", &cfg, "--out", run.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "model.json",
        "manifest.json",
        "loss.csv",
        "train_grid.csv",
        "grid.csv",
        "surface.csv",
        "residual.csv",
        "epistemic.csv",
        "aleatoric.csv",
        "abs_error.csv",
        "true_noise.csv",
        "epistemic_unnormalized.csv",
        "metrics.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    let experiment = manifest["experiment"].as_str().unwrap();
    assert!(experiment.contains("kl_basis = true") && experiment.contains("samples = 4"), "{experiment}");
    let grid = std::fs::read_to_string(run.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 37);

    let metrics = std::fs::read_to_string(run.join("metrics.json")).unwrap();
    let out = hrkan(&["sample", "--config", &cfg, "--out", run.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("metrics.json")).unwrap(), metrics);

    let out = hrkan(&["report", run.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("sigma_avg"));
}

#[test]
fn fit1d_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("f3");
    let cfg = write_config(
        dir.path(),
        "task = \"f3\"\n[train]\niterations = 20\n[data]\nn_points = 40\n[inference]\nsamples = 3\ntest_points = 11\n",
    );
    let out = hrkan(&["fit1d", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(run.join("grid.csv")).unwrap();
    assert!(grid.starts_with("x,u_true,u_noisy,mean,epi,alea,abs_err,true_noise_abs,noise_scale"));
    assert_eq!(grid.lines().count(), 12);
    let out = hrkan(&["fit1d", "--config", &cfg, "--samples", "1"]);
    assert!(!out.status.success());
}
