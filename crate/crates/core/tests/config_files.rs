use std::path::PathBuf;

use hrkan::config::{ExperimentConfig, TaskName};
use hrkan::model::Mode;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(cfg.out_dir.starts_with("runs"));
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

#[test]
fn poisson_file_matches_defaults() {
    let file = ExperimentConfig::load(&configs_dir().join("poisson.toml")).unwrap();
    let mut defaults = ExperimentConfig::defaults(TaskName::Poisson);
    defaults.out_dir = file.out_dir.clone();
    assert_eq!(file, defaults);
    let det = ExperimentConfig::load(&configs_dir().join("poisson_deterministic.toml")).unwrap();
    assert_eq!(det.model.mode, Mode::Deterministic);
}

#[test]
fn missing_file_names_the_path() {
    let err = ExperimentConfig::load(&configs_dir().join("nope.toml")).unwrap_err();
    assert!(err.to_string().contains("nope.toml"));
}
