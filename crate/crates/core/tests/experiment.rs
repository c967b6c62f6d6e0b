use std::fs;
use std::path::{Path, PathBuf};

use nsforce::container;
use nsforce::error::Error;
use nsforce::experiment::{self, load_with_overrides, ExperimentConfig, RunManifest, RunReport, DECAY_CSV_HEADER};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Small synthesized run; the box is too small for the default horizon
/// tolerance and the smallness conditions, so both are relaxed.
const SMALL: &str = r#"
name = "small"
[grid]
dim = 2
points_per_axis = 64
box_length = 16.0
[data]
kind = "moment_free"
amplitude = 1.0
width = 1.0
anisotropy = 2.0
[profile]
source = "builtin"
radius = 1.0
acknowledge_smallness = true
[time]
spacing = "geometric"
t_end = 4.0
t_min = 1e-2
ratio = 1.3
[synthesis]
horizon_tolerance = 5e-2
"#;

fn run(text: &str, overrides: &[&str]) -> (tempfile::TempDir, RunManifest, ExperimentConfig) {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = load_with_overrides(text, &overrides).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = experiment::run_experiment(&cfg, Some(dir.path()), &root().join("configs")).unwrap();
    (dir, m, cfg)
}

fn report(dir: &Path) -> RunReport {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(root().join("schema").join(name)).unwrap()).unwrap();
    jsonschema::validator_for(&s).unwrap()
}

#[test]
fn every_artifact_is_listed_and_verifies() {
    let (dir, m, cfg) = run(SMALL, &[]);
    let d = dir.path();
    m.verify(d).unwrap();
    let listed: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
    for f in ["config.toml", "data.bin", "final.bin", "report.json", "decay.csv", "decay_unforced.csv", "summary.json"] {
        assert!(listed.contains(&f), "{f} missing from manifest");
    }
    assert_eq!(listed.iter().filter(|p| p.starts_with("force/") && p.ends_with(".bin")).count(), 8);
    for entry in walk(d) {
        let rel = entry.strip_prefix(d).unwrap().to_string_lossy().to_string();
        assert!(rel == "manifest.json" || listed.contains(&rel.as_str()), "{rel} not in manifest");
    }
    // The stored config is the resolved one.
    let stored = ExperimentConfig::load(&d.join("config.toml")).unwrap();
    assert_eq!(stored, cfg);
    assert_eq!(m.config_hash, cfg.hash());
    let r = report(d);
    assert!(r.synthesis.unwrap().converged);
    let (field, sidecar) = container::read_field(&d.join("data.bin")).unwrap();
    assert_eq!(field.count(), 2);
    assert_eq!(sidecar.metadata["config_hash"], cfg.hash());
}

fn walk(d: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn identical_configs_give_identical_runs() {
    let (a, ma, _) = run(SMALL, &["synthesis.enabled=false", "data.kind=\"random_solenoidal\"", "seed=7"]);
    let (b, mb, _) = run(SMALL, &["synthesis.enabled=false", "data.kind=\"random_solenoidal\"", "seed=7"]);
    assert_eq!(ma.without_timing(), mb.without_timing());
    for art in &ma.artifacts {
        assert_eq!(fs::read(a.path().join(&art.path)).unwrap(), fs::read(b.path().join(&art.path)).unwrap());
    }
    let (_, mc, _) = run(SMALL, &["synthesis.enabled=false", "data.kind=\"random_solenoidal\"", "seed=8"]);
    assert_ne!(mc.config_hash, ma.config_hash);
    let data = |m: &RunManifest| m.artifacts.iter().find(|x| x.path == "data.bin").unwrap().sha256.clone();
    assert_ne!(data(&mc), data(&ma));
}

#[test]
fn zero_data_gives_zero_artifacts_and_passing_diagnostics() {
    let (dir, _, _) = run(SMALL, &["data.amplitude=0.0", "profile.acknowledge_smallness=false"]);
    let d = dir.path();
    let r = report(d);
    assert!(r.l2_series.iter().all(|&(_, v)| v == 0.0));
    let (u, _) = container::read_field(&d.join("final.bin")).unwrap();
    assert_eq!(u.max_abs(), 0.0);
    let s = r.synthesis.unwrap();
    assert!(s.converged);
    assert!(s.force_coefficients.iter().flatten().all(|&c| c == 0.0));
    assert!(r.smallness.unwrap().all_pass());
    let diag = &r.diagnostics;
    assert!(diag.ms.done().unwrap().pass);
    assert!(diag.lemma_heat2.done().unwrap().pass);
    assert!(diag.wiegner.done().unwrap().pass);
}

#[test]
fn reports_follow_the_shipped_formats() {
    let (dir, _, _) = run(SMALL, &[]);
    let d = dir.path();
    let csv = fs::read_to_string(d.join("decay.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(DECAY_CSV_HEADER));
    assert_eq!(DECAY_CSV_HEADER, "t,l2,weighted_l2");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    let v = schema("summary.schema.json");
    assert!(v.is_valid(&summary), "{:?}", v.iter_errors(&summary).map(|e| e.to_string()).collect::<Vec<_>>());

    let before: Vec<Vec<u8>> = ["decay.csv", "decay_unforced.csv", "summary.json"]
        .iter()
        .map(|f| fs::read(d.join(f)).unwrap())
        .collect();
    experiment::export_report(d).unwrap();
    experiment::export_report(d).unwrap();
    let after: Vec<Vec<u8>> = ["decay.csv", "decay_unforced.csv", "summary.json"]
        .iter()
        .map(|f| fs::read(d.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
    RunManifest::load(d).unwrap().verify(d).unwrap();
}

#[test]
fn shipped_configs_parse_and_match_the_schema() {
    let v = schema("config.schema.json");
    let mut seen = 0;
    for p in walk(&root().join("configs")) {
        if p.parent().unwrap().ends_with("profiles") {
            continue;
        }
        let text = fs::read_to_string(&p).unwrap();
        let cfg = ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        for doc in [text, cfg.to_toml()] {
            let value: serde_json::Value = serde_json::to_value(toml::from_str::<toml::Value>(&doc).unwrap()).unwrap();
            assert!(v.is_valid(&value), "{}: {:?}", p.display(), v.iter_errors(&value).map(|e| e.to_string()).collect::<Vec<_>>());
        }
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn tampering_and_missing_artifacts_are_reported() {
    let (dir, m, _) = run(SMALL, &["synthesis.enabled=false"]);
    let d = dir.path();
    fs::write(d.join("decay.csv"), "t,l2,weighted_l2\n").unwrap();
    assert!(matches!(m.verify(d), Err(Error::Format(_))));
    fs::remove_file(d.join("report.json")).unwrap();
    assert!(matches!(experiment::export_report(d), Err(Error::MissingArtifact(_))));
    assert!(matches!(m.verify(d), Err(Error::MissingArtifact(_))));
}

#[test]
fn failing_smallness_needs_acknowledgment() {
    let cfg = load_with_overrides(SMALL, &["profile.acknowledge_smallness=false".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match experiment::run_experiment(&cfg, Some(dir.path()), &root()) {
        Err(Error::SmallnessNotMet { failing }) => assert!(!failing.is_empty()),
        other => panic!("expected SmallnessNotMet, got {other:?}"),
    }
}

#[test]
fn checkpointed_runs_list_their_checkpoints() {
    let (dir, m, _) = run(SMALL, &["synthesis.enabled=false", "checkpoints=true"]);
    let n = m.artifacts.iter().filter(|a| a.path.starts_with("checkpoints/")).count();
    assert!(n > 1);
    m.verify(dir.path()).unwrap();
}
