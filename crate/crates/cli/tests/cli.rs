//! End-to-end tests driving the `fairstyle` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairstyle_core::adapter::GeneratorAdapter;
use fairstyle_core::{apply_fairstyle, load_tensor, make_synthetic, SyntheticSpec};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fairstyle")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .args(args)
        .output()
        .expect("failed to spawn fairstyle")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_spec(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec::single_attribute("eyeglasses", 0.2, 77);
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    path
}

fn write_pipeline_config(dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "generator": {"synthetic_spec": "spec.json"},
        "attributes": [{"name": "eyeglasses", "source": "synthetic"}],
        "optimizer": {
            "batch_size": 2048,
            "max_iterations": 60,
            "tolerance": 2e-4,
            "learning_rate": 1.0
        },
        "audit": {"samples": 10000},
        "output_dir": "out",
        "seed": 42
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_debiases_the_synthetic_oracle() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    write_pipeline_config(dir.path());
    let out = run(dir.path(), &["pipeline", "--config", "config.json"]);
    assert_success(&out);

    for artifact in [
        "channels.json",
        "tensor.json",
        "trace.json",
        "report_before.json",
        "report_after.json",
    ] {
        assert!(dir.path().join("out").join(artifact).exists(), "missing {artifact}");
    }

    let before: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report_before.json")).unwrap())
            .unwrap();
    let after: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report_after.json")).unwrap())
            .unwrap();
    let kl = |v: &serde_json::Value| v["marginals"][0]["kl_to_uniform"].as_f64().unwrap();
    assert!((kl(&before) - 0.1927).abs() < 0.02, "before KL {}", kl(&before));
    assert!(kl(&after) < 1e-3, "after KL {}", kl(&after));
    assert_eq!(before["config_hash"], after["config_hash"]);
    assert_eq!(after["seed"].as_u64(), Some(fairstyle_core::math::derive_seed(42, "audit-after", 0)));
}

#[test]
fn missing_classifier_fails_with_field_error() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    let config = serde_json::json!({
        "generator": {"synthetic_spec": "spec.json"},
        "attributes": [{"name": "x", "source": {"classifier": "nope.json"}}],
        "output_dir": "out",
        "seed": 0
    });
    std::fs::write(dir.path().join("config.json"), serde_json::to_vec(&config).unwrap()).unwrap();
    let out = run(dir.path(), &["pipeline", "--config", "config.json"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr should be an error document");
    assert_eq!(err["error"], "validation");
    assert_eq!(err["field"], "attributes[0].source.classifier");
    // No partial artifacts.
    assert!(!dir.path().join("out").exists());
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    write_pipeline_config(dir.path());
    assert_success(&run(dir.path(), &["pipeline", "--config", "config.json"]));
    let artifacts = ["channels.json", "tensor.json", "trace.json", "report_after.json"];
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|a| std::fs::read(dir.path().join("out").join(a)).unwrap())
        .collect();
    assert_success(&run(dir.path(), &["pipeline", "--config", "config.json"]));
    for (a, bytes) in artifacts.iter().zip(&first) {
        let again = std::fs::read(dir.path().join("out").join(a)).unwrap();
        assert_eq!(&again, bytes, "{a} changed across identical reruns");
    }
}

#[test]
fn discover_finds_the_planted_channel() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    let out = run(
        dir.path(),
        &[
            "discover",
            "--generator",
            "spec.json",
            "--attribute",
            "eyeglasses",
            "--seed",
            "3",
            "--out",
            "channels.json",
        ],
    );
    assert_success(&out);
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("channels.json")).unwrap()).unwrap();
    assert_eq!(doc["best"]["layer"], 0);
    assert_eq!(doc["best"]["channel"], 3);
    let ranking = doc["ranking"].as_array().unwrap();
    // 2 discoverable blocks x 2 conv layers x 8 channels.
    assert_eq!(ranking.len(), 32);
}

#[test]
fn sample_zero_tensor_matches_no_tensor_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path());
    // A zero tensor document for this generator.
    let spec: SyntheticSpec =
        serde_json::from_slice(&std::fs::read(&spec_path).unwrap()).unwrap();
    let bundle = make_synthetic(&spec).unwrap();
    let zero = fairstyle_core::FairStyleTensor::scalar(spec.attributes[0].causal_channel, 0.0);
    fairstyle_core::save_tensor(
        &dir.path().join("zero.json"),
        &zero,
        &bundle.generator.layout(),
        vec!["eyeglasses".into()],
    )
    .unwrap();

    assert_success(&run(
        dir.path(),
        &["sample", "--generator", "spec.json", "--n", "4", "--seed", "11", "--out-dir", "plain"],
    ));
    assert_success(&run(
        dir.path(),
        &[
            "sample", "--generator", "spec.json", "--tensor", "zero.json", "--n", "4", "--seed",
            "11", "--out-dir", "zeroed",
        ],
    ));
    for i in 0..4 {
        let name = format!("sample_{i:06}.pgm");
        let a = std::fs::read(dir.path().join("plain").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("zeroed").join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs under a zero tensor");
    }

    assert_success(&run(
        dir.path(),
        &["sample", "--generator", "spec.json", "--n", "4", "--seed", "11", "--out-dir", "again"],
    ));
    assert_eq!(
        std::fs::read(dir.path().join("plain/manifest.json")).unwrap(),
        std::fs::read(dir.path().join("again/manifest.json")).unwrap(),
    );
}

// Debias through the CLI, then recompute the label balance from the
// manifest's latent seeds alone: the debiased generator must be balanced.
#[test]
fn manifest_recomputed_balance_is_centered() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = write_spec(dir.path());
    assert_success(&run(
        dir.path(),
        &[
            "debias",
            "--generator",
            "spec.json",
            "--attributes",
            "eyeglasses",
            "--channels",
            "(0,3)",
            "--n",
            "8192",
            "--tol",
            "1e-4",
            "--lr",
            "1.0",
            "--max-iters",
            "100",
            "--seed",
            "5",
            "--out",
            "tensor.json",
        ],
    ));
    assert_success(&run(
        dir.path(),
        &[
            "sample", "--generator", "spec.json", "--tensor", "tensor.json", "--n", "10000",
            "--seed", "21", "--out-dir", "samples",
        ],
    ));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("samples/manifest.json")).unwrap())
            .unwrap();
    let spec: SyntheticSpec =
        serde_json::from_slice(&std::fs::read(&spec_path).unwrap()).unwrap();
    let bundle = make_synthetic(&spec).unwrap();
    let (tensor, _) =
        load_tensor(&dir.path().join("tensor.json"), &bundle.generator.layout()).unwrap();

    let mut ones = 0usize;
    let images = manifest["images"].as_array().unwrap();
    assert_eq!(images.len(), 10_000);
    for entry in images {
        let latent = entry["latent_seed"].as_u64().unwrap();
        let code = bundle.generator.style_code(latent).unwrap();
        let edited = apply_fairstyle(&code, &tensor).unwrap();
        let image = bundle.generator.render(&edited).unwrap();
        if fairstyle_core::ClassifierAdapter::label(&bundle.classifiers[0], &image).unwrap() {
            ones += 1;
        }
    }
    let balance = ones as f64 / images.len() as f64;
    assert!((balance - 0.5).abs() <= 0.01, "balance {balance}");
}

#[test]
fn audit_emits_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    let out = run(
        dir.path(),
        &[
            "audit",
            "--generator",
            "spec.json",
            "--attributes",
            "eyeglasses",
            "--n",
            "4000",
            "--seed",
            "2",
            "--out",
            "report.json",
            "--csv",
            "report.csv",
            "--format",
            "csv",
        ],
    );
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("distribution,attributes,cell,"));
    assert_eq!(stdout.lines().count(), 3);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["sample_count"], 4000);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv, stdout);
    // Unedited 80/20 marginal.
    let p = report["marginals"][0]["distribution"]["cells"][1]["probability"]
        .as_f64()
        .unwrap();
    assert!((p - 0.2).abs() < 0.03, "T probability {p}");
}

#[test]
fn prompt_labeling_is_recorded_for_provenance() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    let out = run(
        dir.path(),
        &[
            "audit",
            "--generator",
            "spec.json",
            "--attributes",
            "race",
            "--text-positive",
            "a black person",
            "--text-negative",
            "a white person",
            "--n",
            "500",
            "--out",
            "report.json",
        ],
    );
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["prompts"]["race"]["positive"], "a black person");
    assert_eq!(report["prompts"]["race"]["negative"], "a white person");
    assert_eq!(report["marginals"][0]["distribution"]["attribute_names"][0], "race");
}

#[test]
fn unknown_adapter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    let out = run(
        dir.path(),
        &[
            "audit", "--generator", "spec.json", "--adapter", "stylegan2", "--attributes", "x",
            "--n", "10",
        ],
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "runtime");
    assert!(err["message"].as_str().unwrap().contains("unknown generator adapter"));
}

#[test]
fn tensor_fingerprint_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path());
    // Tensor built against a different layout.
    let other = SyntheticSpec::single_attribute("eyeglasses", 0.2, 1);
    let mut layers = other.layers.clone();
    layers.push(fairstyle_core::LayerInfo {
        width: 8,
        kind: fairstyle_core::LayerKind::Conv,
        block: 6,
    });
    let other_layout = fairstyle_core::StyleLayout::new(layers).unwrap();
    fairstyle_core::save_tensor(
        &dir.path().join("foreign.json"),
        &fairstyle_core::FairStyleTensor::scalar(fairstyle_core::ChannelId::new(0, 3), 1.0),
        &other_layout,
        vec![],
    )
    .unwrap();
    let out = run(
        dir.path(),
        &[
            "sample", "--generator", "spec.json", "--tensor", "foreign.json", "--n", "2",
            "--out-dir", "x",
        ],
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("fingerprint mismatch"));
}

#[test]
fn synth_reports_the_oracle_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::correlated_pair(["a", "b"], [0.2, 0.4], -0.4, 9);
    std::fs::write(dir.path().join("pair.json"), serde_json::to_vec(&spec).unwrap()).unwrap();
    let out = run(dir.path(), &["synth", "--spec", "pair.json", "--out", "oracle.json"]);
    assert_success(&out);
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("oracle.json")).unwrap()).unwrap();
    assert_eq!(doc["attributes"].as_array().unwrap().len(), 2);
    let cells: Vec<f64> = doc["expected_joint_cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((cells.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(doc["decorrelating_params"]["params"].is_array());
}
