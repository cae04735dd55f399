use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use covsel::dataset;
use covsel::pipeline::{self, PipelineError, ResolvedConfig, RunContext, RunManifest};
use serde_json::{json, Value};
use tempfile::TempDir;

fn small_config(master_seed: u64) -> Value {
    json!({
        "master_seed": master_seed,
        "simulation": {"n_train": 240, "n_test": 60},
        "training": {"epochs": 4, "batch_size": 32}
    })
}

fn context(dir: &Path, config: Value) -> RunContext {
    RunContext::new(ResolvedConfig::from_value(config).unwrap(), Some(dir.to_path_buf())).unwrap()
}

/// One completed small run shared by read-only tests.
fn shared_run() -> &'static Path {
    static RUN: OnceLock<TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        pipeline::cmd_run(&context(dir.path(), small_config(5))).unwrap();
        dir
    })
    .path()
}

fn copy_run(to: &Path) {
    for entry in fs::read_dir(shared_run()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

fn covsel() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_covsel"));
    cmd.env("COVSEL_LOG", "warn");
    cmd
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_vec(value).unwrap()).unwrap();
    p
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn default_simulation_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), json!({"master_seed": 1}));
    pipeline::cmd_simulate(&ctx).unwrap();
    let train = pipeline::read_dataset(&dir.path().join("train.csv")).unwrap();
    let test = pipeline::read_dataset(&dir.path().join("test.csv")).unwrap();
    assert_eq!(train.len(), 10_000);
    assert_eq!(test.len(), 2_000);
    assert_eq!(train[0].concentrations.len(), 97);
    let manifest = RunManifest::load(&ctx.manifest_path()).unwrap();
    assert_eq!(manifest.config.simulation.seed, ctx.config().simulation.seed);
    assert!(manifest.artifacts.contains_key("train.csv"));
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = json!({"master_seed": 9, "simulation": {"n_train": 50, "n_test": 10}});
    pipeline::cmd_simulate(&context(a.path(), cfg.clone())).unwrap();
    pipeline::cmd_simulate(&context(b.path(), cfg)).unwrap();
    let sums = |d: &Path| RunManifest::load(&d.join("manifest.json")).unwrap().checksums();
    assert_eq!(sums(a.path()), sums(b.path()));
    assert_eq!(fs::read(a.path().join("train.csv")).unwrap(), fs::read(b.path().join("train.csv")).unwrap());
}

#[test]
fn invalid_config_fails_with_field_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({"simulation": {"n_train": 0}}));
    let out = dir.path().join("out");
    let res = covsel()
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!res.status.success());
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["field"], "simulation.n_train");
    assert!(!out.exists() || listing(&out).is_empty());
}

#[test]
fn history_has_one_row_per_epoch() {
    let history = fs::File::open(shared_run().join("history.csv")).unwrap();
    let rows = dataset::read_history(history).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().enumerate().all(|(i, r)| r.epoch == i));
}

#[test]
fn corrupted_header_names_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(shared_run().join("train.csv")).unwrap();
    fs::write(dir.path().join("train.csv"), text.replacen(",alb,", ",albumin,", 1)).unwrap();
    let before = listing(dir.path());
    let res = covsel()
        .args(["--out", dir.path().to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(!res.status.success());
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("'alb'") && msg.contains("albumin"), "{msg}");
    assert_eq!(listing(dir.path()), before);
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    pipeline::cmd_train(&context(dir.path(), small_config(5)), None).unwrap();
    assert_eq!(
        fs::read(dir.path().join("model.json")).unwrap(),
        fs::read(shared_run().join("model.json")).unwrap()
    );
}

#[test]
fn metrics_record_the_exclusion_rule() {
    let doc = pipeline::load_metrics(&shared_run().join("metrics.json")).unwrap();
    assert!(doc.exclusion_rule.contains("1e-6"));
    assert_eq!(doc.metrics.profiles, 60);
    assert_eq!(doc.metrics.mape_points + doc.metrics.excluded_points, 60 * 97);
    assert!(doc.metrics.mae.is_finite() && doc.metrics.mape.is_finite());
}

#[test]
fn reconstructions_are_a_fixed_point_of_the_metric() {
    let model = pipeline::load_model(&shared_run().join("model.json")).unwrap();
    let rows = pipeline::read_dataset(&shared_run().join("test.csv")).unwrap();
    let recon = model.reconstruct_batch(&dataset::concentration_matrix(&rows)).unwrap();
    let m = covsel::vae::reconstruction_metrics(&recon, &recon).unwrap();
    assert_eq!((m.mae, m.mape), (0.0, 0.0));
}

#[test]
fn grid_mismatch_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let short = json!({
        "simulation": {"n_train": 10, "n_test": 5, "grid_points": 49},
        "training": {"architecture": {"input_dim": 49}}
    });
    pipeline::cmd_simulate(&context(dir.path(), short)).unwrap();
    let ctx = context(dir.path(), small_config(5));
    let err = pipeline::cmd_evaluate(&ctx, Some(&shared_run().join("model.json")), None).unwrap_err();
    assert!(matches!(err, PipelineError::Shape(_)), "{err}");
    assert!(!dir.path().join("metrics.json").exists());
}

#[test]
fn encode_cardinality_and_determinism() {
    let table = pipeline::read_latents(&shared_run().join("latents.csv")).unwrap();
    assert_eq!(table.subject_ids.len(), 240);
    let header = fs::read_to_string(shared_run().join("latents.csv")).unwrap();
    let cols = header.lines().next().unwrap().split(',').count();
    assert_eq!(cols, 1 + 2 * 8);

    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    pipeline::cmd_encode(&context(dir.path(), small_config(5)), None, None).unwrap();
    assert_eq!(
        fs::read(dir.path().join("latents.csv")).unwrap(),
        fs::read(shared_run().join("latents.csv")).unwrap()
    );
}

#[test]
fn lasso_outputs_follow_the_grid() {
    let doc = pipeline::load_path(&shared_run().join("path.json")).unwrap();
    assert_eq!(doc.path.lambdas, covsel::lasso::DEFAULT_LAMBDAS.to_vec());
    assert_eq!(doc.path.coefficients.len(), 7);
    let rows = dataset::read_selection(fs::File::open(shared_run().join("selection.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 9 * 7);
}

#[test]
fn shuffled_dataset_rows_give_identical_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let mut rows = pipeline::read_dataset(&dir.path().join("train.csv")).unwrap();
    rows.reverse();
    rows.swap(3, 100);
    let mut buf = Vec::new();
    dataset::write_dataset(&mut buf, &rows).unwrap();
    fs::write(dir.path().join("shuffled.csv"), buf).unwrap();
    let ctx = context(dir.path(), small_config(5));
    pipeline::cmd_fit_lasso(&ctx, None, Some(&dir.path().join("shuffled.csv"))).unwrap();
    let a = pipeline::load_path(&dir.path().join("path.json")).unwrap();
    let b = pipeline::load_path(&shared_run().join("path.json")).unwrap();
    assert_eq!(a.path.coefficients, b.path.coefficients);
}

#[test]
fn subject_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let ctx = context(dir.path(), small_config(5));
    let before = fs::read(dir.path().join("path.json")).unwrap();
    let err = pipeline::cmd_fit_lasso(&ctx, None, Some(&dir.path().join("test.csv"))).unwrap_err();
    assert!(matches!(err, PipelineError::SubjectMismatch(_)), "{err}");
    assert_eq!(fs::read(dir.path().join("path.json")).unwrap(), before);
}

#[test]
fn report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let ctx = context(dir.path(), small_config(5));
    pipeline::cmd_report(&ctx, None, None).unwrap();
    assert_eq!(
        fs::read(dir.path().join("report.md")).unwrap(),
        fs::read(shared_run().join("report.md")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("fig3_weights.csv")).unwrap(),
        fs::read(shared_run().join("fig3_weights.csv")).unwrap()
    );
}

#[test]
fn empty_path_reports_no_retained_covariates() {
    let dir = tempfile::tempdir().unwrap();
    copy_run(dir.path());
    let path_file = dir.path().join("path.json");
    let mut doc = pipeline::load_path(&path_file).unwrap();
    for slice in &mut doc.path.coefficients {
        for dim in slice.iter_mut() {
            dim.iter_mut().for_each(|b| *b = 0.0);
        }
    }
    doc.path.importance.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
    fs::write(&path_file, serde_json::to_vec(&doc).unwrap()).unwrap();
    pipeline::cmd_report(&context(dir.path(), small_config(5)), None, None).unwrap();
    let report = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("No covariates are retained"), "{report}");
}

#[test]
fn report_requires_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let res = covsel()
        .args(["--out", dir.path().to_str().unwrap(), "report"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(listing(dir.path()).is_empty());
}

#[test]
fn cli_stages_chain_and_manifest_lists_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(11));
    let out = dir.path().join("out");
    for stage in ["simulate", "train", "evaluate", "encode", "fit-lasso", "report"] {
        let res = covsel()
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), stage])
            .output()
            .unwrap();
        assert!(res.status.success(), "{stage}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    let files: Vec<String> = listing(&out).into_iter().filter(|f| f != "manifest.json").collect();
    let listed: Vec<String> = manifest.artifacts.keys().cloned().collect();
    assert_eq!(files, listed);
    for (name, rec) in &manifest.artifacts {
        let bytes = fs::read(out.join(name)).unwrap();
        assert_eq!(rec.sha256, pipeline::sha256_hex(&bytes), "{name}");
    }
    assert_eq!(manifest.stages.len(), 6);
}

#[test]
fn dataset_csv_roundtrips_through_the_cli_output() {
    let path = shared_run().join("test.csv");
    let rows = pipeline::read_dataset(&path).unwrap();
    let mut buf = Vec::new();
    dataset::write_dataset(&mut buf, &rows).unwrap();
    assert_eq!(buf, fs::read(&path).unwrap());
}
