//! End-to-end orchestration: configuration, stage commands, artifacts and
//! the run manifest.
//!
//! Every command reads and validates its inputs and renders all outputs in
//! memory before touching the output directory. Files are written to a
//! temporary name and renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, DataError, DatasetRow, LatentTable};
use crate::lasso::{
    self, LassoError, LassoPathResult, Scaling, ScalingConstants, SelectionReport, SolverOptions,
};
use crate::nn::Matrix;
use crate::pksim::{self, PkError, SimulationConfig};
use crate::vae::{self, ReconstructionMetrics, TrainConfig, VaeError, VaeModel};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const METRICS_FORMAT_VERSION: u32 = 1;
/// Version shared by the CSV layouts in [`crate::dataset`].
pub const CSV_FORMAT_VERSION: u32 = 1;

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const MODEL_JSON: &str = "model.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const FIG2_CSV: &str = "fig2_reconstructions.csv";
pub const LATENTS_CSV: &str = "latents.csv";
pub const PATH_JSON: &str = "path.json";
pub const SELECTION_JSON: &str = "selection.json";
pub const SELECTION_CSV: &str = "selection.csv";
pub const REPORT_MD: &str = "report.md";
pub const FIG3_CSV: &str = "fig3_weights.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Test subjects overlaid in the reconstruction figure data.
const FIG2_SUBJECTS: usize = 6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: DataError,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("subject_id mismatch: {0}")]
    SubjectMismatch(String),
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    FormatVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Simulation(#[from] PkError),
    #[error(transparent)]
    Training(#[from] VaeError),
    #[error(transparent)]
    Lasso(#[from] LassoError),
}

impl PipelineError {
    /// Short machine-readable category used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config { .. } => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Json { .. } => "json",
            PipelineError::Data { .. } => "data",
            PipelineError::Shape(_) => "shape",
            PipelineError::SubjectMismatch(_) => "subject_mismatch",
            PipelineError::FormatVersion { .. } => "format_version",
            PipelineError::Simulation(_) => "simulation",
            PipelineError::Training(_) => "training",
            PipelineError::Lasso(_) => "lasso",
        }
    }

    fn config(field: &str, reason: impl ToString) -> Self {
        PipelineError::Config {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub lambdas: Vec<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Importance at or below this counts as eliminated.
    pub zero_threshold: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        Self {
            lambdas: lasso::DEFAULT_LAMBDAS.to_vec(),
            tolerance: solver.tolerance,
            max_iterations: solver.max_iterations,
            zero_threshold: lasso::DEFAULT_ZERO_THRESHOLD,
        }
    }
}

impl LassoConfig {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Explicit,
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub simulation: SimulationConfig,
    pub training: TrainConfig,
    pub lasso: LassoConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 20_240_601,
            simulation: SimulationConfig::default(),
            training: TrainConfig::default(),
            lasso: LassoConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Stage sub-seed: word 0 of ChaCha stream `stage` keyed by the master seed.
pub fn derive_seed(master_seed: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stage);
    rng.next_u64()
}

const SIMULATION_STREAM: u64 = 1;
const TRAINING_STREAM: u64 = 2;

/// A validated configuration with stage seeds resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    pub seed_sources: BTreeMap<String, SeedSource>,
}

impl ResolvedConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| PipelineError::config("<document>", e))?;
        Self::from_value(value)
    }

    /// Builds a config from a JSON document. Sections may be omitted;
    /// stage seeds not given explicitly are derived from `master_seed`.
    pub fn from_value(value: Value) -> Result<Self> {
        if !value.is_object() {
            return Err(PipelineError::config("<document>", "config must be a JSON object"));
        }
        let explicit = |section: &str| value.get(section).and_then(|s| s.get("seed")).is_some();
        let sim_explicit = explicit("simulation");
        let train_explicit = explicit("training");
        let mut config: PipelineConfig =
            serde_json::from_value(value).map_err(|e| PipelineError::config("<document>", e))?;
        let mut seed_sources = BTreeMap::new();
        let source = |e: bool| if e { SeedSource::Explicit } else { SeedSource::Derived };
        if !sim_explicit {
            config.simulation.seed = derive_seed(config.master_seed, SIMULATION_STREAM);
        }
        if !train_explicit {
            config.training.seed = derive_seed(config.master_seed, TRAINING_STREAM);
        }
        seed_sources.insert("simulation".to_string(), source(sim_explicit));
        seed_sources.insert("training".to_string(), source(train_explicit));
        validate_config(&config)?;
        Ok(Self { config, seed_sources })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self::from_value(Value::Object(Default::default())).expect("default config is valid")
    }
}

pub fn validate_config(config: &PipelineConfig) -> Result<()> {
    config.simulation.validate().map_err(|e| match e {
        PkError::InvalidConfig { field, reason } => PipelineError::config(field, reason),
        other => PipelineError::Simulation(other),
    })?;
    config.training.validate().map_err(|e| match e {
        VaeError::InvalidConfig { field, reason } => PipelineError::config(field, reason),
        other => PipelineError::Training(other),
    })?;
    if config.training.architecture.input_dim != config.simulation.grid_points {
        return Err(PipelineError::config(
            "training.architecture.input_dim",
            format!(
                "{} does not match simulation.grid_points = {}",
                config.training.architecture.input_dim, config.simulation.grid_points
            ),
        ));
    }
    let l = &config.lasso;
    if l.lambdas.is_empty() {
        return Err(PipelineError::config("lasso.lambdas", "grid must be non-empty"));
    }
    if let Some(bad) = l.lambdas.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(PipelineError::config("lasso.lambdas", format!("{bad} is not a finite value >= 0")));
    }
    if !(l.tolerance > 0.0 && l.tolerance.is_finite()) {
        return Err(PipelineError::config("lasso.tolerance", "must be positive"));
    }
    if l.max_iterations == 0 {
        return Err(PipelineError::config("lasso.max_iterations", "must be > 0"));
    }
    if !(l.zero_threshold >= 0.0 && l.zero_threshold.is_finite()) {
        return Err(PipelineError::config("lasso.zero_threshold", "must be finite and >= 0"));
    }
    if config.paths.out_dir.as_os_str().is_empty() {
        return Err(PipelineError::config("paths.out_dir", "must not be empty"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub sha256: String,
    pub bytes: u64,
    pub format_version: u32,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub seed_sources: BTreeMap<String, SeedSource>,
    pub stages: BTreeMap<String, StageRecord>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    fn new(resolved: &ResolvedConfig) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: resolved.config.clone(),
            seed_sources: resolved.seed_sources.clone(),
            stages: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Artifact name → sha256, the reproducibility fingerprint of a run.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|(k, v)| (k.clone(), v.sha256.clone()))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: RunManifest = read_json(path)?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(PipelineError::FormatVersion {
                path: path.to_path_buf(),
                found: manifest.format_version,
                expected: MANIFEST_FORMAT_VERSION,
            });
        }
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    bytes.push(b'\n');
    bytes
}

fn read_csv<T>(path: &Path, parse: impl FnOnce(fs::File) -> std::result::Result<T, DataError>) -> Result<T> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse(file).map_err(|source| PipelineError::Data {
        path: path.to_path_buf(),
        source,
    })
}

fn render_csv(write: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), DataError>, name: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(|source| PipelineError::Data {
        path: PathBuf::from(name),
        source,
    })?;
    Ok(buf)
}

/// One artifact rendered in memory.
struct Output {
    name: &'static str,
    bytes: Vec<u8>,
    format_version: u32,
}

/// Output directory plus resolved configuration shared by every command.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub resolved: ResolvedConfig,
    pub out_dir: PathBuf,
}

impl RunContext {
    /// `out_override` replaces `paths.out_dir`. The directory is created
    /// and probed for writability.
    pub fn new(mut resolved: ResolvedConfig, out_override: Option<PathBuf>) -> Result<Self> {
        let out_dir = out_override.unwrap_or_else(|| resolved.config.paths.out_dir.clone());
        resolved.config.paths.out_dir = out_dir.clone();
        fs::create_dir_all(&out_dir)
            .map_err(|e| PipelineError::config("paths.out_dir", format!("{}: {e}", out_dir.display())))?;
        let probe = out_dir.join(".covsel-write-probe");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| PipelineError::config("paths.out_dir", format!("{} is not writable: {e}", out_dir.display())))?;
        Ok(Self { resolved, out_dir })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.resolved.config
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn input(&self, explicit: Option<&Path>, default: &str) -> PathBuf {
        explicit.map_or_else(|| self.artifact(default), Path::to_path_buf)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.artifact(MANIFEST_JSON)
    }

    fn commit(&self, stage: &str, started: u128, outputs: Vec<Output>) -> Result<Vec<PathBuf>> {
        let manifest_path = self.manifest_path();
        let mut manifest = match RunManifest::load(&manifest_path) {
            Ok(m) => m,
            Err(PipelineError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                RunManifest::new(&self.resolved)
            }
            Err(e) => {
                warn!("replacing unreadable manifest: {e}");
                RunManifest::new(&self.resolved)
            }
        };
        manifest.config = self.resolved.config.clone();
        manifest.seed_sources = self.resolved.seed_sources.clone();
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        let mut written = Vec::new();
        for out in outputs {
            let path = self.artifact(out.name);
            write_atomic(&path, &out.bytes)?;
            manifest.artifacts.insert(
                out.name.to_string(),
                ArtifactRecord {
                    sha256: sha256_hex(&out.bytes),
                    bytes: out.bytes.len() as u64,
                    format_version: out.format_version,
                    stage: stage.to_string(),
                },
            );
            info!("wrote {}", path.display());
            written.push(path);
        }
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                started_unix_ms: started,
                finished_unix_ms: now_ms(),
            },
        );
        write_atomic(&manifest_path, &to_json_bytes(&manifest))?;
        Ok(written)
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRow>> {
    read_csv(path, dataset::read_dataset)
}

pub fn read_latents(path: &Path) -> Result<LatentTable> {
    read_csv(path, dataset::read_latents)
}

pub fn load_model(path: &Path) -> Result<VaeModel> {
    let model: VaeModel = read_json(path)?;
    if model.format_version != vae::MODEL_FORMAT_VERSION {
        return Err(PipelineError::FormatVersion {
            path: path.to_path_buf(),
            found: model.format_version,
            expected: vae::MODEL_FORMAT_VERSION,
        });
    }
    model.validate()?;
    Ok(model)
}

fn check_width(model: &VaeModel, rows: &[DatasetRow], what: &Path) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.concentrations.len());
    if width != model.input_dim() {
        return Err(PipelineError::Shape(format!(
            "{} has {width} grid points but the model expects {}",
            what.display(),
            model.input_dim()
        )));
    }
    Ok(())
}

pub fn cmd_simulate(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let sim = &ctx.config().simulation;
    info!(
        "simulating {} train + {} test subjects (seed {})",
        sim.n_train, sim.n_test, sim.seed
    );
    let data = pksim::generate_dataset(sim)?;
    let train: Vec<DatasetRow> = data.train.iter().map(DatasetRow::from).collect();
    let test: Vec<DatasetRow> = data.test.iter().map(DatasetRow::from).collect();
    let outputs = vec![
        Output {
            name: TRAIN_CSV,
            bytes: render_csv(|b| dataset::write_dataset(b, &train), TRAIN_CSV)?,
            format_version: CSV_FORMAT_VERSION,
        },
        Output {
            name: TEST_CSV,
            bytes: render_csv(|b| dataset::write_dataset(b, &test), TEST_CSV)?,
            format_version: CSV_FORMAT_VERSION,
        },
    ];
    ctx.commit("simulate", started, outputs)
}

pub fn cmd_train(ctx: &RunContext, train_csv: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let path = ctx.input(train_csv, TRAIN_CSV);
    let rows = read_dataset(&path)?;
    let cfg = &ctx.config().training;
    let model = VaeModel::new(&cfg.architecture, cfg.seed)?;
    check_width(&model, &rows, &path)?;
    let profiles = dataset::concentration_matrix(&rows);
    info!(
        "training on {} profiles for {} epochs (seed {})",
        profiles.rows(),
        cfg.epochs,
        cfg.seed
    );
    let (model, history) = vae::train(model, &profiles, cfg)?;
    let outputs = vec![
        Output {
            name: MODEL_JSON,
            bytes: to_json_bytes(&model),
            format_version: vae::MODEL_FORMAT_VERSION,
        },
        Output {
            name: HISTORY_CSV,
            bytes: render_csv(|b| dataset::write_history(b, &history), HISTORY_CSV)?,
            format_version: CSV_FORMAT_VERSION,
        },
    ];
    ctx.commit("train", started, outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub format_version: u32,
    pub metrics: ReconstructionMetrics,
    pub exclusion_rule: String,
}

impl MetricsDocument {
    pub fn new(metrics: ReconstructionMetrics) -> Self {
        Self {
            format_version: METRICS_FORMAT_VERSION,
            exclusion_rule: format!(
                "grid points whose true concentration is <= {:e} mg/L are excluded from MAPE; MAE uses every point",
                metrics.mape_threshold
            ),
            metrics,
        }
    }
}

/// Long-form overlay rows `subject_id, time_h, observed, reconstructed`.
fn fig2_rows(rows: &[DatasetRow], recon: &Matrix, grid: &[f64]) -> Result<Vec<u8>> {
    let picks: Vec<usize> = if rows.len() <= FIG2_SUBJECTS {
        (0..rows.len()).collect()
    } else {
        (0..FIG2_SUBJECTS).map(|k| k * (rows.len() - 1) / (FIG2_SUBJECTS - 1)).collect()
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| PipelineError::Data {
        path: PathBuf::from(FIG2_CSV),
        source: e.into(),
    };
    w.write_record(["subject_id", "time_h", "observed", "reconstructed"]).map_err(wrap)?;
    for i in picks {
        for (j, t) in grid.iter().enumerate() {
            w.write_record([
                rows[i].subject_id.to_string(),
                dataset::fmt_f64(*t),
                dataset::fmt_f64(rows[i].concentrations[j]),
                dataset::fmt_f64(recon.get(i, j)),
            ])
            .map_err(wrap)?;
        }
    }
    w.into_inner().map_err(|e| PipelineError::Io {
        path: PathBuf::from(FIG2_CSV),
        source: e.into_error(),
    })
}

pub fn cmd_evaluate(ctx: &RunContext, model_json: Option<&Path>, test_csv: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let model_path = ctx.input(model_json, MODEL_JSON);
    let test_path = ctx.input(test_csv, TEST_CSV);
    let model = load_model(&model_path)?;
    let rows = read_dataset(&test_path)?;
    check_width(&model, &rows, &test_path)?;
    let grid = ctx.config().simulation.time_grid();
    if grid.len() != model.input_dim() {
        return Err(PipelineError::Shape(format!(
            "configured grid has {} points but the model expects {}",
            grid.len(),
            model.input_dim()
        )));
    }
    let truth = dataset::concentration_matrix(&rows);
    let recon = model.reconstruct_batch(&truth)?;
    let metrics = vae::reconstruction_metrics(&truth, &recon)?;
    info!("test MAE {:.3e} mg/L, MAPE {:.3}%", metrics.mae, metrics.mape);
    let outputs = vec![
        Output {
            name: METRICS_JSON,
            bytes: to_json_bytes(&MetricsDocument::new(metrics)),
            format_version: METRICS_FORMAT_VERSION,
        },
        Output {
            name: FIG2_CSV,
            bytes: fig2_rows(&rows, &recon, &grid)?,
            format_version: CSV_FORMAT_VERSION,
        },
    ];
    ctx.commit("evaluate", started, outputs)
}

pub fn encode_rows(model: &VaeModel, rows: &[DatasetRow]) -> Result<LatentTable> {
    let profiles = dataset::concentration_matrix(rows);
    let scaled = profiles.map(|c| model.to_network(c));
    let (mu, logvar) = model.encode_batch(&scaled)?;
    Ok(LatentTable {
        subject_ids: rows.iter().map(|r| r.subject_id).collect(),
        mu,
        logvar,
    })
}

pub fn cmd_encode(ctx: &RunContext, model_json: Option<&Path>, dataset_csv: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let model_path = ctx.input(model_json, MODEL_JSON);
    let data_path = ctx.input(dataset_csv, TRAIN_CSV);
    let model = load_model(&model_path)?;
    let rows = read_dataset(&data_path)?;
    check_width(&model, &rows, &data_path)?;
    let table = encode_rows(&model, &rows)?;
    let outputs = vec![Output {
        name: LATENTS_CSV,
        bytes: render_csv(|b| dataset::write_latents(b, &table), LATENTS_CSV)?,
        format_version: CSV_FORMAT_VERSION,
    }];
    ctx.commit("encode", started, outputs)
}

/// `path.json`: the regularization path plus the scaling used to build the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDocument {
    pub format_version: u32,
    pub scaling: ScalingConstants,
    /// `(lambda, latent dim)` cells that hit the iteration cap.
    pub unconverged: Vec<(f64, usize)>,
    pub path: LassoPathResult,
}

/// Pairs latent rows with dataset rows by subject id. Both sides must cover
/// exactly the same subjects; rows come back sorted by id.
pub fn join_on_subject(latents: &LatentTable, rows: &[DatasetRow]) -> Result<(Vec<pksim::CovariateRecord>, Matrix)> {
    if latents.subject_ids.len() != rows.len() {
        return Err(PipelineError::SubjectMismatch(format!(
            "{} latent rows vs {} dataset rows",
            latents.subject_ids.len(),
            rows.len()
        )));
    }
    let by_id: HashMap<u64, usize> = rows.iter().enumerate().map(|(i, r)| (r.subject_id, i)).collect();
    let mut order: Vec<usize> = (0..latents.subject_ids.len()).collect();
    order.sort_by_key(|&i| latents.subject_ids[i]);
    let d = latents.latent_dim();
    let mut records = Vec::with_capacity(order.len());
    let mut mu = Matrix::zeros(order.len(), d);
    for (out, &i) in order.iter().enumerate() {
        let id = latents.subject_ids[i];
        let Some(&r) = by_id.get(&id) else {
            return Err(PipelineError::SubjectMismatch(format!(
                "subject {id} has a latent row but no dataset row"
            )));
        };
        records.push(rows[r].record);
        mu.row_mut(out).copy_from_slice(latents.mu.row(i));
    }
    Ok((records, mu))
}

pub fn cmd_fit_lasso(ctx: &RunContext, latents_csv: Option<&Path>, dataset_csv: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let latents = read_latents(&ctx.input(latents_csv, LATENTS_CSV))?;
    let rows = read_dataset(&ctx.input(dataset_csv, TRAIN_CSV))?;
    let (records, mu) = join_on_subject(&latents, &rows)?;
    let design = lasso::preprocess_covariates(&records, Scaling::Fit)?;
    let lcfg = &ctx.config().lasso;
    let path = lasso::fit_path(&design, &mu, &lcfg.lambdas, &lcfg.solver())?;
    let unconverged = path.unconverged_cells();
    for (lambda, dim) in &unconverged {
        warn!("lambda {lambda}, latent dim {dim}: coordinate descent hit the iteration cap");
    }
    let report = lasso::selection_report(&path, lcfg.zero_threshold);
    let doc = PathDocument {
        format_version: lasso::PATH_FORMAT_VERSION,
        scaling: design.scaling.clone(),
        unconverged,
        path,
    };
    let outputs = vec![
        Output {
            name: PATH_JSON,
            bytes: to_json_bytes(&doc),
            format_version: lasso::PATH_FORMAT_VERSION,
        },
        Output {
            name: SELECTION_JSON,
            bytes: to_json_bytes(&report),
            format_version: lasso::SELECTION_FORMAT_VERSION,
        },
        Output {
            name: SELECTION_CSV,
            bytes: render_csv(|b| dataset::write_selection(b, &report), SELECTION_CSV)?,
            format_version: CSV_FORMAT_VERSION,
        },
    ];
    ctx.commit("fit-lasso", started, outputs)
}

pub fn load_path(path: &Path) -> Result<PathDocument> {
    let doc: PathDocument = read_json(path)?;
    if doc.format_version != lasso::PATH_FORMAT_VERSION {
        return Err(PipelineError::FormatVersion {
            path: path.to_path_buf(),
            found: doc.format_version,
            expected: lasso::PATH_FORMAT_VERSION,
        });
    }
    let p = &doc.path;
    let shape_ok = p.coefficients.len() == p.lambdas.len()
        && p.importance.len() == p.lambdas.len()
        && p.importance.iter().all(|r| r.len() == p.covariates.len())
        && p.coefficients
            .iter()
            .all(|l| l.len() == p.latent_dim && l.iter().all(|d| d.len() == p.column_names.len()))
        && p.group_of_column.len() == p.column_names.len()
        && p.group_of_column.iter().all(|&g| g < p.covariates.len());
    if !shape_ok {
        return Err(PipelineError::Shape(format!(
            "{}: coefficient tensor does not match its grid, latent and column sizes",
            path.display()
        )));
    }
    Ok(doc)
}

pub fn load_metrics(path: &Path) -> Result<MetricsDocument> {
    let doc: MetricsDocument = read_json(path)?;
    if doc.format_version != METRICS_FORMAT_VERSION {
        return Err(PipelineError::FormatVersion {
            path: path.to_path_buf(),
            found: doc.format_version,
            expected: METRICS_FORMAT_VERSION,
        });
    }
    Ok(doc)
}

/// Per (λ, latent dim, covariate) summed |β| — the data behind a 3-D weight plot.
pub fn render_fig3(path: &LassoPathResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| PipelineError::Data {
        path: PathBuf::from(FIG3_CSV),
        source: e.into(),
    };
    w.write_record(["lambda", "latent_dim", "covariate", "abs_weight"]).map_err(wrap)?;
    for (li, &lambda) in path.lambdas.iter().enumerate() {
        for (d, coefs) in path.coefficients[li].iter().enumerate() {
            let mut per_cov = vec![0.0; path.covariates.len()];
            for (b, &g) in coefs.iter().zip(&path.group_of_column) {
                per_cov[g] += b.abs();
            }
            for (c, v) in per_cov.iter().enumerate() {
                w.write_record([
                    dataset::fmt_f64(lambda),
                    (d + 1).to_string(),
                    path.covariates[c].clone(),
                    dataset::fmt_f64(*v),
                ])
                .map_err(wrap)?;
            }
        }
    }
    w.into_inner().map_err(|e| PipelineError::Io {
        path: PathBuf::from(FIG3_CSV),
        source: e.into_error(),
    })
}

/// Markdown summary; a pure function of its inputs.
pub fn render_report(doc: &PathDocument, report: &SelectionReport, metrics: &MetricsDocument) -> String {
    let m = &metrics.metrics;
    let path = &doc.path;
    let mut s = String::new();
    let _ = writeln!(s, "# Covariate selection report\n");
    let _ = writeln!(s, "## Reconstruction on held-out profiles\n");
    let _ = writeln!(s, "| metric | value |\n|---|---|");
    let _ = writeln!(s, "| profiles | {} |", m.profiles);
    let _ = writeln!(s, "| MAE (mg/L) | {:.6e} |", m.mae);
    let _ = writeln!(s, "| MAPE (%) | {:.4} |", m.mape);
    let _ = writeln!(
        s,
        "\nMAPE covers {} grid points; {} points with true concentration <= {:e} mg/L are excluded.\n",
        m.mape_points, m.excluded_points, m.mape_threshold
    );

    let _ = writeln!(s, "## Retained covariates by lambda\n");
    let _ = writeln!(
        s,
        "A covariate is retained when its importance (mean over latent dimensions of the summed |coefficient| of its columns) exceeds {:e}.\n",
        report.zero_threshold
    );
    let _ = writeln!(s, "| lambda | retained | eliminated |\n|---|---|---|");
    for sel in &report.per_lambda {
        let retained = if sel.retained.is_empty() {
            "none".to_string()
        } else {
            sel.retained.join(", ")
        };
        let eliminated = if sel.eliminated.is_empty() {
            "none".to_string()
        } else {
            sel.eliminated.join(", ")
        };
        let _ = writeln!(s, "| {} | {} | {} |", sel.lambda, retained, eliminated);
    }
    if report.per_lambda.iter().all(|sel| sel.retained.is_empty()) {
        let _ = writeln!(s, "\nNo covariates are retained at any lambda on this path.");
    }

    let _ = writeln!(s, "\n## Elimination order\n");
    let mut order: Vec<&(String, Option<f64>)> = report.elimination_lambda.iter().collect();
    order.sort_by(|a, b| lasso::elimination_rank(a.1).total_cmp(&lasso::elimination_rank(b.1)));
    let _ = writeln!(s, "| covariate | eliminated from lambda |\n|---|---|");
    for (name, lambda) in order {
        match lambda {
            Some(l) => {
                let _ = writeln!(s, "| {name} | {l} |");
            }
            None => {
                let _ = writeln!(s, "| {name} | retained at every lambda |");
            }
        }
    }

    let _ = writeln!(s, "\n## Importance\n");
    let _ = write!(s, "| covariate |");
    for l in &path.lambdas {
        let _ = write!(s, " {l} |");
    }
    let _ = write!(s, "\n|---|");
    for _ in &path.lambdas {
        let _ = write!(s, "---|");
    }
    let _ = writeln!(s);
    for (c, name) in path.covariates.iter().enumerate() {
        let _ = write!(s, "| {name} |");
        for li in 0..path.lambdas.len() {
            let _ = write!(s, " {:.4e} |", path.importance[li][c]);
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "\n## Solver\n");
    let cells = path.lambdas.len() * path.latent_dim;
    if doc.unconverged.is_empty() {
        let _ = writeln!(
            s,
            "All {cells} fits converged (tolerance {:e}, at most {} sweeps).",
            path.solver.tolerance, path.solver.max_iterations
        );
    } else {
        let _ = writeln!(s, "{} of {cells} fits hit the iteration cap:\n", doc.unconverged.len());
        for (lambda, dim) in &doc.unconverged {
            let _ = writeln!(s, "- lambda {lambda}, latent dimension {}", dim + 1);
        }
    }
    s
}

pub fn cmd_report(ctx: &RunContext, path_json: Option<&Path>, metrics_json: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let doc = load_path(&ctx.input(path_json, PATH_JSON))?;
    let metrics = load_metrics(&ctx.input(metrics_json, METRICS_JSON))?;
    let report = lasso::selection_report(&doc.path, ctx.config().lasso.zero_threshold);
    let outputs = vec![
        Output {
            name: REPORT_MD,
            bytes: render_report(&doc, &report, &metrics).into_bytes(),
            format_version: 1,
        },
        Output {
            name: FIG3_CSV,
            bytes: render_fig3(&doc.path)?,
            format_version: CSV_FORMAT_VERSION,
        },
    ];
    ctx.commit("report", started, outputs)
}

/// simulate → train → evaluate → encode (training set) → fit-lasso → report.
pub fn cmd_run(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut written = cmd_simulate(ctx)?;
    written.extend(cmd_train(ctx, None)?);
    written.extend(cmd_evaluate(ctx, None, None)?);
    written.extend(cmd_encode(ctx, None, None)?);
    written.extend(cmd_fit_lasso(ctx, None, None)?);
    written.extend(cmd_report(ctx, None, None)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let r = ResolvedConfig::default();
        assert_eq!(r.config.simulation.n_train, 10_000);
        assert_eq!(r.config.simulation.n_test, 2_000);
        assert_eq!(r.config.lasso.lambdas, lasso::DEFAULT_LAMBDAS.to_vec());
        assert_eq!(r.seed_sources["simulation"], SeedSource::Derived);
    }

    #[test]
    fn seeds_derive_from_master_unless_explicit() {
        let a = ResolvedConfig::from_value(json!({"master_seed": 7})).unwrap();
        let b = ResolvedConfig::from_value(json!({"master_seed": 8})).unwrap();
        assert_eq!(a.config.simulation.seed, derive_seed(7, SIMULATION_STREAM));
        assert_ne!(a.config.simulation.seed, b.config.simulation.seed);
        assert_ne!(a.config.simulation.seed, a.config.training.seed);

        let c = ResolvedConfig::from_value(json!({"master_seed": 7, "training": {"seed": 0}})).unwrap();
        assert_eq!(c.config.training.seed, 0);
        assert_eq!(c.seed_sources["training"], SeedSource::Explicit);
        assert_eq!(c.config.simulation.seed, a.config.simulation.seed);
    }

    #[test]
    fn field_level_errors() {
        let field_of = |v: Value| match ResolvedConfig::from_value(v) {
            Err(PipelineError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field_of(json!({"simulation": {"n_train": 0}})), "simulation.n_train");
        assert_eq!(field_of(json!({"lasso": {"lambdas": []}})), "lasso.lambdas");
        assert_eq!(field_of(json!({"lasso": {"lambdas": [0.1, -1.0]}})), "lasso.lambdas");
        assert_eq!(field_of(json!({"training": {"epochs": 0}})), "training.epochs");
        assert_eq!(
            field_of(json!({"simulation": {"grid_points": 50}})),
            "training.architecture.input_dim"
        );
        match ResolvedConfig::from_value(json!({"lasso": {"lamdas": [1.0]}})) {
            Err(PipelineError::Config { reason, .. }) => assert!(reason.contains("lamdas")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn join_sorts_and_rejects_missing_subjects() {
        let row = |id: u64, age: f64| DatasetRow {
            subject_id: id,
            record: pksim::CovariateRecord {
                snp: 1,
                age,
                sex: pksim::Sex::Male,
                weight: 70.0,
                hgb: 12.0,
                alb: 4.0,
                race: pksim::Race::Asian,
                extra_1: 0.5,
                extra_2: 0.5,
            },
            concentrations: vec![0.0],
        };
        let rows = vec![row(2, 20.0), row(0, 40.0), row(1, 30.0)];
        let latents = LatentTable {
            subject_ids: vec![1, 2, 0],
            mu: Matrix::from_rows(&[[1.0], [2.0], [0.0]]).unwrap(),
            logvar: Matrix::zeros(3, 1),
        };
        let (records, mu) = join_on_subject(&latents, &rows).unwrap();
        assert_eq!(records.iter().map(|r| r.age).collect::<Vec<_>>(), vec![40.0, 30.0, 20.0]);
        assert_eq!(mu.as_slice(), &[0.0, 1.0, 2.0]);

        let wrong = LatentTable {
            subject_ids: vec![1, 2, 9],
            ..latents
        };
        assert!(matches!(
            join_on_subject(&wrong, &rows),
            Err(PipelineError::SubjectMismatch(_))
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_atomic(&p, b"{}").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"{}");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
