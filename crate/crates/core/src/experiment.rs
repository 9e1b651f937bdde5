//! Config-driven runs: generate, train, optionally fine-tune, sweep reflection
//! depths, evaluate, and write every artifact under one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, DatasetKind, GenConfig, SizeConfig, SplitFractions};
use crate::error::{Error, Result, Stage};
use crate::graph::{Dataset, GraphInstance, Split, UpdateMode};
use crate::io::{read_dataset, write_dataset};
use crate::metrics::{accuracy, per_class_accuracy, per_graph_mean_auc, split_edge_auc};
use crate::model::{GraphBatch, ModelState};
use crate::reflection::{reflect_batch, trajectory_of, Reflection};
use crate::training::{argmax, curve_to_tsv, finetune, train_base, AdamConfig, FinetuneMode, TrainConfig};

/// Environment variable naming the directory that receives run artifacts.
pub const ARTIFACT_ENV: &str = "SREFLECT_ARTIFACTS";

/// Marker written into an output directory when a run aborts.
pub const STALE_MARKER: &str = "STALE";

const REPORT_FORMAT: &str = "sreflect-report";
const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub num_graphs: usize,
    pub bias: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub feature_dim: usize,
    pub random_features: bool,
    pub tree_depth_min: usize,
    pub tree_depth_max: usize,
    pub ladder_rungs_min: usize,
    pub ladder_rungs_max: usize,
    pub wheel_rim_min: usize,
    pub wheel_rim_max: usize,
    pub ba_nodes: usize,
    pub ba_attach: usize,
    /// Read this dataset file instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SizeConfig::default();
        let f = SplitFractions::default();
        DatasetSection {
            kind: DatasetKind::Spmotif,
            num_graphs: 1000,
            bias: 0.9,
            seed: 0,
            train_fraction: f.train,
            valid_fraction: f.valid,
            test_fraction: f.test,
            feature_dim: 4,
            random_features: false,
            tree_depth_min: s.tree_depth.0,
            tree_depth_max: s.tree_depth.1,
            ladder_rungs_min: s.ladder_rungs.0,
            ladder_rungs_max: s.ladder_rungs.1,
            wheel_rim_min: s.wheel_rim.0,
            wheel_rim_max: s.wheel_rim.1,
            ba_nodes: s.ba_nodes,
            ba_attach: s.ba_attach,
            path: None,
        }
    }
}

impl DatasetSection {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            kind: self.kind,
            num_graphs: self.num_graphs,
            bias: if self.kind == DatasetKind::Ba2motifs { 1.0 } else { self.bias },
            splits: SplitFractions {
                train: self.train_fraction,
                valid: self.valid_fraction,
                test: self.test_fraction,
            },
            seed: self.seed,
            sizes: SizeConfig {
                tree_depth: (self.tree_depth_min, self.tree_depth_max),
                ladder_rungs: (self.ladder_rungs_min, self.ladder_rungs_max),
                wheel_rim: (self.wheel_rim_min, self.wheel_rim_max),
                ba_nodes: self.ba_nodes,
                ba_attach: self.ba_attach,
            },
            feature_dim: self.feature_dim,
            random_features: self.random_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    /// One encoder for both the scorer and the classifier.
    pub shared_encoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            hidden: 64,
            shared_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub r: f64,
    pub tau: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Load this base checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: f64,
    pub finetune_k: usize,
    pub finetune_mode: FinetuneMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let b = TrainConfig::base();
        let f = TrainConfig::finetune();
        TrainSection {
            epochs: b.epochs,
            batch_size: b.batch_size,
            lr: b.lr,
            beta: b.beta,
            r: b.r,
            tau: b.tau,
            seed: b.seed,
            clip_norm: b.clip_norm,
            adam_beta1: b.adam.beta1,
            adam_beta2: b.adam.beta2,
            adam_eps: b.adam.eps,
            checkpoint: None,
            finetune: false,
            finetune_epochs: f.epochs,
            finetune_batch_size: f.batch_size,
            finetune_lr: f.lr,
            finetune_k: f.k,
            finetune_mode: f.mode,
        }
    }
}

impl TrainSection {
    pub fn base_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta: self.beta,
            r: self.r,
            tau: self.tau,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            clip_norm: self.clip_norm,
            ..TrainConfig::base()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            batch_size: self.finetune_batch_size,
            lr: self.finetune_lr,
            k: self.finetune_k,
            mode: self.finetune_mode,
            ..self.base_config()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflectSection {
    /// Deepest iteration of the sweep; every `t` in `1..=k` is evaluated.
    pub k: usize,
    pub modes: Vec<UpdateMode>,
}

impl Default for ReflectSection {
    fn default() -> Self {
        ReflectSection {
            k: 8,
            modes: vec![UpdateMode::Accumulate, UpdateMode::Replace],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    /// Iteration reported as the reflective method in comparison tables.
    pub table_k: usize,
    /// Also report the mean of per-graph AUCs.
    pub auc_per_graph: bool,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            table_k: 3,
            auc_per_graph: false,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub reflect: ReflectSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        if self.dataset.path.is_none() {
            self.dataset.gen_config().validate().map_err(config)?;
        }
        self.train.base_config().validate().map_err(config)?;
        if self.train.finetune {
            let f = self.train.finetune_config();
            f.validate().map_err(config)?;
            if f.mode == FinetuneMode::Consistency && f.k < 2 {
                return Err(Error::Config(format!("finetune_k must be >= 2, got {}", f.k)));
            }
        }
        if self.model.layers == 0 || self.model.hidden == 0 {
            return Err(Error::Config("model needs at least one layer and one hidden unit".into()));
        }
        if self.reflect.k == 0 {
            return Err(Error::Config("reflect.k must be at least 1".into()));
        }
        if self.reflect.modes.is_empty() {
            return Err(Error::Config("reflect.modes is empty".into()));
        }
        if self.eval.table_k == 0 || self.eval.table_k > self.reflect.k {
            return Err(Error::Config(format!(
                "eval.table_k={} must lie in 1..={}",
                self.eval.table_k, self.reflect.k
            )));
        }
        Ok(())
    }

    /// Base training settings including the model's encoder layout.
    pub fn base_train_config(&self) -> TrainConfig {
        TrainConfig {
            shared_encoder: self.model.shared_encoder,
            ..self.train.base_config()
        }
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// First 12 hex digits of the SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..12].to_string()
}

/// Metrics of one reflection sweep over `t = 0..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// `base` or `finetuned`.
    pub model: String,
    pub mode: UpdateMode,
    pub k: usize,
    /// Downstream accuracy on `G ⊙ Z(t)`.
    pub accuracy: Vec<f64>,
    /// Pooled edge AUC of `Z(t)`.
    pub auc: Vec<f64>,
    /// Pooled edge AUC of the instantaneous scores `p~(t)`; entry 0 is empty.
    pub proposal_auc: Vec<Option<f64>>,
    pub per_graph_auc: Option<Vec<f64>>,
    pub per_class_accuracy: Vec<Vec<Option<f64>>>,
    pub pos_mean: Vec<Option<f64>>,
    pub neg_mean: Vec<Option<f64>>,
    /// Mean over graphs of the consistency loss of `Z(1..=k)`.
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub bias: f64,
    pub split: Split,
    pub num_graphs: usize,
    pub table_k: usize,
    pub sweeps: Vec<SweepReport>,
}

impl MetricsReport {
    pub fn sweep(&self, model: &str, mode: UpdateMode) -> Option<&SweepReport> {
        self.sweeps.iter().find(|s| s.model == model && s.mode == mode)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.sweeps {
            let n = s.k + 1;
            if [s.accuracy.len(), s.auc.len(), s.proposal_auc.len(), s.pos_mean.len(), s.neg_mean.len()]
                .iter()
                .any(|&l| l != n)
            {
                return Err(Error::param(format!("sweep {}/{} does not cover t=0..={}", s.model, s.mode, s.k)));
            }
            if s.accuracy.iter().chain(&s.auc).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::param(format!("sweep {}/{} has a metric outside [0,1]", s.model, s.mode)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let report: MetricsReport = serde_json::from_str(&text)?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(Error::param(format!(
                "{} is not a version {REPORT_VERSION} report",
                path.display()
            )));
        }
        Ok(report)
    }
}

/// Downstream logits on `G ⊙ Z(t)` for every `t` of every run.
fn logits_per_iteration(graphs: &[&GraphInstance], state: &ModelState, runs: &[Reflection]) -> Result<Vec<Vec<usize>>> {
    let depth = runs.first().map_or(0, |r| r.sequence.depth());
    let mut preds = vec![Vec::with_capacity(graphs.len()); depth + 1];
    const CHUNK: usize = 512;
    for (gs, rs) in graphs.chunks(CHUNK).zip(runs.chunks(CHUNK)) {
        let batch = GraphBatch::new(gs)?;
        for (t, out) in preds.iter_mut().enumerate() {
            let weights: Vec<f64> = rs.iter().flat_map(|r| r.sequence.masks[t].scores.iter().copied()).collect();
            let logits = state.logits_batch(&batch, &weights)?;
            out.extend(logits.rows().into_iter().map(|row| argmax(row.iter().copied())));
        }
    }
    Ok(preds)
}

/// Reflects every graph to depth `k` and scores every iteration.
pub fn sweep(
    graphs: &[&GraphInstance],
    state: &ModelState,
    model: &str,
    mode: UpdateMode,
    k: usize,
    num_classes: usize,
    per_graph: bool,
) -> Result<(SweepReport, Vec<Reflection>)> {
    let runs = reflect_batch(graphs, state, k, mode).map_err(|e| e.in_stage(Stage::Reflect))?;
    let evaluate = || -> Result<SweepReport> {
        let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
        let preds = logits_per_iteration(graphs, state, &runs)?;
        let mut accs = Vec::with_capacity(k + 1);
        let mut aucs = Vec::with_capacity(k + 1);
        let mut proposal_auc = vec![None];
        let mut per_graph_auc = Vec::new();
        let mut per_class = Vec::new();
        for (t, p) in preds.iter().enumerate() {
            accs.push(accuracy(p, &labels)?);
            per_class.push(per_class_accuracy(p, &labels, num_classes));
            aucs.push(split_edge_auc(graphs, runs.iter().map(|r| r.sequence.masks[t].scores.as_slice()))?);
            if per_graph {
                per_graph_auc.push(per_graph_mean_auc(
                    graphs,
                    runs.iter().map(|r| r.sequence.masks[t].scores.as_slice()),
                )?);
            }
            if t > 0 {
                proposal_auc.push(Some(split_edge_auc(
                    graphs,
                    runs.iter().map(|r| r.proposals[t - 1].scores.as_slice()),
                )?));
            }
        }
        let trajectory = trajectory_of(graphs, &runs)?;
        let agg = trajectory.aggregate();
        let consistency = if k >= 2 {
            let mut total = 0.0;
            for (g, r) in graphs.iter().zip(&runs) {
                total += r.sequence.consistency_loss(&g.canonical_edges()?)?;
            }
            Some(total / graphs.len() as f64)
        } else {
            None
        };
        Ok(SweepReport {
            model: model.to_string(),
            mode,
            k,
            accuracy: accs,
            auc: aucs,
            proposal_auc,
            per_graph_auc: per_graph.then_some(per_graph_auc),
            per_class_accuracy: per_class,
            pos_mean: agg.iter().map(|r| r.pos_mean).collect(),
            neg_mean: agg.iter().map(|r| r.neg_mean).collect(),
            consistency,
        })
    };
    let report = evaluate().map_err(|e| e.in_stage(Stage::Evaluate))?;
    Ok((report, runs))
}

/// Paths of everything a run writes; every file name carries the config hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
    pub hash: String,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>, hash: &str) -> Self {
        ArtifactPaths {
            dir: dir.into(),
            hash: hash.to_string(),
        }
    }

    pub fn file(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}-{}.{ext}", self.hash))
    }

    pub fn config(&self) -> PathBuf {
        self.file("config", "toml")
    }
    pub fn dataset(&self) -> PathBuf {
        self.file("dataset", "jsonl")
    }
    pub fn dataset_stats(&self) -> PathBuf {
        self.file("dataset-stats", "json")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.file("base", "ckpt.json")
    }
    pub fn finetuned_checkpoint(&self) -> PathBuf {
        self.file("finetuned", "ckpt.json")
    }
    pub fn curve(&self, stage: &str) -> PathBuf {
        self.file(&format!("curve-{stage}"), "tsv")
    }
    pub fn trajectory(&self, model: &str, mode: UpdateMode) -> PathBuf {
        self.file(&format!("trajectory-{model}-{mode}"), "tsv")
    }
    pub fn scores(&self, model: &str, mode: UpdateMode) -> PathBuf {
        self.file(&format!("scores-{model}-{mode}"), "jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.file("report", "json")
    }
    pub fn table(&self) -> PathBuf {
        self.file("table", "txt")
    }
    pub fn plot(&self, what: &str) -> PathBuf {
        self.file(&format!("plot-{what}"), "svg")
    }
    /// Wall-clock timings; kept apart from the deterministic artifacts.
    pub fn timing(&self) -> PathBuf {
        self.file("timing", "json")
    }
    pub fn stale_marker(&self) -> PathBuf {
        self.dir.join(STALE_MARKER)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

/// Per-graph, per-iteration edge scores in dataset edge order, one JSON line per graph.
pub fn scores_jsonl(indices: &[usize], runs: &[Reflection]) -> Result<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        graph: usize,
        masks: Vec<&'a [f64]>,
        prediction: usize,
    }
    let mut out = String::new();
    for (&graph, r) in indices.iter().zip(runs) {
        let line = Line {
            graph,
            masks: r.sequence.masks.iter().map(|m| m.scores.as_slice()).collect(),
            prediction: r.prediction(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Loads or builds the dataset named by the config.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset.path {
        Some(p) => read_dataset(p),
        None => generate(&cfg.dataset.gen_config()),
    }
    .map_err(|e| e.in_stage(Stage::Generate))
}

#[derive(Debug, Clone, Default, Serialize)]
struct Timing {
    stages: Vec<(String, f64)>,
}

/// Writes `dataset` to `path` and its class and contingency counts to `stats`.
pub fn write_with_stats(dataset: &Dataset, path: &Path, stats: &Path) -> Result<()> {
    let in_generate = |e: Error| e.in_stage(Stage::Generate);
    write_dataset(dataset, path).map_err(in_generate)?;
    let counts = crate::datagen::dataset_stats(dataset);
    write(stats, serde_json::to_string_pretty(&counts)? + "\n").map_err(in_generate)
}

/// Builds (or reads) the dataset and writes it with its statistics sidecar.
pub fn stage_generate(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Dataset> {
    let dataset = prepare_dataset(cfg)?;
    fs::create_dir_all(&paths.dir).map_err(|e| Error::file(&paths.dir, e).in_stage(Stage::Generate))?;
    write_with_stats(&dataset, &paths.dataset(), &paths.dataset_stats())?;
    Ok(dataset)
}

/// Trains the base model, or loads `train.checkpoint` when set, and saves it.
pub fn stage_train(cfg: &ExperimentConfig, paths: &ArtifactPaths, dataset: &Dataset) -> Result<ModelState> {
    let in_train = |e: Error| e.in_stage(Stage::Train);
    let base = match &cfg.train.checkpoint {
        Some(p) => ModelState::load(p).map_err(in_train)?,
        None => {
            let out = train_base(dataset, &cfg.base_train_config(), cfg.model.layers, cfg.model.hidden)
                .map_err(in_train)?;
            write(&paths.curve("base"), curve_to_tsv(&out.curve)).map_err(in_train)?;
            let mut state = out.state;
            state.meta.config_hash = Some(paths.hash.clone());
            state
        }
    };
    check_compatible(&base, dataset).map_err(in_train)?;
    base.save(paths.base_checkpoint()).map_err(in_train)?;
    Ok(base)
}

fn check_compatible(state: &ModelState, dataset: &Dataset) -> Result<()> {
    if state.feature_dim != dataset.feature_dim || state.num_classes != dataset.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} features / {} classes, dataset has {} / {}",
            state.feature_dim, state.num_classes, dataset.feature_dim, dataset.num_classes
        )));
    }
    Ok(())
}

/// Reflection-aware fine-tuning of `base`; saves the result.
pub fn stage_finetune(
    cfg: &ExperimentConfig,
    paths: &ArtifactPaths,
    dataset: &Dataset,
    base: &ModelState,
) -> Result<ModelState> {
    let in_ft = |e: Error| e.in_stage(Stage::Finetune);
    check_compatible(base, dataset).map_err(in_ft)?;
    let out = finetune(dataset, base, &cfg.train.finetune_config()).map_err(in_ft)?;
    write(&paths.curve("finetune"), curve_to_tsv(&out.curve)).map_err(in_ft)?;
    let mut state = out.state;
    state.meta.config_hash = Some(paths.hash.clone());
    state.save(paths.finetuned_checkpoint()).map_err(in_ft)?;
    Ok(state)
}

/// Reflection sweeps for every named model and mode, then the report, table
/// and plots.
pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    paths: &ArtifactPaths,
    dataset: &Dataset,
    models: &[(&str, &ModelState)],
) -> Result<MetricsReport> {
    let indices = dataset.split_indices(cfg.eval.split);
    let graphs: Vec<&GraphInstance> = indices.iter().map(|&i| &dataset.graphs[i]).collect();
    if graphs.is_empty() {
        return Err(Error::param(format!("split {} is empty", cfg.eval.split)).in_stage(Stage::Evaluate));
    }
    let mut sweeps = Vec::new();
    for &(name, state) in models {
        check_compatible(state, dataset).map_err(|e| e.in_stage(Stage::Evaluate))?;
        for &mode in &cfg.reflect.modes {
            let (report, runs) = sweep(
                &graphs,
                state,
                name,
                mode,
                cfg.reflect.k,
                dataset.num_classes,
                cfg.eval.auc_per_graph,
            )?;
            let in_reflect = |e: Error| e.in_stage(Stage::Reflect);
            write(&paths.scores(name, mode), scores_jsonl(&indices, &runs)?).map_err(in_reflect)?;
            let trajectory = trajectory_of(&graphs, &runs).map_err(in_reflect)?;
            write(&paths.trajectory(name, mode), trajectory.to_tsv()).map_err(in_reflect)?;
            sweeps.push(report);
        }
    }

    let report = MetricsReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: paths.hash.clone(),
        seed: cfg.train.seed,
        dataset: cfg.dataset.kind,
        bias: cfg.dataset.bias,
        split: cfg.eval.split,
        num_graphs: graphs.len(),
        table_k: cfg.eval.table_k,
        sweeps,
    };
    let in_report = |e: Error| e.in_stage(Stage::Report);
    report.validate().map_err(in_report)?;
    report.save(paths.report()).map_err(in_report)?;
    write(&paths.table(), emit_tables(std::slice::from_ref(&report)).map_err(in_report)?).map_err(in_report)?;
    if cfg.eval.plots {
        crate::plots::write_all(&report, paths).map_err(in_report)?;
    }
    Ok(report)
}

/// Executes the configured pipeline and writes all artifacts into `out_dir`.
/// On failure a `STALE` marker is left next to whatever was already written.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<MetricsReport> {
    let paths = ArtifactPaths::new(out_dir.as_ref(), &cfg.hash());
    guarded(&paths, || run_inner(cfg, &paths))
}

/// Runs `f` with the stale marker cleared beforehand and written on failure.
pub fn guarded<T>(paths: &ArtifactPaths, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(&paths.dir).map_err(|e| Error::file(&paths.dir, e))?;
    let _ = fs::remove_file(paths.stale_marker());
    f().inspect_err(|e| {
        let _ = fs::write(paths.stale_marker(), format!("{e}\n"));
    })
}

fn run_inner(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut timing = Timing::default();
    let mut clock = std::time::Instant::now();
    let mut lap = |timing: &mut Timing, name: &str| {
        timing.stages.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = std::time::Instant::now();
    };
    write(&paths.config(), cfg.to_toml())?;
    let dataset = stage_generate(cfg, paths)?;
    lap(&mut timing, "generate");
    let base = stage_train(cfg, paths, &dataset)?;
    lap(&mut timing, "train");
    let tuned = if cfg.train.finetune {
        let t = stage_finetune(cfg, paths, &dataset, &base)?;
        lap(&mut timing, "finetune");
        Some(t)
    } else {
        None
    };
    let mut models = vec![("base", &base)];
    if let Some(t) = &tuned {
        models.push(("finetuned", t));
    }
    let report = stage_evaluate(cfg, paths, &dataset, &models)?;
    lap(&mut timing, "evaluate");
    write(&paths.timing(), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(report)
}

/// A row of the comparison table before formatting.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub method: &'static str,
    pub bias: f64,
    pub acc: (f64, f64),
    pub auc: (f64, f64),
    pub runs: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const METHODS: [&str; 3] = ["base", "SR", "FT-SR"];

/// `(acc, auc)` of one method in one report, if the report has that method.
fn method_metrics(r: &MetricsReport, method: &str) -> Option<(f64, f64)> {
    let (model, t) = match method {
        "base" => ("base", 1),
        "SR" => ("base", r.table_k),
        _ => ("finetuned", r.table_k),
    };
    let s = r.sweep(model, UpdateMode::Accumulate)?;
    Some((*s.accuracy.get(t)?, *s.auc.get(t)?))
}

/// Aggregates reports into mean ± std cells per (method, bias).
pub fn table_cells(reports: &[MetricsReport]) -> Result<Vec<TableCell>> {
    let first = reports.first().ok_or_else(|| Error::param("no reports to tabulate"))?;
    for r in reports {
        if r.format != first.format || r.version != first.version || r.table_k != first.table_k {
            return Err(Error::param(format!(
                "report {} does not share the schema of report {}",
                r.config_hash, first.config_hash
            )));
        }
        r.validate()?;
    }
    let mut biases: Vec<f64> = reports.iter().map(|r| r.bias).collect();
    biases.sort_by(f64::total_cmp);
    biases.dedup();
    let mut cells = Vec::new();
    for method in METHODS {
        for &bias in &biases {
            let values: Vec<(f64, f64)> = reports
                .iter()
                .filter(|r| r.bias == bias)
                .filter_map(|r| method_metrics(r, method))
                .collect();
            if values.is_empty() {
                continue;
            }
            let accs: Vec<f64> = values.iter().map(|v| v.0).collect();
            let aucs: Vec<f64> = values.iter().map(|v| v.1).collect();
            cells.push(TableCell {
                method,
                bias,
                acc: mean_std(&accs),
                auc: mean_std(&aucs),
                runs: values.len(),
            });
        }
    }
    Ok(cells)
}

/// Columnar comparison table (percentages, mean ± std across runs).
pub fn emit_tables(reports: &[MetricsReport]) -> Result<String> {
    let cells = table_cells(reports)?;
    let mut out = format!("{:<8}{:>8}{:>6}{:>18}{:>18}\n", "method", "b", "runs", "ACC", "AUC");
    for c in &cells {
        let fmt = |(m, s): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        out.push_str(&format!(
            "{:<8}{:>8.3}{:>6}{:>18}{:>18}\n",
            c.method,
            c.bias,
            c.runs,
            fmt(c.acc),
            fmt(c.auc)
        ));
    }
    Ok(out)
}

/// Artifact root from [`ARTIFACT_ENV`], falling back to `./artifacts`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ENV).map_or_else(|| PathBuf::from("artifacts"), PathBuf::from)
}
