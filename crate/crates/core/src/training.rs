//! Bottleneck-regularized base training and reflection-aware fine-tuning.
//!
//! Base objective per graph: cross-entropy of the classifier on the gated graph
//! plus `beta` times the mean Bernoulli KL between the scorer's keep
//! probabilities and the prior `r`. Fine-tuning unrolls the deterministic
//! reflection loop and penalizes disagreement between the iterates.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bernoulli_kl, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Dataset, GraphInstance, Split};
use crate::model::{gate_noise, relaxed_gate_var, Bound, GraphBatch, ModelHyper, ModelState, PROB_EPS};

/// Largest number of graphs put through one tape; bigger batches accumulate gradients.
const MICRO_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Consistency loss over the unrolled masks plus downstream cross-entropy.
    Consistency,
    /// The base objective applied at every unrolled iteration.
    Raw,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistency" => Ok(FinetuneMode::Consistency),
            "raw" => Ok(FinetuneMode::Raw),
            other => Err(Error::param(format!("unknown fine-tune mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Bottleneck weight.
    pub beta: f64,
    /// Gate prior.
    pub r: f64,
    /// Gate temperature.
    pub tau: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Reflection depth unrolled during fine-tuning.
    pub k: usize,
    pub mode: FinetuneMode,
    /// One encoder feeds both the scorer and the classifier.
    #[serde(default)]
    pub shared_encoder: bool,
}

impl TrainConfig {
    pub fn base() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 5e-4,
            beta: 1.0,
            r: 0.7,
            tau: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            k: 2,
            mode: FinetuneMode::Consistency,
            shared_encoder: false,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 512,
            lr: 1e-4,
            ..TrainConfig::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::param(format!("prior r={} outside (0,1)", self.r)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::param(format!("beta={} must be non-negative", self.beta)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param(format!("temperature tau={} must be positive", self.tau)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        Ok(())
    }

    fn validate_finetune(&self) -> Result<()> {
        self.validate()?;
        match self.mode {
            FinetuneMode::Consistency if self.k < 2 => Err(Error::param(format!(
                "consistency fine-tuning needs k >= 2, got {}",
                self.k
            ))),
            FinetuneMode::Raw if self.k < 1 => Err(Error::param("raw fine-tuning needs k >= 1")),
            _ => Ok(()),
        }
    }

    /// Hyperparameter record for a model trained with this config.
    pub fn model_hyper(&self, layers: usize, hidden: usize) -> ModelHyper {
        ModelHyper {
            layers,
            hidden,
            tau: self.tau,
            prior_r: self.r,
            beta: self.beta,
            shared_encoder: self.shared_encoder,
        }
    }
}

/// Mean Bernoulli KL to the prior over the given per-undirected-edge probabilities.
pub fn kl_bernoulli(p: &[f64], r: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::param(format!("prior r={r} outside (0,1)")));
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(p.iter().map(|&x| bernoulli_kl(x, r, PROB_EPS)).sum::<f64>() / p.len() as f64)
}

/// `2 / (k (k-1)) * sum_{t < t'} ||Z(t) - Z(t')||_1` over masks `Z(1..=k)` given
/// on undirected edge positions.
pub fn consistency_loss(masks: &[&[f64]]) -> Result<f64> {
    let k = masks.len();
    if k < 2 {
        return Err(Error::param(format!("consistency loss needs at least two masks, got {k}")));
    }
    let width = masks[0].len();
    if let Some(m) = masks.iter().find(|m| m.len() != width) {
        return Err(Error::Dimension {
            what: "mask in consistency loss",
            expected: width,
            got: m.len(),
        });
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            total += masks[a].iter().zip(masks[b]).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
    }
    Ok(2.0 / (k * (k - 1)) as f64 * total)
}

/// Loss value, summed parameter gradients and training-time correct count of one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
    pub correct: usize,
}

fn per_graph_kl(tape: &mut Tape, batch: &GraphBatch, p: Var, r: f64) -> Var {
    let kl = tape.bernoulli_kl(p, r, PROB_EPS);
    let weights: Vec<f64> = batch
        .canonical
        .iter()
        .zip(batch.edge_graph.iter())
        .map(|(&c, &g)| {
            let n = batch.undirected_counts[g];
            if n == 0 {
                0.0
            } else {
                c / n as f64
            }
        })
        .collect();
    let w = tape.column(weights);
    let weighted = tape.mul(kl, w);
    tape.segment_sum(weighted, batch.edge_graph.clone(), batch.num_graphs)
}

fn count_correct(logits: &Array2<f64>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Gated objective for one tape: scorer on `G ⊙ input`, gates, classifier on
/// `G ⊙ input ⊙ gates`. Returns per-graph losses and the logits node.
fn gated_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    state: &ModelState,
    bound: &Bound,
    batch: &GraphBatch,
    input: Var,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, Var, Var)> {
    let p = state.score_var(tape, bound, batch, input)?;
    let gates = relaxed_gate_var(tape, p, gate_noise(&batch.reverse, rng), cfg.tau);
    let down = tape.mul(gates, input);
    let logits = state.logits_var(tape, bound, batch, down)?;
    let ce = tape.cross_entropy(logits, batch.labels.clone());
    let kl = per_graph_kl(tape, batch, p, cfg.r);
    let kl = tape.scale(kl, cfg.beta);
    Ok((tape.add(ce, kl), logits, p))
}

/// Deterministic unrolled reflection on the tape: masks `Z(1..=k)`.
fn unrolled_masks(tape: &mut Tape, state: &ModelState, bound: &Bound, batch: &GraphBatch, k: usize) -> Result<Vec<Var>> {
    let mut prev = tape.column(vec![1.0; batch.num_edges()]);
    let mut masks = Vec::with_capacity(k);
    for _ in 0..k {
        let p = state.score_var(tape, bound, batch, prev)?;
        let z = tape.mul(p, prev);
        let z = tape.clamp(z, 0.0, 1.0);
        masks.push(z);
        prev = z;
    }
    Ok(masks)
}

fn per_graph_consistency(tape: &mut Tape, batch: &GraphBatch, masks: &[Var]) -> Var {
    let k = masks.len();
    let canonical = tape.column(batch.canonical.clone());
    let mut total: Option<Var> = None;
    for a in 0..k {
        for b in (a + 1)..k {
            let d = tape.sub(masks[a], masks[b]);
            let d = tape.abs(d);
            let d = tape.mul(d, canonical);
            total = Some(match total {
                Some(t) => tape.add(t, d),
                None => d,
            });
        }
    }
    let total = total.expect("k >= 2");
    let per_graph = tape.segment_sum(total, batch.edge_graph.clone(), batch.num_graphs);
    tape.scale(per_graph, 2.0 / (k * (k - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Base,
    FinetuneConsistency,
    FinetuneRaw,
}

fn batch_loss<R: Rng + ?Sized>(
    graphs: &[&GraphInstance],
    state: &ModelState,
    cfg: &TrainConfig,
    objective: Objective,
    rng: &mut R,
) -> Result<LossOutput> {
    let shapes = state.param_shapes();
    let mut grads: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let total = graphs.len() as f64;
    for (chunk_index, chunk) in graphs.chunks(MICRO_BATCH).enumerate() {
        let batch = GraphBatch::new(chunk)?;
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape);
        let (per_graph, logits) = match objective {
            Objective::Base => {
                let ones = tape.column(vec![1.0; batch.num_edges()]);
                let (l, logits, _) = gated_objective(&mut tape, state, &bound, &batch, ones, cfg, rng)?;
                (l, logits)
            }
            Objective::FinetuneConsistency => {
                let masks = unrolled_masks(&mut tape, state, &bound, &batch, cfg.k)?;
                let con = per_graph_consistency(&mut tape, &batch, &masks);
                let last = *masks.last().expect("k >= 2");
                let logits = state.logits_var(&mut tape, &bound, &batch, last)?;
                let ce = tape.cross_entropy(logits, batch.labels.clone());
                (tape.add(con, ce), logits)
            }
            Objective::FinetuneRaw => {
                let mut prev = tape.column(vec![1.0; batch.num_edges()]);
                let mut sum: Option<Var> = None;
                let mut logits = None;
                for _ in 0..cfg.k {
                    let (l, lg, p) = gated_objective(&mut tape, state, &bound, &batch, prev, cfg, rng)?;
                    sum = Some(match sum {
                        Some(s) => tape.add(s, l),
                        None => l,
                    });
                    logits = Some(lg);
                    let z = tape.mul(p, prev);
                    prev = tape.clamp(z, 0.0, 1.0);
                }
                let s = sum.expect("k >= 1");
                (tape.scale(s, 1.0 / cfg.k as f64), logits.expect("k >= 1"))
            }
        };
        if let Some(bad) = tape.value(per_graph).iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                graph_index: chunk_index * MICRO_BATCH + bad,
                message: format!("{:?} objective evaluated to {}", objective, tape.value(per_graph)[[bad, 0]]),
            });
        }
        correct += count_correct(tape.value(logits), &batch.labels);
        let mean = tape.mean(per_graph);
        let share = chunk.len() as f64 / total;
        let weighted = tape.scale(mean, share);
        loss += tape.scalar(weighted);
        let g = tape.backward(weighted).param_grads(shapes);
        for (acc, g) in grads.iter_mut().zip(g) {
            *acc += &g;
        }
    }
    Ok(LossOutput { loss, grads, correct })
}

/// Base objective on a batch: mean over graphs of cross-entropy on the gated
/// graph plus `beta * KL(p || r)`, with gradients for every parameter.
pub fn gsat_loss<R: Rng + ?Sized>(
    graphs: &[&GraphInstance],
    state: &ModelState,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    cfg.validate()?;
    batch_loss(graphs, state, cfg, Objective::Base, rng)
}

/// Reflection-aware objective on a batch (`cfg.mode` selects the variant).
pub fn finetune_loss<R: Rng + ?Sized>(
    graphs: &[&GraphInstance],
    state: &ModelState,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    cfg.validate_finetune()?;
    let objective = match cfg.mode {
        FinetuneMode::Consistency => Objective::FinetuneConsistency,
        FinetuneMode::Raw => Objective::FinetuneRaw,
    };
    batch_loss(graphs, state, cfg, objective, rng)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            lr,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// One line of a loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub curve: Vec<CurveRow>,
}

/// Columnar text `epoch split loss acc`.
pub fn curve_to_tsv(curve: &[CurveRow]) -> String {
    let mut out = String::from("epoch\tsplit\tloss\tacc\n");
    for row in curve {
        out.push_str(&format!("{}\t{}\t{:.9}\t{:.9}\n", row.epoch, row.split, row.loss, row.acc));
    }
    out
}

/// Deterministic (`z = p`) base objective and accuracy over a set of graphs.
pub fn evaluate_base(graphs: &[&GraphInstance], state: &ModelState, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if graphs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in graphs.chunks(MICRO_BATCH * 4) {
        let batch = GraphBatch::new(chunk)?;
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape);
        let ones = tape.column(vec![1.0; batch.num_edges()]);
        let p = state.score_var(&mut tape, &bound, &batch, ones)?;
        let logits = state.logits_var(&mut tape, &bound, &batch, p)?;
        let ce = tape.cross_entropy(logits, batch.labels.clone());
        let kl = per_graph_kl(&mut tape, &batch, p, cfg.r);
        let kl = tape.scale(kl, cfg.beta);
        let per_graph = tape.add(ce, kl);
        loss += tape.value(per_graph).sum();
        correct += count_correct(tape.value(logits), &batch.labels);
    }
    Ok((loss / graphs.len() as f64, correct as f64 / graphs.len() as f64))
}

fn rng_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(1);
    let mut gates = ChaCha8Rng::seed_from_u64(seed);
    gates.set_stream(2);
    (shuffle, gates)
}

/// Adam on the base objective over shuffled mini-batches. Keeps the parameters
/// of the epoch with the best validation accuracy (lower validation loss breaks
/// ties); without a validation split the final parameters are kept.
pub fn train_base(dataset: &Dataset, cfg: &TrainConfig, layers: usize, hidden: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::param("dataset has no training graphs"));
    }
    let valid: Vec<&GraphInstance> = dataset.split(Split::Valid);
    let hyper = cfg.model_hyper(layers, hidden);
    let mut state = ModelState::init(hyper, dataset.feature_dim, dataset.num_classes, cfg.seed)?;
    state.meta.stage = "base".into();
    let mut adam = Adam::new(state.param_shapes(), cfg.lr, cfg.adam);
    let (mut shuffle_rng, mut gate_rng) = rng_streams(cfg.seed);

    let mut curve = Vec::new();
    let mut best: Option<(f64, f64, ModelState)> = None;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&GraphInstance> = chunk.iter().map(|&i| &dataset.graphs[i]).collect();
            let mut out = batch_loss(&graphs, &state, cfg, Objective::Base, &mut gate_rng)
                .map_err(|e| remap_graph_index(e, chunk))?;
            epoch_loss += out.loss * chunk.len() as f64;
            epoch_correct += out.correct;
            clip_grad_norm(&mut out.grads, cfg.clip_norm);
            adam.step(&mut state.params, &out.grads);
        }
        let n = order.len() as f64;
        curve.push(CurveRow {
            epoch,
            split: Split::Train,
            loss: epoch_loss / n,
            acc: epoch_correct as f64 / n,
        });
        state.meta.epochs = epoch;
        if !valid.is_empty() {
            let (vloss, vacc) = evaluate_base(&valid, &state, cfg)?;
            curve.push(CurveRow {
                epoch,
                split: Split::Valid,
                loss: vloss,
                acc: vacc,
            });
            let better = match &best {
                None => true,
                Some((bacc, bloss, _)) => vacc > *bacc || (vacc == *bacc && vloss < *bloss),
            };
            if better {
                let mut snapshot = state.clone();
                snapshot.meta.best_epoch = Some(epoch);
                best = Some((vacc, vloss, snapshot));
            }
        }
    }
    let state = match best {
        Some((_, _, s)) => s,
        None => state,
    };
    Ok(TrainOutcome { state, curve })
}

fn remap_graph_index(e: Error, chunk: &[usize]) -> Error {
    match e {
        Error::Numerical { graph_index, message } => Error::Numerical {
            graph_index: chunk.get(graph_index).copied().unwrap_or(graph_index),
            message,
        },
        other => other,
    }
}

/// Fine-tunes `checkpoint` on the training split with the unrolled reflection
/// objective and returns the parameters after the last epoch.
pub fn finetune(dataset: &Dataset, checkpoint: &ModelState, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate_finetune()?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::param("dataset has no training graphs"));
    }
    let mut state = checkpoint.clone();
    state.meta.stage = match cfg.mode {
        FinetuneMode::Consistency => "finetune".into(),
        FinetuneMode::Raw => "finetune-raw".into(),
    };
    state.meta.best_epoch = None;
    let mut adam = Adam::new(state.param_shapes(), cfg.lr, cfg.adam);
    let (mut shuffle_rng, mut gate_rng) = rng_streams(cfg.seed);
    let objective = match cfg.mode {
        FinetuneMode::Consistency => Objective::FinetuneConsistency,
        FinetuneMode::Raw => Objective::FinetuneRaw,
    };

    let mut curve = Vec::new();
    let mut order = train_idx;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&GraphInstance> = chunk.iter().map(|&i| &dataset.graphs[i]).collect();
            let mut out = batch_loss(&graphs, &state, cfg, objective, &mut gate_rng)
                .map_err(|e| remap_graph_index(e, chunk))?;
            epoch_loss += out.loss * chunk.len() as f64;
            epoch_correct += out.correct;
            clip_grad_norm(&mut out.grads, cfg.clip_norm);
            adam.step(&mut state.params, &out.grads);
        }
        let n = order.len() as f64;
        curve.push(CurveRow {
            epoch,
            split: Split::Train,
            loss: epoch_loss / n,
            acc: epoch_correct as f64 / n,
        });
        state.meta.epochs += 1;
    }
    Ok(TrainOutcome { state, curve })
}
