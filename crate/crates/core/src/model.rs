//! GIN-style encoders, the upstream edge scorer and the downstream classifier.
//!
//! The scorer and the classifier each own an encoder of identical shape. Edge
//! weights enter only through neighbor aggregation, so an all-ones weight vector
//! reproduces the unmasked graph exactly.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeMask, GraphInstance, MaskedGraph};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

const CHECKPOINT_FORMAT: &str = "sreflect-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    /// Message-passing layers per encoder.
    pub layers: usize,
    pub hidden: usize,
    /// Gate temperature.
    pub tau: f64,
    /// Gate prior `r`.
    pub prior_r: f64,
    /// Bottleneck weight.
    pub beta: f64,
    /// Scorer and classifier read one encoder instead of two.
    #[serde(default)]
    pub shared_encoder: bool,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            layers: 2,
            hidden: 64,
            tau: 1.0,
            prior_r: 0.7,
            beta: 1.0,
            shared_encoder: false,
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::param("layers and hidden must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param(format!("temperature tau={} must be positive", self.tau)));
        }
        if !(self.prior_r > 0.0 && self.prior_r < 1.0) {
            return Err(Error::param(format!("prior r={} outside (0,1)", self.prior_r)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::param(format!("beta={} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    Scorer,
    Classifier,
}

/// Provenance recorded alongside parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub stage: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Index of each parameter tensor in [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    layers: usize,
    scorer: usize,
    edge_head: usize,
    classifier: usize,
    class_head: usize,
}

// per-layer tensors: w1, b1, w2, b2, eps
const PER_LAYER: usize = 5;

impl Layout {
    fn new(hyper: &ModelHyper, feature_dim: usize, num_classes: usize) -> Self {
        let h = hyper.hidden;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: (usize, usize)| {
            names.push(name);
            shapes.push(shape);
        };
        let encoder = |prefix: &str, add: &mut dyn FnMut(String, (usize, usize))| {
            for l in 0..hyper.layers {
                let input = if l == 0 { feature_dim } else { h };
                add(format!("{prefix}.{l}.w1"), (input, h));
                add(format!("{prefix}.{l}.b1"), (1, h));
                add(format!("{prefix}.{l}.w2"), (h, h));
                add(format!("{prefix}.{l}.b2"), (1, h));
                add(format!("{prefix}.{l}.eps"), (1, 1));
            }
        };
        encoder("scorer", &mut add);
        add("edge_head.w_src".into(), (h, h));
        add("edge_head.w_dst".into(), (h, h));
        add("edge_head.b".into(), (1, h));
        add("edge_head.w_out".into(), (h, 1));
        add("edge_head.b_out".into(), (1, 1));
        if !hyper.shared_encoder {
            encoder("classifier", &mut add);
        }
        add("class_head.w".into(), (h, num_classes));
        add("class_head.b".into(), (1, num_classes));

        let enc = hyper.layers * PER_LAYER;
        let (classifier, class_head) = if hyper.shared_encoder {
            (0, enc + 5)
        } else {
            (enc + 5, 2 * enc + 5)
        };
        Layout {
            names,
            shapes,
            layers: hyper.layers,
            scorer: 0,
            edge_head: enc,
            classifier,
            class_head,
        }
    }

    fn encoder_base(&self, role: EncoderRole) -> usize {
        match role {
            EncoderRole::Scorer => self.scorer,
            EncoderRole::Classifier => self.classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hyper: ModelHyper,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub params: Vec<Array2<f64>>,
    pub meta: TrainingMeta,
    layout: Layout,
}

/// Per-directed-edge keep probabilities, symmetric over duplicates and inside
/// `[PROB_EPS, 1 - PROB_EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProbabilities {
    pub p: Vec<f64>,
}

impl EdgeProbabilities {
    /// Deterministic mask `z = p`.
    pub fn as_mask(&self) -> EdgeMask {
        EdgeMask { scores: self.p.clone() }
    }
}

/// Several graphs packed into one disjoint union for a single forward pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub features: Array2<f64>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub reverse: Rc<[usize]>,
    pub node_graph: Rc<[usize]>,
    pub edge_graph: Rc<[usize]>,
    pub labels: Rc<[usize]>,
    /// Start of each graph's edge range; has `num_graphs + 1` entries.
    pub edge_offsets: Vec<usize>,
    /// 1 on the first copy of every undirected edge, 0 on its duplicate.
    pub canonical: Vec<f64>,
    pub undirected_counts: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&GraphInstance]) -> Result<Self> {
        let dim = graphs.first().map_or(0, |g| g.feature_dim());
        let num_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
        let num_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let mut features = Array2::zeros((num_nodes, dim));
        let (mut src, mut dst, mut reverse) = (
            Vec::with_capacity(num_edges),
            Vec::with_capacity(num_edges),
            Vec::with_capacity(num_edges),
        );
        let mut node_graph = Vec::with_capacity(num_nodes);
        let mut edge_graph = Vec::with_capacity(num_edges);
        let mut canonical = Vec::with_capacity(num_edges);
        let mut edge_offsets = vec![0];
        let mut undirected_counts = Vec::with_capacity(graphs.len());

        let mut node_offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_dim() != dim {
                return Err(Error::Dimension {
                    what: "node feature width within batch",
                    expected: dim,
                    got: g.feature_dim(),
                });
            }
            features
                .slice_mut(ndarray::s![node_offset..node_offset + g.num_nodes, ..])
                .assign(&g.node_features);
            let rev = g.reverse_index()?;
            let edge_offset = src.len();
            for (i, &(u, v)) in g.edges.iter().enumerate() {
                src.push(node_offset + u);
                dst.push(node_offset + v);
                reverse.push(edge_offset + rev[i]);
                edge_graph.push(gi);
                canonical.push(if i < rev[i] { 1.0 } else { 0.0 });
            }
            undirected_counts.push(g.num_edges() / 2);
            node_graph.extend(std::iter::repeat_n(gi, g.num_nodes));
            node_offset += g.num_nodes;
            edge_offsets.push(src.len());
        }
        Ok(GraphBatch {
            num_graphs: graphs.len(),
            num_nodes,
            features,
            src: src.into(),
            dst: dst.into(),
            reverse: reverse.into(),
            node_graph: node_graph.into(),
            edge_graph: edge_graph.into(),
            labels: graphs.iter().map(|g| g.label).collect::<Vec<_>>().into(),
            edge_offsets,
            canonical,
            undirected_counts,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Splits a per-edge vector of the whole batch back into per-graph vectors.
    pub fn split_edges(&self, values: &[f64]) -> Vec<Vec<f64>> {
        self.edge_offsets
            .windows(2)
            .map(|w| values[w[0]..w[1]].to_vec())
            .collect()
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl ModelState {
    /// Fresh parameters. Linear layers use `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// the scorer's output layer starts at zero so every initial probability is 0.5.
    pub fn init(hyper: ModelHyper, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if feature_dim == 0 || num_classes < 2 {
            return Err(Error::param("need feature_dim >= 1 and at least two classes"));
        }
        let layout = Layout::new(&hyper, feature_dim, num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, &(rows, cols))| {
                if name.ends_with(".eps") || name.starts_with("edge_head.w_out") || name == "edge_head.b_out" {
                    return Array2::zeros((rows, cols));
                }
                // biases share the fan-in of their weight matrix
                let fan_in = if rows == 1 { fan_in_of(name, &layout) } else { rows };
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
            })
            .collect();
        Ok(ModelState {
            hyper,
            feature_dim,
            num_classes,
            params,
            meta: TrainingMeta {
                stage: "init".into(),
                seed,
                ..TrainingMeta::default()
            },
            layout,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param_shapes(&self) -> &[(usize, usize)] {
        &self.layout.shapes
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect(),
        }
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        if batch.num_nodes > 0 && batch.features.ncols() != self.feature_dim {
            return Err(Error::Dimension {
                what: "node feature width",
                expected: self.feature_dim,
                got: batch.features.ncols(),
            });
        }
        Ok(())
    }

    /// Node embeddings after `layers` rounds of
    /// `h_v <- relu(MLP((1 + eps) h_v + sum_u w_uv h_u))`.
    pub fn encode_var(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        role: EncoderRole,
        batch: &GraphBatch,
        weights: Var,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let base = self.layout.encoder_base(role);
        let mut h = tape.constant(batch.features.clone());
        for l in 0..self.layout.layers {
            let p = &bound.vars[base + l * PER_LAYER..base + (l + 1) * PER_LAYER];
            let agg = tape.gin_aggregate(h, weights, p[4], batch.src.clone(), batch.dst.clone());
            let z = tape.matmul(agg, p[0]);
            let z = tape.add_row(z, p[1]);
            let z = tape.relu(z);
            let z = tape.matmul(z, p[2]);
            let z = tape.add_row(z, p[3]);
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Keep probabilities from the scorer's node embeddings: a hidden layer over
    /// the concatenated endpoint embeddings, a logistic output, duplicate averaging
    /// and clamping into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn edge_probs_var(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, h: Var) -> Var {
        let p = &bound.vars[self.layout.edge_head..self.layout.edge_head + 5];
        // W [h_u; h_v] == W_src h_u + W_dst h_v, projected once per node
        let from = tape.matmul(h, p[0]);
        let to = tape.matmul(h, p[1]);
        let from = tape.gather(from, batch.src.clone());
        let to = tape.gather(to, batch.dst.clone());
        let hidden = tape.add(from, to);
        let hidden = tape.add_row(hidden, p[2]);
        let hidden = tape.relu(hidden);
        let logit = tape.matmul(hidden, p[3]);
        let logit = tape.add_row(logit, p[4]);
        let prob = tape.sigmoid(logit);
        let prob = tape.pair_average(prob, batch.reverse.clone());
        tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Upstream network on a weighted batch.
    pub fn score_var(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, weights: Var) -> Result<Var> {
        let h = self.encode_var(tape, bound, EncoderRole::Scorer, batch, weights)?;
        Ok(self.edge_probs_var(tape, bound, batch, h))
    }

    /// Downstream network on a weighted batch: mean pooling then a linear head.
    pub fn logits_var(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, weights: Var) -> Result<Var> {
        let h = self.encode_var(tape, bound, EncoderRole::Classifier, batch, weights)?;
        let pooled = tape.segment_mean(h, batch.node_graph.clone(), batch.num_graphs);
        let p = &bound.vars[self.layout.class_head..self.layout.class_head + 2];
        let out = tape.matmul(pooled, p[0]);
        Ok(tape.add_row(out, p[1]))
    }

    fn weights_checked(&self, batch: &GraphBatch, weights: &[f64]) -> Result<Array2<f64>> {
        if weights.len() != batch.num_edges() {
            return Err(Error::Dimension {
                what: "edge weights",
                expected: batch.num_edges(),
                got: weights.len(),
            });
        }
        Ok(Array2::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("column"))
    }

    /// Scorer probabilities for every directed edge of the batch.
    pub fn score_batch(&self, batch: &GraphBatch, weights: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let w = tape.constant(self.weights_checked(batch, weights)?);
        let p = self.score_var(&mut tape, &bound, batch, w)?;
        Ok(tape.value(p).iter().copied().collect())
    }

    /// Class logits, one row per graph of the batch.
    pub fn logits_batch(&self, batch: &GraphBatch, weights: &[f64]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let w = tape.constant(self.weights_checked(batch, weights)?);
        let out = self.logits_var(&mut tape, &bound, batch, w)?;
        Ok(tape.value(out).clone())
    }

    /// Node embeddings of one masked graph under the chosen encoder.
    pub fn encode_nodes(&self, role: EncoderRole, masked: &MaskedGraph) -> Result<Array2<f64>> {
        let batch = GraphBatch::new(&[masked.graph])?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let w = tape.constant(self.weights_checked(&batch, &masked.weights)?);
        let h = self.encode_var(&mut tape, &bound, role, &batch, w)?;
        Ok(tape.value(h).clone())
    }

    /// Upstream scorer `F` evaluated on an (already masked) graph.
    pub fn score_edges(&self, masked: &MaskedGraph) -> Result<EdgeProbabilities> {
        let batch = GraphBatch::new(&[masked.graph])?;
        Ok(EdgeProbabilities {
            p: self.score_batch(&batch, &masked.weights)?,
        })
    }

    /// Downstream classifier `D`: one logit per class.
    pub fn predict(&self, masked: &MaskedGraph) -> Result<Vec<f64>> {
        let batch = GraphBatch::new(&[masked.graph])?;
        Ok(self.logits_batch(&batch, &masked.weights)?.iter().copied().collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_file())?;
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    /// Canonical serialized form; equal bytes iff equal states.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.to_file())?)
    }

    fn to_file(&self) -> CheckpointFile {
        CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: self.hyper.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            meta: self.meta.clone(),
            tensors: self
                .layout
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| TensorRecord {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        }
    }

    fn from_file(file: CheckpointFile) -> Result<Self> {
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        file.hyper.validate()?;
        let layout = Layout::new(&file.hyper, file.feature_dim, file.num_classes);
        if file.tensors.len() != layout.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.names.len(),
                file.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(file.tensors.len());
        for (record, (name, &shape)) in file.tensors.into_iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &record.name != name || (record.shape[0], record.shape[1]) != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    record.name, record.shape
                )));
            }
            let t = Array2::from_shape_vec(shape, record.data)
                .map_err(|_| Error::Checkpoint(format!("tensor `{name}` has wrong element count")))?;
            params.push(t);
        }
        Ok(ModelState {
            hyper: file.hyper,
            feature_dim: file.feature_dim,
            num_classes: file.num_classes,
            params,
            meta: file.meta,
            layout,
        })
    }
}

fn fan_in_of(bias_name: &str, layout: &Layout) -> usize {
    let weight = match bias_name.rsplit_once('.') {
        Some((prefix, "b1")) => format!("{prefix}.w1"),
        Some((prefix, "b2")) => format!("{prefix}.w2"),
        Some(("edge_head", "b")) => "edge_head.w_src".to_string(),
        Some(("class_head", "b")) => "class_head.w".to_string(),
        _ => return 1,
    };
    let i = layout.names.iter().position(|n| *n == weight).expect("weight for bias");
    // the edge head sees both endpoint projections
    if bias_name == "edge_head.b" {
        2 * layout.shapes[i].0
    } else {
        layout.shapes[i].0
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    hyper: ModelHyper,
    feature_dim: usize,
    num_classes: usize,
    meta: TrainingMeta,
    tensors: Vec<TensorRecord>,
}

/// Logistic noise `log u - log(1 - u)` per undirected edge, copied onto both duplicates.
pub fn gate_noise<R: Rng + ?Sized>(reverse: &[usize], rng: &mut R) -> Vec<f64> {
    let mut noise = vec![0.0; reverse.len()];
    for i in 0..reverse.len() {
        let j = reverse[i];
        if i < j {
            let u: f64 = rng.random_range(1e-10..1.0 - 1e-10);
            let n = u.ln() - (1.0 - u).ln();
            noise[i] = n;
            noise[j] = n;
        }
    }
    noise
}

/// Relaxed Bernoulli gate `sigmoid((logit p + noise) / tau)` given precomputed noise.
pub fn relaxed_gate(p: f64, noise: f64, tau: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let x = (p.ln() - (1.0 - p).ln() + noise) / tau;
    1.0 / (1.0 + (-x).exp())
}

/// Draws relaxed Bernoulli gates with noise shared across duplicate edges.
pub fn sample_gates<R: Rng + ?Sized>(
    p: &EdgeProbabilities,
    reverse: &[usize],
    tau: f64,
    rng: &mut R,
) -> Result<EdgeMask> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature tau={tau} must be positive")));
    }
    if reverse.len() != p.p.len() {
        return Err(Error::Dimension {
            what: "reverse edge index",
            expected: p.p.len(),
            got: reverse.len(),
        });
    }
    let noise = gate_noise(reverse, rng);
    let mut mask = EdgeMask {
        scores: p.p.iter().zip(&noise).map(|(&p, &n)| relaxed_gate(p, n, tau)).collect(),
    };
    mask.clamp();
    Ok(mask)
}

/// Differentiable version of [`relaxed_gate`] on the tape.
pub fn relaxed_gate_var(tape: &mut Tape, p: Var, noise: Vec<f64>, tau: f64) -> Var {
    let logit = tape.logit(p, PROB_EPS);
    let noise = tape.column(noise);
    let x = tape.add(logit, noise);
    let x = tape.scale(x, 1.0 / tau);
    tape.sigmoid(x)
}
