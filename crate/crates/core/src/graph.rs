//! Graph, mask and dataset value types.
//!
//! Undirected graphs are stored with both directed duplicates `(u, v)` and
//! `(v, u)`. Every per-edge quantity (ground truth, mask scores, edge
//! probabilities) is indexed by directed edge position and kept equal on the
//! two duplicates.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the `[0, 1]` range and on duplicate agreement after float arithmetic.
pub const MASK_TOLERANCE: f64 = 1e-7;

/// Provenance of a synthetic graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    /// Base structure type `S`.
    pub base_type: usize,
    /// Motif type `C`.
    pub motif_type: usize,
    /// Bias `b` the base type was drawn with.
    pub bias: f64,
    /// Seed of the generator run that produced the graph.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    pub num_nodes: usize,
    /// Directed edges; each undirected edge appears as both `(u, v)` and `(v, u)`.
    pub edges: Vec<(usize, usize)>,
    /// One row per node.
    pub node_features: Array2<f64>,
    pub label: usize,
    /// True iff the directed edge belongs to the ground-truth motif.
    pub edge_truth: Vec<bool>,
    pub meta: Option<GenMeta>,
}

impl GraphInstance {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    /// Position of the reverse duplicate of every directed edge.
    ///
    /// Fails if some edge has no duplicate; run [`validate_graph`] first for a
    /// full diagnosis.
    pub fn reverse_index(&self) -> Result<Vec<usize>> {
        let position: HashMap<(usize, usize), usize> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i))
            .collect();
        self.edges
            .iter()
            .map(|&(u, v)| {
                position
                    .get(&(v, u))
                    .copied()
                    .ok_or_else(|| Error::param(format!("edge ({u},{v}) has no reverse duplicate")))
            })
            .collect()
    }

    /// Positions of one representative per undirected edge (the first occurrence).
    pub fn canonical_edges(&self) -> Result<Vec<usize>> {
        let rev = self.reverse_index()?;
        Ok((0..self.edges.len()).filter(|&i| i < rev[i]).collect())
    }

    pub fn num_truth_edges(&self) -> usize {
        self.edge_truth.iter().filter(|&&t| t).count()
    }
}

/// One invariant violation found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingDuplicate { edge: (usize, usize) },
    IndexOutOfRange { edge: (usize, usize), num_nodes: usize },
    SelfLoop { node: usize },
    RepeatedEdge { edge: (usize, usize) },
    TruthAsymmetry { edge: (usize, usize) },
    TruthLength { expected: usize, got: usize },
    FeatureRows { expected: usize, got: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingDuplicate { edge: (u, v) } => {
                write!(f, "edge ({u},{v}) is missing its duplicate ({v},{u})")
            }
            Violation::IndexOutOfRange { edge: (u, v), num_nodes } => {
                write!(f, "edge ({u},{v}) references a node outside [0, {num_nodes})")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop on node {node}"),
            Violation::RepeatedEdge { edge: (u, v) } => write!(f, "directed edge ({u},{v}) repeated"),
            Violation::TruthAsymmetry { edge: (u, v) } => {
                write!(f, "edge_truth differs between ({u},{v}) and ({v},{u})")
            }
            Violation::TruthLength { expected, got } => {
                write!(f, "edge_truth has {got} entries, graph has {expected} edges")
            }
            Violation::FeatureRows { expected, got } => {
                write!(f, "node_features has {got} rows, graph has {expected} nodes")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Lists every structural invariant the graph breaks. Violations are data.
pub fn validate_graph(g: &GraphInstance) -> ValidationReport {
    let mut violations = Vec::new();
    if g.node_features.nrows() != g.num_nodes {
        violations.push(Violation::FeatureRows {
            expected: g.num_nodes,
            got: g.node_features.nrows(),
        });
    }
    let truth_ok = g.edge_truth.len() == g.edges.len();
    if !truth_ok {
        violations.push(Violation::TruthLength {
            expected: g.edges.len(),
            got: g.edge_truth.len(),
        });
    }

    let mut position: HashMap<(usize, usize), usize> = HashMap::with_capacity(g.edges.len());
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if u >= g.num_nodes || v >= g.num_nodes {
            violations.push(Violation::IndexOutOfRange {
                edge: (u, v),
                num_nodes: g.num_nodes,
            });
        }
        if u == v {
            violations.push(Violation::SelfLoop { node: u });
        }
        if position.insert((u, v), i).is_some() {
            violations.push(Violation::RepeatedEdge { edge: (u, v) });
        }
    }
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if u == v {
            continue;
        }
        match position.get(&(v, u)) {
            None => violations.push(Violation::MissingDuplicate { edge: (u, v) }),
            Some(&j) => {
                // report each asymmetric pair once
                if truth_ok && i < j && g.edge_truth[i] != g.edge_truth[j] {
                    violations.push(Violation::TruthAsymmetry { edge: (u, v) });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Per-directed-edge scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMask {
    pub scores: Vec<f64>,
}

impl EdgeMask {
    pub fn ones(num_edges: usize) -> Self {
        EdgeMask {
            scores: vec![1.0; num_edges],
        }
    }

    /// Builds a mask for `g`, clamping drift within tolerance and rejecting
    /// anything further outside `[0, 1]`.
    pub fn for_graph(g: &GraphInstance, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != g.num_edges() {
            return Err(Error::Dimension {
                what: "edge mask",
                expected: g.num_edges(),
                got: scores.len(),
            });
        }
        if let Some(bad) = scores
            .iter()
            .find(|s| !s.is_finite() || **s < -MASK_TOLERANCE || **s > 1.0 + MASK_TOLERANCE)
        {
            return Err(Error::param(format!("mask score {bad} outside [0,1]")));
        }
        let mut mask = EdgeMask { scores };
        mask.clamp();
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn clamp(&mut self) {
        for s in &mut self.scores {
            *s = s.clamp(0.0, 1.0);
        }
    }

    /// Replaces each score by the average over its duplicate pair.
    pub fn symmetrize(&mut self, reverse: &[usize]) {
        let scores = &mut self.scores;
        for i in 0..scores.len() {
            let j = reverse[i];
            if i < j {
                let avg = 0.5 * (scores[i] + scores[j]);
                scores[i] = avg;
                scores[j] = avg;
            }
        }
    }

    pub fn is_symmetric(&self, reverse: &[usize]) -> bool {
        self.scores
            .iter()
            .zip(reverse)
            .all(|(s, &j)| (s - self.scores[j]).abs() <= MASK_TOLERANCE)
    }

    pub fn in_unit_range(&self) -> bool {
        self.scores
            .iter()
            .all(|s| s.is_finite() && *s >= -MASK_TOLERANCE && *s <= 1.0 + MASK_TOLERANCE)
    }

    /// Elementwise product, clamped into `[0, 1]`.
    pub fn product(&self, other: &EdgeMask) -> Result<EdgeMask> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                what: "edge mask product",
                expected: self.len(),
                got: other.len(),
            });
        }
        let mut out = EdgeMask {
            scores: self.scores.iter().zip(&other.scores).map(|(a, b)| a * b).collect(),
        };
        out.clamp();
        Ok(out)
    }

    /// Scores at the given positions, typically [`GraphInstance::canonical_edges`].
    pub fn select(&self, positions: &[usize]) -> Vec<f64> {
        positions.iter().map(|&i| self.scores[i]).collect()
    }
}

/// How reflection combines a fresh score with the running mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// `Z(t) = F(G ⊙ Z(t-1)) · Z(t-1)`
    Accumulate,
    /// `Z(t) = F(G ⊙ Z(t-1))`
    Replace,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accumulate" => Ok(UpdateMode::Accumulate),
            "replace" => Ok(UpdateMode::Replace),
            other => Err(Error::param(format!("unknown update mode `{other}`"))),
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::Accumulate => "accumulate",
            UpdateMode::Replace => "replace",
        })
    }
}

/// Masks `Z(0), Z(1), …, Z(k)` of one reflection run. `Z(0)` is all ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSequence {
    pub masks: Vec<EdgeMask>,
    pub mode: UpdateMode,
}

impl MaskSequence {
    pub fn new(num_edges: usize, mode: UpdateMode) -> Self {
        MaskSequence {
            masks: vec![EdgeMask::ones(num_edges)],
            mode,
        }
    }

    /// Number of reflection steps taken (`k`).
    pub fn depth(&self) -> usize {
        self.masks.len().saturating_sub(1)
    }

    pub fn last(&self) -> &EdgeMask {
        self.masks.last().expect("mask sequence always holds Z(0)")
    }

    pub fn push(&mut self, mask: EdgeMask) {
        self.masks.push(mask);
    }

    /// `Z(t) <= Z(t-1) + tol` elementwise for every step.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.masks.windows(2).all(|w| {
            w[1].scores
                .iter()
                .zip(&w[0].scores)
                .all(|(now, before)| *now <= *before + tol)
        })
    }

    /// Consistency loss over `Z(1..=k)` on one copy of each undirected edge.
    pub fn consistency_loss(&self, canonical: &[usize]) -> Result<f64> {
        let reduced: Vec<Vec<f64>> = self.masks[1..].iter().map(|m| m.select(canonical)).collect();
        let views: Vec<&[f64]> = reduced.iter().map(Vec::as_slice).collect();
        crate::training::consistency_loss(&views)
    }
}

/// A graph paired with a per-directed-edge weight used during neighbor aggregation.
/// The underlying graph is borrowed and never modified.
#[derive(Debug, Clone)]
pub struct MaskedGraph<'a> {
    pub graph: &'a GraphInstance,
    pub weights: Vec<f64>,
}

impl<'a> MaskedGraph<'a> {
    pub fn unmasked(graph: &'a GraphInstance) -> Self {
        MaskedGraph {
            graph,
            weights: vec![1.0; graph.num_edges()],
        }
    }

    /// One sum-aggregation step with identity transform:
    /// `h'_v = (1 + eps) h_v + sum_{(u,v)} w_uv h_u`.
    pub fn aggregate(&self, h: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
        if h.nrows() != self.graph.num_nodes {
            return Err(Error::Dimension {
                what: "node state rows",
                expected: self.graph.num_nodes,
                got: h.nrows(),
            });
        }
        let mut out = h * (1.0 + eps);
        for (&(src, dst), &w) in self.graph.edges.iter().zip(&self.weights) {
            let contrib = &h.row(src) * w;
            let mut row = out.row_mut(dst);
            row += &contrib;
        }
        Ok(out)
    }
}

/// Pairs each directed edge of `g` with its mask weight.
pub fn apply_mask<'a>(g: &'a GraphInstance, z: &EdgeMask) -> Result<MaskedGraph<'a>> {
    if z.len() != g.num_edges() {
        return Err(Error::Dimension {
            what: "edge mask",
            expected: g.num_edges(),
            got: z.len(),
        });
    }
    Ok(MaskedGraph {
        graph: g,
        weights: z.scores.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<GraphInstance>,
    /// Split tag per graph, parallel to `graphs`.
    pub splits: Vec<Split>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn empty(feature_dim: usize, num_classes: usize) -> Self {
        Dataset {
            graphs: Vec::new(),
            splits: Vec::new(),
            feature_dim,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&GraphInstance> {
        self.graphs
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(g, _)| g)
            .collect()
    }

    /// Checks dataset-level invariants plus every graph's structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.graphs.len() {
            return Err(Error::Dimension {
                what: "split tags",
                expected: self.graphs.len(),
                got: self.splits.len(),
            });
        }
        for (i, g) in self.graphs.iter().enumerate() {
            if g.label >= self.num_classes {
                return Err(Error::param(format!(
                    "graph {i}: label {} outside {} classes",
                    g.label, self.num_classes
                )));
            }
            if g.feature_dim() != self.feature_dim {
                return Err(Error::param(format!(
                    "graph {i}: feature dim {} differs from dataset dim {}",
                    g.feature_dim(),
                    self.feature_dim
                )));
            }
            let report = validate_graph(g);
            if !report.is_valid() {
                return Err(Error::param(format!("graph {i}: {report}")));
            }
        }
        Ok(())
    }
}
