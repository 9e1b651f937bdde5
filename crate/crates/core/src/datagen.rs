//! Spurious-Motif and BA-2Motifs generators.
//!
//! A Spurious-Motif graph joins a label-causal motif (Cycle, House, Crane) to a
//! base structure (Tree, Ladder, Wheel) whose type agrees with the motif with
//! probability `b`. Only motif edges carry ground truth. Every graph owns an
//! independent ChaCha stream keyed by `(seed, graph index)`, so output is a pure
//! function of the config.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate_graph, Dataset, GenMeta, GraphInstance, Split};

pub const NUM_SPMOTIF_CLASSES: usize = 3;

/// Test pools are drawn with base type independent of the motif.
pub const TEST_BIAS: f64 = 1.0 / 3.0;

pub const CYCLE: usize = 0;
pub const HOUSE: usize = 1;
pub const CRANE: usize = 2;

pub const TREE: usize = 0;
pub const LADDER: usize = 1;
pub const WHEEL: usize = 2;

const CYCLE_EDGES: [(usize, usize); 5] = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)];
/// Square 0-1-2-3 with roof apex 4 over the 2-3 side.
const HOUSE_EDGES: [(usize, usize); 6] = [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)];
/// Braced square body 0-1-2-3 (diagonal 0-2), neck 2-4-5, triangular head 5-6-7.
pub const CRANE_EDGES: [(usize, usize); 10] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (0, 2),
    (2, 4),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 5),
];
const CRANE_NODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spmotif,
    Ba2motifs,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spmotif" => Ok(DatasetKind::Spmotif),
            "ba2motifs" | "ba-2motifs" => Ok(DatasetKind::Ba2motifs),
            other => Err(Error::param(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// Graph counts per split; the test split absorbs rounding.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let valid = ((self.valid * n as f64).round() as usize).min(n - train);
        [train, valid, n - train - valid]
    }
}

/// Inclusive size ranges for the randomized structures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeConfig {
    pub tree_depth: (usize, usize),
    pub ladder_rungs: (usize, usize),
    pub wheel_rim: (usize, usize),
    pub ba_nodes: usize,
    pub ba_attach: usize,
}

impl Default for SizeConfig {
    fn default() -> Self {
        SizeConfig {
            tree_depth: (3, 4),
            ladder_rungs: (4, 8),
            wheel_rim: (6, 12),
            ba_nodes: 20,
            ba_attach: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub kind: DatasetKind,
    pub num_graphs: usize,
    /// Bias for train and valid pools; test pools always use [`TEST_BIAS`].
    pub bias: f64,
    pub splits: SplitFractions,
    pub seed: u64,
    pub sizes: SizeConfig,
    pub feature_dim: usize,
    /// Uniform random node features instead of constant ones.
    pub random_features: bool,
}

impl GenConfig {
    pub fn spmotif(num_graphs: usize, bias: f64, seed: u64) -> Self {
        GenConfig {
            kind: DatasetKind::Spmotif,
            num_graphs,
            bias,
            splits: SplitFractions::default(),
            seed,
            sizes: SizeConfig::default(),
            feature_dim: 4,
            random_features: false,
        }
    }

    pub fn ba2motifs(num_graphs: usize, seed: u64) -> Self {
        GenConfig {
            kind: DatasetKind::Ba2motifs,
            bias: 1.0,
            ..GenConfig::spmotif(num_graphs, 1.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_graphs == 0 {
            return Err(Error::param("num_graphs must be positive"));
        }
        check_bias(self.bias)?;
        let s = self.splits;
        if [s.train, s.valid, s.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (s.train + s.valid + s.test - 1.0).abs() > 1e-9
        {
            return Err(Error::param(format!(
                "split fractions {}/{}/{} must lie in [0,1] and sum to 1",
                s.train, s.valid, s.test
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::param("feature_dim must be positive"));
        }
        let z = &self.sizes;
        let ranges = [
            ("tree_depth", z.tree_depth, 1),
            ("ladder_rungs", z.ladder_rungs, 2),
            ("wheel_rim", z.wheel_rim, 3),
        ];
        for (name, (lo, hi), min) in ranges {
            if lo > hi || lo < min {
                return Err(Error::param(format!("{name} range ({lo}, {hi}) invalid (min {min})")));
            }
        }
        if z.ba_attach == 0 || z.ba_nodes <= z.ba_attach {
            return Err(Error::param("BA base needs ba_nodes > ba_attach >= 1"));
        }
        Ok(())
    }
}

fn check_bias(b: f64) -> Result<()> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::param(format!("bias b={b} outside (0, 1]")));
    }
    Ok(())
}

/// Undirected building block; every edge shares the same truth flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub truth: bool,
}

/// Per-graph RNG stream.
pub fn graph_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `S` with `P(S = C) = b` and `P(S = s) = (1 - b) / 2` for each `s != C`.
pub fn sample_base_type<R: Rng + ?Sized>(motif_c: usize, b: f64, rng: &mut R) -> Result<usize> {
    check_bias(b)?;
    if motif_c >= NUM_SPMOTIF_CLASSES {
        return Err(Error::param(format!("motif class {motif_c} outside 0..3")));
    }
    let u: f64 = rng.random();
    if u < b {
        return Ok(motif_c);
    }
    let others: Vec<usize> = (0..NUM_SPMOTIF_CLASSES).filter(|&s| s != motif_c).collect();
    let half = b + (1.0 - b) / 2.0;
    Ok(if u < half { others[0] } else { others[1] })
}

/// The motif topology of class `c` under a random node relabeling.
pub fn build_motif<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Result<Component> {
    let (n, edges): (usize, &[(usize, usize)]) = match c {
        CYCLE => (5, &CYCLE_EDGES),
        HOUSE => (5, &HOUSE_EDGES),
        CRANE => (CRANE_NODES, &CRANE_EDGES),
        other => return Err(Error::param(format!("motif class {other} outside 0..3"))),
    };
    Ok(relabel(n, edges, true, rng))
}

fn relabel<R: Rng + ?Sized>(n: usize, edges: &[(usize, usize)], truth: bool, rng: &mut R) -> Component {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Component {
        num_nodes: n,
        edges: edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
        truth,
    }
}

/// Complete binary tree of the given depth (`2^(depth+1) - 1` nodes).
pub fn tree(depth: usize) -> Component {
    let n = (1usize << (depth + 1)) - 1;
    Component {
        num_nodes: n,
        edges: (1..n).map(|v| ((v - 1) / 2, v)).collect(),
        truth: false,
    }
}

/// Ladder with `rungs` rungs: two rails of `rungs` nodes (`3 * rungs - 2` edges).
pub fn ladder(rungs: usize) -> Component {
    let mut edges = Vec::with_capacity(3 * rungs);
    for i in 0..rungs {
        edges.push((i, i + rungs));
        if i + 1 < rungs {
            edges.push((i, i + 1));
            edges.push((i + rungs, i + rungs + 1));
        }
    }
    Component {
        num_nodes: 2 * rungs,
        edges,
        truth: false,
    }
}

/// Hub 0 joined to a rim cycle of `rim` nodes (`2 * rim` edges).
pub fn wheel(rim: usize) -> Component {
    let mut edges = Vec::with_capacity(2 * rim);
    for i in 1..=rim {
        edges.push((0, i));
        edges.push((i, if i == rim { 1 } else { i + 1 }));
    }
    Component {
        num_nodes: rim + 1,
        edges,
        truth: false,
    }
}

/// Preferential-attachment graph: seeded with a clique on `attach + 1` nodes,
/// each later node links to `attach` distinct nodes chosen proportionally to degree.
pub fn barabasi_albert<R: Rng + ?Sized>(nodes: usize, attach: usize, rng: &mut R) -> Component {
    let mut edges = Vec::new();
    // each endpoint occurrence is one unit of degree
    let mut endpoints = Vec::new();
    let start = attach + 1;
    for u in 0..start {
        for v in (u + 1)..start {
            edges.push((u, v));
            endpoints.extend([u, v]);
        }
    }
    for v in start..nodes {
        let mut targets: Vec<usize> = Vec::with_capacity(attach);
        while targets.len() < attach {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
        }
    }
    Component {
        num_nodes: nodes,
        edges,
        truth: false,
    }
}

/// Base structure of type `s` with its size drawn from `sizes`.
pub fn build_base<R: Rng + ?Sized>(s: usize, sizes: &SizeConfig, rng: &mut R) -> Result<Component> {
    let draw = |rng: &mut R, (lo, hi): (usize, usize)| rng.random_range(lo..=hi);
    Ok(match s {
        TREE => tree(draw(rng, sizes.tree_depth)),
        LADDER => ladder(draw(rng, sizes.ladder_rungs)),
        WHEEL => wheel(draw(rng, sizes.wheel_rim)),
        other => return Err(Error::param(format!("base type {other} outside 0..3"))),
    })
}

/// Disjoint union of `base` and `motif` plus one bridge edge between a uniformly
/// chosen node of each. Base nodes come first.
pub fn assemble_graph<R: Rng + ?Sized>(
    base: &Component,
    motif: &Component,
    label: usize,
    meta: Option<GenMeta>,
    feature_dim: usize,
    random_features: bool,
    rng: &mut R,
) -> Result<GraphInstance> {
    if base.num_nodes == 0 || motif.num_nodes == 0 {
        return Err(Error::param("cannot assemble an empty component"));
    }
    let offset = base.num_nodes;
    let num_nodes = base.num_nodes + motif.num_nodes;
    let bridge = (
        rng.random_range(0..base.num_nodes),
        offset + rng.random_range(0..motif.num_nodes),
    );

    let undirected = base
        .edges
        .iter()
        .map(|&e| (e, base.truth))
        .chain(motif.edges.iter().map(|&(u, v)| ((u + offset, v + offset), motif.truth)))
        .chain(std::iter::once((bridge, false)));
    let mut edges = Vec::new();
    let mut edge_truth = Vec::new();
    for ((u, v), truth) in undirected {
        edges.extend([(u, v), (v, u)]);
        edge_truth.extend([truth, truth]);
    }

    let node_features = if random_features {
        Array2::from_shape_simple_fn((num_nodes, feature_dim), || rng.random::<f64>())
    } else {
        Array2::ones((num_nodes, feature_dim))
    };
    Ok(GraphInstance {
        num_nodes,
        edges,
        node_features,
        label,
        edge_truth,
        meta,
    })
}

fn split_plan(cfg: &GenConfig) -> Vec<(Split, usize)> {
    let [train, valid, test] = cfg.splits.counts(cfg.num_graphs);
    let mut plan = Vec::with_capacity(cfg.num_graphs);
    for (split, count) in [(Split::Train, train), (Split::Valid, valid), (Split::Test, test)] {
        plan.extend((0..count).map(|j| (split, j)));
    }
    plan
}

fn emit(graph: GraphInstance, index: usize) -> Result<GraphInstance> {
    let report = validate_graph(&graph);
    if !report.is_valid() {
        return Err(Error::param(format!("generated graph {index} invalid: {report}")));
    }
    Ok(graph)
}

/// Spurious-Motif dataset: train/valid drawn with `cfg.bias`, test with `b = 1/3`.
/// Motif classes cycle through `0, 1, 2` within each split.
pub fn generate_spmotif(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut dataset = Dataset::empty(cfg.feature_dim, NUM_SPMOTIF_CLASSES);
    for (index, (split, j)) in split_plan(cfg).into_iter().enumerate() {
        let mut rng = graph_rng(cfg.seed, index as u64);
        let motif_c = j % NUM_SPMOTIF_CLASSES;
        let bias = if split == Split::Test { TEST_BIAS } else { cfg.bias };
        let base_s = sample_base_type(motif_c, bias, &mut rng)?;
        let base = build_base(base_s, &cfg.sizes, &mut rng)?;
        let motif = build_motif(motif_c, &mut rng)?;
        let meta = GenMeta {
            base_type: base_s,
            motif_type: motif_c,
            bias,
            seed: cfg.seed,
        };
        let g = assemble_graph(
            &base,
            &motif,
            motif_c,
            Some(meta),
            cfg.feature_dim,
            cfg.random_features,
            &mut rng,
        )?;
        dataset.graphs.push(emit(g, index)?);
        dataset.splits.push(split);
    }
    Ok(dataset)
}

/// BA-2Motifs: preferential-attachment base plus a house (class 0) or a
/// 5-cycle (class 1).
pub fn generate_ba2motifs(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut dataset = Dataset::empty(cfg.feature_dim, 2);
    for (index, (split, j)) in split_plan(cfg).into_iter().enumerate() {
        let mut rng = graph_rng(cfg.seed, index as u64);
        let label = j % 2;
        let base = barabasi_albert(cfg.sizes.ba_nodes, cfg.sizes.ba_attach, &mut rng);
        let motif = build_motif(if label == 0 { HOUSE } else { CYCLE }, &mut rng)?;
        let g = assemble_graph(
            &base,
            &motif,
            label,
            None,
            cfg.feature_dim,
            cfg.random_features,
            &mut rng,
        )?;
        dataset.graphs.push(emit(g, index)?);
        dataset.splits.push(split);
    }
    Ok(dataset)
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    match cfg.kind {
        DatasetKind::Spmotif => generate_spmotif(cfg),
        DatasetKind::Ba2motifs => generate_ba2motifs(cfg),
    }
}

/// Class counts and the base-type by motif-type contingency table of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub num_graphs: usize,
    pub class_counts: Vec<usize>,
    /// `contingency[s][c]`: graphs with base type `s` and motif type `c`.
    pub contingency: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub splits: Vec<SplitStats>,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let splits = [Split::Train, Split::Valid, Split::Test]
        .into_iter()
        .map(|split| {
            let graphs = d.split(split);
            let mut class_counts = vec![0; d.num_classes];
            let mut contingency = vec![vec![0; NUM_SPMOTIF_CLASSES]; NUM_SPMOTIF_CLASSES];
            for g in &graphs {
                class_counts[g.label] += 1;
                if let Some(m) = &g.meta {
                    contingency[m.base_type][m.motif_type] += 1;
                }
            }
            SplitStats {
                split,
                num_graphs: graphs.len(),
                class_counts,
                contingency,
            }
        })
        .collect();
    DatasetStats { splits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::dataset_bytes;
    use std::collections::VecDeque;

    fn degrees(c: &Component) -> Vec<usize> {
        let mut d = vec![0; c.num_nodes];
        for &(u, v) in &c.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn triangles(c: &Component) -> usize {
        let has = |a: usize, b: usize| c.edges.contains(&(a, b)) || c.edges.contains(&(b, a));
        let n = c.num_nodes;
        let mut count = 0;
        for a in 0..n {
            for b in (a + 1)..n {
                for d in (b + 1)..n {
                    if has(a, b) && has(b, d) && has(a, d) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    fn edge_set(edges: &[(usize, usize)]) -> std::collections::BTreeSet<(usize, usize)> {
        edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect()
    }

    /// Brute force over all node permutations.
    fn isomorphic(n: usize, a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
        fn search(
            depth: usize,
            perm: &mut Vec<usize>,
            used: &mut Vec<bool>,
            a: &std::collections::BTreeSet<(usize, usize)>,
            b: &std::collections::BTreeSet<(usize, usize)>,
        ) -> bool {
            let n = used.len();
            if depth == n {
                return a
                    .iter()
                    .all(|&(u, v)| b.contains(&(perm[u].min(perm[v]), perm[u].max(perm[v]))));
            }
            for cand in 0..n {
                if !used[cand] {
                    used[cand] = true;
                    perm.push(cand);
                    if search(depth + 1, perm, used, a, b) {
                        return true;
                    }
                    perm.pop();
                    used[cand] = false;
                }
            }
            false
        }
        let (sa, sb) = (edge_set(a), edge_set(b));
        sa.len() == sb.len() && search(0, &mut Vec::new(), &mut vec![false; n], &sa, &sb)
    }

    #[test]
    fn base_type_distribution_closed_form() {
        // b = 0.9, C = 1 → (0.05, 0.90, 0.05)
        let mut rng = graph_rng(3, 0);
        let mut counts = [0usize; 3];
        let n = 200_000;
        for _ in 0..n {
            counts[sample_base_type(1, 0.9, &mut rng).unwrap()] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        for (f, expected) in freq.iter().zip([0.05, 0.90, 0.05]) {
            assert!((f - expected).abs() < 0.005, "{freq:?}");
        }
    }

    #[test]
    fn base_type_monte_carlo_at_b07() {
        let mut rng = graph_rng(11, 5);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[sample_base_type(0, 0.7, &mut rng).unwrap()] += 1;
        }
        for (c, expected) in counts.iter().zip([0.70, 0.15, 0.15]) {
            assert!((*c as f64 / 1e4 - expected).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn uniform_bias_gives_uniform_base() {
        let mut rng = graph_rng(1, 1);
        for c in 0..3 {
            let mut counts = [0usize; 3];
            for _ in 0..30_000 {
                counts[sample_base_type(c, TEST_BIAS, &mut rng).unwrap()] += 1;
            }
            for count in counts {
                assert!((count as f64 / 3e4 - 1.0 / 3.0).abs() < 0.015, "{counts:?}");
            }
        }
    }

    #[test]
    fn bias_out_of_range_is_rejected() {
        let mut rng = graph_rng(0, 0);
        assert!(sample_base_type(0, 0.0, &mut rng).is_err());
        assert!(sample_base_type(0, 1.2, &mut rng).is_err());
        assert!(sample_base_type(3, 0.5, &mut rng).is_err());
    }

    #[test]
    fn cycle_motif_topology() {
        let m = build_motif(CYCLE, &mut graph_rng(0, 0)).unwrap();
        assert_eq!(m.num_nodes, 5);
        assert_eq!(m.edges.len(), 5);
        assert!(degrees(&m).iter().all(|&d| d == 2));
        assert!(connected(5, &m.edges));
        assert!(m.truth);
    }

    #[test]
    fn house_motif_topology() {
        let m = build_motif(HOUSE, &mut graph_rng(0, 1)).unwrap();
        assert_eq!((m.num_nodes, m.edges.len()), (5, 6));
        let mut d = degrees(&m);
        d.sort_unstable();
        assert_eq!(d, vec![2, 2, 2, 3, 3]);
        assert_eq!(triangles(&m), 1);
    }

    #[test]
    fn crane_motif_is_the_canonical_shape() {
        for stream in 0..3 {
            let m = build_motif(CRANE, &mut graph_rng(9, stream)).unwrap();
            assert_eq!((m.num_nodes, m.edges.len()), (8, 10));
            assert!(isomorphic(8, &m.edges, &CRANE_EDGES));
        }
        // the house is not a subgraph-relabeling of the cycle
        assert!(!isomorphic(5, &CYCLE_EDGES, &HOUSE_EDGES[..5]));
    }

    #[test]
    fn tree_depth_three() {
        let t = tree(3);
        assert_eq!((t.num_nodes, t.edges.len()), (15, 14));
        assert!(connected(15, &t.edges));
        // connected with |E| = |V| - 1 means acyclic
        assert_eq!(t.edges.len(), t.num_nodes - 1);
    }

    #[test]
    fn ladder_closed_form() {
        for rungs in 2..10 {
            let l = ladder(rungs);
            assert_eq!(l.num_nodes, 2 * rungs);
            assert_eq!(l.edges.len(), 3 * rungs - 2);
            assert_eq!(edge_set(&l.edges).len(), l.edges.len());
            assert!(connected(l.num_nodes, &l.edges));
        }
        assert_eq!(ladder(6).edges.len(), 16);
    }

    #[test]
    fn wheel_closed_form() {
        let w = wheel(8);
        assert_eq!((w.num_nodes, w.edges.len()), (9, 16));
        let d = degrees(&w);
        assert_eq!(d[0], 8);
        assert!(d[1..].iter().all(|&x| x == 3));
    }

    #[test]
    fn ba_base_is_connected_with_expected_edges() {
        let c = barabasi_albert(20, 2, &mut graph_rng(4, 4));
        assert_eq!(c.edges.len(), 3 + 2 * 17);
        assert!(connected(20, &c.edges));
        assert_eq!(edge_set(&c.edges).len(), c.edges.len());
    }

    #[test]
    fn assembled_graph_invariants() {
        let cfg = GenConfig::spmotif(60, 0.7, 5);
        let d = generate_spmotif(&cfg).unwrap();
        for g in &d.graphs {
            let meta = g.meta.as_ref().unwrap();
            assert_eq!(g.label, meta.motif_type);
            assert!(validate_graph(g).is_valid());
            let undirected: Vec<(usize, usize)> =
                g.edges.iter().copied().filter(|(u, v)| u < v).collect();
            assert!(connected(g.num_nodes, &undirected));
            let motif_edges = [5, 6, 10][g.label];
            assert_eq!(g.num_truth_edges(), 2 * motif_edges);
            // truth edges are exactly the motif
            let motif_nodes = [5, 5, 8][g.label];
            let offset = g.num_nodes - motif_nodes;
            for (&(u, v), &t) in g.edges.iter().zip(&g.edge_truth) {
                assert_eq!(t, u >= offset && v >= offset);
            }
        }
    }

    #[test]
    fn generation_counts_and_test_bias() {
        let cfg = GenConfig::spmotif(300, 0.9, 1);
        let d = generate_spmotif(&cfg).unwrap();
        assert_eq!(d.len(), 300);
        for (g, s) in d.graphs.iter().zip(&d.splits) {
            let bias = g.meta.as_ref().unwrap().bias;
            if *s == Split::Test {
                assert_eq!(bias, TEST_BIAS);
            } else {
                assert_eq!(bias, 0.9);
            }
        }
        let stats = dataset_stats(&d);
        for s in &stats.splits {
            let max = *s.class_counts.iter().max().unwrap();
            let min = *s.class_counts.iter().min().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn empirical_match_rate_at_b05() {
        let d = generate_spmotif(&GenConfig::spmotif(300, 0.5, 2)).unwrap();
        let train = d.split(Split::Train);
        let matches = train
            .iter()
            .filter(|g| {
                let m = g.meta.as_ref().unwrap();
                m.base_type == m.motif_type
            })
            .count();
        let rate = matches as f64 / train.len() as f64;
        assert!((rate - 0.5).abs() <= 0.06, "{rate}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::spmotif(90, 0.7, 13);
        let a = dataset_bytes(&generate_spmotif(&cfg).unwrap()).unwrap();
        let b = dataset_bytes(&generate_spmotif(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = dataset_bytes(&generate_spmotif(&GenConfig { seed: 14, ..cfg }).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn ba2motifs_balance_and_truth() {
        let cfg = GenConfig {
            splits: SplitFractions {
                train: 1.0,
                valid: 0.0,
                test: 0.0,
            },
            ..GenConfig::ba2motifs(1000, 8)
        };
        let d = generate_ba2motifs(&cfg).unwrap();
        let class0 = d.graphs.iter().filter(|g| g.label == 0).count();
        assert_eq!((class0, d.len() - class0), (500, 500));
        for g in &d.graphs {
            assert_eq!(g.num_truth_edges(), if g.label == 0 { 12 } else { 10 });
            assert_eq!(g.num_nodes, 25);
        }
        let again = generate_ba2motifs(&cfg).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = GenConfig::spmotif(10, 0.5, 0);
        cfg.splits.test = 0.5;
        assert!(generate_spmotif(&cfg).is_err());
        assert!(generate_spmotif(&GenConfig::spmotif(0, 0.5, 0)).is_err());
        assert!(generate_spmotif(&GenConfig::spmotif(10, 0.0, 0)).is_err());
    }
}
