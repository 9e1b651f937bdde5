//! Training-free self-reflection: re-score the masked graph and fold the new
//! scores into the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{apply_mask, EdgeMask, GraphInstance, MaskSequence, UpdateMode};
use crate::model::{GraphBatch, ModelState};
use crate::training::argmax;

/// Graphs per forward pass in [`reflect_batch`].
const CHUNK: usize = 512;

/// One reflection run on one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    /// `Z(0..=k)`.
    pub sequence: MaskSequence,
    /// Instantaneous scores `p~(1..=k)` before they are folded into the mask.
    pub proposals: Vec<EdgeMask>,
    /// Downstream logits on `G ⊙ Z(k)`.
    pub logits: Vec<f64>,
}

impl Reflection {
    pub fn prediction(&self) -> usize {
        argmax(self.logits.iter().copied())
    }
}

fn update(prev: &[f64], proposal: &[f64], mode: UpdateMode) -> EdgeMask {
    let scores = match mode {
        UpdateMode::Accumulate => prev.iter().zip(proposal).map(|(z, p)| (z * p).clamp(0.0, 1.0)).collect(),
        UpdateMode::Replace => proposal.to_vec(),
    };
    EdgeMask { scores }
}

fn check_depth(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::param("reflection depth k must be at least 1"));
    }
    Ok(())
}

/// `Z(0) = 1`; `p~(t) = F(G ⊙ Z(t-1))`; accumulate: `Z(t) = p~(t) · Z(t-1)`,
/// replace: `Z(t) = p~(t)`. Logits come from `D(G ⊙ Z(k))`.
pub fn reflect(g: &GraphInstance, state: &ModelState, k: usize, mode: UpdateMode) -> Result<Reflection> {
    check_depth(k)?;
    let mut sequence = MaskSequence::new(g.num_edges(), mode);
    let mut proposals = Vec::with_capacity(k);
    for _ in 0..k {
        let masked = apply_mask(g, sequence.last())?;
        let p = state.score_edges(&masked)?.as_mask();
        let next = update(&sequence.last().scores, &p.scores, mode);
        proposals.push(p);
        sequence.push(next);
    }
    let logits = state.predict(&apply_mask(g, sequence.last())?)?;
    Ok(Reflection {
        sequence,
        proposals,
        logits,
    })
}

/// [`reflect`] over many graphs with batched forward passes; same outputs.
pub fn reflect_batch(graphs: &[&GraphInstance], state: &ModelState, k: usize, mode: UpdateMode) -> Result<Vec<Reflection>> {
    check_depth(k)?;
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(CHUNK) {
        let batch = GraphBatch::new(chunk)?;
        let mut z = vec![1.0; batch.num_edges()];
        let mut masks = vec![z.clone()];
        let mut proposals = Vec::with_capacity(k);
        for _ in 0..k {
            let p = state.score_batch(&batch, &z)?;
            z = update(&z, &p, mode).scores;
            proposals.push(p);
            masks.push(z.clone());
        }
        let logits = state.logits_batch(&batch, &z)?;
        let split_masks: Vec<Vec<Vec<f64>>> = masks.iter().map(|m| batch.split_edges(m)).collect();
        let split_props: Vec<Vec<Vec<f64>>> = proposals.iter().map(|m| batch.split_edges(m)).collect();
        for gi in 0..chunk.len() {
            out.push(Reflection {
                sequence: MaskSequence {
                    masks: split_masks.iter().map(|m| EdgeMask { scores: m[gi].clone() }).collect(),
                    mode,
                },
                proposals: split_props.iter().map(|m| EdgeMask { scores: m[gi].clone() }).collect(),
                logits: logits.row(gi).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Mean accumulated score of positive and negative edges at one iteration.
/// `graph` is `None` on split-level rows, which pool edges over all graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub graph: Option<usize>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    /// Split-level rows in iteration order.
    pub fn aggregate(&self) -> Vec<&TrajectoryRow> {
        self.rows.iter().filter(|r| r.graph.is_none()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}"));
        let mut s = String::from("t\tgraph\tpos_mean\tneg_mean\n");
        for r in &self.rows {
            let graph = r.graph.map_or_else(|| "all".to_string(), |g| g.to_string());
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.t, graph, fmt(r.pos_mean), fmt(r.neg_mean)));
        }
        s
    }
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Positive/negative trajectories from existing reflection runs.
pub fn trajectory_of(graphs: &[&GraphInstance], runs: &[Reflection]) -> Result<Trajectory> {
    if graphs.len() != runs.len() {
        return Err(Error::Dimension {
            what: "reflection runs",
            expected: graphs.len(),
            got: runs.len(),
        });
    }
    let depth = runs.first().map_or(0, |r| r.sequence.depth());
    let mut rows = Vec::new();
    let canon: Vec<Vec<usize>> = graphs.iter().map(|g| g.canonical_edges()).collect::<Result<_>>()?;
    for t in 0..=depth {
        let (mut ps, mut pn, mut ns, mut nn) = (0.0, 0, 0.0, 0);
        for (gi, (g, run)) in graphs.iter().zip(runs).enumerate() {
            let z = &run.sequence.masks[t].scores;
            let (mut gps, mut gpn, mut gns, mut gnn) = (0.0, 0, 0.0, 0);
            for &e in &canon[gi] {
                if g.edge_truth[e] {
                    gps += z[e];
                    gpn += 1;
                } else {
                    gns += z[e];
                    gnn += 1;
                }
            }
            rows.push(TrajectoryRow {
                t,
                graph: Some(gi),
                pos_mean: mean(gps, gpn),
                neg_mean: mean(gns, gnn),
            });
            ps += gps;
            pn += gpn;
            ns += gns;
            nn += gnn;
        }
        rows.push(TrajectoryRow {
            t,
            graph: None,
            pos_mean: mean(ps, pn),
            neg_mean: mean(ns, nn),
        });
    }
    Ok(Trajectory { rows })
}

/// Accumulate-mode score trajectories for `t = 0..=k`.
pub fn track_scores(graphs: &[&GraphInstance], state: &ModelState, k: usize) -> Result<Trajectory> {
    let runs = reflect_batch(graphs, state, k, UpdateMode::Accumulate)?;
    trajectory_of(graphs, &runs)
}
