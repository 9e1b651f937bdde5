//! Classification accuracy and explanation AUC.

use crate::error::{Error, Result};
use crate::graph::GraphInstance;

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::param("accuracy of an empty prediction list"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            what: "labels",
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Per-class accuracy; `None` for classes absent from `labels`.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y < num_classes {
            totals[y] += 1;
            hits[y] += usize::from(p == y);
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// `P(score_pos > score_neg) + 0.5 P(tie)` via mid-ranks (Mann-Whitney U).
pub fn edge_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension {
            what: "edge truth",
            expected: scores.len(),
            got: truth.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::param(format!("edge score {bad} is not a number")));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "edge AUC needs both classes, got {positives} positive and {negatives} negative edges"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&e| truth[e]).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Scores and truth of one copy per undirected edge, pooled across graphs.
pub fn pooled_edges<'a, I>(graphs: &[&GraphInstance], masks: I) -> Result<(Vec<f64>, Vec<bool>)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    let mut count = 0;
    for (g, m) in graphs.iter().zip(masks) {
        count += 1;
        if m.len() != g.num_edges() {
            return Err(Error::Dimension {
                what: "edge scores",
                expected: g.num_edges(),
                got: m.len(),
            });
        }
        for e in g.canonical_edges()? {
            scores.push(m[e]);
            truth.push(g.edge_truth[e]);
        }
    }
    if count != graphs.len() {
        return Err(Error::Dimension {
            what: "score vectors",
            expected: graphs.len(),
            got: count,
        });
    }
    Ok((scores, truth))
}

/// Edge AUC over a whole split, one copy per undirected edge.
pub fn split_edge_auc<'a, I>(graphs: &[&GraphInstance], masks: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (scores, truth) = pooled_edges(graphs, masks)?;
    edge_auc(&scores, &truth)
}

/// Mean of per-graph AUCs, skipping graphs with a single truth class.
pub fn per_graph_mean_auc<'a, I>(graphs: &[&GraphInstance], masks: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut total = 0.0;
    let mut used = 0;
    for (g, m) in graphs.iter().zip(masks) {
        let (s, t) = pooled_edges(&[*g], [m])?;
        if let Ok(a) = edge_auc(&s, &t) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("no graph has both edge classes".into()));
    }
    Ok(total / used as f64)
}
