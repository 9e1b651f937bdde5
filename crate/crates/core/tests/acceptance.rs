//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 1, 4, 5 and 11 run with the default test command. The others need
//! full-size checkpoints (six models, 6,000 training graphs each) and are ignored
//! unless requested:
//!
//! ```text
//! cargo test --release -p sreflect-core --test acceptance -- --include-ignored --test-threads=1 --nocapture
//! ```
//!
//! Set `SREFLECT_ACCEPTANCE_CACHE=<dir>` to keep trained checkpoints between runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use sreflect::datagen::{generate_spmotif, GenConfig, SplitFractions, TEST_BIAS};
use sreflect::experiment::{run_experiment, ExperimentConfig};
use sreflect::graph::{apply_mask, Dataset, GraphInstance, MaskedGraph, Split, UpdateMode};
use sreflect::metrics::{accuracy, edge_auc, split_edge_auc};
use sreflect::model::{ModelHyper, ModelState};
use sreflect::reflection::{reflect_batch, track_scores, Reflection};
use sreflect::training::{
    consistency_loss, finetune, finetune_loss, gsat_loss, kl_bernoulli, train_base, FinetuneMode, TrainConfig,
};

const CACHE_ENV: &str = "SREFLECT_ACCEPTANCE_CACHE";
const NUM_GRAPHS: usize = 10_000;
const SEEDS_09: [u64; 4] = [0, 1, 2, 3];
const SEEDS_05: [u64; 2] = [10, 11];
const DEPTH: usize = 8;

fn report(criterion: usize, pass: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {criterion}: {} {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(pass, "criterion {criterion} failed: {}", detail.as_ref());
}

// ---------------------------------------------------------------- fixtures

struct Trained {
    bias: f64,
    seed: u64,
    dataset: Dataset,
    state: ModelState,
    train_secs: f64,
}

impl Trained {
    fn test(&self) -> Vec<&GraphInstance> {
        self.dataset.split(Split::Test)
    }
}

struct Suite {
    b09: Vec<Trained>,
    b05: Vec<Trained>,
}

fn cache_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os(CACHE_ENV)?);
    fs::create_dir_all(&dir).ok()?;
    Some(dir)
}

/// 6,000/2,000/2,000 graphs with uniform random node features. With constant
/// features the scorer can tell the label through the mask alone by dropping
/// every edge of the cycle motif.
fn dataset_config(bias: f64, seed: u64) -> GenConfig {
    GenConfig {
        random_features: true,
        ..GenConfig::spmotif(NUM_GRAPHS, bias, seed)
    }
}

fn train_one(bias: f64, seed: u64) -> Trained {
    let dataset = generate_spmotif(&dataset_config(bias, seed)).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::base()
    };
    let cached = cache_dir().map(|d| d.join(format!("base-b{bias}-s{seed}.json")));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        let state = ModelState::load(path).unwrap();
        let secs = fs::read_to_string(path.with_extension("secs")).unwrap_or_default();
        return Trained {
            bias,
            seed,
            dataset,
            state,
            train_secs: secs.trim().parse().unwrap_or(f64::NAN),
        };
    }
    let start = Instant::now();
    let state = train_base(&dataset, &cfg, 2, 64).unwrap().state;
    let train_secs = start.elapsed().as_secs_f64();
    if let Some(path) = cached {
        state.save(&path).unwrap();
        fs::write(path.with_extension("secs"), train_secs.to_string()).unwrap();
    }
    println!("  trained b={bias} seed={seed} in {train_secs:.0}s");
    Trained {
        bias,
        seed,
        dataset,
        state,
        train_secs,
    }
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        sreflect::tune_allocator();
        Suite {
            b09: SEEDS_09.iter().map(|&s| train_one(0.9, s)).collect(),
            b05: SEEDS_05.iter().map(|&s| train_one(0.5, s)).collect(),
        }
    })
}

/// Accuracy and pooled edge AUC of `Z(t)` for `t = 1..=DEPTH`.
struct Sweep {
    acc: Vec<f64>,
    auc: Vec<f64>,
}

fn sweep(run: &Trained, mode: UpdateMode) -> Sweep {
    let test = run.test();
    let labels: Vec<usize> = test.iter().map(|g| g.label).collect();
    let deep = reflect_batch(&test, &run.state, DEPTH, mode).unwrap();
    let mut acc = Vec::new();
    let mut auc = Vec::new();
    for t in 1..=DEPTH {
        let runs = reflect_batch(&test, &run.state, t, mode).unwrap();
        let preds: Vec<usize> = runs.iter().map(Reflection::prediction).collect();
        acc.push(accuracy(&preds, &labels).unwrap());
        auc.push(split_edge_auc(&test, deep.iter().map(|r| r.sequence.masks[t].scores.as_slice())).unwrap());
    }
    Sweep { acc, auc }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

// ---------------------------------------------------------------- oracles

fn oracle_consistency(masks: &[Vec<f64>]) -> f64 {
    let k = masks.len();
    let mut pairs = 0usize;
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a < b {
                pairs += 1;
                for e in 0..masks[a].len() {
                    total += (masks[a][e] - masks[b][e]).abs();
                }
            }
        }
    }
    total / pairs as f64
}

fn oracle_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

fn oracle_kl(p: f64, r: f64) -> f64 {
    p * (p / r).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - r)).ln()
}

#[test]
fn criterion_01_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_con: f64 = 0.0;
    for _ in 0..500 {
        let k = rng.random_range(2..=6);
        let width = rng.random_range(1..=100);
        let masks: Vec<Vec<f64>> = (0..k).map(|_| (0..width).map(|_| rng.random::<f64>()).collect()).collect();
        let views: Vec<&[f64]> = masks.iter().map(Vec::as_slice).collect();
        worst_con = worst_con.max((consistency_loss(&views).unwrap() - oracle_consistency(&masks)).abs());
    }
    let mut worst_auc: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..25u32)) / 24.0).collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        truth[0] = true;
        truth[1] = false;
        worst_auc = worst_auc.max((edge_auc(&scores, &truth).unwrap() - oracle_auc(&scores, &truth)).abs());
    }
    let mut worst_kl: f64 = 0.0;
    for _ in 0..500 {
        let r = rng.random_range(0.05..0.95);
        let p: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0.01..0.99)).collect();
        let expected = p.iter().map(|&x| oracle_kl(x, r)).sum::<f64>() / p.len() as f64;
        worst_kl = worst_kl.max((kl_bernoulli(&p, r).unwrap() - expected).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst_con <= 1e-9 && worst_auc <= 1e-9 && worst_kl <= 1e-6 && secs < 60.0,
        format!("max |err| consistency {worst_con:.2e}, auc {worst_auc:.2e}, kl {worst_kl:.2e}; {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- gradients

fn toy_graph() -> GraphInstance {
    // house motif on 0..5, path base on 5..10, one bridge
    let pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4), (5, 6), (6, 7), (7, 8), (8, 9), (4, 5)];
    let mut edges = Vec::new();
    for &(u, v) in &pairs {
        edges.extend([(u, v), (v, u)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    GraphInstance {
        num_nodes: 10,
        edge_truth: edges.iter().map(|&(u, v)| u < 5 && v < 5).collect(),
        edges,
        node_features: Array2::from_shape_simple_fn((10, 3), || rng.random_range(-1.0..1.0)),
        label: 1,
        meta: None,
    }
}

fn toy_state() -> ModelState {
    let hyper = ModelHyper {
        hidden: 5,
        ..ModelHyper::default()
    };
    let mut s = ModelState::init(hyper, 3, 3, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in s.params.iter_mut() {
        p.mapv_inplace(|x| x + rng.random_range(-0.4..0.4));
    }
    s
}

/// Norm-wise relative error between analytic and central-difference gradients.
fn gradient_error(loss: &dyn Fn(&ModelState) -> sreflect::training::LossOutput) -> f64 {
    let state = toy_state();
    let analytic = loss(&state).grads;
    let h = 1e-4;
    let (mut diff, mut norm) = (0.0, 0.0);
    for pi in 0..state.params.len() {
        for idx in ndarray::indices(state.params[pi].dim()) {
            let mut up = state.clone();
            up.params[pi][idx] += h;
            let mut down = state.clone();
            down.params[pi][idx] -= h;
            let fd = (loss(&up).loss - loss(&down).loss) / (2.0 * h);
            diff += (fd - analytic[pi][idx]).powi(2);
            norm += fd * fd;
        }
    }
    (diff / norm).sqrt()
}

#[test]
fn criterion_04_gradient_checks() {
    let g = toy_graph();
    let base = TrainConfig::base();
    let base_err = gradient_error(&|s| gsat_loss(&[&g], s, &base, &mut ChaCha8Rng::seed_from_u64(2)).unwrap());
    let mut errors = vec![("gsat", base_err)];
    for (mode, k) in [(FinetuneMode::Consistency, 2), (FinetuneMode::Consistency, 3), (FinetuneMode::Raw, 2)] {
        let cfg = TrainConfig {
            k,
            mode,
            ..TrainConfig::finetune()
        };
        let err = gradient_error(&|s| finetune_loss(&[&g], s, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap());
        errors.push((if mode == FinetuneMode::Raw { "raw" } else { "consistency" }, err));
    }
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    report(4, errors.iter().all(|(_, e)| *e <= 1e-3), format!("relative errors: {}", detail.join(", ")));
}

// ---------------------------------------------------------------- generator

/// Upper 1% point of the chi-square distribution with 6 degrees of freedom.
const CHI2_6_99: f64 = 16.8119;

#[test]
fn criterion_05_generator_fidelity() {
    let mut lines = Vec::new();
    let mut pass = true;
    for b in [0.5, 0.7, 0.9] {
        let cfg = GenConfig {
            splits: SplitFractions {
                train: 1.0,
                valid: 0.0,
                test: 0.0,
            },
            ..GenConfig::spmotif(5000, b, 17)
        };
        let d = generate_spmotif(&cfg).unwrap();
        let mut counts = [[0usize; 3]; 3];
        for g in &d.graphs {
            let m = g.meta.as_ref().unwrap();
            counts[m.motif_type][m.base_type] += 1;
        }
        let mut chi2 = 0.0;
        for (c, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            for (s, &observed) in row.iter().enumerate() {
                let p = if s == c { b } else { (1.0 - b) / 2.0 };
                let expected = p * n as f64;
                chi2 += (observed as f64 - expected).powi(2) / expected;
            }
        }
        pass &= chi2 < CHI2_6_99;
        lines.push(format!("b={b} chi2={chi2:.2}"));
    }
    let cfg = GenConfig {
        splits: SplitFractions {
            train: 0.0,
            valid: 0.0,
            test: 1.0,
        },
        ..GenConfig::spmotif(5000, 0.9, 18)
    };
    let d = generate_spmotif(&cfg).unwrap();
    let matched = d
        .graphs
        .iter()
        .filter(|g| g.meta.as_ref().is_some_and(|m| m.base_type == m.motif_type))
        .count() as f64
        / d.graphs.len() as f64;
    pass &= (matched - TEST_BIAS).abs() <= 0.02;
    lines.push(format!("test b={matched:.4}"));
    report(5, pass, format!("{} (critical {CHI2_6_99})", lines.join(", ")));
}

// ---------------------------------------------------------------- determinism

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
[dataset]
num_graphs = 90
bias = 0.9
seed = 4
tree_depth_min = 2
tree_depth_max = 3
ladder_rungs_min = 3
ladder_rungs_max = 4
wheel_rim_min = 5
wheel_rim_max = 6

[model]
hidden = 8

[train]
epochs = 4
batch_size = 16
seed = 4
finetune = true
finetune_epochs = 2
finetune_batch_size = 32

[reflect]
k = 3

[eval]
table_k = 2
"#,
    )
    .unwrap()
}

fn digests(dir: &std::path::Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        // wall-clock timings are kept out of the reproducible artifacts
        if name.contains("timing") {
            continue;
        }
        out.insert(name, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
    }
    out
}

#[test]
fn criterion_11_determinism() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let (da, db) = (digests(a.path()), digests(b.path()));
    let differing: Vec<&String> = da.keys().filter(|k| da.get(*k) != db.get(*k)).collect();
    report(
        11,
        da.len() >= 8 && da.keys().eq(db.keys()) && differing.is_empty(),
        format!("{} artifacts hashed, {} differ {differing:?}", da.len(), differing.len()),
    );
}

// ---------------------------------------------------------------- full-size checkpoints

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_02_monotonicity() {
    let s = suite();
    let start = Instant::now();
    let mut checked = 0;
    let mut violations = 0;
    for run in s.b09.iter().chain(&s.b05) {
        let test = run.test();
        for r in reflect_batch(&test, &run.state, DEPTH, UpdateMode::Accumulate).unwrap() {
            checked += 1;
            violations += usize::from(!r.sequence.is_monotone(1e-7));
        }
    }
    let train: f64 = s.b09.iter().chain(&s.b05).map(|r| r.train_secs).sum();
    let total = train + start.elapsed().as_secs_f64();
    report(
        2,
        violations == 0 && total <= 1800.0,
        format!("{violations} of {checked} test graphs non-monotone; {total:.0}s incl. training"),
    );
}

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_03_single_step_equivalence() {
    let s = suite();
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for run in s.b09.iter().chain(&s.b05) {
        let test = run.test();
        let refl = reflect_batch(&test, &run.state, 1, UpdateMode::Accumulate).unwrap();
        for (g, r) in test.iter().zip(&refl) {
            let p = run.state.score_edges(&MaskedGraph::unmasked(g)).unwrap().as_mask();
            let logits = run.state.predict(&apply_mask(g, &p).unwrap()).unwrap();
            for (a, b) in logits.iter().zip(&r.logits) {
                worst = worst.max((a - b).abs());
            }
            let direct = sreflect::training::argmax(logits.iter().copied());
            mismatched += usize::from(direct != r.prediction());
        }
    }
    report(3, worst <= 1e-6 && mismatched == 0, format!("max logit gap {worst:.2e}, {mismatched} label mismatches"));
}

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_06_learning_signal() {
    let s = suite();
    let mut pass = true;
    let mut lines = Vec::new();
    for run in &s.b09 {
        let sw = sweep(run, UpdateMode::Accumulate);
        let ok = sw.auc[0] >= 0.65 && sw.acc[0] >= 0.40 && run.train_secs <= 1800.0;
        pass &= ok;
        lines.push(format!(
            "seed {} auc {:.3} acc {:.3} {:.0}s",
            run.seed, sw.auc[0], sw.acc[0], run.train_secs
        ));
    }
    report(6, pass, lines.join("; "));
}

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_07_score_trajectories() {
    let run = &suite().b09[0];
    let traj = track_scores(&run.test(), &run.state, 3).unwrap();
    let rows = traj.aggregate();
    let neg: Vec<f64> = rows.iter().map(|r| r.neg_mean.unwrap()).collect();
    let pos: Vec<f64> = rows.iter().map(|r| r.pos_mean.unwrap()).collect();
    let decreasing = neg.windows(2).all(|w| w[1] < w[0]);
    let retained = pos[2..].iter().all(|&p| p >= 0.9 * pos[1]);
    report(
        7,
        decreasing && retained,
        format!("negative means {neg:.3?}, positive means {pos:.3?}"),
    );
}

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_08_reflection_auc_gain() {
    let s = suite();
    let mut floor_ok = true;
    let mut gains = 0;
    let mut lines = Vec::new();
    for run in &s.b09 {
        let sw = sweep(run, UpdateMode::Accumulate);
        let best = max(&sw.auc);
        floor_ok &= best >= sw.auc[0] - 0.01;
        gains += usize::from(best >= sw.auc[0] + 0.02);
        lines.push(format!("seed {} t1 {:.3} best {:.3}", run.seed, sw.auc[0], best));
    }
    report(8, floor_ok && gains >= 3, format!("{gains}/4 seeds gain >= 0.02; {}", lines.join("; ")));
}

fn mean_consistency(graphs: &[&GraphInstance], state: &ModelState) -> f64 {
    let runs = reflect_batch(graphs, state, 2, UpdateMode::Accumulate).unwrap();
    let mut total = 0.0;
    for (g, r) in graphs.iter().zip(&runs) {
        total += r.sequence.consistency_loss(&g.canonical_edges().unwrap()).unwrap();
    }
    total / graphs.len() as f64
}

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_09_finetune_consistency() {
    let run = &suite().b09[0];
    let cfg = TrainConfig {
        seed: run.seed,
        ..TrainConfig::finetune()
    };
    let tuned = finetune(&run.dataset, &run.state, &cfg).unwrap().state;
    let held_out = run.dataset.split(Split::Valid);
    let before = mean_consistency(&held_out, &run.state);
    let after = mean_consistency(&held_out, &tuned);
    let test = run.test();
    let auc = |s: &ModelState| {
        let r = reflect_batch(&test, s, 2, UpdateMode::Accumulate).unwrap();
        split_edge_auc(&test, r.iter().map(|x| x.sequence.masks[2].scores.as_slice())).unwrap()
    };
    let (auc_before, auc_after) = (auc(&run.state), auc(&tuned));
    let drop = 1.0 - after / before;
    report(
        9,
        drop >= 0.30 && auc_after >= auc_before - 0.02,
        format!(
            "held-out consistency {before:.4} -> {after:.4} ({:.1}% lower); test auc at k=2 {auc_before:.3} -> {auc_after:.3}",
            100.0 * drop
        ),
    );
}

#[test]
#[ignore = "trains six full-size checkpoints"]
fn criterion_10_replace_ablation() {
    let s = suite();
    let mut holds = 0;
    let mut lines = Vec::new();
    for run in &s.b09 {
        let acc_gain = {
            let sw = sweep(run, UpdateMode::Accumulate);
            max(&sw.acc) - sw.acc[0]
        };
        let rep_gain = {
            let sw = sweep(run, UpdateMode::Replace);
            max(&sw.acc) - sw.acc[0]
        };
        holds += usize::from(rep_gain < acc_gain);
        lines.push(format!("seed {} accumulate +{acc_gain:.3} replace +{rep_gain:.3}", run.seed));
        assert_eq!(run.bias, 0.9);
    }
    report(10, holds >= 3, format!("{holds}/4 seeds; {}", lines.join("; ")));
}
