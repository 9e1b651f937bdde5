//! Trains a base model on Spurious-Motif and prints accuracy, edge AUC and the
//! mean scores of motif and non-motif edges at every reflection iteration.
//!
//! cargo run --release --example reflection_sweep -- [graphs] [epochs] [bias] [seed]

use std::time::Instant;

use sreflect::datagen::{generate_spmotif, GenConfig};
use sreflect::graph::{GraphInstance, Split, UpdateMode};
use sreflect::metrics::{accuracy, split_edge_auc};
use sreflect::reflection::{reflect_batch, trajectory_of};
use sreflect::training::{train_base, TrainConfig};

const DEPTH: usize = 8;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .map_or(default, |v| v.parse().unwrap_or_else(|_| panic!("bad argument {i}: {v}")))
}

fn main() {
    sreflect::tune_allocator();
    let (graphs, epochs, bias, seed) = (arg(1, 2000), arg(2, 20), arg(3, 0.9), arg(4, 0));
    let data = generate_spmotif(&GenConfig {
        random_features: true,
        ..GenConfig::spmotif(graphs, bias, seed)
    })
    .expect("dataset");
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::base()
    };
    let start = Instant::now();
    let out = train_base(&data, &cfg, 2, 64).expect("training");
    println!("trained in {:.1}s, best epoch {:?}", start.elapsed().as_secs_f64(), out.state.meta.best_epoch);

    let test: Vec<&GraphInstance> = data.split(Split::Test);
    let labels: Vec<usize> = test.iter().map(|g| g.label).collect();
    for mode in [UpdateMode::Accumulate, UpdateMode::Replace] {
        let deep = reflect_batch(&test, &out.state, DEPTH, mode).expect("reflection");
        let traj = trajectory_of(&test, &deep).expect("trajectory");
        let rows = traj.aggregate();
        println!("{mode}\n  t  acc    auc    pos    neg");
        for t in 1..=DEPTH {
            let runs = reflect_batch(&test, &out.state, t, mode).expect("reflection");
            let preds: Vec<usize> = runs.iter().map(|r| r.prediction()).collect();
            let auc = split_edge_auc(&test, deep.iter().map(|r| r.sequence.masks[t].scores.as_slice())).expect("auc");
            println!(
                "  {t}  {:.3}  {auc:.3}  {:.3}  {:.3}",
                accuracy(&preds, &labels).expect("accuracy"),
                rows[t].pos_mean.unwrap_or(f64::NAN),
                rows[t].neg_mean.unwrap_or(f64::NAN),
            );
        }
    }
}
