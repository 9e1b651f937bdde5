use sreflect::datagen::{generate, GenConfig};
use sreflect::graph::{Split, UpdateMode};
use sreflect::io::{read_dataset, write_dataset};
use sreflect::metrics::split_edge_auc;
use sreflect::reflection::reflect_batch;
use sreflect::training::{finetune, train_base, TrainConfig};

#[test]
fn generate_save_train_reflect() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let d = generate(&GenConfig::spmotif(150, 0.7, 1)).unwrap();
    write_dataset(&d, &path).unwrap();
    let d = read_dataset(&path).unwrap();

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::base()
    };
    let base = train_base(&d, &cfg, 2, 16).unwrap();
    assert_eq!(base.curve.iter().filter(|r| r.split == Split::Train).count(), 3);

    let test = d.split(Split::Test);
    let runs = reflect_batch(&test, &base.state, 4, UpdateMode::Accumulate).unwrap();
    for r in &runs {
        assert!(r.sequence.is_monotone(1e-7));
        assert_eq!(r.sequence.depth(), 4);
    }
    let auc = split_edge_auc(&test, runs.iter().map(|r| r.sequence.masks[1].scores.as_slice())).unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let tuned = finetune(
        &d,
        &base.state,
        &TrainConfig {
            epochs: 1,
            batch_size: 32,
            ..TrainConfig::finetune()
        },
    )
    .unwrap();
    assert_ne!(tuned.state.params, base.state.params);
    assert_eq!(tuned.state.param_shapes(), base.state.param_shapes());
}

#[test]
fn ba2motifs_pipeline_runs() {
    let d = generate(&GenConfig::ba2motifs(60, 3)).unwrap();
    assert_eq!(d.num_classes, 2);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::base()
    };
    let state = train_base(&d, &cfg, 2, 8).unwrap().state;
    let test = d.split(Split::Test);
    let runs = reflect_batch(&test, &state, 2, UpdateMode::Replace).unwrap();
    assert_eq!(runs.len(), test.len());
}
