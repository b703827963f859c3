use permubench::data::{self, DatasetName};
use permubench::metrics::{self, argmax};
use permubench::models::{self, Architecture, ModelSpec, Network};
use permubench::trainer::{self, Selection, TrainConfig, TrainError};

fn quick_config(per_class: usize, epochs: usize) -> TrainConfig {
    TrainConfig { per_class, epochs, ..TrainConfig::default() }
}

#[test]
fn training_is_bit_identical_across_runs() {
    let ds = data::synthetic(DatasetName::BreastMnist, [40, 10, 10], 2).unwrap();
    let spec = ModelSpec::default_for(Architecture::ZachVit, 2);
    let cfg = quick_config(8, 2);
    let (a, la) = trainer::train(&spec, ds.training_splits(), &cfg, 3).unwrap();
    let (b, lb) = trainer::train(&spec, ds.training_splits(), &cfg, 3).unwrap();
    assert_eq!(la, lb);
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
    let (c, _) = trainer::train(&spec, ds.training_splits(), &cfg, 5).unwrap();
    assert_ne!(a.get("head.weight").unwrap().data(), c.get("head.weight").unwrap().data());
}

#[test]
fn separable_toy_data_is_fit_perfectly() {
    let ds = data::synthetic(DatasetName::BreastMnist, [40, 10, 10], 4).unwrap();
    let spec = ModelSpec::default_for(Architecture::ZachVit, 2);
    let cfg = TrainConfig { validate: false, ..quick_config(20, 23) };
    let (p, log) = trainer::train(&spec, ds.training_splits(), &cfg, 3).unwrap();
    assert_eq!(log.epochs.len(), 23);
    assert!(log.epochs[22].train_loss < log.epochs[0].train_loss);
    let train = data::fewshot_subset(&ds.training_splits(), 20, 3).unwrap();
    let logits = metrics::predict(&Network::new(&spec, &p), &train).unwrap();
    let pred: Vec<usize> = logits.chunks_exact(2).map(argmax).collect();
    assert_eq!(pred, train.labels());
}

#[test]
fn log_has_one_entry_per_epoch_and_best_val_selects_an_epoch() {
    let ds = data::synthetic(DatasetName::BreastMnist, [40, 10, 10], 5).unwrap();
    let spec = ModelSpec::default_for(Architecture::Abmil, 2);
    let cfg = TrainConfig { selection: Selection::BestVal, ..quick_config(6, 3) };
    let (_, log) = trainer::train(&spec, ds.training_splits(), &cfg, 7).unwrap();
    assert_eq!(log.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(log.epochs.iter().all(|e| e.val_metric.is_some()));
    assert!((1..=3).contains(&log.selected_epoch));
}

#[test]
fn divergence_reports_the_position() {
    let ds = data::synthetic(DatasetName::BreastMnist, [20, 10, 10], 6).unwrap();
    let spec = ModelSpec::default_for(Architecture::ZachVit, 2);
    let cfg = TrainConfig { lr: 1e30, validate: false, ..quick_config(4, 5) };
    match trainer::train(&spec, ds.training_splits(), &cfg, 3) {
        Err(TrainError::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l)),
    }
}

#[test]
fn init_seed_alone_fixes_the_starting_point() {
    let spec = ModelSpec::default_for(Architecture::TransMil, 2);
    assert_eq!(models::build(&spec, 11).unwrap(), models::build(&spec, 11).unwrap());
}
