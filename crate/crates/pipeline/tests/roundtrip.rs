use macmd_core::model::{MacmdConfig, MacmdModel};
use macmd_core::ParamStore;
use macmd_pipeline::checkpoint::Checkpoint;
use macmd_pipeline::dataset::{generate, Dataset, SyntheticSpec};
use macmd_pipeline::eval::{evaluate, evaluate_model, load_model};
use macmd_pipeline::train::{train, TrainConfig};

fn small_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { seed, epochs, batch_size: 2, channels: [16, 16, 32, 32], ..TrainConfig::default() }
}

#[test]
fn saved_checkpoint_evaluates_like_the_trained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    generate(&SyntheticSpec::new(4, 32, 3, 2), &dir).unwrap();
    let data = Dataset::load(&dir).unwrap();
    let ckpt = tmp.path().join("best.ck");
    let cfg = TrainConfig { checkpoint: Some(ckpt.clone()), ..small_config(1, 3) };
    let report = train(&cfg, &data, &mut std::io::sink()).unwrap();

    let mut best = report.best.clone();
    let in_memory = evaluate_model(&report.model, &mut best, &data).unwrap();
    let from_disk = evaluate(&ckpt, &dir, None).unwrap();
    assert_eq!(in_memory.aggregate, from_disk.aggregate);
    assert_eq!(in_memory.per_image, from_disk.per_image);
    assert_eq!(in_memory.to_tsv(), from_disk.to_tsv());

    let (model, store) = load_model(&ckpt).unwrap();
    assert_eq!(model.config(), report.model.config());
    for ((_, a), (_, b)) in store.iter().zip(report.best.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    generate(&SyntheticSpec::new(4, 32, 2, 5), tmp.path()).unwrap();
    let data = Dataset::load(tmp.path()).unwrap();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    let a = train(&small_config(3, 2), &data, &mut la).unwrap();
    let b = train(&small_config(3, 2), &data, &mut lb).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    assert_eq!(Checkpoint::from_store(&a.store).to_bytes().unwrap(), Checkpoint::from_store(&b.store).to_bytes().unwrap());
    let c = train(&small_config(4, 2), &data, &mut std::io::sink()).unwrap();
    assert_ne!(a.final_loss.to_bits(), c.final_loss.to_bits());
}

#[test]
fn random_model_evaluates_to_valid_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    generate(&SyntheticSpec::new(3, 32, 3, 8), tmp.path()).unwrap();
    let data = Dataset::load(tmp.path()).unwrap();
    let mut store = ParamStore::<f32>::new(11);
    let model = MacmdModel::new(&mut store, MacmdConfig::with_channels([16, 16, 32, 32], 3)).unwrap();
    let r = evaluate_model(&model, &mut store, &data).unwrap();
    assert_eq!(r.per_image.len(), 3);
    assert_eq!(r.aggregate.per_class.len(), 2);
    assert!((0.0..=1.0).contains(&r.aggregate.mean_dsc));
    assert!((0.0..=1.0).contains(&r.aggregate.accuracy));
    assert!(r.aggregate.per_class.iter().filter_map(|c| c.hd95).all(|d| d >= 0.0 && d.is_finite()));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut store = ParamStore::<f32>::new(2);
    MacmdModel::new(&mut store, MacmdConfig::with_channels([16, 16, 32, 32], 1)).unwrap();
    let bytes = Checkpoint::from_store(&store).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.infer_config().unwrap(), MacmdConfig::with_channels([16, 16, 32, 32], 1));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
