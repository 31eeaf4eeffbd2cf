use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snn_core::data::IdxDataset;
use snn_core::encoding::{encode_batch, EncodingKind};
use snn_core::network::{build_preset, Network};
use snn_core::training::{batch_gradients, train, LossSpec, TrainConfig, Trainer};

/// Ten noisy prototype images, `n` samples in total.
fn synthetic(n: usize, seed: u64) -> IdxDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Vec<u8>> = (0..10)
        .map(|_| (0..784).map(|_| if rng.gen_bool(0.2) { 230 } else { 0 }).collect())
        .collect();
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        images.extend(protos[c].iter().map(|&p| if rng.gen_bool(0.05) { 255 - p } else { p }));
        labels.push(c as u8);
    }
    IdxDataset { images, labels, rows: 28, cols: 28 }
}

fn encoded(ds: &IdxDataset, seed: u64) -> (snn_core::encoding::EncodedBatch<f32>, Vec<usize>) {
    let samples: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.normalized(i)).collect();
    let labels = ds.labels.iter().map(|&l| l as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (encode_batch(EncodingKind::Bernoulli, &samples, &[28, 28], 8, &mut rng).unwrap(), labels)
}

#[test]
fn one_fixed_batch_can_be_memorized() {
    let ds = synthetic(32, 1);
    let (batch, labels) = encoded(&ds, 2);
    let net = Network::init(build_preset("lin-sp-lin-sp").unwrap(), 0).unwrap();
    let mut trainer = Trainer::new(net, &TrainConfig::default()).unwrap();
    let first = trainer.step(&batch, &labels).unwrap().unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = trainer.step(&batch, &labels).unwrap().unwrap();
        if last < 0.1 * first {
            break;
        }
    }
    println!("initial loss {first:.4}, final {last:.4}");
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn random_init_has_live_gradients() {
    let ds = synthetic(64, 3);
    let (batch, labels) = encoded(&ds, 4);
    for preset in ["shallow", "lin-sp-lin-sp", "lenet5-spiking"] {
        let net = Network::init(build_preset(preset).unwrap(), 0).unwrap();
        let (_, grads) = batch_gradients(&net, &batch, &labels, &LossSpec::default()).unwrap();
        assert!(
            grads.iter().any(|g| g.data().iter().any(|&x| x != 0.0)),
            "{preset}: all gradients zero"
        );
    }
}

#[test]
fn same_seed_gives_identical_weights() {
    let train_set = synthetic(300, 5);
    let test_set = synthetic(50, 6);
    let cfg = TrainConfig { epochs: 2, seed: 11, ..TrainConfig::default() };
    let run = || {
        let net = Network::init(build_preset("shallow").unwrap(), cfg.seed).unwrap();
        train(net, &train_set, &test_set, &cfg, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let other = {
        let cfg = TrainConfig { seed: 12, ..cfg.clone() };
        let net = Network::init(build_preset("shallow").unwrap(), cfg.seed).unwrap();
        train(net, &train_set, &test_set, &cfg, |_| {}).unwrap()
    };
    assert_ne!(other.checkpoint.to_bytes(), a.checkpoint.to_bytes());
}
