use std::time::Instant;

use tskd_core::autodiff::Graph;
use tskd_core::data::idx::{self, IdxImages};
use tskd_core::data::synth::{synth_splits, SynthParams};
use tskd_core::data::{Dataset, Split};
use tskd_core::nn::{argmax_rows, Initializer};
use tskd_core::optim::{LrSchedule, Sgd};
use tskd_core::params::ParamStore;
use tskd_core::trainer::epoch_order;

fn flat(ds: &Dataset<f32>) -> tskd_core::tensor::Tensor<f32> {
    let n = ds.len();
    ds.images.reshape(&[n, ds.images.numel() / n]).unwrap()
}

#[test]
fn two_layer_classifier_separates_synthetic_classes() {
    let start = Instant::now();
    let (train, test) = synth_splits::<f32>(0, &SynthParams::default()).unwrap();
    let (x_train, x_test) = (flat(&train), flat(&test));
    let d = x_train.shape()[1];
    let hidden = 64;
    let mut init = Initializer::new(3);
    let mut params = ParamStore::new();
    params
        .push("fc1.weight", init.kaiming(&[hidden, d], d, 2.0))
        .unwrap();
    params
        .push("fc1.bias", tskd_core::tensor::Tensor::zeros(&[hidden]))
        .unwrap();
    params
        .push("fc2.weight", init.kaiming(&[10, hidden], hidden, 1.0))
        .unwrap();
    params
        .push("fc2.bias", tskd_core::tensor::Tensor::zeros(&[10]))
        .unwrap();
    let mut sgd = Sgd::new(&params, 0.05, 0.9, LrSchedule::constant());
    let logits = |g: &mut Graph<f32>, vars: &[tskd_core::autodiff::Var], x| {
        let h = g.linear(x, vars[0], Some(vars[1])).unwrap();
        let h = g.relu(h);
        g.linear(h, vars[2], Some(vars[3])).unwrap()
    };
    for epoch in 0..30 {
        for chunk in epoch_order(1, epoch, train.len()).chunks(32) {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            let x = g.constant(x_train.gather_outer(chunk).unwrap());
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let out = logits(&mut g, &vars, x);
            let loss = g.softmax_cross_entropy(out, &labels).unwrap();
            let grads = g.gradients(loss, &vars).unwrap();
            params.accumulate_grads(grads).unwrap();
            sgd.step(&mut params, epoch).unwrap();
        }
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(x_test);
    let out = logits(&mut g, &vars, x);
    let pred = argmax_rows(g.value(out));
    let acc = pred
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / test.len() as f64;
    let elapsed = start.elapsed();
    assert!(acc > 0.9, "test accuracy {acc}");
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
}

#[test]
fn idx_files_load_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let images = IdxImages {
        count: 2,
        rows: 2,
        cols: 3,
        pixels: vec![0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 254],
    };
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, idx::encode_images(&images)).unwrap();
    std::fs::write(&lp, idx::encode_labels(&[7, 3])).unwrap();
    let ds = idx::load_idx::<f64>(&ip, &lp, Split::Test).unwrap();
    assert_eq!(ds.images.shape(), &[2, 1, 2, 3]);
    for (v, b) in ds.images.data().iter().zip(&images.pixels) {
        assert!((v - *b as f64 / 255.0).abs() < 1e-15);
    }
    assert_eq!(ds.labels, vec![7, 3]);
    assert_eq!(ds.classes, 8);
    assert!(idx::load_idx::<f64>(&dir.path().join("none"), &lp, Split::Test).is_err());
}

#[test]
fn synthetic_splits_are_balanced_and_seeded() {
    let p = SynthParams {
        classes: 4,
        size: 12,
        train_per_class: 6,
        test_per_class: 3,
        ..SynthParams::default()
    };
    let (a, b) = synth_splits::<f32>(5, &p).unwrap();
    let (a2, _) = synth_splits::<f32>(5, &p).unwrap();
    let (c, _) = synth_splits::<f32>(6, &p).unwrap();
    assert!(a.images.bitwise_eq(&a2.images));
    assert!(!a.images.bitwise_eq(&c.images));
    assert!(!a.images.slice_outer(0, 12).unwrap().bitwise_eq(&b.images));
    for k in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 6);
        assert_eq!(b.labels.iter().filter(|&&l| l == k).count(), 3);
    }
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
