mod common;

use common::conv_oracle;
use proptest::collection::vec;
use proptest::prelude::*;
use tskd_core::arima::{difference, difference_heads, integrate};
use tskd_core::autodiff::Graph;
use tskd_core::data::checkpoint::{decode, encode};
use tskd_core::data::idx;
use tskd_core::distill::{attention_map, knowledge_increment, mean_squared_distance};
use tskd_core::params::ParamStore;
use tskd_core::schedule::{build_schedule, MemoryBank, NodeKind};
use tskd_core::tensor::Tensor;

fn tensor4(max: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=3usize, 1..=4usize, 1..=max, 1..=max).prop_flat_map(|(n, c, h, w)| {
        vec(-4.0f64..4.0, n * c * h * w).prop_map(move |d| Tensor::new(&[n, c, h, w], d).unwrap())
    })
}

fn map_of(t: &Tensor<f64>, normalize: bool) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let m = attention_map(&mut g, v, normalize).unwrap();
    g.value(m.values).data().to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_maps_are_nonnegative(t in tensor4(6), normalize: bool) {
        prop_assert!(map_of(&t, normalize).iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn attention_maps_ignore_channel_order(t in tensor4(5), rot in 0usize..4) {
        let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let plane = h * w;
        let mut data = Vec::with_capacity(t.numel());
        for s in 0..n {
            for ch in 0..c {
                let src = (ch + rot) % c;
                data.extend_from_slice(&t.data()[(s * c + src) * plane..(s * c + src + 1) * plane]);
            }
        }
        let permuted = Tensor::new(t.shape(), data).unwrap();
        prop_assert!(close(&map_of(&t, false), &map_of(&permuted, false), 1e-12));
    }

    #[test]
    fn normalized_maps_ignore_feature_scale(t in tensor4(5), scale in 0.01f64..100.0) {
        let scaled = t.map(|v| v * scale);
        prop_assert!(close(&map_of(&t, true), &map_of(&scaled, true), 1e-10));
    }

    #[test]
    fn increments_are_symmetric_and_nonnegative(a in tensor4(4), seed in 0u64..1000) {
        let b = Tensor::from_fn(a.shape(), |i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 13.0 - 3.0);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let (ma, mb) = (attention_map(&mut g, av, true).unwrap(), attention_map(&mut g, bv, true).unwrap());
        let ab = knowledge_increment(&mut g, &ma, &mb, (0, 1)).unwrap();
        let ba = knowledge_increment(&mut g, &mb, &ma, (0, 1)).unwrap();
        prop_assert_eq!(g.value(ab.values).data(), g.value(ba.values).data());
        prop_assert!(g.value(ab.values).data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn temporal_distance_is_nonnegative_and_zero_on_itself(
        a in vec(-5.0f64..5.0, 12),
        b in vec(-5.0f64..5.0, 12),
    ) {
        let (a, b) = (Tensor::new(&[3, 2, 2], a).unwrap(), Tensor::new(&[3, 2, 2], b).unwrap());
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let d = mean_squared_distance(&mut g, av, bv).unwrap();
        let z = mean_squared_distance(&mut g, av, av).unwrap();
        prop_assert!(g.value(d).item() >= 0.0);
        prop_assert_eq!(g.value(z).item(), 0.0);
    }

    #[test]
    fn conv2d_matches_oracle(
        x in tensor4(7),
        co in 1usize..4,
        kh in 1usize..4,
        kw in 1usize..4,
        stride in 1usize..4,
        pad in 0usize..3,
        seed: u64,
    ) {
        let (h, w, ci) = (x.shape()[2], x.shape()[3], x.shape()[1]);
        prop_assume!(kh <= h + 2 * pad && kw <= w + 2 * pad);
        let mut r = common::rng(seed);
        let k = common::rand_tensor(&mut r, &[co, ci, kh, kw], -1.0, 1.0);
        let b = common::rand_tensor(&mut r, &[co], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        prop_assert!(g.value(y).bitwise_eq(&conv_oracle(&x, &k, Some(&b), stride, pad)));
    }

    #[test]
    fn schedule_partitions_epochs(total in 0usize..200, delta in 1usize..8, k in 1usize..5, warmup in 0usize..20) {
        let s = build_schedule(total, delta, k, warmup).unwrap();
        let (m, g, r) = (s.memory_epochs(), s.general_epochs(), s.review_epochs());
        prop_assert_eq!(m.len() + g.len() + r.len(), total);
        let mut all: Vec<usize> = m.iter().chain(&g).chain(&r).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
        prop_assert_eq!(m.len(), k * r.len());
        let mut bank: MemoryBank<f64> = MemoryBank::new(k);
        let mut p = ParamStore::new();
        p.push("w", Tensor::<f64>::zeros(&[1])).unwrap();
        for e in 0..total {
            match s.kind(e) {
                NodeKind::Memory => bank.memorize(&s, e, &p).unwrap(),
                NodeKind::Review => {
                    let mem = s.memory_epochs_for_review(e).unwrap();
                    prop_assert!(mem.iter().all(|&t| s.kind(t) == NodeKind::Memory));
                    prop_assert_eq!(bank.epochs(), mem);
                    prop_assert!(e - bank.epochs()[0] == k * delta);
                }
                NodeKind::General => {}
            }
            prop_assert!(bank.len() <= k);
        }
    }

    #[test]
    fn integer_differencing_round_trips_exactly(series in vec(-1000i32..1000, 1..40), d in 0usize..4) {
        prop_assume!(series.len() > d);
        let s: Vec<f64> = series.iter().map(|&v| v as f64).collect();
        let back = integrate(&difference(&s, d).unwrap(), &difference_heads(&s, d).unwrap());
        prop_assert_eq!(back, s);
    }

    #[test]
    fn float_differencing_round_trips(series in vec(-10.0f64..10.0, 3..40), d in 0usize..3) {
        let back = integrate(&difference(&series, d).unwrap(), &difference_heads(&series, d).unwrap());
        prop_assert!(close(&back, &series, 1e-12));
        prop_assert_eq!(difference(&series, d).unwrap().len(), series.len() - d);
    }

    #[test]
    fn checkpoints_round_trip_any_bits(
        entries in vec(("[a-z][a-z0-9_.]{0,12}", vec(1usize..4, 0..4), any::<u32>()), 1..6),
    ) {
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for (i, (name, shape, seed)) in entries.into_iter().enumerate() {
            let shape = if shape.is_empty() { vec![1] } else { shape };
            let t = Tensor::from_fn(&shape, |j| f32::from_bits(seed.wrapping_mul(j as u32 + 1).wrapping_add(j as u32)));
            tensors.push((format!("{name}{i}"), t));
        }
        let bytes = encode(tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert!(t1.bitwise_eq(t2));
        }
    }

    #[test]
    fn idx_parsers_never_panic(bytes in vec(any::<u8>(), 0..64), magic in 0usize..3) {
        let mut b = bytes;
        if b.len() >= 4 {
            let m = [0u32, idx::IMAGES_MAGIC, idx::LABELS_MAGIC][magic];
            if m != 0 {
                b[..4].copy_from_slice(&m.to_be_bytes());
            }
        }
        let _ = idx::parse_images(&b);
        let _ = idx::parse_labels(&b);
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in vec(any::<u8>(), 0..96)) {
        let mut b = bytes;
        if b.len() >= 8 {
            b[..4].copy_from_slice(b"TSKD");
            b[4..8].copy_from_slice(&1u32.to_le_bytes());
        }
        let _ = decode(&b);
    }
}
