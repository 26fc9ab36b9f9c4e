use mnv2::metrics::Metrics;
use mnv2::train::{lr_at, sgd_step, TrainConfig};
use proptest::prelude::*;

fn labels(k: usize, n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..k, 0..k), 0..n)
}

proptest! {
    #[test]
    fn accuracy_is_trace_over_total(pairs in labels(11, 300)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = Metrics::from_predictions(11, &t, &p).unwrap();
        let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
        if !t.is_empty() {
            prop_assert_eq!(m.accuracy(), correct as f64 / t.len() as f64);
        }
        for row in m.normalized().into_iter().flatten() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for i in m.empty_rows() {
            prop_assert!(!t.contains(&i));
        }
    }

    #[test]
    fn merge_is_associative(a in labels(5, 50), b in labels(5, 50), c in labels(5, 50)) {
        let m = |v: &Vec<(usize, usize)>| {
            let (t, p): (Vec<usize>, Vec<usize>) = v.iter().copied().unzip();
            Metrics::from_predictions(5, &t, &p).unwrap()
        };
        let mut left = m(&a);
        left.merge(&m(&b)).unwrap();
        left.merge(&m(&c)).unwrap();
        let mut bc = m(&b);
        bc.merge(&m(&c)).unwrap();
        let mut right = m(&a);
        right.merge(&bc).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn weight_decay_alone_shrinks(
        params in prop::collection::vec(-10f32..10.0, 1..20),
        wd in 1e-4f64..0.5,
        lr in 1e-4f64..1.0,
        nesterov in any::<bool>(),
    ) {
        let cfg = TrainConfig { weight_decay: wd, nesterov, ..TrainConfig::default() };
        let mut p = params.clone();
        let mut v = vec![0f32; p.len()];
        let grad = vec![0f32; p.len()];
        sgd_step(&mut p, &grad, &mut v, lr, &cfg).unwrap();
        for (after, before) in p.iter().zip(&params) {
            prop_assert!(after.abs() <= before.abs());
        }
    }

    #[test]
    fn schedule_is_non_increasing(lr0 in 1e-6f64..1.0, step in 1usize..15, gamma in 0.01f64..0.99) {
        let cfg = TrainConfig { lr0, lr_step: step, lr_gamma: gamma, ..TrainConfig::default() };
        for e in 1..60 {
            prop_assert!(lr_at(e, &cfg) <= lr_at(e - 1, &cfg));
        }
        prop_assert_eq!(lr_at(step - 1, &cfg), lr0);
    }
}
