use fedgen_core::datasets::{gen_synthetic, partition_clients, DatasetSpec, PartitionScheme};
use fedgen_core::fedcore::aggregate_weights;
use fedgen_core::masking::{aggregate_masks, gate, mask_deltas, MaskSettings, MaskState, MaskUpdate};
use fedgen_core::model::{fedgen_loss, Batch, ModelParams};
use fedgen_core::theorychecks::{estimate_b, estimate_eps, ClientGradient};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

proptest! {
    #[test]
    fn gating_never_amplifies(pairs in prop::collection::vec((finite(50.0), finite(1e3)), 1..40)) {
        let (m, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let z = gate(&m, &x).unwrap();
        for (zi, xi) in z.iter().zip(&x) {
            prop_assert!(zi.abs() <= xi.abs());
            prop_assert!(zi * xi >= 0.0);
        }
    }

    #[test]
    fn unit_scaling_conserves_logit_mass(v in prop::collection::vec(0.0..10.0f64, 1..200)) {
        let d = mask_deltas(&v, 1.0);
        prop_assert!(d.iter().sum::<f64>().abs() <= 1e-10);
    }

    #[test]
    fn larger_scaling_never_raises_total_mass(v in prop::collection::vec(0.0..10.0f64, 1..50), alpha in 1.0..100.0f64) {
        let d = mask_deltas(&v, alpha);
        prop_assert!(d.iter().sum::<f64>() <= 1e-10);
    }

    #[test]
    fn mask_aggregation_is_order_invariant_and_bounded(
        clients in prop::collection::vec((prop::collection::vec(finite(20.0), 5), 1usize..500), 1..12),
        rot in 0usize..12,
    ) {
        let entries: Vec<(&[f64], usize)> = clients.iter().map(|(m, n)| (m.as_slice(), *n)).collect();
        let agg = aggregate_masks(&entries).unwrap();
        let mut rotated = entries.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        let agg2 = aggregate_masks(&rotated).unwrap();
        for i in 0..5 {
            prop_assert!((agg[i] - agg2[i]).abs() <= 1e-12 * (1.0 + agg[i].abs()));
            let lo = clients.iter().map(|(m, _)| m[i]).fold(f64::INFINITY, f64::min);
            let hi = clients.iter().map(|(m, _)| m[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg[i] >= lo - 1e-12 && agg[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn aggregation_is_idempotent(m in prop::collection::vec(finite(20.0), 1..10), ns in prop::collection::vec(1usize..100, 1..8), seed in 0u64..1000) {
        let entries: Vec<(&[f64], usize)> = ns.iter().map(|&n| (m.as_slice(), n)).collect();
        let agg = aggregate_masks(&entries).unwrap();
        for (a, b) in agg.iter().zip(&m) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let p = ModelParams::init(seed, &[3, 4, 2]).unwrap();
        let entries: Vec<(&ModelParams, usize)> = ns.iter().map(|&n| (&p, n)).collect();
        let w = aggregate_weights(&entries).unwrap();
        for (a, b) in w.to_flat().iter().zip(p.to_flat()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn weight_average_lies_between_clients(seeds in prop::collection::vec(0u64..10_000, 2..6), ns in prop::collection::vec(1usize..100, 6)) {
        let models: Vec<ModelParams> = seeds.iter().map(|&s| ModelParams::init(s, &[4, 3, 2]).unwrap()).collect();
        let entries: Vec<(&ModelParams, usize)> = models.iter().zip(&ns).map(|(m, &n)| (m, n)).collect();
        let w = aggregate_weights(&entries).unwrap().to_flat();
        let flats: Vec<Vec<f64>> = models.iter().map(ModelParams::to_flat).collect();
        for (i, wi) in w.iter().enumerate() {
            let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*wi >= lo - 1e-12 && *wi <= hi + 1e-12);
        }
    }

    #[test]
    fn applied_mask_update_matches_deltas(
        weights in prop::collection::vec(prop::collection::vec(finite(2.0), 12), 3..10),
        alpha in 0.5..20.0f64,
    ) {
        let settings = MaskSettings { alpha, e_init: 1, ..MaskSettings::default() };
        let mut state = MaskState::new(4, 3, settings).unwrap();
        let mut applied = 0;
        for (epoch, w) in weights.iter().enumerate() {
            let before = state.logits().to_vec();
            state.ema_update(w).unwrap();
            let expected = mask_deltas(&state.feature_variance(), alpha);
            match state.mask_update() {
                MaskUpdate::WarmUp => prop_assert!(epoch < 1),
                MaskUpdate::Applied(d) => {
                    applied += 1;
                    prop_assert_eq!(&d, &expected);
                    for i in 0..4 {
                        prop_assert!((state.logits()[i] - before[i] - d[i]).abs() <= 1e-12);
                    }
                }
            }
        }
        prop_assert_eq!(applied, weights.len() - 1);
    }

    #[test]
    fn partition_keeps_every_row(
        samples in 20usize..120,
        clients in 1usize..12,
        mixed in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let spec = DatasetSpec { n_invariant: 2, samples_per_env: samples, seed, ..DatasetSpec::default() };
        let data = gen_synthetic(&spec).unwrap();
        let scheme = if mixed { PartitionScheme::Mixed } else { PartitionScheme::Stratified };
        let shards = partition_clients(&data.train, clients, scheme, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let key = |row: &[f64], y: usize| -> Vec<u64> {
            let mut k: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            k.push(y as u64);
            k
        };
        let mut original: Vec<Vec<u64>> = data.train.iter()
            .flat_map(|e| (0..e.data.len()).map(move |i| key(e.data.row(i), e.data.y()[i])))
            .collect();
        let mut split: Vec<Vec<u64>> = shards.iter()
            .flat_map(|s| (0..s.data.len()).map(move |i| key(s.data.row(i), s.data.y()[i])))
            .collect();
        original.sort();
        split.sort();
        prop_assert_eq!(original, split);
        prop_assert!(shards.iter().all(|s| !s.data.is_empty()));
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..10_000) {
        let spec = DatasetSpec { samples_per_env: 30, seed, ..DatasetSpec::default() };
        prop_assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
    }

    #[test]
    fn dissimilarity_estimates_ignore_gradient_scale(
        grads in prop::collection::vec(prop::collection::vec(finite(3.0), 4), 2..6),
        ns in prop::collection::vec(1usize..50, 6),
        scale in 1e-3..1e3f64,
    ) {
        let clients: Vec<ClientGradient> = grads.iter().zip(&ns).map(|(g, &n)| ClientGradient { grad: g.clone(), n_k: n }).collect();
        let scaled: Vec<ClientGradient> = clients.iter().map(|c| ClientGradient { grad: c.grad.iter().map(|x| x * scale).collect(), n_k: c.n_k }).collect();
        let all: Vec<usize> = (0..clients.len()).collect();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-8 * (1.0 + a.abs()),
            (None, None) => true,
            _ => false,
        };
        let b = estimate_b(&clients).unwrap();
        prop_assert!(close(b, estimate_b(&scaled).unwrap()));
        if let Some(b) = b {
            prop_assert!(b >= 1.0 - 1e-9);
        }
        prop_assert!(close(estimate_eps(&clients, &all).unwrap(), estimate_eps(&scaled, &all).unwrap()));
    }
}

fn central_difference(params: &ModelParams, batch: &Batch, mask: Option<&[f64]>, lambda: f64, l1: f64, h: f64) -> Vec<f64> {
    let flat = params.to_flat();
    let mut p = params.clone();
    (0..flat.len())
        .map(|i| {
            let mut eval = |v: f64| {
                let mut f = flat.clone();
                f[i] = v;
                p.set_flat(&f).unwrap();
                let g = fedgen_loss(&p, batch, mask, lambda, l1).unwrap();
                g.graph.value(g.total).item().unwrap()
            };
            (eval(flat[i] + h) - eval(flat[i] - h)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_gradients_match_finite_differences(
        seed in 0u64..10_000,
        features in 1usize..5,
        hidden in prop::collection::vec(1usize..5, 0..3),
        classes in 2usize..4,
        rows in prop::collection::vec(finite(2.0), 24),
        mask in prop::collection::vec(finite(3.0), 4),
        lambda in 0.0..2.0f64,
    ) {
        let n = rows.len() / features.max(1);
        let n = n.min(6);
        let x = rows[..n * features].to_vec();
        let y = (0..n).map(|i| i % classes).collect();
        let batch = Batch::new(x, features, y).unwrap();
        let mut dims = vec![features];
        dims.extend(&hidden);
        dims.push(classes);
        let mut params = ModelParams::init(seed, &dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in params.biases_mut().iter_mut().flatten() {
            *b = rng.random_range(-0.5..0.5);
        }
        let mask = &mask[..features];
        let analytic = fedgen_loss(&params, &batch, Some(mask), lambda, 1e-3).unwrap().gradients().unwrap().to_flat();
        let numeric = central_difference(&params, &batch, Some(mask), lambda, 1e-3, 1e-5);
        for (a, b) in analytic.iter().zip(&numeric) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{} vs {}", a, b);
        }
    }
}
