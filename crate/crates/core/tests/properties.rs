use proptest::prelude::*;

use tricon::analysis::{auc, calibration_bins, classification_metrics, quantile_fake_rates};
use tricon::checks::{toy_config, toy_records};
use tricon::classifier::{confidence, entropy, PredictionOutput};
use tricon::features::{chronological_split, decode_container, encode_container, FeatureRecord};
use tricon::fusion::{renormalize_weights, Aarf, Hmt};
use tricon::graph::Graph;
use tricon::model::{Ablation, Detector};
use tricon::params::{ParamBuilder, ParamStore};
use tricon::routing::{route, tune_threshold, Strategy as RouteStrategy};
use tricon::tensor::Tensor;
use tricon::training::{batch_losses, style_infonce, LossWeights, COMPONENTS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= -1e-9) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-6
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn renormalized_weights_stay_on_simplex(raw in prop::collection::vec(0.01f64..1.0, 2..6), alpha_min in 0.05f64..0.95) {
        let s: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let w = renormalize_weights(&alpha, alpha_min).unwrap();
        prop_assert!(simplex(&w));
        prop_assert!(w[0] >= alpha_min - 1e-12);
    }

    #[test]
    fn gate_weights_stay_on_simplex(logits in matrix(4, 4), alpha_min in 0.05f32..0.95) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let aarf = Aarf::new(&mut ParamBuilder { store: &mut store, rng: &mut rng }, 4, 3, 4, alpha_min).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let l = g.input(logits);
        let a = aarf.weights_from_logits(&mut g, l).unwrap();
        for i in 0..4 {
            let row = g.value(a).row_slice(i);
            prop_assert!(simplex(row));
            prop_assert!(row[0] >= alpha_min as f64 - 1e-6);
        }
    }

    #[test]
    fn betas_stay_on_simplex(c in prop::collection::vec(0.0f32..1.0, 3), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hmt = Hmt::new(&mut ParamBuilder { store: &mut store, rng: &mut rng }, 8, 2, 8, 4, 0.0);
        // move off the uniform start
        for t in store.tensors_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += ((i as u64 * 7 + seed) % 11) as f32 / 11.0 - 0.5;
            }
        }
        let mut g: Graph = Graph::new();
        let x = g.input(Tensor::row(&c));
        for b in hmt.betas(&mut g, &store, x).unwrap() {
            let row: Vec<f64> = g.value(b).data().iter().map(|&v| v as f64).collect();
            prop_assert!(simplex(&row));
        }
    }

    #[test]
    fn confidence_and_entropy_ranges(p in 0.0f64..=1.0, u_hat in 0.0f64..=1.0) {
        let out = PredictionOutput::new(p, u_hat);
        prop_assert!((0.5..=1.0).contains(&out.conf));
        prop_assert!(out.u_ent >= 0.0 && out.u_ent <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!(out.u_comp >= 0.0 && out.u_comp <= 2.0 + 1e-12);
    }

    #[test]
    fn entropy_decreases_with_confidence(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        if confidence(a) < confidence(b) {
            prop_assert!(entropy(a) >= entropy(b) - 1e-12);
        }
    }

    #[test]
    fn composite_uncertainty_is_monotone(p in 0.0f64..=1.0, u in 0.0f64..=1.0, du in 0.0f64..=1.0) {
        let a = PredictionOutput::new(p, u);
        let b = PredictionOutput::new(p, u + du);
        prop_assert!(b.u_comp >= a.u_comp);
    }

    #[test]
    fn routing_sends_exactly_scores_above_threshold(scores in prop::collection::vec(0.0f64..3.0, 1..200), ratio in 0.01f64..0.99) {
        let t = tune_threshold(&scores, ratio).unwrap();
        let ids: Vec<String> = (0..scores.len()).map(|i| i.to_string()).collect();
        let d = route(&ids, &scores, RouteStrategy::Difficulty, t.threshold);
        for (dec, &s) in d.iter().zip(&scores) {
            prop_assert_eq!(dec.routed, s > t.threshold);
        }
        prop_assert_eq!(d.iter().filter(|x| x.routed).count(), t.routed);
    }

    #[test]
    fn threshold_hits_target_count_without_ties(n in 1usize..300, ratio in 0.01f64..0.99, seed in 0u64..1000) {
        // distinct scores
        let scores: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1_000_003) as f64 + i as f64 * 1e-7).collect();
        let t = tune_threshold(&scores, ratio).unwrap();
        prop_assert!((t.routed as f64 - ratio * n as f64).abs() <= 1.0);
    }

    #[test]
    fn calibration_counts_partition(conf in prop::collection::vec(0.5f64..=1.0, 1..300), bits in prop::collection::vec(any::<bool>(), 300)) {
        let correct = &bits[..conf.len()];
        let cal = calibration_bins(&conf, correct, 10).unwrap();
        prop_assert_eq!(cal.bins.iter().map(|b| b.count).sum::<usize>(), conf.len());
        prop_assert!((0.0..=1.0).contains(&cal.ece));
    }

    #[test]
    fn quantile_bins_account_for_every_fake(x in prop::collection::vec(-5.0f64..5.0, 5..300), bits in prop::collection::vec(0u8..2, 300)) {
        let labels = &bits[..x.len()];
        let k = 5;
        let rates = quantile_fake_rates(&x, labels, k).unwrap();
        let n = x.len();
        let fakes: f64 = rates.iter().enumerate().map(|(b, r)| r * ((b + 1) * n / k - b * n / k) as f64).sum();
        prop_assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert!((fakes - labels.iter().map(|&y| y as f64).sum::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn metrics_lie_in_unit_interval(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200), scores in prop::collection::vec(0.0f64..1.0, 200)) {
        let preds: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let m = classification_metrics(&preds, &labels).unwrap();
        for v in m.precision.iter().chain(&m.recall).chain(&m.f1).chain([&m.accuracy, &m.macro_f1]) {
            prop_assert!((0.0..=1.0).contains(v), "{v}");
        }
        if labels.contains(&0) && labels.contains(&1) {
            let a = auc(&scores[..labels.len()], &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn style_loss_is_nonnegative_and_permutation_invariant(a in matrix(4, 3), b in matrix(4, 3), c in matrix(4, 3), shift in 1usize..4) {
        let loss = |views: &[Tensor<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let v: Vec<_> = views.iter().map(|t| g.input(t.clone())).collect();
            let l = style_infonce(&mut g, &v, 0.1).unwrap();
            g.value(l).item()
        };
        // rotate samples identically in every view
        let perm = |t: &Tensor<f64>| {
            let rows: Vec<Vec<f64>> = (0..4).map(|i| t.row_slice((i + shift) % 4).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let base = loss(&[a.clone(), b.clone(), c.clone()]);
        prop_assert!(base >= 0.0);
        prop_assert!((base - loss(&[perm(&a), perm(&b), perm(&c)])).abs() < 1e-9);
        prop_assert!((base - loss(&[c, a, b])).abs() < 1e-9);
    }

    #[test]
    fn chronological_split_is_ordered(stamps in prop::collection::vec(0i64..50, 10..60)) {
        let records: Vec<FeatureRecord> = stamps
            .iter()
            .enumerate()
            .map(|(i, &t)| FeatureRecord {
                id: format!("{i:03}"),
                label: (i % 2) as u8,
                timestamp: t,
                text: Tensor::zeros(1, 2),
                rewrites: vec![Tensor::zeros(1, 2); 3],
                visual: Tensor::zeros(1, 2),
                audio: Tensor::zeros(2, 2),
            })
            .collect();
        let (tr, va, te) = chronological_split(&records, (0.7, 0.15, 0.15)).unwrap();
        prop_assert_eq!(tr.len() + va.len() + te.len(), records.len());
        let key = |r: &FeatureRecord| (r.timestamp, r.id.clone());
        let all: Vec<_> = tr.iter().chain(&va).chain(&te).map(key).collect();
        prop_assert!(all.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn container_round_trips(seed in 0u64..10_000, n in 1usize..8) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize| Tensor::new(r, 3, (0..r * 3).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let records: Vec<FeatureRecord> = (0..n)
            .map(|i| FeatureRecord {
                id: format!("x{i}"),
                label: (i % 2) as u8,
                timestamp: -(i as i64),
                text: t(2),
                rewrites: vec![t(2), t(2), t(2)],
                visual: t(1),
                audio: t(4),
            })
            .collect();
        let bytes = encode_container(&records).unwrap();
        prop_assert_eq!(decode_container(&bytes).unwrap(), records);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn zeroing_one_weight_leaves_other_components(idx in 1usize..8, noise_seed in 0u64..100) {
        let det = Detector::new(toy_config()).unwrap();
        let records = toy_records();
        let refs: Vec<&FeatureRecord> = records.iter().collect();
        let store = det.store.cast::<f64>();
        let eval = |w: &LossWeights| {
            let mut g: Graph<f64> = Graph::new();
            let b = batch_losses(&det, &mut g, &store, &refs, w, 0.01, noise_seed, Ablation::default(), None).unwrap();
            let parts: Vec<f64> = b.parts.iter().map(|&p| g.value(p).item()).collect();
            (parts, g.value(b.total).item())
        };
        let full = LossWeights::default();
        let reduced = full.without(COMPONENTS[idx]).unwrap();
        let (p_full, t_full) = eval(&full);
        let (p_red, t_red) = eval(&reduced);
        prop_assert_eq!(&p_full, &p_red);
        prop_assert!(p_full.iter().all(|&p| p >= -1e-12), "{p_full:?}");
        let w = full.as_array();
        // weights enter the graph as f32 constants
        prop_assert!((t_full - t_red - w[idx] * p_full[idx]).abs() < 1e-6, "{t_full} {t_red} {p_full:?}");
    }
}
