//! Independent re-computations of library results: scalar loops, brute-force
//! enumeration and Monte Carlo runs that share no code with the functions
//! they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use tricon::analysis::{
    auc, average_ranks, calibration_bins, classification_metrics, quantile_fake_rates, spearman, style_variance,
    welch_ttest,
};
use tricon::classifier::{composite_uncertainty, entropy};
use tricon::consistency::{
    consistency_field, field_alignment_loss, pool_modality, temporal_resample, Cmcg, Tcmi, DIST_EPS,
};
use tricon::features::{
    alignment_proxies, decode_container, encode_container, generate_synthetic, FeatureRecord, SyntheticSpec,
};
use tricon::fusion::{Aarf, Hmt};
use tricon::graph::Graph;
use tricon::model::{Detector, ModelConfig};
use tricon::nn::{CrossAttentionBlock, EncoderBlock, Mlp};
use tricon::params::{ParamBuilder, ParamStore};
use tricon::routing::{difficulty_score, route, tune_threshold, Norms, Range, Strategy, VerdictProvider};
use tricon::tensor::Tensor;
use tricon::training::{infonce, mean_kl, style_infonce};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

fn rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row_slice(i).iter().map(|&x| x as f64).collect())
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `act(x W0 + b0) W1 + b1` with weights read straight from the store.
fn mlp_by_hand(store: &ParamStore, mlp: &Mlp, x: &[f64], act: fn(f64) -> f64) -> Vec<f64> {
    let layer = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.get(0, j) as f64 + (0..w.rows()).map(|i| x[i] * w.get(i, j) as f64).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = layer(store.get(mlp.hidden.w), store.get(mlp.hidden.b), x)
        .into_iter()
        .map(act)
        .collect();
    layer(store.get(mlp.out.w), store.get(mlp.out.b), &h)
}

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f32) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * r.sample::<f32, _>(StandardNormal);
        }
    }
}

// ---------------------------------------------------------------- consistency

#[test]
fn pooling_matches_brute_force_mean() {
    let mut r = rng(1);
    let h = random_tensor(&mut r, 5, 3);
    let p = pool_modality(&h).unwrap();
    for c in 0..3 {
        let mut s = 0.0f64;
        for i in 0..5 {
            s += h.get(i, c) as f64;
        }
        assert!(close(p.get(0, c) as f64, s / 5.0, 1e-6));
    }
}

#[test]
fn pairwise_gate_matches_hand_evaluation() {
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let cmcg = Cmcg::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        4,
        6,
    );
    randomize(&mut store, &mut r, 0.5);
    let (hi, hj) = (random_tensor(&mut r, 1, 4), random_tensor(&mut r, 1, 4));
    for pair in 0..3 {
        let mut g: Graph = Graph::new();
        let a = g.input(hi.clone());
        let b = g.input(hj.clone());
        let c = cmcg.pair_score(&mut g, &store, pair, a, b).unwrap();
        let w = store.get(cmcg.pairs[pair].w);
        let bias = store.get(cmcg.pairs[pair].b).get(0, 0) as f64;
        let x: Vec<f64> = hi.data().iter().chain(hj.data()).map(|&v| v as f64).collect();
        let z: f64 = x.iter().enumerate().map(|(k, v)| v * w.get(k, 0) as f64).sum::<f64>() + bias;
        assert!(close(g.value(c).item() as f64, sigmoid(z), 1e-5));
    }
}

#[test]
fn global_consistency_matches_layer_by_layer_evaluation() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let cmcg = Cmcg::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        4,
        6,
    );
    randomize(&mut store, &mut r, 0.7);
    let c = [0.2f32, 0.9, 0.55];
    let mut g: Graph = Graph::new();
    let x = g.input(Tensor::row(&c));
    let out = cmcg.global_score(&mut g, &store, x).unwrap();
    let c64: Vec<f64> = c.iter().map(|&v| v as f64).collect();
    let z = mlp_by_hand(&store, &cmcg.global, &c64, f64::tanh)[0];
    assert!(close(g.value(out).item() as f64, sigmoid(z), 1e-5));
}

#[test]
fn field_matches_brute_force_row_max() {
    let mut r = rng(4);
    let mut rows = Vec::new();
    for _ in 0..6 {
        let raw: Vec<f64> = (0..5).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        rows.push(raw.into_iter().map(|v| v / s).collect::<Vec<f64>>());
    }
    let a = Tensor::<f64>::from_rows(&rows).unwrap();
    let f = consistency_field(&a).unwrap();
    for (row, got) in rows.iter().zip(f) {
        let mut best = row[0];
        for &v in row {
            if v > best {
                best = v;
            }
        }
        assert_eq!(got, best);
    }
}

#[test]
fn field_alignment_matches_hand_sum() {
    let mut r = rng(5);
    let c: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|k| (0..k + 2).map(|_| r.random_range(0.0..1.0)).collect())
        .collect();
    let mut want = 0.0;
    for k in 0..3 {
        let m = fields[k].iter().sum::<f64>() / fields[k].len() as f64;
        want += (c[k] - m) * (c[k] - m);
    }
    assert!(close(field_alignment_loss(&c, &fields).unwrap(), want, 1e-12));
}

/// Linear interpolation at fractional index `pos` of a column.
fn interp(col: &[f64], pos: f64) -> f64 {
    let i = pos.floor() as usize;
    if i + 1 >= col.len() {
        return col[col.len() - 1];
    }
    let f = pos - i as f64;
    col[i] * (1.0 - f) + col[i + 1] * f
}

#[test]
fn resampling_matches_scalar_interpolation() {
    let mut r = rng(6);
    let h = random_tensor(&mut r, 7, 3).cast::<f64>();
    let out = temporal_resample(&h, 4).unwrap();
    for c in 0..3 {
        let col: Vec<f64> = (0..7).map(|i| h.get(i, c)).collect();
        for t in 0..4 {
            let pos = t as f64 * 6.0 / 3.0;
            assert!(close(out.get(t, c), interp(&col, pos), 1e-12));
        }
    }
}

#[test]
fn temporal_distances_and_summary_match_hand_computation() {
    let mut store = ParamStore::new();
    let mut r = rng(7);
    let tcmi = Tcmi::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        3,
        4,
        5,
    );
    randomize(&mut store, &mut r, 0.5);
    let vis = random_tensor(&mut r, 4, 3);
    let aud = random_tensor(&mut r, 9, 3);
    let mut g: Graph<f64> = Graph::new();
    let s64 = store.cast::<f64>();
    let v = g.input(vis.cast());
    let a = g.input(aud.cast());
    let d = tcmi.distances(&mut g, &s64, v, a).unwrap();
    let summary = tcmi.summary(&mut g, d).unwrap();

    let p = store.get(tcmi.proj_av);
    let (vr, ar) = (rows_f64(&vis), rows_f64(&aud));
    let mut dist = Vec::new();
    for t in 0..5 {
        let mut sq = 0.0;
        for c in 0..3 {
            let vc: Vec<f64> = vr.iter().map(|row| row[c]).collect();
            let vv = interp(&vc, t as f64 * 3.0 / 4.0);
            let mut pa = 0.0;
            for k in 0..3 {
                let ac: Vec<f64> = ar.iter().map(|row| row[k]).collect();
                pa += interp(&ac, t as f64 * 8.0 / 4.0) * p.get(k, c) as f64;
            }
            sq += (vv - pa).powi(2);
        }
        dist.push((sq + DIST_EPS as f64).sqrt());
    }
    for (t, want) in dist.iter().enumerate() {
        assert!(close(g.value(d).get(t, 0), *want, 1e-6));
    }
    // two-pass population variance
    let mean = dist.iter().sum::<f64>() / 5.0;
    let var = dist.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
    let max = dist.iter().cloned().fold(f64::MIN, f64::max);
    let s = g.value(summary);
    assert!(close(s.get(0, 0), mean, 1e-9));
    assert!(close(s.get(0, 1), var, 1e-9));
    assert!(close(s.get(0, 2), max, 1e-12));
}

// --------------------------------------------------------------------- fusion

#[test]
fn rewrite_quality_matches_hand_evaluation() {
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let aarf = Aarf::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        4,
        3,
        5,
        0.5,
    )
    .unwrap();
    randomize(&mut store, &mut r, 0.6);
    let (o, w) = (random_tensor(&mut r, 1, 4), random_tensor(&mut r, 1, 4));
    let mut g: Graph = Graph::new();
    let a = g.input(o.clone());
    let b = g.input(w.clone());
    let q = aarf.rewrite_quality(&mut g, &store, a, b).unwrap();
    let x: Vec<f64> = o.data().iter().chain(w.data()).map(|&v| v as f64).collect();
    let z = mlp_by_hand(&store, &aarf.quality, &x, gelu)[0];
    assert!(close(g.value(q).item() as f64, sigmoid(z), 1e-5));
}

#[test]
fn beta_matches_softmax_of_mlp() {
    let mut store = ParamStore::new();
    let mut r = rng(9);
    let hmt = Hmt::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        8,
        2,
        16,
        5,
        0.0,
    );
    randomize(&mut store, &mut r, 0.8);
    let c: Vec<f32> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
    let mut g: Graph = Graph::new();
    let x = g.input(Tensor::row(&c));
    let betas = hmt.betas(&mut g, &store, x).unwrap();
    let c64: Vec<f64> = c.iter().map(|&v| v as f64).collect();
    for (m, &b) in betas.iter().enumerate() {
        let z = mlp_by_hand(&store, &hmt.beta[m], &c64, f64::tanh);
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..2 {
            assert!(close(g.value(b).get(0, k) as f64, e[k] / s, 1e-5));
        }
    }
}

#[test]
fn encoder_block_with_zero_outputs_is_identity() {
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let block = EncoderBlock::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        "t",
        8,
        2,
        16,
    );
    for id in [block.attn.o.w, block.attn.o.b, block.ffn.out.w, block.ffn.out.b] {
        let t = store.get_mut(id);
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let x = random_tensor(&mut r, 4, 8);
    let mut g: Graph = Graph::new();
    let xv = g.input(x.clone());
    let (y, _) = block.forward(&mut g, &store, xv, 0.0).unwrap();
    assert_eq!(g.value(y).shape(), [4, 8]);
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn single_key_attention_is_all_ones() {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let block = CrossAttentionBlock::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut r,
        },
        "t",
        8,
        2,
    );
    let mut g: Graph = Graph::new();
    let q = g.input(random_tensor(&mut r, 5, 8));
    let kv = g.input(random_tensor(&mut r, 1, 8));
    let (msg, a) = block.forward(&mut g, &store, q, kv, 0.0).unwrap();
    assert_eq!(g.value(msg).shape(), [5, 8]);
    assert_eq!(g.value(a).shape(), [5, 1]);
    assert!(g.value(a).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

    let kv = g.input(random_tensor(&mut r, 6, 8));
    let (_, a) = block.forward(&mut g, &store, q, kv, 0.0).unwrap();
    for i in 0..5 {
        let s: f64 = g.value(a).row_slice(i).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn global_layer_is_order_sensitive_and_wide_output_is_256() {
    let det = Detector::new(ModelConfig::wide()).unwrap();
    let mut r = rng(12);
    let parts: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut r, 1, 256)).collect();
    let mut g: Graph = Graph::new();
    let v: Vec<_> = parts.iter().map(|t| g.input(t.clone())).collect();
    let out = det
        .hmt
        .global_sample(&mut g, &det.store, [v[0], v[1], v[2]], v[3])
        .unwrap();
    assert_eq!(g.value(out).shape(), [1, 256]);
    let swapped = det
        .hmt
        .global_sample(&mut g, &det.store, [v[1], v[0], v[2]], v[3])
        .unwrap();
    assert!(g.value(out).max_abs_diff(g.value(swapped)) > 1e-6);
}

// ----------------------------------------------------------------- classifier

#[test]
fn entropy_examples_by_hand() {
    let hand = -(0.9f64 * 0.9f64.ln() + 0.1f64 * 0.1f64.ln());
    assert!((entropy(0.9) - hand).abs() < 1e-12);
    assert!((hand - 0.3251).abs() < 1e-4);
}

#[test]
fn composite_uncertainty_is_monotone_on_random_pairs() {
    let mut r = rng(13);
    let pts: Vec<(f64, f64)> = (0..100)
        .map(|_| (r.random_range(0.0..std::f64::consts::LN_2), r.random_range(0.0..1.0)))
        .collect();
    for &(a, b) in &pts {
        for &(c, d) in &pts {
            if a <= c && b <= d {
                assert!(composite_uncertainty(a, b) <= composite_uncertainty(c, d));
            }
        }
    }
}

// --------------------------------------------------------------------- losses

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn infonce_matches_scalar_oracle() {
    let mut r = rng(14);
    let (u, v) = (
        random_tensor(&mut r, 6, 5).cast::<f64>(),
        random_tensor(&mut r, 6, 5).cast::<f64>(),
    );
    let tau = 0.3;
    let mut g: Graph<f64> = Graph::new();
    let (uv, vv) = (g.input(u.clone()), g.input(v.clone()));
    let l = infonce(&mut g, uv, vv, tau).unwrap();
    let ur: Vec<Vec<f64>> = (0..6).map(|i| u.row_slice(i).to_vec()).collect();
    let vr: Vec<Vec<f64>> = (0..6).map(|i| v.row_slice(i).to_vec()).collect();
    let mut want = 0.0;
    for i in 0..6 {
        let denom: f64 = (0..6).map(|j| (cos(&ur[i], &vr[j]) / tau).exp()).sum();
        want -= ((cos(&ur[i], &vr[i]) / tau).exp() / denom).ln();
    }
    // the graph carries 1/tau as an f32 constant
    assert!(
        close(g.value(l).item(), want / 6.0, 1e-6),
        "{} vs {}",
        g.value(l).item(),
        want / 6.0
    );

    // orthonormal pairs, N = 2, tau = 1
    let mut g: Graph<f64> = Graph::new();
    let e = g.input(Tensor::identity(2));
    let e2 = g.input(Tensor::identity(2));
    let l = infonce(&mut g, e, e2, 1.0).unwrap();
    let hand = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    assert!((g.value(l).item() - hand).abs() < 1e-9);
    assert!((hand - 0.3133).abs() < 1e-4);
}

#[test]
fn kl_matches_two_point_oracle() {
    let mut r = rng(15);
    let rows = 5;
    let p: Vec<f64> = (0..rows).map(|_| r.random_range(0.05..0.95)).collect();
    let q: Vec<f64> = (0..rows).map(|_| r.random_range(0.05..0.95)).collect();
    let to_log = |xs: &[f64]| {
        Tensor::<f64>::from_rows(&xs.iter().map(|&a| vec![(1.0 - a).ln(), a.ln()]).collect::<Vec<_>>()).unwrap()
    };
    let mut g: Graph<f64> = Graph::new();
    let (lp, lq) = (g.input(to_log(&p)), g.input(to_log(&q)));
    let kl = mean_kl(&mut g, lp, lq).unwrap();
    let want: f64 = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln())
        .sum::<f64>()
        / rows as f64;
    assert!(close(g.value(kl).item(), want, 1e-12));

    let mut g: Graph<f64> = Graph::new();
    let (lp, lq) = (g.input(to_log(&[0.9])), g.input(to_log(&[0.5])));
    let kl = mean_kl(&mut g, lp, lq).unwrap();
    let hand = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((g.value(kl).item() - hand).abs() < 1e-12);
    assert!((hand - 0.3681).abs() < 1e-4);
}

#[test]
fn style_loss_below_uniform_bound_for_separated_videos() {
    // 3 videos x 3 views: views of a video coincide, videos are mutually
    // orthogonal
    let (n, k) = (3, 3);
    let mut g: Graph<f64> = Graph::new();
    let views: Vec<_> = (0..k).map(|_| g.input(Tensor::<f64>::identity(n))).collect();
    let l = style_infonce(&mut g, &views, 0.1).unwrap();
    let bound = ((n * k - 1) as f64).ln();
    assert!(g.value(l).item() < bound);

    // scalar oracle on a random batch
    let mut r = rng(16);
    let vs: Vec<Tensor<f64>> = (0..k).map(|_| random_tensor(&mut r, n, 4).cast()).collect();
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<_> = vs.iter().map(|t| g.input(t.clone())).collect();
    let l = style_infonce(&mut g, &vars, 0.5).unwrap();
    let z: Vec<Vec<f64>> = vs
        .iter()
        .flat_map(|t| (0..n).map(|i| t.row_slice(i).to_vec()).collect::<Vec<_>>())
        .collect();
    let m = n * k;
    let mut want = 0.0;
    for a in 0..m {
        let denom: f64 = (0..m)
            .filter(|&b| b != a)
            .map(|b| (cos(&z[a], &z[b]) / 0.5).exp())
            .sum();
        for b in 0..m {
            if b != a && a % n == b % n {
                want -= ((cos(&z[a], &z[b]) / 0.5).exp() / denom).ln() / ((k - 1) * m) as f64;
            }
        }
    }
    assert!(close(g.value(l).item(), want, 1e-9));
}

// -------------------------------------------------------------------- routing

#[test]
fn difficulty_matches_termwise_oracle() {
    let mut r = rng(17);
    let norms = Norms {
        u_ent: Range { min: 0.05, max: 0.69 },
        c_global: Range { min: 0.1, max: 0.9 },
        conf: Range { min: 0.5, max: 0.99 },
    };
    for _ in 0..50 {
        let (u, c, f) = (
            r.random_range(0.0..0.7),
            r.random_range(0.0..1.0),
            r.random_range(0.5..1.0),
        );
        let n = |x: f64, lo: f64, hi: f64| ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        let want = n(u, 0.05, 0.69) + (1.0 - n(c, 0.1, 0.9)) + (1.0 - n(f, 0.5, 0.99));
        assert!(close(difficulty_score(u, c, f, &norms), want, 1e-12));
    }
}

#[test]
fn threshold_routes_quarter_of_400() {
    let mut r = rng(18);
    let scores: Vec<f64> = (0..400).map(|_| r.random::<f64>()).collect();
    let t = tune_threshold(&scores, 0.251).unwrap();
    let routed = scores.iter().filter(|&&s| s > t.threshold).count();
    assert!(routed == 100 || routed == 101, "{routed}");
}

#[test]
fn routed_set_matches_brute_force() {
    let mut r = rng(19);
    let scores: Vec<f64> = (0..200).map(|_| (r.random_range(0..50) as f64) / 7.0).collect();
    let ids: Vec<String> = (0..200).map(|i| format!("s{i}")).collect();
    let th = scores[17];
    let d = route(&ids, &scores, Strategy::Entropy, th);
    for (i, dec) in d.iter().enumerate() {
        let mut above = false;
        if scores[i] > th {
            above = true;
        }
        assert_eq!(dec.routed, above);
        assert_eq!(dec.id, ids[i]);
    }
}

fn oracle_splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn oracle_fnv(s: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

#[test]
fn synthetic_provider_matches_seeded_bernoulli_replay() {
    let provider = VerdictProvider::parse("synthetic:0.9:42").unwrap();
    let mut correct = 0;
    let mut replay = 0;
    for i in 0..100 {
        let id = format!("vid{i:03}");
        let label = (i % 2) as u8;
        if provider.verdict(&id, label).unwrap() == label {
            correct += 1;
        }
        let mut r = ChaCha8Rng::seed_from_u64(oracle_splitmix(42 ^ oracle_fnv(&id)));
        if r.random::<f64>() < 0.9 {
            replay += 1;
        }
    }
    assert_eq!(correct, replay);
    assert!((80..=98).contains(&correct));
}

// ------------------------------------------------------------------- analysis

#[test]
fn metrics_match_confusion_matrix_brute_force() {
    let mut r = rng(20);
    let labels: Vec<u8> = (0..200).map(|_| r.random_range(0..2)).collect();
    let preds: Vec<u8> = (0..200).map(|_| r.random_range(0..2)).collect();
    let mut cm = [[0usize; 2]; 2];
    for (&y, &p) in labels.iter().zip(&preds) {
        cm[y as usize][p as usize] += 1;
    }
    let m = classification_metrics(&preds, &labels).unwrap();
    let mut f1s = [0.0; 2];
    for c in 0..2 {
        let tp = cm[c][c] as f64;
        let fp = cm[1 - c][c] as f64;
        let fn_ = cm[c][1 - c] as f64;
        let p = tp / (tp + fp);
        let rc = tp / (tp + fn_);
        f1s[c] = 2.0 * p * rc / (p + rc);
        assert!(close(m.precision[c], p, 1e-12));
        assert!(close(m.recall[c], rc, 1e-12));
    }
    assert!(close(m.accuracy, (cm[0][0] + cm[1][1]) as f64 / 200.0, 1e-12));
    assert!(close(m.macro_f1, (f1s[0] + f1s[1]) / 2.0, 1e-12));
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut r = rng(21);
    let labels: Vec<u8> = (0..150).map(|_| r.random_range(0..2)).collect();
    // coarse scores so that ties occur
    let scores: Vec<f64> = labels
        .iter()
        .map(|&y| (r.random_range(0..20) as f64 + 4.0 * y as f64) / 24.0)
        .collect();
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..150 {
        for j in 0..150 {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    assert!(close(auc(&scores, &labels).unwrap(), wins / pairs, 1e-12));
}

#[test]
fn welch_detects_unit_shift_at_500_per_group() {
    let mut r = rng(22);
    let n = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..500).map(|_| n.sample(&mut r)).collect();
    let b: Vec<f64> = (0..500).map(|_| 1.0 + n.sample(&mut r)).collect();
    let t = welch_ttest(&a, &b).unwrap();
    assert!(t.p < 1e-10, "{}", t.p);
    assert!(t.t < 0.0);
}

#[test]
fn independent_pairs_have_small_rank_correlation() {
    let mut r = rng(23);
    let x: Vec<f64> = (0..1000).map(|_| r.random()).collect();
    let y: Vec<f64> = (0..1000).map(|_| r.random()).collect();
    assert!(spearman(&x, &y).unwrap().abs() < 0.1);
}

#[test]
fn average_ranks_match_brute_force_on_heavy_ties() {
    let mut r = rng(24);
    let xs: Vec<f64> = (0..60).map(|_| r.random_range(0..5) as f64).collect();
    let ranks = average_ranks(&xs);
    for (i, &x) in xs.iter().enumerate() {
        // 1-based: values strictly below, plus the midpoint of the tie block
        let below = xs.iter().filter(|&&y| y < x).count() as f64;
        let equal = xs.iter().filter(|&&y| y == x).count() as f64;
        assert_eq!(ranks[i], below + (equal + 1.0) / 2.0);
    }
}

#[test]
fn balanced_random_labels_give_flat_quantile_rates() {
    let mut r = rng(25);
    let x: Vec<f64> = (0..10_000).map(|_| r.random()).collect();
    let labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
    let mut shuffled = labels.clone();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut r);
    for rate in quantile_fake_rates(&x, &shuffled, 5).unwrap() {
        assert!((rate - 0.5).abs() < 0.05, "{rate}");
    }
}

#[test]
fn doubled_view_spread_is_detected() {
    let mut r = rng(26);
    let mut views = Vec::new();
    let mut labels = Vec::new();
    for i in 0..400 {
        let fake = i >= 200;
        let spread = if fake { 0.2 } else { 0.1 };
        let base: f64 = r.random_range(0.3..0.7);
        views.push(
            (0..4)
                .map(|_| base + spread * r.random_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
        labels.push(u8::from(fake));
    }
    let s = style_variance(&views, &labels, 10_000, 7).unwrap();
    assert!(s.fake > s.real);
    assert!(s.p < 0.05, "{}", s.p);
}

#[test]
fn calibrated_predictions_have_small_ece() {
    let mut r = rng(27);
    let conf: Vec<f64> = (0..10_000).map(|_| r.random_range(0.5..1.0)).collect();
    let correct: Vec<bool> = conf.iter().map(|&p| r.random::<f64>() < p).collect();
    let cal = calibration_bins(&conf, &correct, 10).unwrap();
    assert!(cal.ece < 0.02, "{}", cal.ece);
    assert_eq!(cal.bins.iter().map(|b| b.count).sum::<usize>(), 10_000);
}

// ------------------------------------------------------------------- features

#[test]
fn thousand_random_records_round_trip() {
    let mut r = rng(28);
    let records: Vec<FeatureRecord> = (0..1000)
        .map(|i| {
            let d = 4;
            let lens: Vec<usize> = (0..3).map(|_| r.random_range(1..4)).collect();
            FeatureRecord {
                id: format!("r{i}"),
                label: r.random_range(0..2),
                timestamp: i as i64,
                text: random_tensor(&mut r, lens[0], d),
                rewrites: (0..3).map(|_| random_tensor(&mut r, lens[0], d)).collect(),
                visual: random_tensor(&mut r, lens[1], d),
                audio: random_tensor(&mut r, lens[2] + 1, d),
            }
        })
        .collect();
    let bytes = encode_container(&records).unwrap();
    assert_eq!(decode_container(&bytes).unwrap(), records);
    let floats: usize = records
        .iter()
        .map(|x| x.text.len() + x.rewrites.iter().map(Tensor::len).sum::<usize>() + x.visual.len() + x.audio.len())
        .sum();
    let header = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + header + 4 * floats);
}

#[test]
fn generator_plants_alignment_ordering() {
    let spec = SyntheticSpec {
        n_real: 1000,
        n_fake: 1000,
        ..SyntheticSpec::default()
    };
    let c = generate_synthetic(&spec).unwrap();
    let mut sums = [[0.0f64; 3]; 2];
    let mut counts = [0.0f64; 2];
    for rec in &c.records {
        let p = alignment_proxies(rec);
        let y = rec.label as usize;
        counts[y] += 1.0;
        for k in 0..3 {
            sums[y][k] += p[k];
        }
    }
    let mean = |y: usize, k: usize| sums[y][k] / counts[y];
    assert!(mean(0, 0) > mean(1, 0), "tv real {} fake {}", mean(0, 0), mean(1, 0));
    assert!(mean(1, 1) > mean(0, 1), "ta real {} fake {}", mean(0, 1), mean(1, 1));
}
