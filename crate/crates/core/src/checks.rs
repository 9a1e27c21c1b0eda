//! Built-in oracle suite: finite-difference gradient checks for every
//! parameterized module and loss term, plus closed-form formula cases.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::classifier::entropy;
use crate::consistency::{field_alignment_loss, field_mean};
use crate::features::FeatureRecord;
use crate::gradcheck::{check_params, CheckReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::graph::{Fault, Graph, Var};
use crate::model::{Ablation, Detector, ModelConfig};
use crate::params::ParamStore;
use crate::routing::{difficulty_score, Norms, Range};
use crate::tensor::{Result, Tensor};
use crate::training::{batch_losses, infonce, LossWeights, COMPONENTS};

/// Entries probed per parameter tensor.
const PROBES: usize = 3;
const TRAIN_SEED: u64 = 0x5EED;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn grad_result(name: &str, r: Result<CheckReport>) -> CheckResult {
    match r {
        Ok(rep) => CheckResult {
            name: name.to_string(),
            passed: rep.passes(DEFAULT_TOL) && rep.checked > 0,
            detail: match rep.worst {
                Some((t, i, a, n)) => format!(
                    "max rel err {:.2e} over {} entries (tensor {t}[{i}]: analytic {a:.6e}, numeric {n:.6e})",
                    rep.max_rel_err, rep.checked
                ),
                None => format!("max rel err {:.2e} over {} entries", rep.max_rel_err, rep.checked),
            },
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn formula(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Model at toy sizes: 8-wide inputs and hidden state, two views.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_in: 8,
        hidden: 8,
        heads: 2,
        ffn: 16,
        small_hidden: 4,
        classifier_hidden: 8,
        views: 2,
        t_prime: 4,
        init_seed: 3,
        ..ModelConfig::default()
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Four random records matching [`toy_config`], two per class.
pub fn toy_records() -> Vec<FeatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..4)
        .map(|i| FeatureRecord {
            id: format!("toy{i}"),
            label: (i % 2) as u8,
            timestamp: i as i64,
            text: randn(&mut rng, 3, 8),
            rewrites: vec![randn(&mut rng, 3, 8), randn(&mut rng, 2, 8)],
            visual: randn(&mut rng, 2, 8),
            audio: randn(&mut rng, 5, 8),
        })
        .collect()
}

fn check<F>(store: &ParamStore<f64>, fault: Option<Fault>, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_params(store, DEFAULT_EPS, PROBES, 1, Some(TRAIN_SEED), fault, f)
}

/// Gradient checks for each module and each loss term on the toy model.
pub fn gradient_checks(fault: Option<Fault>) -> Vec<CheckResult> {
    let det = Detector::new(toy_config()).expect("toy config is valid");
    let store: ParamStore<f64> = det.store.cast();
    let recs = toy_records();
    let refs: Vec<&FeatureRecord> = recs.iter().collect();
    let pooled = |g: &mut Graph<f64>, pick: fn(&FeatureRecord) -> &Tensor| -> Result<Var> {
        let rows = recs
            .iter()
            .map(|r| Ok(crate::consistency::pool_modality(pick(r))?.cast::<f64>().into_data()))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.constant(Tensor::from_rows(&rows)?))
    };
    let mut out = Vec::new();

    out.push(grad_result(
        "gradient: pairwise and global consistency",
        check(&store, fault, |g, s| {
            let t = pooled(g, |r| &r.text)?;
            let v = pooled(g, |r| &r.visual)?;
            let a = pooled(g, |r| &r.audio)?;
            let c = det.cmcg.pair_scores(g, s, t, v, a)?;
            let cg = det.cmcg.global_score(g, s, c)?;
            g.concat_cols(&[c, cg])
        }),
    ));

    out.push(grad_result(
        "gradient: consistency field alignment",
        check(&store, fault, |g, s| {
            let r = &recs[0];
            let t = g_const(g, &r.text);
            let t = det.input_proj[0].forward(g, s, t)?;
            let v = g_const(g, &r.visual);
            let v = det.input_proj[1].forward(g, s, v)?;
            let (_, attn) = det.hmt.cross[0].forward(g, s, t, v, 0.0)?;
            let f = field_mean(g, attn)?;
            let pt = pooled(g, |r| &r.text)?;
            let pv = pooled(g, |r| &r.visual)?;
            let c = det.cmcg.pair_score(g, s, 0, pt, pv)?;
            let c0 = g.slice_rows(c, 0, 1)?;
            let d = g.sub(c0, f)?;
            Ok(g.square(d))
        }),
    ));

    out.push(grad_result(
        "gradient: temporal inconsistency",
        check(&store, fault, |g, s| {
            let mut rows = Vec::new();
            for r in &recs {
                let v = g_const(g, &r.visual);
                let a = g_const(g, &r.audio);
                let d = det.tcmi.distances(g, s, v, a)?;
                rows.push(det.tcmi.summary(g, d)?);
            }
            let st = g.concat_rows(&rows)?;
            det.tcmi.score(g, s, st)
        }),
    ));

    out.push(grad_result(
        "gradient: rewrite fusion",
        check(&store, fault, |g, s| {
            let h = pooled(g, |r| &r.text)?;
            let h = det.input_proj[0].forward(g, s, h)?;
            let r0 = pooled(g, |r| &r.rewrites[0])?;
            let r1 = pooled(g, |r| &r.rewrites[1])?;
            let r0 = det.input_proj[0].forward(g, s, r0)?;
            let r1 = det.input_proj[0].forward(g, s, r1)?;
            let o = det.aarf.forward(g, s, h, &[r0, r1])?;
            g.concat_cols(&[o.h_fuse, o.alpha, o.quality])
        }),
    ));

    out.push(grad_result(
        "gradient: hierarchical transformer",
        check(&store, fault, |g, s| {
            let r = &recs[1];
            let c = g.constant(Tensor::row(&[0.3, 0.7, 0.5]));
            let betas = det.hmt.betas(g, s, c)?;
            let mut seqs = [g_const(g, &r.text), g_const(g, &r.visual), g_const(g, &r.audio)];
            for m in 0..3 {
                seqs[m] = det.input_proj[m].forward(g, s, seqs[m])?;
            }
            let sample = det.hmt.encode_sample(g, s, seqs, betas)?;
            let fuse = g.constant(Tensor::row(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2, 0.1]));
            let out = det.hmt.global_sample(g, s, sample.pooled, fuse)?;
            let mut parts = vec![out];
            parts.extend_from_slice(&sample.pooled);
            g.concat_cols(&parts)
        }),
    ));

    out.push(grad_result(
        "gradient: classifier",
        check(&store, fault, |g, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = g.constant(randn(&mut rng, 4, 13).cast());
            let o = det.classifier.forward(g, s, x, 9)?;
            g.concat_cols(&[o.p_fake, o.u_hat])
        }),
    ));

    let weights = LossWeights::default();
    let constants = {
        let mut g = Graph::training_seeded(TRAIN_SEED);
        match batch_losses(
            &det,
            &mut g,
            &store,
            &refs,
            &weights,
            0.01,
            21,
            Ablation::default(),
            None,
        ) {
            Ok(l) => l.constants,
            Err(e) => {
                out.push(formula("gradient: loss terms", false, format!("error: {e}")));
                return out;
            }
        }
    };
    for (k, name) in COMPONENTS.iter().enumerate() {
        out.push(grad_result(
            &format!("gradient: loss {name}"),
            check(&store, fault, |g, s| {
                let l = batch_losses(
                    &det,
                    g,
                    s,
                    &refs,
                    &weights,
                    0.01,
                    21,
                    Ablation::default(),
                    Some(&constants),
                )?;
                Ok(l.parts[k])
            }),
        ));
    }
    out.push(grad_result(
        "gradient: total loss",
        check(&store, fault, |g, s| {
            let l = batch_losses(
                &det,
                g,
                s,
                &refs,
                &weights,
                0.01,
                21,
                Ablation::default(),
                Some(&constants),
            )?;
            Ok(l.total)
        }),
    ));
    out
}

fn g_const(g: &mut Graph<f64>, t: &Tensor) -> Var {
    g.constant(t.cast())
}

/// Closed-form cases for renormalization, InfoNCE, entropy, the difficulty
/// score and the field-alignment term.
pub fn formula_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let det = Detector::new(ModelConfig {
        views: 2,
        ..toy_config()
    })
    .expect("valid");
    for (input, want) in [
        ([0.2, 0.5, 0.3], [0.5, 0.3125, 0.1875]),
        ([0.6, 0.25, 0.15], [0.6, 0.25, 0.15]),
    ] {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::row(&input.map(f64::ln)));
        let got = det
            .aarf
            .weights_from_logits(&mut g, logits)
            .map(|a| g.value(a).data().to_vec());
        let ok = got
            .as_ref()
            .is_ok_and(|v| v.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        out.push(formula(
            &format!("formula: rewrite weights {input:?}"),
            ok,
            format!("got {got:?}, want {want:?}"),
        ));
    }

    let mut g: Graph<f64> = Graph::new();
    let u = g.constant(Tensor::full(5, 4, 0.3));
    let l = infonce(&mut g, u, u, 0.1).map(|l| g.value(l).item());
    let ok = l.as_ref().is_ok_and(|v| (v - 5f64.ln()).abs() <= 1e-6);
    out.push(formula(
        "formula: InfoNCE uniform case equals ln N",
        ok,
        format!("{l:?} vs {}", 5f64.ln()),
    ));

    let e = entropy(0.5);
    out.push(formula(
        "formula: entropy(0.5) equals ln 2",
        (e - std::f64::consts::LN_2).abs() <= 1e-9,
        format!("{e}"),
    ));

    let norms = Norms {
        u_ent: Range { min: 0.1, max: 0.6 },
        c_global: Range { min: 0.2, max: 0.8 },
        conf: Range { min: 0.55, max: 0.99 },
    };
    let hi = difficulty_score(0.6, 0.2, 0.55, &norms);
    let lo = difficulty_score(0.1, 0.8, 0.99, &norms);
    out.push(formula(
        "formula: difficulty score extremes",
        hi == 3.0 && lo == 0.0,
        format!("max {hi}, min {lo}"),
    ));

    let fields = vec![vec![0.4, 0.6], vec![0.9, 0.7, 0.8], vec![0.25]];
    let aligned = field_alignment_loss(&[0.5, 0.8, 0.25], &fields);
    let off = field_alignment_loss(&[0.5, 0.8, 0.35], &fields);
    let ok = matches!((&aligned, &off), (Ok(a), Ok(b)) if a.abs() < 1e-15 && *b > 0.0);
    out.push(formula(
        "formula: field alignment zero iff aligned",
        ok,
        format!("aligned {aligned:?}, misaligned {off:?}"),
    ));
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

pub fn run_suite(fault: Option<Fault>) -> SuiteReport {
    let t = Instant::now();
    let mut results = gradient_checks(fault);
    results.extend(formula_checks());
    SuiteReport {
        results,
        seconds: t.elapsed().as_secs_f64(),
    }
}
