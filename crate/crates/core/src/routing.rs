//! Two-stage inference: score samples, escalate the hardest fraction to a
//! stage-2 verdict provider, and compare against stage 1 alone.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::classification_metrics;
use crate::graph::splitmix64;

/// Below this width a min-max range is treated as degenerate.
pub const DEGENERATE_RANGE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("{0}")]
    Input(String),
    #[error("stage-2 provider has no verdict for routed sample {0}")]
    MissingVerdict(String),
    #[error("replay file line {line}: {reason}")]
    Replay { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, RoutingError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Entropy,
    Difficulty,
}

/// Stage-1 outputs of one sample as routing sees them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1 {
    pub id: String,
    pub label: u8,
    pub p_fake: f64,
    pub conf: f64,
    pub u_ent: f64,
    pub c_global: f64,
}

impl Stage1 {
    pub fn predicted(&self) -> u8 {
        u8::from(self.p_fake > 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn fit(xs: impl IntoIterator<Item = f64>) -> Self {
        xs.into_iter().fold(
            Range {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            },
            |r, x| Range {
                min: r.min.min(x),
                max: r.max.max(x),
            },
        )
    }

    /// Min-max normalized value clamped to `[0, 1]`; 0 for a degenerate range.
    pub fn normalize(&self, x: f64) -> f64 {
        let w = self.max - self.min;
        if !(w >= DEGENERATE_RANGE) {
            return 0.0;
        }
        ((x - self.min) / w).clamp(0.0, 1.0)
    }
}

/// Normalization ranges for the difficulty score, fit on validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub u_ent: Range,
    pub c_global: Range,
    pub conf: Range,
}

impl Norms {
    pub fn fit(val: &[Stage1]) -> Result<Self> {
        if val.is_empty() {
            return Err(RoutingError::Input("cannot fit normalization on an empty set".into()));
        }
        Ok(Self {
            u_ent: Range::fit(val.iter().map(|s| s.u_ent)),
            c_global: Range::fit(val.iter().map(|s| s.c_global)),
            conf: Range::fit(val.iter().map(|s| s.conf)),
        })
    }
}

/// `norm(u_ent) + (1 - norm(c_global)) + (1 - norm(conf))`, in `[0, 3]`.
/// A degenerate range contributes 0 for its whole term.
pub fn difficulty_score(u_ent: f64, c_global: f64, conf: f64, norms: &Norms) -> f64 {
    let inv = |r: &Range, x: f64| {
        if r.max - r.min >= DEGENERATE_RANGE {
            1.0 - r.normalize(x)
        } else {
            0.0
        }
    };
    norms.u_ent.normalize(u_ent) + inv(&norms.c_global, c_global) + inv(&norms.conf, conf)
}

pub fn scores(strategy: Strategy, samples: &[Stage1], norms: &Norms) -> Vec<f64> {
    samples
        .iter()
        .map(|s| match strategy {
            Strategy::Entropy => s.u_ent,
            Strategy::Difficulty => difficulty_score(s.u_ent, s.c_global, s.conf, norms),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub threshold: f64,
    pub target_ratio: f64,
    /// Samples the threshold routes on the set it was tuned on.
    pub routed: usize,
    pub target: usize,
    /// `routed - target`; nonzero only when ties straddle the threshold.
    pub deviation: i64,
}

/// Threshold at the `1 - ratio` quantile: the `round(ratio * n)` largest
/// scores lie strictly above it unless ties prevent that.
pub fn tune_threshold(val_scores: &[f64], ratio: f64) -> Result<Threshold> {
    if val_scores.is_empty() {
        return Err(RoutingError::Input("no validation scores".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(RoutingError::Input(format!("routing ratio {ratio} must lie in (0,1)")));
    }
    if val_scores.iter().any(|s| !s.is_finite()) {
        return Err(RoutingError::Input("non-finite routing score".into()));
    }
    let mut sorted = val_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let target = ((ratio * n as f64).round() as usize).min(n);
    let threshold = if target == 0 {
        sorted[n - 1]
    } else if target == n {
        sorted[0] - 1.0
    } else {
        sorted[n - target - 1]
    };
    let routed = sorted.iter().filter(|&&s| s > threshold).count();
    Ok(Threshold {
        threshold,
        target_ratio: ratio,
        routed,
        target,
        deviation: routed as i64 - target as i64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub id: String,
    pub strategy: Strategy,
    pub score: f64,
    pub routed: bool,
    pub final_label_source: LabelSource,
}

/// Routed exactly when `score > threshold`.
pub fn route(ids: &[String], scores: &[f64], strategy: Strategy, threshold: f64) -> Vec<RoutingDecision> {
    ids.iter()
        .zip(scores)
        .map(|(id, &score)| {
            let routed = score > threshold;
            RoutingDecision {
                id: id.clone(),
                strategy,
                score,
                routed,
                final_label_source: if routed {
                    LabelSource::Stage2
                } else {
                    LabelSource::Stage1
                },
            }
        })
        .collect()
}

/// Stand-in for the expensive stage-2 detector.
#[derive(Clone, Debug, PartialEq)]
pub enum VerdictProvider {
    /// Returns the true label with probability `accuracy`, independently
    /// per id and deterministically given `seed`.
    Synthetic { accuracy: f64, seed: u64 },
    /// Verdicts looked up by id.
    Replay(HashMap<String, u8>),
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl VerdictProvider {
    /// Parses `synthetic:<accuracy>:<seed>` or `replay:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("synthetic:") {
            let (acc, seed) = rest
                .split_once(':')
                .ok_or_else(|| RoutingError::Input(format!("expected synthetic:<accuracy>:<seed>, got {spec}")))?;
            let accuracy: f64 = acc
                .parse()
                .map_err(|_| RoutingError::Input(format!("bad accuracy {acc}")))?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(RoutingError::Input(format!("accuracy {accuracy} must lie in [0,1]")));
            }
            let seed = seed
                .parse()
                .map_err(|_| RoutingError::Input(format!("bad seed {seed}")))?;
            Ok(Self::Synthetic { accuracy, seed })
        } else if let Some(path) = spec.strip_prefix("replay:") {
            Self::read_replay(Path::new(path))
        } else {
            Err(RoutingError::Input(format!("unknown provider {spec}")))
        }
    }

    pub fn read_replay(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            verdict: u8,
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut map = HashMap::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| RoutingError::Replay {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if l.verdict > 1 {
                return Err(RoutingError::Replay {
                    line: i + 1,
                    reason: format!("verdict {} is not 0 or 1", l.verdict),
                });
            }
            map.insert(l.id, l.verdict);
        }
        Ok(Self::Replay(map))
    }

    pub fn verdict(&self, id: &str, label: u8) -> Result<u8> {
        match self {
            Self::Synthetic { accuracy, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(id.as_bytes())));
                let correct = rng.random::<f64>() < *accuracy;
                Ok(if correct { label } else { 1 - label })
            }
            Self::Replay(map) => map
                .get(id)
                .copied()
                .ok_or_else(|| RoutingError::MissingVerdict(id.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub n: usize,
    pub routed: usize,
    pub routed_fraction: f64,
    pub stage1_accuracy: f64,
    pub stage1_macro_f1: f64,
    pub two_stage_accuracy: f64,
    pub two_stage_macro_f1: f64,
    pub stage1_accuracy_routed: Option<f64>,
    pub stage1_accuracy_non_routed: Option<f64>,
    pub provider_accuracy_routed: Option<f64>,
}

fn frac(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Final label: stage-2 verdict when routed, stage-1 argmax otherwise.
pub fn two_stage_eval(
    samples: &[Stage1],
    decisions: &[RoutingDecision],
    provider: &VerdictProvider,
) -> Result<TwoStageReport> {
    if samples.is_empty() || samples.len() != decisions.len() {
        return Err(RoutingError::Input(format!(
            "{} samples with {} decisions",
            samples.len(),
            decisions.len()
        )));
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let stage1: Vec<u8> = samples.iter().map(Stage1::predicted).collect();
    let mut final_ = stage1.clone();
    let (mut r_n, mut r_hit, mut nr_n, mut nr_hit, mut prov_hit) = (0, 0, 0, 0, 0);
    for (i, (s, d)) in samples.iter().zip(decisions).enumerate() {
        if s.id != d.id {
            return Err(RoutingError::Input(format!(
                "decision {} does not match sample {}",
                d.id, s.id
            )));
        }
        let ok = usize::from(stage1[i] == s.label);
        if d.routed {
            let v = provider.verdict(&s.id, s.label)?;
            final_[i] = v;
            r_n += 1;
            r_hit += ok;
            prov_hit += usize::from(v == s.label);
        } else {
            nr_n += 1;
            nr_hit += ok;
        }
    }
    let m1 = classification_metrics(&stage1, &labels).map_err(|e| RoutingError::Input(e.to_string()))?;
    let m2 = classification_metrics(&final_, &labels).map_err(|e| RoutingError::Input(e.to_string()))?;
    Ok(TwoStageReport {
        n: samples.len(),
        routed: r_n,
        routed_fraction: r_n as f64 / samples.len() as f64,
        stage1_accuracy: m1.accuracy,
        stage1_macro_f1: m1.macro_f1,
        two_stage_accuracy: m2.accuracy,
        two_stage_macro_f1: m2.macro_f1,
        stage1_accuracy_routed: frac(r_hit, r_n),
        stage1_accuracy_non_routed: frac(nr_hit, nr_n),
        provider_accuracy_routed: frac(prov_hit, r_n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, label: u8, p: f64) -> Stage1 {
        let u_ent = crate::classifier::entropy(p);
        Stage1 {
            id: format!("s{id}"),
            label,
            p_fake: p,
            conf: p.max(1.0 - p),
            u_ent,
            c_global: 0.5,
        }
    }

    #[test]
    fn threshold_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = tune_threshold(&s, 0.25).unwrap();
        assert_eq!((t.threshold, t.routed, t.deviation), (75.0, 25, 0));

        let t = tune_threshold(&[2.0; 8], 0.25).unwrap();
        assert_eq!(t.routed, 0);
        assert_eq!(t.deviation, -2);

        let s: Vec<f64> = (0..400).map(|i| ((i * 7919) % 400) as f64).collect();
        let t = tune_threshold(&s, 0.251).unwrap();
        assert!(t.routed == 100 || t.routed == 101);
        assert!(tune_threshold(&s, 1.0).is_err());
    }

    #[test]
    fn route_examples() {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let ent = [0.1, 0.2, 0.69, 0.5];
        let t = tune_threshold(&ent, 0.25).unwrap();
        let d = route(&ids, &ent, Strategy::Entropy, t.threshold);
        assert_eq!(
            d.iter().map(|d| d.routed).collect::<Vec<_>>(),
            vec![false, false, true, false]
        );
        assert!(d
            .iter()
            .all(|d| d.routed == (d.final_label_source == LabelSource::Stage2)));
        let none = route(&ids, &ent, Strategy::Entropy, 1.0);
        assert!(none.iter().all(|d| !d.routed));
        // ties at the threshold stay with stage 1
        assert!(!route(&ids[..1], &[0.5], Strategy::Entropy, 0.5)[0].routed);
    }

    #[test]
    fn difficulty_extremes() {
        let norms = Norms {
            u_ent: Range { min: 0.0, max: 0.69 },
            c_global: Range { min: 0.2, max: 0.9 },
            conf: Range { min: 0.5, max: 1.0 },
        };
        assert_eq!(difficulty_score(0.69, 0.2, 0.5, &norms), 3.0);
        assert_eq!(difficulty_score(0.0, 0.9, 1.0, &norms), 0.0);
        let flat = Norms {
            c_global: Range { min: 0.4, max: 0.4 },
            ..norms
        };
        assert_eq!(difficulty_score(0.0, 0.4, 1.0, &flat), 0.0);
    }

    #[test]
    fn two_stage_arithmetic() {
        // 8 confident and correct, 2 confidently wrong
        let mut s: Vec<Stage1> = (0..8)
            .map(|i| sample(i, (i % 2) as u8, if i % 2 == 1 { 0.95 } else { 0.05 }))
            .collect();
        s.push(sample(8, 1, 0.45));
        s.push(sample(9, 0, 0.55));
        let ids: Vec<String> = s.iter().map(|x| x.id.clone()).collect();
        let sc: Vec<f64> = s.iter().map(|x| x.u_ent).collect();
        let t = tune_threshold(&sc, 0.2).unwrap();
        let d = route(&ids, &sc, Strategy::Entropy, t.threshold);
        let perfect = VerdictProvider::Synthetic { accuracy: 1.0, seed: 1 };
        let r = two_stage_eval(&s, &d, &perfect).unwrap();
        assert_eq!((r.routed, r.stage1_accuracy, r.two_stage_accuracy), (2, 0.8, 1.0));
        assert_eq!(r.stage1_accuracy_routed, Some(0.0));

        let replay = VerdictProvider::Replay(HashMap::from([("s8".to_string(), 1)]));
        match two_stage_eval(&s, &d, &replay) {
            Err(RoutingError::MissingVerdict(id)) => assert_eq!(id, "s9"),
            other => panic!("expected missing verdict, got {other:?}"),
        }
    }

    #[test]
    fn provider_parsing() {
        assert_eq!(
            VerdictProvider::parse("synthetic:0.9:5").unwrap(),
            VerdictProvider::Synthetic { accuracy: 0.9, seed: 5 }
        );
        assert!(VerdictProvider::parse("synthetic:1.5:5").is_err());
        assert!(VerdictProvider::parse("oracle").is_err());
    }
}
