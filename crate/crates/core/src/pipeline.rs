//! Stage functions behind the command-line tool: generate, train, eval,
//! route and analyze, plus the file formats passed between them.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    auc, calibration_bins, class_stats, classification_metrics, correlation_analysis, count_increases,
    quantile_fake_rates, style_variance, AnalysisError, Calibration, ClassMetrics, ClassStats, CorrelationReport,
    StyleVariance, BOOTSTRAP_RESAMPLES,
};
use crate::features::{chronological_split, FeatureError, FeatureRecord, SyntheticSpec};
use crate::model::{Ablation, Detector, ModelConfig};
use crate::routing::{
    route, scores, tune_threshold, two_stage_eval, Norms, RoutingDecision, RoutingError, Stage1, Strategy, Threshold,
    TwoStageReport, VerdictProvider,
};
use crate::training::{train, EpochRecord, LossWeights, TrainConfig, TrainError, TrainOutcome};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad flags, paths or configuration.
    #[error("{0}")]
    User(String),
    /// Unreadable or inconsistent input data.
    #[error("{0}")]
    Data(String),
    /// A non-finite value during training.
    #[error("{0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::User(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::User(_) => "user",
            Self::Data(_) => "data",
            Self::Numerical(_) => "numerical",
        }
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Split(m) => Self::User(format!("split: {m}")),
            e => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(m) => Self::User(m),
            e @ TrainError::NonFinite { .. } => Self::Numerical(e.to_string()),
            TrainError::Tensor(e) => Self::Data(e.to_string()),
        }
    }
}

impl From<RoutingError> for PipelineError {
    fn from(e: RoutingError) -> Self {
        match e {
            RoutingError::Input(m) => Self::User(m),
            e => Self::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for PipelineError {
    fn from(e: AnalysisError) -> Self {
        Self::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub strategy: Strategy,
    pub ratio: f64,
    /// `synthetic:<accuracy>:<seed>` or `replay:<path>`.
    pub provider: String,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Entropy,
            ratio: 0.25,
            provider: "synthetic:0.95:0".into(),
        }
    }
}

/// Everything a run can be configured with. Config files use the same
/// section names: `model`, `train`, `weights`, `synthetic`, `split`,
/// `routing`, plus a top-level `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
    pub routing: RoutingConfig,
}

impl RunConfig {
    /// Pushes the global seed into every seeded section.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synthetic.seed = s;
            self.train.seed = s;
        }
    }

    /// Bootstrap seed for the analysis report.
    pub fn analysis_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Overlays a JSON or TOML config file (by extension; `.toml` is TOML,
    /// anything else JSON) on top of `self`. Keys present in the file win.
    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let file = read_config_value(path)?;
        let mut base = serde_json::to_value(self).map_err(|e| PipelineError::User(e.to_string()))?;
        merge(&mut base, file);
        serde_json::from_value(base).map_err(|e| PipelineError::User(format!("config {}: {e}", path.display())))
    }
}

/// A JSON or TOML file as a JSON value; `.toml` selects TOML.
pub fn read_config_value(path: &Path) -> Result<serde_json::Value> {
    let bad = |e: String| PipelineError::User(format!("config {}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    if path.extension().is_some_and(|x| x == "toml") {
        let v: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(v).map_err(|e| bad(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never see a partial file. Creates parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| PipelineError::User(format!("write {}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PipelineError::User(format!("read {}: {e}", path.display())))
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("serializable row"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{what} line {}: {e}", i + 1))))
        .collect()
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

/// Chronological train/validation/test split.
pub fn split_records(
    records: &[FeatureRecord],
    split: &SplitConfig,
) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    Ok(chronological_split(records, (split.train, split.val, split.test))?)
}

/// Builds a detector from `cfg.model` and trains it on the split corpus.
pub fn train_stage(
    records: &[FeatureRecord],
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (tr, va, _) = split_records(records, &cfg.split)?;
    let det = Detector::new(cfg.model.clone()).map_err(|e| PipelineError::User(format!("model config: {e}")))?;
    if let Some(r) = records.first() {
        det.check_record(r)
            .map_err(|e| PipelineError::Data(format!("record {}: {e}", r.id)))?;
    }
    Ok(train(det, &tr, &va, &cfg.train, &cfg.weights, on_epoch)?)
}

/// Training summary written next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub epochs: Vec<EpochRecord>,
}

impl From<&TrainOutcome> for TrainHistory {
    fn from(o: &TrainOutcome) -> Self {
        Self {
            best_epoch: o.best_epoch,
            best_val_macro_f1: o.best_val_macro_f1,
            epochs: o.history.clone(),
        }
    }
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub label: u8,
    pub p_fake: f64,
    pub conf: f64,
    pub u_ent: f64,
    pub u_hat: f64,
    pub u_comp: f64,
    pub c_global: f64,
}

impl PredictionRow {
    pub fn stage1(&self) -> Stage1 {
        Stage1 {
            id: self.id.clone(),
            label: self.label,
            p_fake: self.p_fake,
            conf: self.conf,
            u_ent: self.u_ent,
            c_global: self.c_global,
        }
    }
}

/// One line of the consistency-bundle file. `views` holds
/// `[c_tv, c_ta, c_va]` for the original text and then each rewrite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleRow {
    pub id: String,
    pub c_tv: f32,
    pub c_ta: f32,
    pub c_va: f32,
    pub c_global: f32,
    pub c_temp: f32,
    pub fields: IndexMap<String, Vec<f32>>,
    pub views: Vec<[f32; 3]>,
}

pub fn eval_stage(
    det: &Detector,
    records: &[FeatureRecord],
    ablation: Ablation,
) -> Result<(Vec<PredictionRow>, Vec<BundleRow>)> {
    for r in records {
        det.check_record(r)
            .map_err(|e| PipelineError::Data(format!("record {}: {e}", r.id)))?;
    }
    let inf = det
        .infer(records, ablation)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let mut preds = Vec::with_capacity(records.len());
    let mut bundles = Vec::with_capacity(records.len());
    for (r, x) in records.iter().zip(inf) {
        let p = x.prediction;
        preds.push(PredictionRow {
            id: r.id.clone(),
            label: r.label,
            p_fake: p.p_fake,
            conf: p.conf,
            u_ent: p.u_ent,
            u_hat: p.u_hat,
            u_comp: p.u_comp,
            c_global: x.bundle.c_global as f64,
        });
        bundles.push(BundleRow {
            id: r.id.clone(),
            c_tv: x.bundle.c_tv,
            c_ta: x.bundle.c_ta,
            c_va: x.bundle.c_va,
            c_global: x.bundle.c_global,
            c_temp: x.bundle.c_temp,
            fields: x.bundle.fields,
            views: x.view_scores,
        });
    }
    Ok((preds, bundles))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub strategy: Strategy,
    pub provider: String,
    pub norms: Norms,
    pub threshold: Threshold,
    pub evaluation: TwoStageReport,
    pub decisions: Vec<RoutingDecision>,
}

/// Tunes the threshold on validation predictions, routes the test
/// predictions and scores the two-stage result.
pub fn route_stage(val: &[PredictionRow], test: &[PredictionRow], routing: &RoutingConfig) -> Result<RoutingReport> {
    let provider = VerdictProvider::parse(&routing.provider)?;
    let val: Vec<Stage1> = val.iter().map(PredictionRow::stage1).collect();
    let test: Vec<Stage1> = test.iter().map(PredictionRow::stage1).collect();
    let norms = Norms::fit(&val)?;
    let threshold = tune_threshold(&scores(routing.strategy, &val, &norms), routing.ratio)?;
    let ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    let decisions = route(
        &ids,
        &scores(routing.strategy, &test, &norms),
        routing.strategy,
        threshold.threshold,
    );
    let evaluation = two_stage_eval(&test, &decisions, &provider)?;
    Ok(RoutingReport {
        strategy: routing.strategy,
        provider: routing.provider.clone(),
        norms,
        threshold,
        evaluation,
        decisions,
    })
}

pub const SCORE_NAMES: [&str; 5] = ["c_tv", "c_ta", "c_va", "c_global", "c_temp"];
pub const PAIR_NAMES: [&str; 3] = ["c_tv", "c_ta", "c_va"];
pub const QUANTILE_BINS: usize = 5;
pub const CALIBRATION_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyAxis {
    /// `c_global` against `p_fake`.
    pub correlation: CorrelationReport,
    /// Fake rate per equal-count bin of `c_global`, lowest first.
    pub quantile_fake_rates: Vec<f64>,
    pub quantile_increases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n: usize,
    pub metrics: ClassMetrics,
    pub auc: f64,
    pub calibration: Calibration,
    pub consistency: IndexMap<String, ClassStats>,
    pub consistency_axis: ConsistencyAxis,
    pub style_variance: IndexMap<String, StyleVariance>,
    pub routing: Option<RoutingReport>,
}

fn joined<'a>(preds: &'a [PredictionRow], bundles: &'a [BundleRow]) -> Result<Vec<(&'a PredictionRow, &'a BundleRow)>> {
    let by_id: std::collections::HashMap<&str, &BundleRow> = bundles.iter().map(|b| (b.id.as_str(), b)).collect();
    if by_id.len() != bundles.len() {
        return Err(PipelineError::Data("duplicate ids in bundles".into()));
    }
    preds
        .iter()
        .map(|p| {
            by_id
                .get(p.id.as_str())
                .map(|b| (p, *b))
                .ok_or_else(|| PipelineError::Data(format!("no bundle for prediction {}", p.id)))
        })
        .collect()
}

pub fn analyze_stage(
    preds: &[PredictionRow],
    bundles: &[BundleRow],
    routing: Option<RoutingReport>,
    seed: u64,
) -> Result<AnalysisReport> {
    let rows = joined(preds, bundles)?;
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let p_fake: Vec<f64> = preds.iter().map(|p| p.p_fake).collect();
    let predicted: Vec<u8> = preds.iter().map(|p| u8::from(p.p_fake > 0.5)).collect();
    let metrics = classification_metrics(&predicted, &labels)?;
    let conf: Vec<f64> = preds.iter().map(|p| p.conf).collect();
    let correct: Vec<bool> = predicted.iter().zip(&labels).map(|(a, b)| a == b).collect();

    let score = |b: &BundleRow, k: usize| -> f64 { [b.c_tv, b.c_ta, b.c_va, b.c_global, b.c_temp][k] as f64 };
    let mut consistency = IndexMap::new();
    for (k, name) in SCORE_NAMES.iter().enumerate() {
        let xs: Vec<f64> = rows.iter().map(|(_, b)| score(b, k)).collect();
        consistency.insert(name.to_string(), class_stats(&xs, &labels)?);
    }

    let c_global: Vec<f64> = rows.iter().map(|(_, b)| b.c_global as f64).collect();
    let rates = quantile_fake_rates(&c_global, &labels, QUANTILE_BINS)?;
    let consistency_axis = ConsistencyAxis {
        correlation: correlation_analysis(&c_global, &p_fake)?,
        quantile_increases: count_increases(&rates),
        quantile_fake_rates: rates,
    };

    let mut styles = IndexMap::new();
    for (k, name) in PAIR_NAMES.iter().enumerate() {
        let views: Vec<Vec<f64>> = rows
            .iter()
            .map(|(_, b)| b.views.iter().map(|v| v[k] as f64).collect())
            .collect();
        let s = crate::graph::splitmix64(seed ^ k as u64);
        styles.insert(
            name.to_string(),
            style_variance(&views, &labels, BOOTSTRAP_RESAMPLES, s)?,
        );
    }

    Ok(AnalysisReport {
        n: preds.len(),
        metrics,
        auc: auc(&p_fake, &labels)?,
        calibration: calibration_bins(&conf, &correct, CALIBRATION_BINS)?,
        consistency,
        consistency_axis,
        style_variance: styles,
        routing,
    })
}

/// Plot data as `(file name, CSV text)` pairs: per-class score
/// distributions, the `c_global` / `p_fake` scatter, calibration bins and,
/// when routing was run, the routed/non-routed split.
pub fn plot_csvs(
    preds: &[PredictionRow],
    bundles: &[BundleRow],
    report: &AnalysisReport,
) -> Result<Vec<(&'static str, String)>> {
    let rows = joined(preds, bundles)?;
    let mut dist = String::from("id,label,c_tv,c_ta,c_va,c_global,c_temp\n");
    let mut scatter = String::from("id,label,c_global,p_fake\n");
    for (p, b) in &rows {
        dist.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.id, p.label, b.c_tv, b.c_ta, b.c_va, b.c_global, b.c_temp
        ));
        scatter.push_str(&format!("{},{},{},{}\n", p.id, p.label, b.c_global, p.p_fake));
    }
    let mut calib = String::from("lo,hi,midpoint,mean_conf,accuracy,count\n");
    for b in &report.calibration.bins {
        calib.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.lo, b.hi, b.midpoint, b.mean_conf, b.accuracy, b.count
        ));
    }
    let mut out = vec![
        ("distributions.csv", dist),
        ("scatter.csv", scatter),
        ("calibration.csv", calib),
    ];
    if let Some(r) = &report.routing {
        let by_id: std::collections::HashMap<&str, &PredictionRow> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut split = String::from("id,label,score,routed,stage1_correct\n");
        for d in &r.decisions {
            let p = by_id
                .get(d.id.as_str())
                .ok_or_else(|| PipelineError::Data(format!("routing decision for unknown id {}", d.id)))?;
            let ok = u8::from(p.p_fake > 0.5) == p.label;
            split.push_str(&format!("{},{},{},{},{}\n", d.id, p.label, d.score, d.routed, ok));
        }
        out.push(("routing.csv", split));
    }
    Ok(out)
}
