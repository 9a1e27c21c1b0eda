use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tricon::checks::run_suite;
use tricon::features::{decode_container, encode_container, generate_synthetic, FeatureRecord};
use tricon::graph::Fault;
use tricon::model::{Ablation, Detector};
use tricon::pipeline::{
    analyze_stage, eval_stage, from_jsonl, plot_csvs, read_config_value, read_input, route_stage, split_records,
    to_json_pretty, to_jsonl, train_stage, write_atomic, BundleRow, PipelineError, PredictionRow, Result,
    RoutingReport, RunConfig, TrainHistory,
};
use tricon::routing::Strategy;

#[derive(Parser, Debug)]
#[command(
    name = "tricon",
    version,
    about = "Tri-modal consistency detector on cached video features"
)]
struct Cli {
    /// Seed for data generation, training and the analysis bootstrap.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel inference (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON or TOML config file; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature container.
    Generate(GenerateArgs),
    /// Train a detector and write a checkpoint plus training history.
    Train(TrainArgs),
    /// Score one split of a container with a trained checkpoint.
    Eval(EvalArgs),
    /// Route hard test samples to a stage-2 verdict provider.
    Route(RouteArgs),
    /// Metrics, consistency statistics and plot data from eval outputs.
    Analyze(AnalyzeArgs),
    /// Run the built-in gradient and formula checks.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// `default` or a JSON/TOML file with generator settings.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Training history JSON (default: `<out>.history.json`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    /// Zero the consistency inputs to the classifier.
    #[arg(long)]
    no_consistency_inputs: bool,
    /// Use the original text embedding instead of rewrite fusion.
    #[arg(long)]
    no_rewrite_fusion: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Predictions JSON-lines.
    #[arg(long)]
    out: PathBuf,
    /// Consistency bundles JSON-lines.
    #[arg(long)]
    bundles: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RouteArgs {
    /// Validation predictions, used to fit normalization and the threshold.
    #[arg(long)]
    val: PathBuf,
    /// Predictions to route.
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    ratio: Option<f64>,
    /// `synthetic:<accuracy>:<seed>` or `replay:<path>`.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    bundles: PathBuf,
    /// Routing report from `route`, folded into the report.
    #[arg(long)]
    routing: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for plot-data CSVs (default: next to `--out`).
    #[arg(long)]
    plots: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultName {
    Sigmoid,
    Matmul,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Corrupt one backward rule to confirm the checks catch it.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultName>,
}

fn log(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::Map::new();
    obj.insert("event".into(), json!(event));
    if let serde_json::Value::Object(m) = fields {
        obj.extend(m);
    }
    eprintln!("{}", serde_json::Value::Object(obj));
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::User(format!("{what} {} does not exist", path.display())))
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    require(path, what)?;
    String::from_utf8(read_input(path)?).map_err(|e| PipelineError::Data(format!("{what}: {e}")))
}

/// Flags first, then the config file on top.
fn run_config(cli: &Cli, flags: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        seed: cli.seed,
        ..RunConfig::default()
    };
    flags(&mut cfg);
    if let Some(p) = &cli.config {
        require(p, "config")?;
        cfg = cfg.overlay_file(p)?;
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn load_records(path: &Path) -> Result<Vec<FeatureRecord>> {
    require(path, "data")?;
    Ok(decode_container(&read_input(path)?)?)
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let mut cfg = run_config(cli, |_| {})?;
    if a.spec != "default" {
        let p = PathBuf::from(&a.spec);
        require(&p, "generator spec")?;
        cfg.synthetic = serde_json::from_value(read_config_value(&p)?)
            .map_err(|e| PipelineError::User(format!("generator spec: {e}")))?;
        cfg.apply_seed();
    }
    let corpus = generate_synthetic(&cfg.synthetic).map_err(PipelineError::User)?;
    for w in &corpus.warnings {
        log("warning", json!({ "message": w }));
    }
    let bytes = encode_container(&corpus.records)?;
    write_atomic(&a.out, &bytes)?;
    log(
        "generated",
        json!({ "records": corpus.records.len(), "bytes": bytes.len(), "out": a.out }),
    );
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = run_config(cli, |c| {
        if let Some(e) = a.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = a.lr {
            c.train.lr = lr;
        }
        if let Some(b) = a.batch {
            c.train.batch = b;
        }
        c.train.ablation = Ablation {
            no_consistency_inputs: a.no_consistency_inputs,
            no_rewrite_fusion: a.no_rewrite_fusion,
        };
    })?;
    let records = load_records(&a.data)?;
    let start = Instant::now();
    let outcome = train_stage(&records, &cfg, |r| {
        log(
            "epoch",
            json!({
                "epoch": r.epoch,
                "total": r.total,
                "losses": r.losses,
                "lr": r.lr,
                "val_accuracy": r.val_accuracy,
                "val_macro_f1": r.val_macro_f1,
                "seconds": start.elapsed().as_secs_f64(),
            }),
        )
    })?;
    let mut ckpt = Vec::new();
    outcome
        .detector
        .write_checkpoint(&mut ckpt)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    write_atomic(&a.out, &ckpt)?;
    let history = a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.json");
        PathBuf::from(s)
    });
    write_atomic(&history, to_json_pretty(&TrainHistory::from(&outcome)).as_bytes())?;
    log(
        "trained",
        json!({
            "best_epoch": outcome.best_epoch,
            "best_val_macro_f1": outcome.best_val_macro_f1,
            "checkpoint": a.out,
            "history": history,
        }),
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = run_config(cli, |_| {})?;
    let records = load_records(&a.data)?;
    require(&a.checkpoint, "checkpoint")?;
    let det = Detector::read_checkpoint(read_input(&a.checkpoint)?.as_slice())
        .map_err(|e| PipelineError::Data(format!("checkpoint: {e}")))?;
    let records = match a.split {
        SplitName::All => records,
        s => {
            let (tr, va, te) = split_records(&records, &cfg.split)?;
            match s {
                SplitName::Train => tr,
                SplitName::Val => va,
                _ => te,
            }
        }
    };
    let (preds, bundles) = eval_stage(&det, &records, cfg.train.ablation)?;
    write_atomic(&a.out, to_jsonl(&preds).as_bytes())?;
    if let Some(b) = &a.bundles {
        write_atomic(b, to_jsonl(&bundles).as_bytes())?;
    }
    log(
        "evaluated",
        json!({ "records": preds.len(), "out": a.out, "bundles": a.bundles }),
    );
    Ok(())
}

fn route_cmd(cli: &Cli, a: &RouteArgs) -> Result<()> {
    let cfg = run_config(cli, |c| {
        if let Some(s) = a.strategy {
            c.routing.strategy = s;
        }
        if let Some(r) = a.ratio {
            c.routing.ratio = r;
        }
        if let Some(p) = &a.provider {
            c.routing.provider = p.clone();
        }
    })?;
    let val: Vec<PredictionRow> = from_jsonl(&read_text(&a.val, "validation predictions")?, "validation predictions")?;
    let test: Vec<PredictionRow> = from_jsonl(&read_text(&a.preds, "predictions")?, "predictions")?;
    let report = route_stage(&val, &test, &cfg.routing)?;
    write_atomic(&a.out, to_json_pretty(&report).as_bytes())?;
    let e = &report.evaluation;
    log(
        "routed",
        json!({
            "strategy": report.strategy,
            "routed": e.routed,
            "n": e.n,
            "stage1_accuracy": e.stage1_accuracy,
            "two_stage_accuracy": e.two_stage_accuracy,
        }),
    );
    Ok(())
}

fn analyze_cmd(cli: &Cli, a: &AnalyzeArgs) -> Result<()> {
    let cfg = run_config(cli, |_| {})?;
    let preds: Vec<PredictionRow> = from_jsonl(&read_text(&a.preds, "predictions")?, "predictions")?;
    let bundles: Vec<BundleRow> = from_jsonl(&read_text(&a.bundles, "bundles")?, "bundles")?;
    let routing: Option<RoutingReport> = match &a.routing {
        Some(p) => Some(
            serde_json::from_str(&read_text(p, "routing report")?)
                .map_err(|e| PipelineError::Data(format!("routing report: {e}")))?,
        ),
        None => None,
    };
    let report = analyze_stage(&preds, &bundles, routing, cfg.analysis_seed())?;
    write_atomic(&a.out, to_json_pretty(&report).as_bytes())?;
    let dir = a.plots.clone().unwrap_or_else(|| match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    });
    for (name, csv) in plot_csvs(&preds, &bundles, &report)? {
        write_atomic(&dir.join(name), csv.as_bytes())?;
    }
    log(
        "analyzed",
        json!({ "n": report.n, "accuracy": report.metrics.accuracy, "auc": report.auc, "out": a.out }),
    );
    Ok(())
}

fn check_cmd(a: &CheckArgs) -> Result<()> {
    let fault = a.inject_fault.map(|f| match f {
        FaultName::Sigmoid => Fault::SigmoidGrad,
        FaultName::Matmul => Fault::MatmulGrad,
    });
    let report = run_suite(fault);
    for r in &report.results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = report.results.iter().filter(|r| !r.passed).count();
    log(
        "checked",
        json!({ "checks": report.results.len(), "failed": failed, "seconds": report.seconds }),
    );
    if failed > 0 {
        return Err(PipelineError::Numerical(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PipelineError::User("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::User(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Route(a) => route_cmd(cli, a),
        Command::Analyze(a) => analyze_cmd(cli, a),
        Command::Check(a) => check_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log("error", json!({ "kind": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
