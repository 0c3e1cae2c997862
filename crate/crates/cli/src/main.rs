use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgtp_core::inference::{predict_all, PredictConfig};
use cgtp_core::metrics::{metric_rows, read_submissions, write_submissions, EvalRecord, MetricsError, MissRegime, Submission};
use cgtp_core::model::{prepare_scenario, Cgtp, ModelConfig, PreparedScenario};
use cgtp_core::scene::{generate_synthetic_scenario, read_scenarios, write_scenarios, Scenario, ScenarioKind, SceneError};
use cgtp_core::training::{train_epoch, Checkpoint, EpochReport, TrainConfig, TrainError, CHECKPOINT_FORMAT};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

mod plot;

#[derive(Parser, Debug)]
#[command(name = "cgtp", version, about = "Conditional goal-oriented joint trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic interaction scenarios as JSON lines.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Run joint prediction and write a submission file.
    Predict(PredictArgs),
    /// Score a submission file against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Comma-separated kinds or `all`.
    #[arg(long, default_value = "all")]
    kinds: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Small,
    Full,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint up to `--epochs` total epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Train without the interactive goal loss.
    #[arg(long)]
    no_interactive_loss: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Modes per scenario; fewer than all goal pairs applies suppression.
    #[arg(long, default_value_t = 6)]
    keep: usize,
    /// Must match the checkpoint when given.
    #[arg(long)]
    topk: Option<usize>,
    /// Predict B without conditioning on A's goal.
    #[arg(long)]
    marginal: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Regime {
    Fixed,
    Velocity,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Submission file from `predict`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Regime::Fixed)]
    regime: Regime,
    /// Directory for per-scenario SVG plots.
    #[arg(long)]
    plots: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(2, format!("{}: {e}", path.display()))
    }
}

type Outcome = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::io(path, e))
}

fn read_data(path: &Path) -> Result<Vec<Scenario<f64>>, Failure> {
    read_scenarios(open(path)?).map_err(|e| match e {
        SceneError::Parse { line, message } => {
            Failure::new(3, format!("{}: malformed scenario on line {line}: {message}", path.display()))
        }
        SceneError::Io(e) => Failure::io(path, e),
        other => Failure::new(3, format!("{}: {other}", path.display())),
    })
}

fn parse_kinds(s: &str) -> Result<Vec<ScenarioKind>, Failure> {
    if s == "all" {
        return Ok(ScenarioKind::ALL.to_vec());
    }
    let kinds = s
        .split(',')
        .map(|k| k.trim().parse::<ScenarioKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::new(1, format!("--kinds: {e}")))?;
    if kinds.is_empty() {
        return Err(Failure::new(1, "--kinds: empty list"));
    }
    Ok(kinds)
}

fn cmd_generate(a: &GenerateArgs) -> Outcome {
    let kinds = parse_kinds(&a.kinds)?;
    let mut out = create(&a.out)?;
    let scenarios: Vec<Scenario<f64>> = (0..a.count)
        .map(|i| generate_synthetic_scenario(kinds[i % kinds.len()], a.seed + (i / kinds.len()) as u64))
        .collect();
    write_scenarios(&mut out, &scenarios).map_err(|e| Failure::io(&a.out, e))?;
    let mut counts: BTreeMap<&str, usize> = kinds.iter().map(|k| (k.as_str(), 0)).collect();
    for s in &scenarios {
        *counts.entry(s.kind.as_str()).or_default() += 1;
    }
    let summary: Vec<String> = kinds.iter().map(|k| format!("{}={}", k.as_str(), counts[k.as_str()])).collect();
    println!("generated {} scenarios: {}", scenarios.len(), summary.join(" "));
    Ok(())
}

/// Scenarios that cannot be bound to lanes or lack goal candidates are
/// skipped with a warning.
fn prepare(scenarios: &[Scenario<f64>], cfg: &ModelConfig) -> Vec<PreparedScenario<f64>> {
    scenarios
        .iter()
        .filter_map(|s| match prepare_scenario(s, cfg) {
            Ok(p) => Some(p),
            Err(e) => {
                warn!("skipping {}: {e}", s.id());
                None
            }
        })
        .collect()
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"))
}

fn write_log_row(w: &mut csv::Writer<File>, r: &EpochReport) -> csv::Result<()> {
    let l = &r.losses;
    w.write_record([
        (r.epoch + 1).to_string(),
        r.lr.to_string(),
        l.goal_a.to_string(),
        l.goal_b.to_string(),
        l.joint.to_string(),
        l.traj.to_string(),
        l.total.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn save_checkpoint(w: BufWriter<File>, path: &Path, c: &Checkpoint<f64>) -> Outcome {
    c.save(w).map_err(|e| match e {
        TrainError::Io(e) => Failure::io(path, e),
        other => Failure::new(2, format!("{}: {other}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Result<(Cgtp, Checkpoint<f64>), Failure> {
    let c = Checkpoint::<f64>::load(open(path)?).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    let model = Cgtp::for_store(c.model.clone(), &c.store)
        .map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))?;
    Ok((model, c))
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let scenarios = read_data(&a.data)?;
    let (model, mut ckpt) = match &a.resume {
        Some(path) => {
            let (model, mut c) = load_checkpoint(path)?;
            c.train.epochs = a.epochs;
            (model, c)
        }
        None => {
            let mut cfg = match a.preset {
                Preset::Small => ModelConfig::small(),
                Preset::Full => ModelConfig::default(),
            };
            cfg.top_k = a.topk;
            cfg.validate().map_err(|e| Failure::new(1, e.to_string()))?;
            let train = TrainConfig {
                lr: a.lr,
                batch_size: a.batch_size,
                epochs: a.epochs,
                seed: a.seed,
                interactive_loss: !a.no_interactive_loss,
                ..TrainConfig::default()
            };
            train.validate().map_err(|e| Failure::new(1, e.to_string()))?;
            let (model, store) = Cgtp::init::<f64>(cfg.clone(), a.seed);
            let c = Checkpoint {
                format: CHECKPOINT_FORMAT,
                model: cfg,
                train,
                epochs_completed: 0,
                store,
            };
            (model, c)
        }
    };
    let out = create(&a.out)?;
    let data = prepare(&scenarios, &ckpt.model);
    if data.is_empty() && ckpt.epochs_completed < ckpt.train.epochs {
        return Err(Failure::new(1, "no trainable scenarios"));
    }
    info!("training on {} of {} scenarios", data.len(), scenarios.len());

    let log = log_path(a);
    let appending = a.resume.is_some() && log.exists();
    let file = if appending {
        OpenOptions::new().append(true).open(&log)
    } else {
        File::create(&log)
    }
    .map_err(|e| Failure::io(&log, e))?;
    let mut w = csv::Writer::from_writer(file);
    if !appending {
        w.write_record(["epoch", "lr", "loss_a", "loss_b", "loss_joint", "loss_traj", "total"])
            .and_then(|_| w.flush().map_err(Into::into))
            .map_err(|e| Failure::new(2, format!("{}: {e}", log.display())))?;
    }

    for epoch in ckpt.epochs_completed..ckpt.train.epochs {
        let report = train_epoch(&model, &mut ckpt.store, &data, &ckpt.train, epoch)
            .map_err(|e| Failure::new(1, e.to_string()))?;
        info!("epoch {} lr {} total {}", epoch + 1, report.lr, report.losses.total);
        write_log_row(&mut w, &report).map_err(|e| Failure::new(2, format!("{}: {e}", log.display())))?;
        ckpt.epochs_completed = epoch + 1;
    }
    save_checkpoint(out, &a.out, &ckpt)
}

fn cmd_predict(a: &PredictArgs) -> Outcome {
    let (model, ckpt) = load_checkpoint(&a.checkpoint)?;
    if let Some(k) = a.topk {
        if k != ckpt.model.top_k {
            return Err(Failure::new(
                4,
                format!("--topk {k} does not match the checkpoint's {}", ckpt.model.top_k),
            ));
        }
    }
    let pairs = ckpt.model.top_k * ckpt.model.top_k;
    if a.keep == 0 || a.keep > pairs {
        return Err(Failure::new(1, format!("--keep must be within 1..={pairs}")));
    }
    let scenarios = read_data(&a.data)?;
    let data = prepare(&scenarios, &ckpt.model);
    let mut out = create(&a.out)?;
    let cfg = PredictConfig {
        keep: a.keep,
        marginal_only: a.marginal,
        ..PredictConfig::for_model(&model)
    };
    let preds = predict_all(&model, &ckpt.store, &data, &cfg).map_err(|e| Failure::new(1, e.to_string()))?;
    let subs: Vec<Submission<f64>> = preds.iter().map(|p| p.submission()).collect();
    write_submissions(&mut out, &subs).map_err(|e| Failure::io(&a.out, e))?;
    info!("wrote {} predictions", subs.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let subs: Vec<Submission<f64>> = read_submissions(open(&a.predictions)?).map_err(|e| match e {
        MetricsError::Parse { line, message } => Failure::new(
            3,
            format!("{}: malformed prediction on line {line}: {message}", a.predictions.display()),
        ),
        other => Failure::new(3, format!("{}: {other}", a.predictions.display())),
    })?;
    let scenarios = read_data(&a.data)?;
    let by_id: BTreeMap<String, &Scenario<f64>> = scenarios.iter().map(|s| (s.id(), s)).collect();
    if let Some(missing) = subs.iter().find(|s| !by_id.contains_key(&s.scenario_id)) {
        return Err(Failure::new(5, format!("no scenario with id {} in {}", missing.scenario_id, a.data.display())));
    }
    let records = subs
        .iter()
        .map(|s| EvalRecord::from_scenario(by_id[&s.scenario_id], s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::new(4, e.to_string()))?;
    let regime = match a.regime {
        Regime::Fixed => MissRegime::fixed(),
        Regime::Velocity => MissRegime::velocity(),
    };
    let rows = metric_rows(&records, &regime).map_err(|e| Failure::new(1, e.to_string()))?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let err = |e: csv::Error| Failure::new(2, format!("{}: {e}", a.out.display()));
    w.write_record(["metric", "regime", "value"]).map_err(err)?;
    for r in &rows {
        let value = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.metric.as_str(), r.regime.as_str(), value.as_str()]).map_err(err)?;
    }
    w.flush().map_err(|e| Failure::io(&a.out, e))?;
    for r in &rows {
        println!("{:<7} {:<9} {}", r.metric, r.regime, r.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()));
    }

    if let Some(dir) = &a.plots {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        for (s, rec) in subs.iter().zip(&records) {
            let path = dir.join(format!("{}.svg", s.scenario_id));
            let svg = plot::scenario_svg(by_id[&s.scenario_id], rec);
            let mut f = create(&path)?;
            f.write_all(svg.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Failure::io(&path, e))?;
        }
    }
    Ok(())
}

fn configure_threads() -> Outcome {
    if let Ok(v) = std::env::var("CGTP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::new(1, format!("CGTP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(1, e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
