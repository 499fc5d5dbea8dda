//! The `selftrain` command line.
//!
//! Run directory layout:
//!
//! ```text
//! <run-dir>/
//!   synth/<split>/            synth-gen output: images/ and manifest.tsv
//!   model0.ckpt               pretrain output (+ .meta sidecar)
//!   pretrain.json             pretraining losses
//!   model0_eval/              evaluation of the pretrained model, if an eval split exists
//!   adapt_<name>/             one directory per adaptation run
//!     cycles.jsonl            one CycleReport per line
//!     checkpoints/last.ckpt   written after every cycle; best.ckpt by eval CER
//!     summary.json            final error rates or divergence
//!   report/                   sweep.csv, confidence_curve.csv, summary.txt
//! ```
//!
//! Every command writes the resolved configuration it ran with as
//! `config.resolved.toml` into its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SelectionKind};
use crate::error::{Error, Result};
use crate::evaluation::{
    error_by_confidence_fraction, evaluate, fraction_curve_csv, sweep_csv, EvalResult, SampleRecord, SweepRow,
};
use crate::experiment::{self, Split};
use crate::model::{load_checkpoint, save_checkpoint, ModelState};
use crate::selftrain::{adapt, AdaptOptions, RunFiles};
use crate::synth::write_manifest_dataset;

/// Environment variable naming the default run root.
pub const RUN_ROOT_ENV: &str = "SELFTRAIN_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "selftrain", version, about = "Synthetic pretraining and self-training for word recognition")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set adapt.cycles=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Master seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to `$SELFTRAIN_RUN_ROOT/run`, or `runs/run`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Source,
    Target,
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic split and write images plus manifest.tsv.
    SynthGen {
        #[arg(long, value_enum, default_value = "source")]
        split: SplitArg,
    },
    /// Train the initial model on the source split; writes model0.ckpt.
    Pretrain,
    /// Run self-training cycles starting from a checkpoint.
    Adapt {
        /// Continue from the run's last cycle checkpoint.
        #[arg(long)]
        resume: bool,
        /// Starting model; defaults to <run-dir>/model0.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory name under the run directory (adapt_<name>);
        /// derived from the selection policy when omitted.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score a checkpoint on a labeled manifest (or the configured eval split).
    ///
    /// Writes eval.json, eval.csv (columns: cer,wer,count), records.tsv
    /// (reference, hypothesis, distance, confidence) and fractions.csv
    /// (fraction, count, cer, wer over the most confident samples).
    Evaluate {
        /// Model to score; defaults to <run-dir>/model0.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled manifest.tsv; defaults to the configured eval split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; defaults to <run-dir>/eval.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a run directory into sweep.csv (tau, cer, wer, status),
    /// confidence_curve.csv and summary.txt.
    Report,
}

impl Error {
    /// Process exit status: 2 configuration, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Divergence { .. } | Error::NonFiniteLoss { .. } => 4,
            Error::Interrupted { .. } => 1,
            _ => 3,
        }
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text)
}

fn freeze_config(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    write(&dir.join("config.resolved.toml"), config.to_toml())
}

/// Outcome of one adaptation run, as stored in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub selection: String,
    pub tau: Option<f64>,
    pub cycles_completed: usize,
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub diverged: bool,
    pub reason: Option<String>,
}

pub struct Context {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let mut overrides = common.overrides.clone();
        if let Some(seed) = common.seed {
            overrides.push(format!("seed={seed}"));
        }
        let config = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
        let run_dir = common.run_dir.clone().unwrap_or_else(|| run_root().join("run"));
        Ok(Self { config, run_dir })
    }

    fn model0(&self) -> PathBuf {
        self.run_dir.join("model0.ckpt")
    }
}

pub fn cmd_synth_gen(ctx: &Context, split: SplitArg) -> Result<PathBuf> {
    let split = match split {
        SplitArg::Source => Split::Source,
        SplitArg::Target => Split::Target,
        SplitArg::Eval => Split::Eval,
    };
    let ds = experiment::synthesize(&ctx.config, split)?;
    let dir = ctx.run_dir.join("synth").join(split.name());
    if dir.join("images").exists() {
        fs::remove_dir_all(dir.join("images")).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = write_manifest_dataset(&ds, &dir)?;
    freeze_config(&ctx.config, &dir)?;
    Ok(manifest)
}

fn write_eval(result: &EvalResult, fractions: &[f64], dir: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Summary {
        cer: f64,
        wer: f64,
        count: usize,
    }
    write_json(
        &dir.join("eval.json"),
        &Summary {
            cer: result.cer,
            wer: result.wer,
            count: result.records.len(),
        },
    )?;
    write(
        &dir.join("eval.csv"),
        format!("cer,wer,count\n{:.6},{:.6},{}\n", result.cer, result.wer, result.records.len()),
    )?;
    write(&dir.join("records.tsv"), result.records_tsv())?;
    write(
        &dir.join("fractions.csv"),
        fraction_curve_csv(&error_by_confidence_fraction(&result.records, fractions)),
    )
}

pub fn cmd_pretrain(ctx: &Context) -> Result<PathBuf> {
    let source = experiment::dataset(&ctx.config, Split::Source)?;
    let (state, report) = experiment::pretrain(&ctx.config, &source)?;
    let path = ctx.model0();
    save_checkpoint(&state, &path)?;
    write_json(&ctx.run_dir.join("pretrain.json"), &report)?;
    freeze_config(&ctx.config, &ctx.run_dir)?;
    if let Some(eval) = experiment::eval_dataset(&ctx.config)? {
        let result = evaluate(&state, &eval, ctx.config.adapt.include_eos_confidence)?;
        write_eval(&result, &ctx.config.report.fractions, &ctx.run_dir.join("model0_eval"))?;
    }
    Ok(path)
}

fn default_adapt_name(config: &ExperimentConfig) -> String {
    let s = &config.adapt.selection;
    match s.kind {
        SelectionKind::None => "none".into(),
        SelectionKind::Threshold => match (s.tau, s.tau_quantile) {
            (Some(t), _) => format!("tau-{t}"),
            (_, Some(q)) => format!("tauq-{q}"),
            _ => "threshold".into(),
        },
        SelectionKind::TopFraction => "top".into(),
        SelectionKind::RandomFraction => "random".into(),
    }
}

pub fn cmd_adapt(ctx: &Context, resume: bool, checkpoint: Option<&Path>, name: Option<&str>) -> Result<AdaptSummary> {
    let name = name.map(str::to_owned).unwrap_or_else(|| default_adapt_name(&ctx.config));
    let dir = ctx.run_dir.join(format!("adapt_{name}"));
    let run = RunFiles::new(&dir);
    let start = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.model0());
    if !start.exists() {
        return Err(Error::Checkpoint {
            path: start,
            message: "starting checkpoint not found (run pretrain first)".into(),
        });
    }
    let model0 = load_checkpoint(&start)?;
    let target = experiment::dataset(&ctx.config, Split::Target)?;
    let eval = experiment::eval_dataset(&ctx.config)?;
    let adapt_config = experiment::adaptation_config(&ctx.config, &model0, &target)?;
    let (mut state, previous) = if resume && run.last_checkpoint().exists() {
        run.resume()?
    } else {
        (model0, Vec::new())
    };
    freeze_config(&ctx.config, &dir)?;

    let tau = match adapt_config.selection {
        crate::confidence::SelectionPolicy::Threshold { tau } => Some(tau),
        _ => None,
    };
    let outcome = adapt(
        &mut state,
        &target,
        &adapt_config,
        AdaptOptions {
            eval: eval.as_ref(),
            run: Some(run),
            previous,
            interrupt: None,
        },
    );
    let mut summary = AdaptSummary {
        selection: adapt_config.selection.name(),
        tau,
        cycles_completed: 0,
        cer: None,
        wer: None,
        diverged: false,
        reason: None,
    };
    let result = match outcome {
        Ok(reports) => {
            summary.cycles_completed = reports.len();
            if let Some(eval) = &eval {
                let r = evaluate(&state, eval, adapt_config.include_eos_confidence)?;
                summary.cer = Some(r.cer);
                summary.wer = Some(r.wer);
            }
            Ok(summary.clone())
        }
        Err(e @ Error::Divergence { .. }) => {
            summary.cycles_completed = RunFiles::new(&dir).read_reports()?.len();
            summary.diverged = true;
            summary.reason = Some(e.to_string());
            Err(e)
        }
        Err(e) => return Err(e),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    result
}

pub fn cmd_evaluate(ctx: &Context, checkpoint: Option<&Path>, manifest: Option<&Path>, out: Option<&Path>) -> Result<EvalResult> {
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.model0());
    let state: ModelState = load_checkpoint(&ckpt)?;
    let data = match manifest {
        Some(m) => {
            let root = m.parent().unwrap_or(Path::new("."));
            crate::synth::load_manifest_dataset(m, root, state.charset(), state.config.height)?
        }
        None => experiment::eval_dataset(&ctx.config)?
            .ok_or_else(|| Error::config("data.eval_count", "no evaluation split; pass --manifest"))?,
    };
    let result = evaluate(&state, &data, ctx.config.adapt.include_eos_confidence)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.run_dir.join("eval"));
    write_eval(&result, &ctx.config.report.fractions, &dir)?;
    freeze_config(&ctx.config, &dir)?;
    Ok(result)
}

fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |m: &str| Error::Manifest {
                path: path.to_owned(),
                line: i + 1,
                message: m.to_owned(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            Ok(SampleRecord {
                reference: f[0].to_owned(),
                hypothesis: f[1].to_owned(),
                distance: f[2].parse().map_err(|_| bad("bad distance"))?,
                confidence: f[3].parse().map_err(|_| bad("bad confidence"))?,
            })
        })
        .collect()
}

/// Rows for the no-selection baseline and every threshold run, baseline
/// first, then by ascending tau.
pub fn collect_sweep(run_dir: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("adapt_")))
        .collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("summary.json");
        let Ok(text) = fs::read_to_string(&path) else {
            continue;
        };
        let s: AdaptSummary = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        if s.selection == "none" || s.tau.is_some() {
            rows.push(SweepRow {
                tau: s.tau,
                cer: s.cer,
                wer: s.wer,
                diverged: s.diverged,
            });
        }
    }
    rows.sort_by(|a, b| match (a.tau, b.tau) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, _) => std::cmp::Ordering::Less,
        (_, None) => std::cmp::Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    });
    Ok(rows)
}

pub fn cmd_report(ctx: &Context) -> Result<PathBuf> {
    let out = ctx.run_dir.join("report");
    let rows = collect_sweep(&ctx.run_dir)?;
    write(&out.join("sweep.csv"), sweep_csv(&rows))?;
    let mut summary = String::new();
    let records = ctx.run_dir.join("model0_eval").join("records.tsv");
    if records.exists() {
        let records = read_records(&records)?;
        let curve = error_by_confidence_fraction(&records, &ctx.config.report.fractions);
        write(&out.join("confidence_curve.csv"), fraction_curve_csv(&curve))?;
        if let Some(full) = curve.iter().find(|p| p.fraction == 1.0) {
            let _ = writeln!(summary, "initial model: cer {:.4} wer {:.4}", full.cer, full.wer);
        }
    }
    for r in &rows {
        let tau = r.tau.map(|t| format!("tau {t}")).unwrap_or_else(|| "no selection".into());
        match (r.diverged, r.cer, r.wer) {
            (true, _, _) => {
                let _ = writeln!(summary, "{tau}: diverged");
            }
            (false, Some(c), Some(w)) => {
                let _ = writeln!(summary, "{tau}: cer {c:.4} wer {w:.4}");
            }
            _ => {
                let _ = writeln!(summary, "{tau}: no evaluation");
            }
        }
    }
    write(&out.join("summary.txt"), summary)?;
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli.common)?;
    match cli.command {
        Command::SynthGen { split } => {
            let m = cmd_synth_gen(&ctx, split)?;
            println!("{}", m.display());
        }
        Command::Pretrain => {
            let p = cmd_pretrain(&ctx)?;
            println!("{}", p.display());
        }
        Command::Adapt {
            resume,
            checkpoint,
            name,
        } => {
            let s = cmd_adapt(&ctx, resume, checkpoint.as_deref(), name.as_deref())?;
            println!("{}", serde_json::to_string(&s).expect("serializable"));
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
        } => {
            let r = cmd_evaluate(&ctx, checkpoint.as_deref(), manifest.as_deref(), out.as_deref())?;
            println!("cer {:.6} wer {:.6}", r.cer, r.wer);
        }
        Command::Report => {
            let p = cmd_report(&ctx)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}
