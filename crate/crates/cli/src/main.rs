use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vsdmot::dataset::{read_frames, IMAGE_DIR};
use vsdmot::degradation::MixRatio;
use vsdmot::dswr::{assess_quality, DswrHead};
use vsdmot::experiment::{
    ablation_csv, run_ablation, stage_degrade, stage_eval, stage_synth, stage_track, stage_train, AblationPlan,
    EvalSummary, ExperimentConfig, SequenceReport, CONFIG_SNAPSHOT, MODEL_FILE,
};
use vsdmot::metrics::evaluate;
use vsdmot::teacher::TeacherSpec;
use vsdmot::tracker::{TrackerModel, Variant};
use vsdmot::trackset::TrackSet;
use vsdmot::{Error, Result};

/// Synthetic multi-object tracking with distilled semantics and quality-weighted fusion.
#[derive(Parser)]
#[command(name = "vsdmot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON experiment config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(cfg.with_env_overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean training and validation scenes with detections.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a mixed set by degrading a seeded share of the input sequences.
    Degrade {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// low:high share of degraded sequences, `all-high` or `all-low`.
        #[arg(long)]
        ratio: Option<MixRatio>,
    },
    /// Per-frame quality scores and semantic weight as CSV.
    AssessQuality {
        #[command(flatten)]
        config: ConfigArg,
        /// A sequence directory or a directory of .pgm frames.
        #[arg(long)]
        input: PathBuf,
        /// Take the quality settings and weight map from a trained model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory for quality.csv; prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a tracker model on a dataset directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// baseline, distill, dcsd_trained or full.
        #[arg(long)]
        variant: Option<Variant>,
        /// `pseudo:<seed>` or `file:<path>`.
        #[arg(long)]
        teacher: Option<TeacherSpec>,
    },
    /// Track every sequence of a dataset and write MOTChallenge files.
    Track {
        #[command(flatten)]
        config: ConfigArg,
        /// A model file or a directory holding model.bin; its config.json is used when --config is absent.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// A ground-truth file, or a dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// A prediction file, or a directory of `<sequence>.txt` files.
        #[arg(long)]
        pred: PathBuf,
        /// Print the full report as JSON (fractions) instead of CSV (percentages).
        #[arg(long)]
        json: bool,
    },
    /// Sweep variants, alpha and mixing ratio; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn frames_dir(input: &Path) -> PathBuf {
    let img = input.join(IMAGE_DIR);
    if img.is_dir() {
        img
    } else {
        input.to_path_buf()
    }
}

fn assess(cfg: &ExperimentConfig, input: &Path, model: Option<&Path>) -> Result<String> {
    let model = model.map(|p| TrackerModel::load(&model_path(p))).transpose()?;
    let quality = model.as_ref().map_or(&cfg.model.quality, |m| &m.spec().quality);
    let (w, b) = cfg.model.dswr_init;
    let head = DswrHead::new(w, b);
    let mut csv = String::from("frame,clarity,noise_sigma,contrast,q,w_semantic\n");
    for (i, frame) in read_frames(&frames_dir(input))?.iter().enumerate() {
        let r = assess_quality(frame, quality)?;
        let weight = match &model {
            Some(m) => m.semantic_weight(r.q)?,
            None => Some(head.semantic_weight(r.q)?),
        };
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            i + 1,
            r.clarity,
            r.noise_sigma,
            r.contrast,
            r.q,
            weight.map_or(String::new(), |w| format!("{w:.6}"))
        ));
    }
    Ok(csv)
}

fn model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            let cfg = config.resolve()?;
            let out = out_dir(&out, &cfg);
            stage_synth(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Degrade {
            config,
            input,
            out,
            ratio,
        } => {
            let cfg = config.resolve()?;
            let out = out_dir(&out, &cfg);
            let manifest = stage_degrade(&cfg, &input, &out, ratio.unwrap_or(cfg.corpus.ratio))?;
            println!("wrote {}: {}", out.display(), serde_json::to_string(&manifest)?);
        }
        Command::AssessQuality {
            config,
            input,
            model,
            out,
        } => {
            let cfg = config.resolve()?;
            cfg.validate()?;
            let csv = assess(&cfg, &input, model.as_deref())?;
            match out {
                Some(dir) => {
                    cfg.write_snapshot(&dir)?;
                    write(&dir.join("quality.csv"), &csv)?;
                }
                None => print!("{csv}"),
            }
        }
        Command::Train {
            config,
            data,
            out,
            alpha,
            epochs,
            variant,
            teacher,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(a) = alpha {
                cfg.train.alpha = a;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(t) = teacher {
                cfg.teacher = t;
            }
            cfg.validate()?;
            let out = out_dir(&out, &cfg);
            let log = stage_train(&cfg, &data, &out)?;
            if let Some(last) = log.last() {
                println!("trained {} steps, final loss {:.6}", log.len(), last.total);
            }
            println!("wrote {}", out.display());
        }
        Command::Track {
            config,
            model,
            data,
            out,
        } => {
            let model = model_path(&model);
            let snapshot = model.parent().map(|d| d.join(CONFIG_SNAPSHOT));
            let cfg = match (&config.config, snapshot) {
                (None, Some(s)) if s.is_file() => ExperimentConfig::load(&s)?.with_env_overrides(),
                _ => config.resolve()?,
            };
            let out = out_dir(&out, &cfg);
            stage_track(&cfg, &model, &data, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            config,
            gt,
            pred,
            json,
        } => {
            let cfg = config.resolve()?;
            cfg.evaluation.validate()?;
            let summary = if gt.is_file() {
                let report = evaluate(&TrackSet::read_mot(&gt)?, &TrackSet::read_mot(&pred)?, &cfg.evaluation)?;
                let sequence = gt.file_stem().map_or("gt".into(), |s| s.to_string_lossy().into_owned());
                EvalSummary::new(vec![SequenceReport { sequence, report }])
            } else {
                stage_eval(&gt, &pred, &cfg.evaluation)?
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary.to_csv());
            }
        }
        Command::Ablate { config, out } => {
            let cfg = config.resolve()?;
            let out = out_dir(&out, &cfg);
            let cells = run_ablation(&cfg, &AblationPlan::default())?;
            let table = ablation_csv(&cells);
            cfg.write_snapshot(&out)?;
            write(&out.join("ablation.csv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
