//! Experiment configuration and orchestration: corpus synthesis, training,
//! evaluation, ablation sweeps and the on-disk pipeline stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{read_dataset, write_dataset, SequenceData};
use crate::degradation::{build_mixed_set, sequence_key, DegradationChain, MixRatio, MixedSetManifest, Quality};
use crate::detector::{synth_detector, DetectorNoise};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, report_row, MatchConfig, MetricReport, REPORT_HEADER};
use crate::scene::{generate_scene, SceneConfig};
use crate::teacher::{Teacher, TeacherSpec};
use crate::tracker::{track_sequence, ModelSpec, TrackerConfig, TrackerModel, Variant};
use crate::training::{check_alpha, train, write_log, LogRow, TrainConfig, TrainingSequence};
use crate::trackset::TrackSet;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "VSDMOT_OUTPUT_DIR";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Training scene `i` uses scene seed `train_seed + i`.
    pub train_seed: u64,
    pub val_seed: u64,
    pub detector_seed: u64,
    /// Seeds the choice of degraded training sequences.
    pub partition_seed: u64,
    pub ratio: MixRatio,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_scenes: 9,
            val_scenes: 20,
            train_seed: 1000,
            val_seed: 2000,
            detector_seed: 3000,
            partition_seed: 4000,
            ratio: MixRatio::Ratio { low: 2, high: 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub detector: DetectorNoise,
    pub degradation: DegradationChain,
    pub model: ModelSpec,
    pub model_seed: u64,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub teacher: TeacherSpec,
    pub corpus: CorpusConfig,
    pub evaluation: MatchConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            detector: DetectorNoise::default(),
            degradation: DegradationChain::default(),
            model: ModelSpec::default(),
            model_seed: 42,
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            teacher: TeacherSpec::Pseudo(7),
            corpus: CorpusConfig::default(),
            evaluation: MatchConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.degradation.validate()?;
        self.model.quality.validate()?;
        self.model.student.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.evaluation.validate()?;
        self.corpus.ratio.validate()?;
        if self.corpus.train_scenes == 0 || self.corpus.val_scenes == 0 {
            return Err(Error::Config("corpus needs at least one training and one validation scene".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    /// Writes the resolved configuration as `dir/config.json`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_SNAPSHOT);
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Applies the output-directory environment override, if present.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }
}

fn synth_sequence(cfg: &ExperimentConfig, name: String, scene_seed: u64) -> Result<SequenceData> {
    let scene = generate_scene(&cfg.scene, scene_seed)?;
    let detections = synth_detector(
        &scene.gt,
        scene.frames.len(),
        (cfg.scene.width, cfg.scene.height),
        &cfg.detector,
        cfg.corpus.detector_seed ^ sequence_key(&name),
    )?;
    Ok(SequenceData {
        name,
        frames: scene.frames,
        gt: scene.gt,
        detections,
    })
}

/// Undegraded training scenes `train-00, train-01, ...`.
pub fn training_scenes(cfg: &ExperimentConfig) -> Result<Vec<SequenceData>> {
    (0..cfg.corpus.train_scenes)
        .map(|i| synth_sequence(cfg, format!("train-{i:02}"), cfg.corpus.train_seed + i as u64))
        .collect()
}

/// Undegraded validation scenes `val-00, val-01, ...`.
pub fn validation_scenes(cfg: &ExperimentConfig) -> Result<Vec<SequenceData>> {
    (0..cfg.corpus.val_scenes)
        .map(|i| synth_sequence(cfg, format!("val-{i:02}"), cfg.corpus.val_seed + i as u64))
        .collect()
}

/// Degrades the members of `sequences` chosen by the seeded partition.
pub fn mixed_training_set(
    sequences: &[SequenceData],
    ratio: MixRatio,
    chain: &DegradationChain,
    seed: u64,
) -> Result<(Vec<SequenceData>, MixedSetManifest)> {
    let names: Vec<String> = sequences.iter().map(|s| s.name.clone()).collect();
    let manifest = build_mixed_set(&names, ratio, chain, seed)?;
    let out = sequences
        .iter()
        .map(|s| match manifest.quality_of(&s.name) {
            Some(Quality::Low) => s.degraded(chain),
            _ => Ok(s.clone()),
        })
        .collect::<Result<_>>()?;
    Ok((out, manifest))
}

pub fn degrade_all(sequences: &[SequenceData], chain: &DegradationChain) -> Result<Vec<SequenceData>> {
    sequences.iter().map(|s| s.degraded(chain)).collect()
}

/// Resolves the teacher for one sequence. A `file:` spec naming a directory
/// reads `<dir>/<sequence>.jsonl`; a plain file serves every sequence.
pub fn teacher_for(spec: &TeacherSpec, sequence: &str) -> Result<Teacher> {
    match spec {
        TeacherSpec::File(p) if p.is_dir() => {
            Teacher::open(&TeacherSpec::File(p.join(format!("{sequence}.jsonl"))))
        }
        other => Teacher::open(other),
    }
}

/// Pairs each sequence with teacher embeddings of the frames it holds.
pub fn attach_teacher(sequences: &[SequenceData], spec: &TeacherSpec) -> Result<Vec<TrainingSequence>> {
    let mut shared: Option<Teacher> = None;
    sequences
        .iter()
        .map(|s| {
            let teacher = match spec {
                TeacherSpec::File(p) if p.is_dir() => teacher_for(spec, &s.name)?,
                _ => match &shared {
                    Some(t) => t.clone(),
                    None => shared.insert(Teacher::open(spec)?).clone(),
                },
            };
            let embeddings = s
                .frames
                .iter()
                .enumerate()
                .map(|(f, frame)| teacher.embedding(f as u32, frame))
                .collect::<Result<_>>()?;
            Ok(TrainingSequence {
                name: s.name.clone(),
                frames: s.frames.clone(),
                gt: s.gt.clone(),
                detections: s.detections.clone(),
                teacher: embeddings,
            })
        })
        .collect()
}

/// Builds a model from `cfg.model` and `cfg.model_seed` and trains it.
pub fn train_model(cfg: &ExperimentConfig, data: &[TrainingSequence]) -> Result<(TrackerModel, Vec<LogRow>)> {
    let mut model = TrackerModel::new(cfg.model.clone(), cfg.model_seed)?;
    let log = train(&mut model, data, &cfg.train)?;
    Ok((model, log))
}

pub fn track_all(model: &TrackerModel, sequences: &[SequenceData], cfg: &TrackerConfig) -> Result<Vec<TrackSet>> {
    sequences
        .iter()
        .map(|s| track_sequence(&s.frames, &s.detections, model, cfg))
        .collect()
}

/// Unweighted means over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanScores {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub mota: f64,
    pub idf1: f64,
}

impl MeanScores {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> MeanScores {
        let mut m = MeanScores::default();
        let mut n = 0usize;
        for r in reports {
            m.hota += r.hota;
            m.deta += r.deta;
            m.assa += r.assa;
            m.mota += r.mota;
            m.idf1 += r.idf1;
            n += 1;
        }
        let k = n.max(1) as f64;
        MeanScores {
            hota: m.hota / k,
            deta: m.deta / k,
            assa: m.assa / k,
            mota: m.mota / k,
            idf1: m.idf1 / k,
        }
    }

    fn csv_fields(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4}",
            100.0 * self.hota,
            100.0 * self.deta,
            100.0 * self.assa,
            100.0 * self.mota,
            100.0 * self.idf1
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceReport {
    pub sequence: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub sequences: Vec<SequenceReport>,
    pub mean: MeanScores,
}

impl EvalSummary {
    pub fn new(sequences: Vec<SequenceReport>) -> Self {
        let mean = MeanScores::of(sequences.iter().map(|s| &s.report));
        EvalSummary { sequences, mean }
    }

    /// Per-sequence rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.sequences {
            s.push_str(&report_row(&r.sequence, &r.report));
            s.push('\n');
        }
        let m = &self.mean;
        s.push_str(&format!(
            "MEAN,{:.1},{:.1},{:.1},{:.1},{:.1}\n",
            100.0 * m.hota,
            100.0 * m.deta,
            100.0 * m.assa,
            100.0 * m.mota,
            100.0 * m.idf1
        ));
        s
    }
}

pub fn evaluate_tracks(
    sequences: &[SequenceData],
    predictions: &[TrackSet],
    cfg: &MatchConfig,
) -> Result<EvalSummary> {
    let reports = sequences
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            Ok(SequenceReport {
                sequence: s.name.clone(),
                report: evaluate(&s.gt, p, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalSummary::new(reports))
}

pub fn evaluate_model(
    model: &TrackerModel,
    sequences: &[SequenceData],
    tracker: &TrackerConfig,
    cfg: &MatchConfig,
) -> Result<EvalSummary> {
    let preds = track_all(model, sequences, tracker)?;
    evaluate_tracks(sequences, &preds, cfg)
}

/// Default sweep grids of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub alphas: Vec<f64>,
    pub ratios: Vec<MixRatio>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            variants: Variant::ALL.to_vec(),
            alphas: vec![0.2, 0.4, 0.6],
            ratios: vec![
                MixRatio::AllHigh,
                MixRatio::Ratio { low: 1, high: 1 },
                MixRatio::Ratio { low: 2, high: 1 },
                MixRatio::ALL_LOW,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Variant,
    Alpha,
    Ratio,
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub axis: SweepAxis,
    pub variant: Variant,
    pub alpha: f64,
    pub ratio: MixRatio,
    pub scores: MeanScores,
}

pub const ABLATION_HEADER: &str = "axis,variant,alpha,ratio,HOTA,DetA,AssA,MOTA,IDF1";

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for c in cells {
        let axis = match c.axis {
            SweepAxis::Variant => "variant",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Ratio => "ratio",
        };
        s.push_str(&format!(
            "{axis},{},{},{},{}\n",
            c.variant.name(),
            c.alpha,
            c.ratio,
            c.scores.csv_fields()
        ));
    }
    s
}

/// Trains one model per distinct (variant, α, ratio) cell and scores it on
/// the degraded validation scenes. The variant ladder uses the configured α
/// and ratio; the α and ratio sweeps use the full model.
pub fn run_ablation(cfg: &ExperimentConfig, plan: &AblationPlan) -> Result<Vec<AblationCell>> {
    cfg.validate()?;
    for &a in &plan.alphas {
        check_alpha(a)?;
    }
    let base = training_scenes(cfg)?;
    let val = degrade_all(&validation_scenes(cfg)?, &cfg.degradation)?;
    let mut sets: BTreeMap<String, Vec<TrainingSequence>> = BTreeMap::new();
    let mut done: Vec<((Variant, u64, MixRatio), MeanScores)> = Vec::new();

    let mut requests = Vec::new();
    for &v in &plan.variants {
        requests.push((SweepAxis::Variant, v, cfg.train.alpha, cfg.corpus.ratio));
    }
    for &a in &plan.alphas {
        requests.push((SweepAxis::Alpha, Variant::Full, a, cfg.corpus.ratio));
    }
    for &r in &plan.ratios {
        requests.push((SweepAxis::Ratio, Variant::Full, cfg.train.alpha, r));
    }

    let mut cells = Vec::with_capacity(requests.len());
    for (axis, variant, alpha, ratio) in requests {
        let key = (variant, alpha.to_bits(), ratio);
        let scores = match done.iter().find(|(k, _)| *k == key) {
            Some((_, s)) => *s,
            None => {
                let data = match sets.get(&ratio.to_string()) {
                    Some(d) => d,
                    None => {
                        let (mixed, _) =
                            mixed_training_set(&base, ratio, &cfg.degradation, cfg.corpus.partition_seed)?;
                        let d = attach_teacher(&mixed, &cfg.teacher)?;
                        sets.entry(ratio.to_string()).or_insert(d)
                    }
                };
                let mut cell_cfg = cfg.clone();
                cell_cfg.model.variant = variant;
                cell_cfg.train.alpha = alpha;
                let (model, _) = train_model(&cell_cfg, data)?;
                let s = evaluate_model(&model, &val, &cfg.tracker, &cfg.evaluation)?.mean;
                done.push((key, s));
                s
            }
        };
        cells.push(AblationCell {
            axis,
            variant,
            alpha,
            ratio,
            scores,
        });
    }
    Ok(cells)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes undegraded `train/` and `val/` scene sets under `out`.
pub fn stage_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    write_dataset(&out.join("train"), &training_scenes(cfg)?)?;
    write_dataset(&out.join("val"), &validation_scenes(cfg)?)?;
    cfg.write_snapshot(out)?;
    Ok(())
}

/// Copies the sequences under `input` to `out`, degrading those picked by
/// the seeded partition for `ratio`, and records the partition.
pub fn stage_degrade(cfg: &ExperimentConfig, input: &Path, out: &Path, ratio: MixRatio) -> Result<MixedSetManifest> {
    cfg.validate()?;
    let seqs = read_dataset(input)?;
    let (mixed, manifest) = mixed_training_set(&seqs, ratio, &cfg.degradation, cfg.corpus.partition_seed)?;
    write_dataset(out, &mixed)?;
    write_text(&out.join(MANIFEST_FILE), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    cfg.write_snapshot(out)?;
    Ok(manifest)
}

/// Trains on the sequences under `data`; writes the model and the step log.
pub fn stage_train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let seqs = attach_teacher(&read_dataset(data)?, &cfg.teacher)?;
    let (model, log) = train_model(cfg, &seqs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    model.save(&out.join(MODEL_FILE))?;
    write_log(&out.join(LOG_FILE), &log)?;
    cfg.write_snapshot(out)?;
    Ok(log)
}

/// Tracks every sequence under `data`, writing `<out>/<sequence>.txt`.
pub fn stage_track(cfg: &ExperimentConfig, model_path: &Path, data: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let model = TrackerModel::load(model_path)?;
    let seqs = read_dataset(data)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (s, pred) in seqs.iter().zip(track_all(&model, &seqs, &cfg.tracker)?) {
        pred.write_mot(&out.join(format!("{}.txt", s.name)))?;
    }
    cfg.write_snapshot(out)?;
    Ok(())
}

/// Scores `<pred_dir>/<sequence>.txt` against each sequence's ground truth.
pub fn stage_eval(gt_root: &Path, pred_dir: &Path, cfg: &MatchConfig) -> Result<EvalSummary> {
    let seqs = read_dataset(gt_root)?;
    let preds = seqs
        .iter()
        .map(|s| TrackSet::read_mot(&pred_dir.join(format!("{}.txt", s.name))))
        .collect::<Result<Vec<_>>>()?;
    evaluate_tracks(&seqs, &preds, cfg)
}

/// Paths written by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub root: PathBuf,
    pub log: Vec<LogRow>,
    pub summary: EvalSummary,
}

/// synth, degrade, train, track and eval under `out`, from one configuration.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineOutputs> {
    cfg.validate()?;
    cfg.write_snapshot(out)?;
    let clean = out.join("clean");
    stage_synth(cfg, &clean)?;
    let train_dir = out.join("train");
    let val_dir = out.join("val");
    stage_degrade(cfg, &clean.join("train"), &train_dir, cfg.corpus.ratio)?;
    stage_degrade(cfg, &clean.join("val"), &val_dir, MixRatio::ALL_LOW)?;
    let model_dir = out.join("model");
    let log = stage_train(cfg, &train_dir, &model_dir)?;
    let pred_dir = out.join("pred");
    stage_track(cfg, &model_dir.join(MODEL_FILE), &val_dir, &pred_dir)?;
    let summary = stage_eval(&val_dir, &pred_dir, &cfg.evaluation)?;
    write_text(&out.join("report.csv"), &summary.to_csv())?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(PipelineOutputs {
        root: out.to_path_buf(),
        log,
        summary,
    })
}
