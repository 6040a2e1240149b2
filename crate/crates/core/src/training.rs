//! Joint training of the tracker: `total = α · L_distill + (1 − α) · L_mot`,
//! plain gradient descent with a single step decay.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::max_pairs;
use crate::dcsd::DcsdVars;
use crate::detector::Detection;
use crate::dswr::assess_quality;
use crate::error::{Error, Result};
use crate::frame::GrayFrame;
use crate::numeric::{Matrix, ParamSet, Tape, Var};
use crate::teacher::TeacherEmbedding;
use crate::tracker::{box_deltas, descriptor_matrix, mot_loss, MotTargets, TrackerModel};
use crate::trackset::{BBox, TrackRecord, TrackSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of epochs after which the rate is multiplied by `decay_factor`.
    pub decay_fraction: f64,
    pub decay_factor: f64,
    /// Temperature of the cosine logits in the association loss.
    pub association_temperature: f64,
    pub box_weight: f64,
    /// Minimum IoU for a detection to inherit a ground-truth identity.
    pub match_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.4,
            epochs: 3,
            learning_rate: 1e-3,
            decay_fraction: 2.0 / 3.0,
            decay_factor: 0.1,
            association_temperature: 0.1,
            box_weight: 1.0,
            match_iou: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::Config("decay_fraction must lie in [0, 1]".into()));
        }
        if !(self.association_temperature > 0.0 && self.box_weight >= 0.0) {
            return Err(Error::Config("loss temperature and weights must be positive".into()));
        }
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(Error::Config("match_iou must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// First epoch (0-based) trained at the decayed rate.
    pub fn decay_epoch(&self) -> usize {
        (self.epochs as f64 * self.decay_fraction - 1e-9).ceil().max(0.0) as usize
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "alpha must lie strictly between 0 and 1, got {alpha}"
        )));
    }
    Ok(())
}

/// `α · l_distill + (1 − α) · l_mot`.
pub fn mix_losses(alpha: f64, l_distill: f64, l_mot: f64) -> f64 {
    alpha * l_distill + (1.0 - alpha) * l_mot
}

/// A training sequence with per-frame detections and teacher embeddings.
pub struct TrainingSequence {
    pub name: String,
    pub frames: Vec<GrayFrame>,
    pub gt: TrackSet,
    pub detections: Vec<Vec<Detection>>,
    pub teacher: Vec<TeacherEmbedding>,
}

/// One supervised frame pair. Rows `0..tracks` of `descriptors` describe the
/// previous frame's identities, the rest the current detections.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub descriptors: Matrix,
    pub tracks: usize,
    pub targets: MotTargets,
    pub quality: f64,
    pub frame: usize,
}

fn label_detections(dets: &[Detection], gt: &[TrackRecord], min_iou: f64) -> Vec<Option<usize>> {
    let iou = Matrix::from_fn(dets.len(), gt.len(), |i, j| dets[i].bbox.iou(&gt[j].bbox));
    let mut out = vec![None; dets.len()];
    for (i, j) in max_pairs(&iou) {
        if iou.get(i, j) >= min_iou {
            out[i] = Some(j);
        }
    }
    out
}

/// Builds the supervised pairs `(f - 1, f)` of a sequence.
pub fn prepare_samples(
    seq: &TrainingSequence,
    quality: &crate::dswr::QualityConfig,
    match_iou: f64,
) -> Result<Vec<StepSample>> {
    if seq.frames.len() != seq.detections.len() || seq.frames.len() != seq.teacher.len() {
        return Err(Error::Shape(format!(
            "sequence {}: {} frames, {} detection lists, {} teacher embeddings",
            seq.name,
            seq.frames.len(),
            seq.detections.len(),
            seq.teacher.len()
        )));
    }
    let mut out = Vec::new();
    for f in 1..seq.frames.len() {
        let (prev_gt, cur_gt) = (seq.gt.in_frame(f as u32 - 1), seq.gt.in_frame(f as u32));
        let (prev, cur) = (&seq.detections[f - 1], &seq.detections[f]);
        if cur.is_empty() {
            continue;
        }
        let prev_ids: Vec<(usize, u32)> = label_detections(prev, prev_gt, match_iou)
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, prev_gt[g].id)))
            .collect();
        let cur_labels = label_detections(cur, cur_gt, match_iou);
        let mut targets = MotTargets::default();
        for (row, &(_, id)) in prev_ids.iter().enumerate() {
            if let Some(j) = cur_labels.iter().position(|g| g.is_some_and(|g| cur_gt[g].id == id)) {
                targets.pairs.push((row, j));
            }
        }
        for (j, g) in cur_labels.iter().enumerate() {
            if let Some(g) = *g {
                targets.boxes.push((j, box_deltas(&cur[j].bbox, &cur_gt[g].bbox)));
            }
        }
        if targets.pairs.is_empty() && targets.boxes.is_empty() {
            continue;
        }
        let prev_boxes: Vec<BBox> = prev_ids.iter().map(|&(i, _)| prev[i].bbox).collect();
        let cur_boxes: Vec<BBox> = cur.iter().map(|d| d.bbox).collect();
        let a = descriptor_matrix(&seq.frames[f - 1], &prev_boxes);
        let b = descriptor_matrix(&seq.frames[f], &cur_boxes);
        let mut data = a.into_vec();
        data.extend(b.into_vec());
        out.push(StepSample {
            descriptors: Matrix::new(prev_boxes.len() + cur_boxes.len(), crate::tracker::DESCRIPTOR_DIM, data)?,
            tracks: prev_boxes.len(),
            targets,
            quality: assess_quality(&seq.frames[f], quality)?.q,
            frame: f,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub dcsd: Option<DcsdVars>,
    pub l_mot: Var,
    pub total: Var,
}

/// Records the full objective of one sample on `tape`.
pub fn step_objective<'p>(
    tape: &mut Tape<'p>,
    model: &'p TrackerModel,
    sample: &StepSample,
    teacher: &TeacherEmbedding,
    cfg: &TrainConfig,
) -> Result<StepVars> {
    let d = tape.constant(sample.descriptors.clone());
    let fwd = model.forward(tape, d, sample.quality)?;
    let n = sample.descriptors.rows();
    let track_rows: Vec<usize> = (0..sample.tracks).collect();
    let prop_rows: Vec<usize> = (sample.tracks..n).collect();
    let tracks = tape.select_rows(fwd.fused, &track_rows)?;
    let props = tape.select_rows(fwd.fused, &prop_rows)?;
    let l_mot = mot_loss(
        tape,
        &model.box_head,
        tracks,
        props,
        &sample.targets,
        cfg.association_temperature,
        cfg.box_weight,
    )?
    .ok_or_else(|| Error::Shape("sample has no supervision".into()))?;
    let (dcsd, total) = match (fwd.student_out, &model.dcsd) {
        (Some(s), Some(head)) => {
            let v = head.forward(tape, s, teacher)?;
            let a = tape.scale(v.l_distill, cfg.alpha);
            let b = tape.scale(l_mot, 1.0 - cfg.alpha);
            (Some(v), tape.add(a, b)?)
        }
        _ => (None, l_mot),
    };
    Ok(StepVars { dcsd, l_mot, total })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_local: f64,
    pub l_global: f64,
    pub w1: f64,
    pub w2: f64,
    pub l_distill: f64,
    pub l_mot: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,l_local,l_global,w1,w2,l_distill,l_mot,total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.l_local, r.l_global, r.w1, r.w2, r.l_distill, r.l_mot, r.total
        ));
    }
    s
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log_csv(rows).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Trains `model` in place and returns the per-step log. Steps are 1-based.
pub fn train(model: &mut TrackerModel, data: &[TrainingSequence], cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let quality = model.spec().quality;
    let samples: Vec<Vec<StepSample>> = data
        .iter()
        .map(|s| prepare_samples(s, &quality, cfg.match_iou))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for &si in &order {
            for sample in &samples[si] {
                let step = log.len() + 1;
                let teacher = &data[si].teacher[sample.frame];
                let (row, grads) = {
                    let mut tape = Tape::new();
                    let v = step_objective(&mut tape, model, sample, teacher, cfg)?;
                    let b = v.dcsd.map(|d| d.breakdown(&tape));
                    let row = LogRow {
                        step,
                        l_local: b.map_or(0.0, |b| b.l_local),
                        l_global: b.map_or(0.0, |b| b.l_global),
                        w1: b.map_or(0.0, |b| b.w1),
                        w2: b.map_or(0.0, |b| b.w2),
                        l_distill: b.map_or(0.0, |b| b.l_distill),
                        l_mot: tape.scalar(v.l_mot),
                        total: tape.scalar(v.total),
                    };
                    if !row.total.is_finite() {
                        return Err(Error::Divergence { step });
                    }
                    (row, tape.backward(v.total)?)
                };
                model.accumulate(&grads);
                model.sgd_step(lr);
                model.zero_grad();
                log.push(row);
            }
        }
    }
    Ok(log)
}
