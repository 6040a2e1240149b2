//! A query-propagation tracker. Proposal queries come from detections, track
//! queries from the previous frame; the student refines both jointly and the
//! result is fused with the raw queries before Hungarian association.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_min;
use crate::dcsd::{DcsdHead, DEFAULT_TEMPERATURE};
use crate::detector::Detection;
use crate::dswr::{assess_quality, DswrHead, QualityConfig};
use crate::error::{Error, Result};
use crate::frame::{resize_area, GrayFrame};
use crate::layers::Linear;
use crate::numeric::{join, Matrix, ParamSet, Parameter, Tape, Var};
use crate::student::{StudentConfig, StudentModel};
use crate::trackset::{BBox, TrackRecord, TrackSet};

const PATCH: usize = 8;
/// Normalised box (4) plus per-cell mean and standard deviation of an 8x8 grid.
pub const DESCRIPTOR_DIM: usize = 4 + 2 * PATCH * PATCH;
/// Fusion weight used by variants without quality adaptation.
pub const FIXED_SEMANTIC_WEIGHT: f64 = 0.5;

/// Ablation ladder, each step adding one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Raw queries only.
    Baseline,
    /// Student with distillation; loss weights frozen at (0.5, 0.5), fusion weight fixed.
    Distill,
    /// As `Distill` with learnable loss weights.
    DcsdTrained,
    /// As `DcsdTrained` with the quality-driven fusion weight.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Distill,
        Variant::DcsdTrained,
        Variant::Full,
    ];

    pub fn uses_student(self) -> bool {
        self != Variant::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Distill => "distill",
            Variant::DcsdTrained => "dcsd_trained",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected baseline, distill, dcsd_trained or full")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Weight of `1 - IoU` in the association cost.
    pub iou_weight: f64,
    /// Pairs costlier than this are never associated.
    pub gate: f64,
    pub birth_threshold: f64,
    /// Track queries are propagated only when their confidence exceeds this.
    pub propagate_threshold: f64,
    pub max_age: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            iou_weight: 0.5,
            gate: 0.7,
            birth_threshold: 0.6,
            propagate_threshold: 0.5,
            max_age: 3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_weight >= 0.0 && self.gate > 0.0) {
            return Err(Error::Config("association weights must be non-negative".into()));
        }
        for (name, v) in [
            ("birth_threshold", self.birth_threshold),
            ("propagate_threshold", self.propagate_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Proposal,
    Track,
}

/// One query row. Track queries always carry an id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub kind: QueryKind,
    pub feature: Vec<f64>,
    pub bbox: BBox,
    pub track_id: Option<u32>,
    pub confidence: f64,
}

/// Centred appearance and geometry summary of the pixels under `bbox`.
pub fn proposal_descriptor(frame: &GrayFrame, bbox: &BBox) -> Vec<f64> {
    let (w, h) = (frame.width(), frame.height());
    let x0 = (bbox.left.floor().max(0.0) as usize).min(w - 1);
    let y0 = (bbox.top.floor().max(0.0) as usize).min(h - 1);
    let x1 = (bbox.right().ceil() as usize).clamp(x0 + 1, w);
    let y1 = (bbox.bottom().ceil() as usize).clamp(y0 + 1, h);
    let crop = GrayFrame::from_fn(x1 - x0, y1 - y0, |x, y| frame.get(x0 + x, y0 + y));
    let squares = GrayFrame::from_fn(crop.width(), crop.height(), |x, y| crop.get(x, y).powi(2));
    let mean = resize_area(&crop, PATCH, PATCH);
    let mean_sq = resize_area(&squares, PATCH, PATCH);
    let (cx, cy) = bbox.center();
    let mut d = Vec::with_capacity(DESCRIPTOR_DIM);
    d.extend([
        cx / w as f64 - 0.5,
        cy / h as f64 - 0.5,
        bbox.width / w as f64,
        bbox.height / h as f64,
    ]);
    d.extend(mean.pixels().iter().map(|m| m - 0.5));
    d.extend(
        mean.pixels()
            .iter()
            .zip(mean_sq.pixels())
            .map(|(m, s)| 2.0 * (s - m * m).max(0.0).sqrt()),
    );
    d
}

pub fn descriptor_matrix(frame: &GrayFrame, boxes: &[BBox]) -> Matrix {
    let data = boxes
        .iter()
        .flat_map(|b| proposal_descriptor(frame, b))
        .collect();
    Matrix::new(boxes.len(), DESCRIPTOR_DIM, data).expect("descriptor width is fixed")
}

/// Box regression target relative to a detection, scaled by its size.
pub fn box_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    [
        (to.left - from.left) / from.width,
        (to.top - from.top) / from.height,
        (to.width - from.width) / from.width,
        (to.height - from.height) / from.height,
    ]
}

pub fn apply_deltas(b: &BBox, d: &[f64]) -> BBox {
    BBox::new(
        b.left + d[0] * b.width,
        b.top + d[1] * b.height,
        (b.width * (1.0 + d[2])).max(1.0),
        (b.height * (1.0 + d[3])).max(1.0),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSpec {
    pub variant: Variant,
    pub student: StudentConfig,
    pub temperature: f64,
    pub quality: QualityConfig,
    /// Initial `(W, b)` of the quality-to-weight map.
    pub dswr_init: (f64, f64),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::Full,
            student: StudentConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            quality: QualityConfig::default(),
            dswr_init: (-4.0, 2.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerModel {
    spec: ModelSpec,
    pub embed: Linear,
    pub box_head: Linear,
    pub student: Option<StudentModel>,
    pub dcsd: Option<DcsdHead>,
    pub dswr: Option<DswrHead>,
}

/// Tape handles produced by [`TrackerModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub queries: Var,
    pub student_out: Option<Var>,
    pub weight: Option<Var>,
    pub fused: Var,
}

impl TrackerModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.quality.validate()?;
        let dim = spec.student.input_dim;
        if spec.student.output_dim != dim {
            return Err(Error::Config(
                "student output width must equal its input width for fusion".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Linear::new(DESCRIPTOR_DIM, dim, &mut rng);
        let box_head = Linear::zeros(dim, 4);
        let v = spec.variant;
        let student = if v.uses_student() {
            Some(StudentModel::new(spec.student.clone(), seed.wrapping_add(1))?)
        } else {
            None
        };
        let dcsd = if v.uses_student() {
            let mut head = DcsdHead::new(dim, spec.temperature, seed.wrapping_add(2))?;
            head.set_weights_trainable(v != Variant::Distill);
            Some(head)
        } else {
            None
        };
        let dswr = (v == Variant::Full).then(|| DswrHead::new(spec.dswr_init.0, spec.dswr_init.1));
        Ok(TrackerModel {
            spec,
            embed,
            box_head,
            student,
            dcsd,
            dswr,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    /// Scalars used at inference time; the teacher projection and loss logits are excluded.
    pub fn inference_parameter_count(&self) -> usize {
        numel(&self.embed)
            + numel(&self.box_head)
            + self.student.as_ref().map_or(0, numel)
            + self.dswr.as_ref().map_or(0, numel)
    }

    /// Scalars contributed by the student and the fusion head.
    pub fn semantic_parameter_count(&self) -> usize {
        self.inference_parameter_count()
            - self.embed.weight.numel()
            - self.embed.bias.numel()
            - self.box_head.weight.numel()
            - self.box_head.bias.numel()
    }

    /// Semantic-branch weight for a frame of quality `q`, if the variant fuses.
    pub fn semantic_weight(&self, q: f64) -> Result<Option<f64>> {
        match (&self.student, &self.dswr) {
            (None, _) => Ok(None),
            (Some(_), Some(d)) => d.semantic_weight(q).map(Some),
            (Some(_), None) => Ok(Some(FIXED_SEMANTIC_WEIGHT)),
        }
    }

    /// Embeds descriptors (`n x 132`) and returns the fused query features.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, descriptors: Var, q: f64) -> Result<ForwardVars> {
        let queries = self.embed.forward(tape, descriptors)?;
        let Some(student) = &self.student else {
            return Ok(ForwardVars {
                queries,
                student_out: None,
                weight: None,
                fused: queries,
            });
        };
        let s = student.forward(tape, queries)?;
        let w = match &self.dswr {
            Some(d) => d.forward(tape, q)?,
            None => tape.constant(Matrix::scalar(FIXED_SEMANTIC_WEIGHT)),
        };
        let fused = tape.fuse(w, s, queries)?;
        Ok(ForwardVars {
            queries,
            student_out: Some(s),
            weight: Some(w),
            fused,
        })
    }

    /// Fused features for query rows that are already embedded (`n x d`).
    fn fuse_queries(&self, queries: &Matrix, q: f64) -> Result<Matrix> {
        let Some(student) = &self.student else {
            return Ok(queries.clone());
        };
        let s = student.infer(queries)?;
        let w = self.semantic_weight(q)?.expect("student present");
        crate::dswr::fuse(w, &s, queries)
    }
}

impl ParamSet for TrackerModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.embed.visit(&join(prefix, "embed"), out);
        self.box_head.visit(&join(prefix, "box_head"), out);
        if let Some(s) = &self.student {
            s.visit(&join(prefix, "student"), out);
        }
        if let Some(d) = &self.dcsd {
            d.visit(&join(prefix, "dcsd"), out);
        }
        if let Some(d) = &self.dswr {
            d.visit(&join(prefix, "dswr"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.embed.visit_mut(&join(prefix, "embed"), out);
        self.box_head.visit_mut(&join(prefix, "box_head"), out);
        if let Some(s) = &mut self.student {
            s.visit_mut(&join(prefix, "student"), out);
        }
        if let Some(d) = &mut self.dcsd {
            d.visit_mut(&join(prefix, "dcsd"), out);
        }
        if let Some(d) = &mut self.dswr {
            d.visit_mut(&join(prefix, "dswr"), out);
        }
    }
}

fn numel(p: &impl ParamSet) -> usize {
    p.named_parameters().iter().map(|(_, p)| p.numel()).sum()
}

/// Supervision for one frame pair: which track row should pick which
/// proposal row, and box targets for supervised proposals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotTargets {
    pub pairs: Vec<(usize, usize)>,
    pub boxes: Vec<(usize, [f64; 4])>,
}

/// Association cross-entropy over cosine logits plus L1 box regression.
/// `None` when nothing is supervised.
pub fn mot_loss<'p>(
    tape: &mut Tape<'p>,
    box_head: &'p Linear,
    tracks: Var,
    proposals: Var,
    targets: &MotTargets,
    temperature: f64,
    box_weight: f64,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if !targets.pairs.is_empty() {
        let rows: Vec<usize> = targets.pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = targets.pairs.iter().map(|p| p.1).collect();
        let t = tape.select_rows(tracks, &rows)?;
        let tn = tape.l2_normalize_rows(t);
        let pn = tape.l2_normalize_rows(proposals);
        let cos = tape.matmul_nt(tn, pn)?;
        let logits = tape.scale(cos, 1.0 / temperature);
        terms.push(tape.cross_entropy(logits, &labels)?);
    }
    if !targets.boxes.is_empty() {
        let rows: Vec<usize> = targets.boxes.iter().map(|b| b.0).collect();
        let goal = Matrix::from_rows(&targets.boxes.iter().map(|b| b.1).collect::<Vec<_>>());
        let p = tape.select_rows(proposals, &rows)?;
        let pred = box_head.forward(tape, p)?;
        let goal = tape.constant(goal);
        let diff = tape.sub(pred, goal)?;
        let abs = tape.abs(diff);
        let l1 = tape.mean(abs);
        terms.push(tape.scale(l1, box_weight));
    }
    Ok(match terms.as_slice() {
        [] => None,
        [one] => Some(*one),
        [a, b] => Some(tape.add(*a, *b)?),
        _ => unreachable!(),
    })
}

struct Track {
    id: u32,
    query: Vec<f64>,
    bbox: BBox,
    confidence: f64,
    missed: u32,
}

/// Runs the tracker over a sequence. `detections[f]` holds frame `f`'s boxes.
pub fn track_sequence(
    frames: &[GrayFrame],
    detections: &[Vec<Detection>],
    model: &TrackerModel,
    cfg: &TrackerConfig,
) -> Result<TrackSet> {
    cfg.validate()?;
    if frames.len() != detections.len() {
        return Err(Error::Shape(format!(
            "{} frames but detections for {}",
            frames.len(),
            detections.len()
        )));
    }
    let dim = model.embed.out_dim();
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id = 0u32;
    let mut out = TrackSet::new();
    for (f, (frame, dets)) in frames.iter().zip(detections).enumerate() {
        if let Some(bad) = dets.iter().find(|d| d.frame as usize != f) {
            return Err(Error::Shape(format!(
                "detection for frame {} listed under frame {f}",
                bad.frame
            )));
        }
        tracks.retain(|t| t.confidence > cfg.propagate_threshold);
        let (k, m) = (tracks.len(), dets.len());
        if k + m == 0 {
            continue;
        }
        let q = assess_quality(frame, &model.spec.quality)?.q;
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let proposals = model.embed.apply(&descriptor_matrix(frame, &boxes))?;
        let mut data: Vec<f64> = tracks.iter().flat_map(|t| t.query.iter().copied()).collect();
        data.extend_from_slice(proposals.as_slice());
        let queries = Matrix::new(k + m, dim, data)?;
        let fused = model.fuse_queries(&queries, q)?;
        let unit = crate::numeric::l2_normalize_rows(&fused);
        let refine = if m > 0 {
            model.box_head.apply(&fused.select_rows(&(k..k + m).collect::<Vec<_>>()))?
        } else {
            Matrix::zeros(0, 4)
        };

        let mut cost = Matrix::zeros(k, m);
        for i in 0..k {
            for j in 0..m {
                let cos: f64 = unit.row(i).iter().zip(unit.row(k + j)).map(|(a, b)| a * b).sum();
                let iou = tracks[i].bbox.iou(&boxes[j]);
                cost.set(i, j, 1.0 - cos + cfg.iou_weight * (1.0 - iou));
            }
        }
        let mut det_taken = vec![false; m];
        let mut track_hit = vec![false; k];
        for (i, j) in solve_min(&cost).into_iter().enumerate() {
            let Some(j) = j else { continue };
            if cost.get(i, j) > cfg.gate {
                continue;
            }
            det_taken[j] = true;
            track_hit[i] = true;
            let t = &mut tracks[i];
            t.query = proposals.row(j).to_vec();
            t.bbox = apply_deltas(&boxes[j], refine.row(j));
            t.confidence = dets[j].confidence;
            t.missed = 0;
            out.push(TrackRecord {
                frame: f as u32,
                id: t.id,
                bbox: t.bbox,
                conf: t.confidence,
            })?;
        }
        for (t, hit) in tracks.iter_mut().zip(&track_hit) {
            if !hit {
                t.missed += 1;
            }
        }
        tracks.retain(|t| t.missed <= cfg.max_age);
        for j in 0..m {
            if det_taken[j] || dets[j].confidence < cfg.birth_threshold {
                continue;
            }
            let t = Track {
                id: next_id,
                query: proposals.row(j).to_vec(),
                bbox: apply_deltas(&boxes[j], refine.row(j)),
                confidence: dets[j].confidence,
                missed: 0,
            };
            next_id += 1;
            out.push(TrackRecord {
                frame: f as u32,
                id: t.id,
                bbox: t.bbox,
                conf: t.confidence,
            })?;
            tracks.push(t);
        }
    }
    Ok(out)
}
