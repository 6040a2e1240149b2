//! MOTA, IDF1 and HOTA (with DetA / AssA) over a ground-truth and a predicted
//! track set. Matching conventions follow the reference evaluator: CLEAR
//! matching favours the previous frame's pairs, ID switches compare against
//! the last matched id across gaps, and HOTA uses one optimal assignment per
//! frame on alignment-weighted similarity, thresholded per localisation level.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::max_pairs;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::trackset::TrackSet;

const EPS: f64 = f64::EPSILON;
const CONTINUITY_BONUS: f64 = 1000.0;

/// The 19 HOTA localisation thresholds `0.05, 0.10, …, 0.95`.
pub fn hota_alphas() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub alphas: Vec<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_threshold: 0.5,
            alphas: hota_alphas(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |t: f64| !(t > 0.0 && t < 1.0);
        if bad(self.iou_threshold) || self.alphas.is_empty() || self.alphas.iter().any(|&a| bad(a))
        {
            return Err(Error::Config(
                "matching thresholds must lie in (0, 1) and the HOTA grid must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearCounts {
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub misses: usize,
    pub idsw: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityScores {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub idf1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotaAtAlpha {
    pub alpha: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub tp: usize,
    pub fp: usize,
    pub misses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotaScores {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub per_alpha: Vec<HotaAtAlpha>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub mota: f64,
    pub idf1: f64,
    pub clear: ClearCounts,
    pub identity: IdentityScores,
    pub per_alpha: Vec<HotaAtAlpha>,
}

/// One frame: dense gt / pred id indices and their IoU matrix.
struct FrameData {
    gt: Vec<usize>,
    pred: Vec<usize>,
    iou: Matrix,
}

struct Prepared {
    num_gt_ids: usize,
    num_pred_ids: usize,
    num_gt: usize,
    num_pred: usize,
    frames: Vec<FrameData>,
}

fn prepare(gt: &TrackSet, pred: &TrackSet) -> Result<Prepared> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric(
            "ground truth contains no boxes".into(),
        ));
    }
    let dense = |s: &TrackSet| -> BTreeMap<u32, usize> {
        s.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    };
    let (gmap, pmap) = (dense(gt), dense(pred));
    let (gf, pf) = (gt.by_frame(), pred.by_frame());
    let mut keys: Vec<u32> = gf.keys().chain(pf.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let frames = keys
        .into_iter()
        .map(|f| {
            let g = gf.get(&f).copied().unwrap_or(&[]);
            let p = pf.get(&f).copied().unwrap_or(&[]);
            let mut iou = Matrix::zeros(g.len(), p.len());
            for (i, a) in g.iter().enumerate() {
                for (j, b) in p.iter().enumerate() {
                    iou.set(i, j, a.bbox.iou(&b.bbox));
                }
            }
            FrameData {
                gt: g.iter().map(|r| gmap[&r.id]).collect(),
                pred: p.iter().map(|r| pmap[&r.id]).collect(),
                iou,
            }
        })
        .collect();
    Ok(Prepared {
        num_gt_ids: gmap.len(),
        num_pred_ids: pmap.len(),
        num_gt: gt.len(),
        num_pred: pred.len(),
        frames,
    })
}

fn clear_prepared(p: &Prepared, threshold: f64) -> (f64, ClearCounts) {
    let mut c = ClearCounts {
        num_gt: p.num_gt,
        ..ClearCounts::default()
    };
    let mut last_id: Vec<Option<usize>> = vec![None; p.num_gt_ids];
    let mut prev_step: Vec<Option<usize>> = vec![None; p.num_gt_ids];
    for f in &p.frames {
        if f.gt.is_empty() {
            c.fp += f.pred.len();
            continue;
        }
        if f.pred.is_empty() {
            c.misses += f.gt.len();
            continue;
        }
        let mut score = f.iou.clone();
        for (i, &g) in f.gt.iter().enumerate() {
            for (j, &t) in f.pred.iter().enumerate() {
                let sim = f.iou.get(i, j);
                let v = if sim < threshold - EPS {
                    0.0
                } else if prev_step[g] == Some(t) {
                    CONTINUITY_BONUS + sim
                } else {
                    sim
                };
                score.set(i, j, v);
            }
        }
        let matched: Vec<(usize, usize)> = max_pairs(&score)
            .into_iter()
            .filter(|&(i, j)| score.get(i, j) > EPS)
            .map(|(i, j)| (f.gt[i], f.pred[j]))
            .collect();
        prev_step.iter_mut().for_each(|v| *v = None);
        for &(g, t) in &matched {
            if last_id[g].is_some_and(|prev| prev != t) {
                c.idsw += 1;
            }
            last_id[g] = Some(t);
            prev_step[g] = Some(t);
        }
        c.tp += matched.len();
        c.misses += f.gt.len() - matched.len();
        c.fp += f.pred.len() - matched.len();
    }
    let mota = (c.tp as f64 - c.fp as f64 - c.idsw as f64) / c.num_gt as f64;
    (mota, c)
}

fn identity_prepared(p: &Prepared, threshold: f64) -> IdentityScores {
    let mut overlap = Matrix::zeros(p.num_gt_ids, p.num_pred_ids);
    for f in &p.frames {
        for (i, &g) in f.gt.iter().enumerate() {
            for (j, &t) in f.pred.iter().enumerate() {
                if f.iou.get(i, j) >= threshold {
                    overlap.set(g, t, overlap.get(g, t) + 1.0);
                }
            }
        }
    }
    let idtp: usize = max_pairs(&overlap)
        .into_iter()
        .map(|(g, t)| overlap.get(g, t) as usize)
        .sum();
    IdentityScores {
        idtp,
        idfp: p.num_pred - idtp,
        idfn: p.num_gt - idtp,
        idf1: 2.0 * idtp as f64 / (p.num_gt + p.num_pred) as f64,
    }
}

fn hota_prepared(p: &Prepared, alphas: &[f64]) -> HotaScores {
    let (ng, np) = (p.num_gt_ids, p.num_pred_ids);
    let mut potential = Matrix::zeros(ng, np);
    let mut gt_count = vec![0.0; ng];
    let mut pred_count = vec![0.0; np];
    for f in &p.frames {
        let row_sum: Vec<f64> = (0..f.gt.len()).map(|i| f.iou.row(i).iter().sum()).collect();
        let col_sum: Vec<f64> = (0..f.pred.len())
            .map(|j| (0..f.gt.len()).map(|i| f.iou.get(i, j)).sum())
            .collect();
        for (i, &g) in f.gt.iter().enumerate() {
            for (j, &t) in f.pred.iter().enumerate() {
                let sim = f.iou.get(i, j);
                let denom = row_sum[i] + col_sum[j] - sim;
                if denom > EPS {
                    potential.set(g, t, potential.get(g, t) + sim / denom);
                }
            }
        }
        f.gt.iter().for_each(|&g| gt_count[g] += 1.0);
        f.pred.iter().for_each(|&t| pred_count[t] += 1.0);
    }
    let alignment = Matrix::from_fn(ng, np, |g, t| {
        let pm = potential.get(g, t);
        pm / (gt_count[g] + pred_count[t] - pm)
    });

    let na = alphas.len();
    let mut tp = vec![0usize; na];
    let mut fp = vec![0usize; na];
    let mut misses = vec![0usize; na];
    let mut matches = vec![Matrix::zeros(ng, np); na];
    for f in &p.frames {
        if f.gt.is_empty() || f.pred.is_empty() {
            fp.iter_mut().for_each(|v| *v += f.pred.len());
            misses.iter_mut().for_each(|v| *v += f.gt.len());
            continue;
        }
        let score = Matrix::from_fn(f.gt.len(), f.pred.len(), |i, j| {
            alignment.get(f.gt[i], f.pred[j]) * f.iou.get(i, j)
        });
        let pairs = max_pairs(&score);
        for (a, &alpha) in alphas.iter().enumerate() {
            let kept: Vec<&(usize, usize)> = pairs
                .iter()
                .filter(|&&(i, j)| f.iou.get(i, j) >= alpha - EPS)
                .collect();
            tp[a] += kept.len();
            misses[a] += f.gt.len() - kept.len();
            fp[a] += f.pred.len() - kept.len();
            for &&(i, j) in &kept {
                let (g, t) = (f.gt[i], f.pred[j]);
                let m = &mut matches[a];
                m.set(g, t, m.get(g, t) + 1.0);
            }
        }
    }

    let per_alpha: Vec<HotaAtAlpha> = alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let m = &matches[a];
            let mut ass_sum = 0.0;
            for g in 0..ng {
                for t in 0..np {
                    let c = m.get(g, t);
                    if c > 0.0 {
                        ass_sum += c * c / (gt_count[g] + pred_count[t] - c);
                    }
                }
            }
            let assa = ass_sum / tp[a].max(1) as f64;
            let deta = tp[a] as f64 / (tp[a] + fp[a] + misses[a]).max(1) as f64;
            HotaAtAlpha {
                alpha,
                hota: (deta * assa).sqrt(),
                deta,
                assa,
                tp: tp[a],
                fp: fp[a],
                misses: misses[a],
            }
        })
        .collect();
    let mean = |f: fn(&HotaAtAlpha) -> f64| per_alpha.iter().map(f).sum::<f64>() / na as f64;
    HotaScores {
        hota: mean(|h| h.hota),
        deta: mean(|h| h.deta),
        assa: mean(|h| h.assa),
        per_alpha,
    }
}

/// MOTA and CLEAR counts at a single IoU threshold.
pub fn mota(gt: &TrackSet, pred: &TrackSet, iou_threshold: f64) -> Result<(f64, ClearCounts)> {
    Ok(clear_prepared(&prepare(gt, pred)?, iou_threshold))
}

pub fn idf1(gt: &TrackSet, pred: &TrackSet, iou_threshold: f64) -> Result<IdentityScores> {
    Ok(identity_prepared(&prepare(gt, pred)?, iou_threshold))
}

pub fn hota(gt: &TrackSet, pred: &TrackSet, alphas: &[f64]) -> Result<HotaScores> {
    if alphas.is_empty() {
        return Err(Error::Config("HOTA needs at least one threshold".into()));
    }
    Ok(hota_prepared(&prepare(gt, pred)?, alphas))
}

pub fn evaluate(gt: &TrackSet, pred: &TrackSet, cfg: &MatchConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let p = prepare(gt, pred)?;
    let (mota, clear) = clear_prepared(&p, cfg.iou_threshold);
    let identity = identity_prepared(&p, cfg.iou_threshold);
    let h = hota_prepared(&p, &cfg.alphas);
    Ok(MetricReport {
        hota: h.hota,
        deta: h.deta,
        assa: h.assa,
        mota,
        idf1: identity.idf1,
        clear,
        identity,
        per_alpha: h.per_alpha,
    })
}

pub const REPORT_HEADER: &str = "seq,HOTA,DetA,AssA,MOTA,IDF1";

/// One CSV row in percent with one decimal.
pub fn report_row(seq: &str, r: &MetricReport) -> String {
    format!(
        "{seq},{:.1},{:.1},{:.1},{:.1},{:.1}",
        100.0 * r.hota,
        100.0 * r.deta,
        100.0 * r.assa,
        100.0 * r.mota,
        100.0 * r.idf1
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trackset::{BBox, TrackRecord};

    fn rec(frame: u32, id: u32, left: f64) -> TrackRecord {
        TrackRecord {
            frame,
            id,
            bbox: BBox::new(left, 0.0, 10.0, 10.0),
            conf: 1.0,
        }
    }

    fn set(r: Vec<TrackRecord>) -> TrackSet {
        TrackSet::from_records(r).unwrap()
    }

    fn two_tracks() -> TrackSet {
        set((0..5).flat_map(|f| [rec(f, 0, 0.0), rec(f, 1, 50.0)]).collect())
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = two_tracks();
        let r = evaluate(&gt, &gt, &MatchConfig::default()).unwrap();
        assert_eq!((r.hota, r.deta, r.assa, r.mota, r.idf1), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(
            r.clear,
            ClearCounts {
                num_gt: 10,
                tp: 10,
                fp: 0,
                misses: 0,
                idsw: 0
            }
        );
        let relabelled = gt.map_ids(|id| 7 - id).unwrap();
        let r2 = evaluate(&gt, &relabelled, &MatchConfig::default()).unwrap();
        assert_eq!((r2.hota, r2.assa, r2.idf1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let r = evaluate(&two_tracks(), &TrackSet::new(), &MatchConfig::default()).unwrap();
        assert_eq!((r.hota, r.deta, r.assa, r.idf1, r.mota), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn undefined_without_ground_truth() {
        let err = evaluate(&TrackSet::new(), &two_tracks(), &MatchConfig::default());
        assert!(matches!(err, Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn one_fp_one_fn_over_ten() {
        let gt = set((0..10).map(|f| rec(f, 0, 0.0)).collect());
        let mut pred: Vec<TrackRecord> = (0..9).map(|f| rec(f, 0, 0.0)).collect();
        pred.push(rec(3, 5, 60.0));
        let (m, c) = mota(&gt, &set(pred), 0.5).unwrap();
        assert_eq!((c.fp, c.misses, c.idsw), (1, 1, 0));
        assert_eq!(m, 0.8);
    }

    #[test]
    fn negative_mota() {
        let gt = set(vec![rec(0, 0, 0.0), rec(0, 1, 20.0)]);
        let pred = set(vec![
            rec(0, 0, 0.0),
            rec(0, 1, 20.0),
            rec(0, 2, 40.0),
            rec(0, 3, 60.0),
            rec(0, 4, 80.0),
        ]);
        let (m, c) = mota(&gt, &pred, 0.5).unwrap();
        assert_eq!((c.fp, c.misses), (3, 0));
        assert_eq!(m, -0.5);
    }

    #[test]
    fn split_track_halves_idf1_and_switches_once() {
        let gt = set((0..10).map(|f| rec(f, 0, 0.0)).collect());
        let pred = set((0..10).map(|f| rec(f, if f < 5 { 0 } else { 1 }, 0.0)).collect());
        assert_eq!(idf1(&gt, &pred, 0.5).unwrap().idf1, 0.5);
        assert_eq!(mota(&gt, &pred, 0.5).unwrap().1.idsw, 1);
    }

    #[test]
    fn idsw_counted_across_gaps() {
        let gt = set((0..4).map(|f| rec(f, 0, 0.0)).collect());
        let pred = set(vec![rec(0, 0, 0.0), rec(3, 1, 0.0)]);
        let (_, c) = mota(&gt, &pred, 0.5).unwrap();
        assert_eq!((c.tp, c.misses, c.idsw), (2, 2, 1));
    }

    #[test]
    fn hota_is_geometric_mean_per_alpha() {
        let gt = two_tracks();
        let pred = set((0..5)
            .flat_map(|f| [rec(f, 0, 1.0 + f as f64), rec(f, (f % 2) + 1, 52.0)])
            .collect());
        let h = hota(&gt, &pred, &hota_alphas()).unwrap();
        for a in &h.per_alpha {
            assert_eq!(a.hota, (a.deta * a.assa).sqrt());
            assert!((0.0..=1.0).contains(&a.hota));
        }
        assert!(h.hota > 0.0 && h.hota < 1.0);
    }

    #[test]
    fn csv_row_format() {
        let gt = two_tracks();
        let r = evaluate(&gt, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(report_row("s1", &r), "s1,100.0,100.0,100.0,100.0,100.0");
    }
}
