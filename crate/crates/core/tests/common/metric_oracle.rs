//! Exhaustive metric evaluation for tiny sequences: every per-frame matching
//! and every id correspondence is enumerated explicitly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsdmot::trackset::{BBox, TrackRecord, TrackSet};

pub struct OracleReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub hota_per_alpha: Vec<f64>,
    pub mota: f64,
    pub idf1: f64,
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.left + a.width).min(b.left + b.width) - a.left.max(b.left);
    let iy = (a.top + a.height).min(b.top + b.height) - a.top.max(b.top);
    if ix <= 0.0 || iy <= 0.0 || a.width * a.height <= 0.0 || b.width * b.height <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.width * a.height + b.width * b.height - inter)
}

/// All partial one-to-one matchings between `n` rows and `m` columns.
fn matchings(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(i: usize, n: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        rec(i + 1, n, used, cur, out);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, n, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, n, &mut vec![false; m], &mut Vec::new(), &mut out);
    out
}

/// The matching with the largest total of `score`; the first one found wins ties.
fn best_matching(n: usize, m: usize, score: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut best = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    for mt in matchings(n, m) {
        let s: f64 = mt.iter().map(|&(i, j)| score(i, j)).sum();
        if s > best_score + 1e-12 {
            best_score = s;
            best = mt;
        }
    }
    best
}

/// Id-ordered records of each frame.
fn frames(set: &TrackSet, n: u32) -> Vec<Vec<TrackRecord>> {
    (0..n).map(|f| set.records().iter().filter(|r| r.frame == f).copied().collect()).collect()
}

pub fn evaluate(gt: &TrackSet, pred: &TrackSet, threshold: f64, alphas: &[f64]) -> OracleReport {
    let n = gt.frame_count().max(pred.frame_count());
    let gf = frames(gt, n);
    let pf = frames(pred, n);
    let num_gt = gt.len() as f64;
    let num_pred = pred.len() as f64;

    // CLEAR
    let (mut tp, mut fp, mut fneg, mut idsw) = (0.0, 0.0, 0.0, 0.0);
    let mut last: BTreeMap<u32, u32> = BTreeMap::new();
    let mut prev: BTreeMap<u32, u32> = BTreeMap::new();
    for (g, p) in gf.iter().zip(&pf) {
        if g.is_empty() || p.is_empty() {
            fp += p.len() as f64;
            fneg += g.len() as f64;
            continue;
        }
        let valid = |i: usize, j: usize| iou(&g[i].bbox, &p[j].bbox) >= threshold;
        let mt = best_matching(g.len(), p.len(), |i, j| {
            if !valid(i, j) {
                return 0.0;
            }
            let cont = if prev.get(&g[i].id) == Some(&p[j].id) { 1000.0 } else { 0.0 };
            cont + iou(&g[i].bbox, &p[j].bbox)
        });
        let mt: Vec<_> = mt.into_iter().filter(|&(i, j)| valid(i, j)).collect();
        prev.clear();
        for &(i, j) in &mt {
            let (gid, pid) = (g[i].id, p[j].id);
            if last.get(&gid).is_some_and(|&l| l != pid) {
                idsw += 1.0;
            }
            last.insert(gid, pid);
            prev.insert(gid, pid);
        }
        tp += mt.len() as f64;
        fp += (p.len() - mt.len()) as f64;
        fneg += (g.len() - mt.len()) as f64;
    }
    let mota = 1.0 - (fneg + fp + idsw) / num_gt;
    assert_eq!(tp + fneg, num_gt);

    // Identity: try every injection of gt ids into pred ids or nothing.
    let gids: Vec<u32> = gt.ids().into_iter().collect();
    let pids: Vec<u32> = pred.ids().into_iter().collect();
    let overlap = |gid: u32, pid: u32| -> f64 {
        gf.iter()
            .zip(&pf)
            .filter(|(g, p)| {
                let a = g.iter().find(|r| r.id == gid);
                let b = p.iter().find(|r| r.id == pid);
                matches!((a, b), (Some(a), Some(b)) if iou(&a.bbox, &b.bbox) >= threshold)
            })
            .count() as f64
    };
    let idtp = matchings(gids.len(), pids.len())
        .into_iter()
        .map(|mt| mt.iter().map(|&(i, j)| overlap(gids[i], pids[j])).sum::<f64>())
        .fold(0.0, f64::max);
    let idf1 = 2.0 * idtp / (num_gt + num_pred);

    // HOTA
    let count = |set: &TrackSet, id: u32| set.records().iter().filter(|r| r.id == id).count() as f64;
    let mut potential: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (g, p) in gf.iter().zip(&pf) {
        for a in g {
            for b in p {
                let sim = iou(&a.bbox, &b.bbox);
                let rows: f64 = p.iter().map(|c| iou(&a.bbox, &c.bbox)).sum();
                let cols: f64 = g.iter().map(|c| iou(&c.bbox, &b.bbox)).sum();
                let denom = rows + cols - sim;
                if denom > f64::EPSILON {
                    *potential.entry((a.id, b.id)).or_default() += sim / denom;
                }
            }
        }
    }
    let gas = |gid: u32, pid: u32| {
        let pm = potential.get(&(gid, pid)).copied().unwrap_or(0.0);
        pm / (count(gt, gid) + count(pred, pid) - pm)
    };
    let per_frame: Vec<Vec<(usize, usize)>> = gf
        .iter()
        .zip(&pf)
        .map(|(g, p)| best_matching(g.len(), p.len(), |i, j| gas(g[i].id, p[j].id) * iou(&g[i].bbox, &p[j].bbox)))
        .collect();
    let mut hs = Vec::new();
    let (mut ds, mut as_) = (Vec::new(), Vec::new());
    for &alpha in alphas {
        let mut pair_tp: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for ((g, p), mt) in gf.iter().zip(&pf).zip(&per_frame) {
            for &(i, j) in mt {
                if iou(&g[i].bbox, &p[j].bbox) >= alpha - f64::EPSILON {
                    *pair_tp.entry((g[i].id, p[j].id)).or_default() += 1.0;
                }
            }
        }
        let tp: f64 = pair_tp.values().sum();
        let deta = tp / (num_gt + num_pred - tp).max(1.0);
        let assa = if tp == 0.0 {
            0.0
        } else {
            pair_tp
                .iter()
                .map(|(&(gid, pid), &c)| c * c / (count(gt, gid) + count(pred, pid) - c))
                .sum::<f64>()
                / tp
        };
        hs.push((deta * assa).sqrt());
        ds.push(deta);
        as_.push(assa);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    OracleReport {
        hota: mean(&hs),
        deta: mean(&ds),
        assa: mean(&as_),
        hota_per_alpha: hs,
        mota,
        idf1,
    }
}

/// A random sequence pair with at most 3 ids on each side and 4 frames.
/// Predictions are mostly perturbed copies of gt boxes so that matches occur.
pub fn random_case(seed: u64) -> (TrackSet, TrackSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.gen_range(1..=4u32);
    let n_gt = rng.gen_range(1..=3u32);
    let n_pred = rng.gen_range(0..=3u32);
    let mut gt = Vec::new();
    for id in 0..n_gt {
        let (mut x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
        for f in 0..frames {
            x += rng.gen_range(-3.0..3.0);
            if rng.gen_bool(0.75) {
                gt.push(TrackRecord { frame: f, id, bbox: BBox::new(x, y, 12.0, 16.0), conf: 1.0 });
            }
        }
    }
    if gt.is_empty() {
        gt.push(TrackRecord { frame: 0, id: 0, bbox: BBox::new(5.0, 5.0, 12.0, 16.0), conf: 1.0 });
    }
    let mut pred = Vec::new();
    for id in 0..n_pred {
        for f in 0..frames {
            if !rng.gen_bool(0.75) {
                continue;
            }
            let here: Vec<&TrackRecord> = gt.iter().filter(|r| r.frame == f).collect();
            let bbox = if !here.is_empty() && rng.gen_bool(0.8) {
                let b = here[rng.gen_range(0..here.len())].bbox;
                BBox::new(
                    b.left + rng.gen_range(-5.0..5.0),
                    b.top + rng.gen_range(-5.0..5.0),
                    b.width * rng.gen_range(0.7..1.3),
                    b.height * rng.gen_range(0.7..1.3),
                )
            } else {
                BBox::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), 12.0, 16.0)
            };
            pred.push(TrackRecord { frame: f, id, bbox, conf: 0.8 });
        }
    }
    (TrackSet::from_records(gt).unwrap(), TrackSet::from_records(pred).unwrap())
}
