//! Synthetic detections derived from ground truth: jittered true boxes,
//! dropped boxes and random false positives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trackset::{BBox, TrackSet};

/// Detections below this confidence are discarded.
pub const MIN_CONFIDENCE: f64 = 0.05;
const TRUE_CONFIDENCE: f64 = 0.9;
/// Confidence lost per pixel of mean absolute jitter.
const JITTER_PENALTY: f64 = 0.05;
const MIN_BOX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoise {
    pub jitter_px: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise {
            jitter_px: 1.0,
            fp_rate: 0.2,
            fn_rate: 0.05,
        }
    }
}

impl DetectorNoise {
    pub const NONE: DetectorNoise = DetectorNoise {
        jitter_px: 0.0,
        fp_rate: 0.0,
        fn_rate: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let rate = |r: f64| (0.0..1.0).contains(&r);
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter_px)));
        }
        if !rate(self.fp_rate) || !rate(self.fn_rate) {
            return Err(Error::Config(format!(
                "detector rates must lie in [0, 1), got fp {} fn {}",
                self.fp_rate, self.fn_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

fn fit(b: BBox, width: f64, height: f64) -> BBox {
    let w = b.width.clamp(MIN_BOX, width);
    let h = b.height.clamp(MIN_BOX, height);
    BBox::new(b.left.clamp(0.0, width - w), b.top.clamp(0.0, height - h), w, h)
}

/// Per-frame detections for frames `0..num_frames` of a `width x height` scene.
pub fn synth_detector(
    gt: &TrackSet,
    num_frames: usize,
    (width, height): (usize, usize),
    noise: &DetectorNoise,
    seed: u64,
) -> Result<Vec<Vec<Detection>>> {
    noise.validate()?;
    let (w, h) = (width as f64, height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.jitter_px).expect("validated");
    let mut out = Vec::with_capacity(num_frames);
    for f in 0..num_frames as u32 {
        let mut dets = Vec::new();
        for r in gt.in_frame(f) {
            if rng.gen_bool(noise.fn_rate) {
                continue;
            }
            let d: [f64; 4] = if noise.jitter_px > 0.0 {
                std::array::from_fn(|_| normal.sample(&mut rng))
            } else {
                [0.0; 4]
            };
            let b = r.bbox;
            let bbox = fit(
                BBox::new(b.left + d[0], b.top + d[1], b.width + d[2], b.height + d[3]),
                w,
                h,
            );
            let mean_abs = d.iter().map(|v| v.abs()).sum::<f64>() / 4.0;
            dets.push(Detection {
                frame: f,
                bbox,
                confidence: (TRUE_CONFIDENCE - JITTER_PENALTY * mean_abs).max(MIN_CONFIDENCE),
            });
        }
        if rng.gen_bool(noise.fp_rate) {
            let bw = rng.gen_range(8.0..(w / 4.0).max(8.5));
            let bh = rng.gen_range(8.0..(h / 4.0).max(8.5));
            let bbox = fit(
                BBox::new(rng.gen_range(0.0..w - bw), rng.gen_range(0.0..h - bh), bw, bh),
                w,
                h,
            );
            dets.push(Detection {
                frame: f,
                bbox,
                confidence: rng.gen_range(MIN_CONFIDENCE..0.5),
            });
        }
        out.push(dets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn noiseless_detector_reproduces_gt() {
        let cfg = SceneConfig::default();
        let s = generate_scene(&cfg, 1).unwrap();
        let dets = synth_detector(&s.gt, cfg.num_frames, (cfg.width, cfg.height), &DetectorNoise::NONE, 0)
            .unwrap();
        for (f, d) in dets.iter().enumerate() {
            let gt = s.gt.in_frame(f as u32);
            assert_eq!(d.len(), gt.len());
            for (a, b) in d.iter().zip(gt) {
                assert_eq!(a.bbox, b.bbox);
                assert_eq!(a.confidence, 0.9);
            }
        }
    }

    #[test]
    fn fn_rate_one_rejected() {
        let noise = DetectorNoise {
            fn_rate: 1.0,
            ..DetectorNoise::NONE
        };
        assert!(synth_detector(&TrackSet::new(), 3, (50, 50), &noise, 0).is_err());
    }

    #[test]
    fn false_positive_count_is_binomial() {
        let noise = DetectorNoise {
            fp_rate: 0.5,
            ..DetectorNoise::NONE
        };
        let dets = synth_detector(&TrackSet::new(), 100, (80, 60), &noise, 7).unwrap();
        let count: usize = dets.iter().map(Vec::len).sum();
        // 99% two-sided interval of Binomial(100, 0.5) is [37, 63].
        assert!((37..=63).contains(&count), "{count}");
        for d in dets.iter().flatten() {
            assert!((MIN_CONFIDENCE..0.5).contains(&d.confidence));
            assert!(d.bbox.left >= 0.0 && d.bbox.right() <= 80.0);
            assert!(d.bbox.top >= 0.0 && d.bbox.bottom() <= 60.0);
        }
    }
}
