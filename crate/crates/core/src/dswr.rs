//! Frame-quality driven fusion of semantic and query features.
//!
//! Quality is a no-reference score built from Laplacian variance (clarity),
//! Immerkær's fast noise estimate, and the pixel standard deviation
//! (contrast). A sigmoid of an affine map of the score gives the weight on the
//! semantic branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{correlate3_valid, GrayFrame};
use crate::numeric::{join, sigmoid, Matrix, ParamSet, Parameter, Tape, Var};

const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const IMMERKAER: [[f64; 3]; 3] = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];

/// Normalisation range `[lo, hi]` for one raw metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub clarity: Range,
    pub noise: Range,
    pub contrast: Range,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            clarity: Range::new(0.0, 0.02),
            noise: Range::new(0.0, 0.1),
            contrast: Range::new(0.0, 0.35),
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("clarity", self.clarity),
            ("noise", self.noise),
            ("contrast", self.contrast),
        ] {
            if !(r.hi > r.lo) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(Error::Config(format!(
                    "{name} range must satisfy lo < hi, got [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub clarity: f64,
    pub noise_sigma: f64,
    pub contrast: f64,
    pub q: f64,
}

/// Variance of the valid-region Laplacian response.
pub fn laplacian_variance(frame: &GrayFrame) -> f64 {
    population_variance(&correlate3_valid(frame, &LAPLACIAN))
}

/// Two-pass variance of values shifted by the first one; exactly zero when
/// all values are equal.
fn population_variance(v: &[f64]) -> f64 {
    let Some(&k) = v.first() else { return 0.0 };
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x - k).sum::<f64>() / n;
    v.iter().map(|x| (x - k - mean) * (x - k - mean)).sum::<f64>() / n
}

/// Immerkær's noise standard deviation estimate.
pub fn immerkaer_sigma(frame: &GrayFrame) -> f64 {
    let r = correlate3_valid(frame, &IMMERKAER);
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let total: f64 = r.iter().map(|v| v.abs()).sum();
    (std::f64::consts::PI / 2.0).sqrt() * total / (6.0 * (w - 2.0) * (h - 2.0))
}

/// Population standard deviation of the pixels.
pub fn pixel_std(frame: &GrayFrame) -> f64 {
    population_variance(frame.pixels()).sqrt()
}

pub fn assess_quality(frame: &GrayFrame, cfg: &QualityConfig) -> Result<QualityReport> {
    if frame.width() < 3 || frame.height() < 3 {
        return Err(Error::Shape(format!(
            "quality assessment needs at least 3x3 pixels, got {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    let clarity = laplacian_variance(frame);
    let noise_sigma = immerkaer_sigma(frame);
    let contrast = pixel_std(frame);
    let q = (cfg.clarity.normalize(clarity)
        + (1.0 - cfg.noise.normalize(noise_sigma))
        + cfg.contrast.normalize(contrast))
        / 3.0;
    Ok(QualityReport {
        clarity,
        noise_sigma,
        contrast,
        q,
    })
}

/// Learnable scalar map `w = sigmoid(W q + b)`.
#[derive(Debug, Clone)]
pub struct DswrHead {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Default for DswrHead {
    fn default() -> Self {
        DswrHead::new(-4.0, 2.0)
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quality score {q} outside [0, 1]")));
    }
    Ok(())
}

impl DswrHead {
    pub fn new(weight: f64, bias: f64) -> Self {
        DswrHead {
            weight: Parameter::new(Matrix::scalar(weight)),
            bias: Parameter::new(Matrix::scalar(bias)),
        }
    }

    pub fn semantic_weight(&self, q: f64) -> Result<f64> {
        check_q(q)?;
        Ok(sigmoid(
            self.weight.value().item() * q + self.bias.value().item(),
        ))
    }

    /// Records `sigmoid(W q + b)` as a 1x1 node.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, q: f64) -> Result<Var> {
        check_q(q)?;
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let wq = tape.scale(w, q);
        let z = tape.add(wq, b)?;
        Ok(tape.sigmoid(z))
    }
}

impl ParamSet for DswrHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// `w · semantic + (1 − w) · query`, element-wise.
pub fn fuse(w: f64, semantic: &Matrix, query: &Matrix) -> Result<Matrix> {
    if semantic.shape() != query.shape() {
        return Err(Error::Dimension {
            op: "fuse",
            lhs: semantic.shape(),
            rhs: query.shape(),
        });
    }
    Ok(semantic.zip_map(query, |s, x| w * s + (1.0 - w) * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn checkerboard(size: usize, cell: usize) -> GrayFrame {
        GrayFrame::from_fn(size, size, |x, y| {
            if ((x / cell) + (y / cell)) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        })
    }

    #[test]
    fn constant_frame_scores_one_third() {
        for v in [0.0, 0.1, 0.4, 0.7, 1.0] {
            let r = assess_quality(&GrayFrame::filled(16, 16, v), &QualityConfig::default()).unwrap();
            assert_eq!((r.clarity, r.noise_sigma, r.contrast), (0.0, 0.0, 0.0));
            assert_eq!(r.q, 1.0 / 3.0);
        }
    }

    #[test]
    fn tiny_frame_rejected() {
        assert!(assess_quality(&GrayFrame::filled(2, 5, 0.0), &QualityConfig::default()).is_err());
    }

    #[test]
    fn immerkaer_tracks_gaussian_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 0.04).unwrap();
        let f = GrayFrame::from_fn(256, 256, |_, _| 0.5 + normal.sample(&mut rng));
        let est = immerkaer_sigma(&f);
        assert!((est - 0.04).abs() < 0.15 * 0.04, "{est}");
    }

    #[test]
    fn sharp_checkerboard_is_clearer_than_blurred() {
        let sharp = checkerboard(32, 4);
        let blurred = crate::degradation::gaussian_blur(&sharp, 1.5, 7);
        assert!(laplacian_variance(&sharp) > laplacian_variance(&blurred));
    }

    #[test]
    fn intensity_offset_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = GrayFrame::from_fn(20, 20, |_, _| rng.gen_range(0.2..0.6));
        let g = GrayFrame::from_fn(20, 20, |x, y| f.get(x, y) + 0.25);
        let cfg = QualityConfig::default();
        let (a, b) = (assess_quality(&f, &cfg).unwrap(), assess_quality(&g, &cfg).unwrap());
        assert!((a.clarity - b.clarity).abs() < 1e-12);
        assert!((a.noise_sigma - b.noise_sigma).abs() < 1e-12);
        assert!((a.contrast - b.contrast).abs() < 1e-12);
    }

    #[test]
    fn semantic_weight_closed_forms() {
        let head = DswrHead::new(-4.0, 2.0);
        assert_eq!(head.semantic_weight(0.5).unwrap(), 0.5);
        assert!((head.semantic_weight(0.0).unwrap() - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!((head.semantic_weight(1.0).unwrap() - 0.119_202_922_022_117_6).abs() < 1e-15);
        assert!(head.semantic_weight(1.5).is_err());
        assert!(head.semantic_weight(-0.1).is_err());
    }

    #[test]
    fn semantic_weight_range_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let head = DswrHead::new(rng.gen_range(-8.0..-0.01), rng.gen_range(-3.0..3.0));
            let (q1, q2) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let (w1, w2) = (head.semantic_weight(q1).unwrap(), head.semantic_weight(q2).unwrap());
            assert!(w1 > 0.0 && w1 < 1.0);
            if q1 < q2 {
                assert!(w1 > w2);
            }
        }
    }

    #[test]
    fn fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Matrix::uniform(3, 4, 1.0, &mut rng);
        let q = Matrix::uniform(3, 4, 1.0, &mut rng);
        let near_one = fuse(1.0 - 1e-15, &s, &q).unwrap();
        assert!(near_one.max_abs_diff(&s) < 1e-14);
        assert_eq!(fuse(0.5, &s, &s).unwrap(), s);
        assert!(fuse(0.5, &s, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn tape_weight_matches_direct() {
        let head = DswrHead::new(-3.0, 1.0);
        let mut tape = Tape::new();
        let w = head.forward(&mut tape, 0.3).unwrap();
        assert_eq!(tape.scalar(w), head.semantic_weight(0.3).unwrap());
    }
}
