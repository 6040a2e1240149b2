//! Synthetic low-quality video: composable blur / downsample / noise operators
//! applied in order, and mixed low/high quality training-set planning.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{reflect, resize_bilinear, resize_nearest, GrayFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationOp {
    GaussianBlur { sigma: f64, kernel_size: usize },
    /// Downsample by `scale`, then restore the original size bilinearly.
    Downsample { scale: f64, resample: Resample },
    GaussianNoise { sigma: f64, seed: u64 },
}

impl DegradationOp {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DegradationOp::GaussianBlur { sigma, kernel_size } => {
                if !(sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::Config(format!("blur sigma must be >= 0, got {sigma}")));
                }
                if kernel_size == 0 || kernel_size % 2 == 0 {
                    return Err(Error::Config(format!(
                        "blur kernel size must be odd and >= 1, got {kernel_size}"
                    )));
                }
            }
            DegradationOp::Downsample { scale, .. } => {
                if !(scale > 0.0 && scale <= 1.0) {
                    return Err(Error::Config(format!(
                        "downsample scale must be in (0, 1], got {scale}"
                    )));
                }
            }
            DegradationOp::GaussianNoise { sigma, .. } => {
                if !(sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
                }
            }
        }
        Ok(())
    }
}

/// Operators applied first to last: `D_n ∘ … ∘ D_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationChain {
    pub ops: Vec<DegradationOp>,
    pub master_seed: u64,
}

impl Default for DegradationChain {
    fn default() -> Self {
        DegradationChain {
            ops: vec![
                DegradationOp::GaussianBlur {
                    sigma: 1.5,
                    kernel_size: 7,
                },
                DegradationOp::Downsample {
                    scale: 0.5,
                    resample: Resample::Bilinear,
                },
                DegradationOp::GaussianNoise {
                    sigma: 0.03,
                    seed: 0,
                },
            ],
            master_seed: 0,
        }
    }
}

impl DegradationChain {
    pub fn empty() -> Self {
        DegradationChain {
            ops: Vec::new(),
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(DegradationOp::validate)
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(frame: &GrayFrame, sigma: f64, kernel_size: usize) -> GrayFrame {
    if kernel_size <= 1 || sigma == 0.0 {
        return frame.clone();
    }
    let r = (kernel_size / 2) as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (frame.width(), frame.height());
    let horizontal = GrayFrame::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * frame.get(reflect(x as isize + k as isize - r, w), y))
            .sum()
    });
    GrayFrame::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * horizontal.get(x, reflect(y as isize + k as isize - r, h)))
            .sum()
    })
}

fn downsample_restore(frame: &GrayFrame, scale: f64, resample: Resample) -> GrayFrame {
    let (w, h) = (frame.width(), frame.height());
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let sh = ((h as f64 * scale).round() as usize).max(1);
    if (sw, sh) == (w, h) {
        return frame.clone();
    }
    let small = match resample {
        Resample::Nearest => resize_nearest(frame, sw, sh),
        Resample::Bilinear => resize_bilinear(frame, sw, sh),
    };
    resize_bilinear(&small, w, h)
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finaliser over the running state
    h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Stable 64-bit hash of a sequence name (FNV-1a).
pub fn sequence_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Identifies a frame for the counter-based noise generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameKey {
    pub sequence: u64,
    pub frame: u64,
}

fn add_noise(frame: &GrayFrame, sigma: f64, seed: u64) -> GrayFrame {
    if sigma == 0.0 {
        return frame.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = frame.clone();
    out.pixels_mut()
        .iter_mut()
        .for_each(|v| *v += normal.sample(&mut rng));
    out
}

/// Applies the chain to a frame identified by `key`.
pub fn apply_chain_keyed(
    chain: &DegradationChain,
    frame: &GrayFrame,
    key: FrameKey,
) -> Result<GrayFrame> {
    chain.validate()?;
    let mut cur = frame.clone();
    for (pos, op) in chain.ops.iter().enumerate() {
        cur = match *op {
            DegradationOp::GaussianBlur { sigma, kernel_size } => {
                gaussian_blur(&cur, sigma, kernel_size)
            }
            DegradationOp::Downsample { scale, resample } => {
                downsample_restore(&cur, scale, resample)
            }
            DegradationOp::GaussianNoise { sigma, seed } => {
                let s = [seed, key.sequence, key.frame, pos as u64]
                    .into_iter()
                    .fold(chain.master_seed, mix);
                add_noise(&cur, sigma, s)
            }
        };
    }
    cur.clamp_unit();
    Ok(cur)
}

pub fn apply_chain(chain: &DegradationChain, frame: &GrayFrame) -> Result<GrayFrame> {
    apply_chain_keyed(chain, frame, FrameKey::default())
}

/// Share of degraded sequences in a training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MixRatio {
    AllHigh,
    /// `low : high` counts; `low` must be positive.
    Ratio { low: u32, high: u32 },
}

impl MixRatio {
    pub const ALL_LOW: MixRatio = MixRatio::Ratio { low: 1, high: 0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            MixRatio::AllHigh => Ok(()),
            MixRatio::Ratio { low: 0, .. } => Err(Error::Config(
                "low-quality share must be >= 1; use all-high for an undegraded set".into(),
            )),
            MixRatio::Ratio { .. } => Ok(()),
        }
    }

    /// Number of sequences to degrade out of `n`.
    pub fn low_count(&self, n: usize) -> usize {
        match *self {
            MixRatio::AllHigh => 0,
            MixRatio::Ratio { low, high } => {
                let share = low as f64 / (low + high) as f64;
                ((n as f64 * share).round() as usize).clamp(1, n)
            }
        }
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let r = match s {
            "all-high" => MixRatio::AllHigh,
            "all-low" => MixRatio::ALL_LOW,
            _ => {
                let (l, h) = s
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("ratio must be low:high, got {s:?}")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::Config(format!("bad ratio component {v:?}")))
                };
                match (parse(l)?, parse(h)?) {
                    (low, 0) if low > 0 => MixRatio::ALL_LOW,
                    (low, high) => MixRatio::Ratio { low, high },
                }
            }
        };
        r.validate()?;
        Ok(r)
    }
}

impl TryFrom<String> for MixRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MixRatio> for String {
    fn from(r: MixRatio) -> String {
        r.to_string()
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MixRatio::AllHigh => write!(f, "all-high"),
            MixRatio::Ratio { low, high: 0 } if low > 0 => write!(f, "all-low"),
            MixRatio::Ratio { low, high } => write!(f, "{low}:{high}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub quality: Quality,
}

/// Partition of a sequence list into degraded and untouched members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSetManifest {
    pub ratio: MixRatio,
    pub seed: u64,
    pub chain: DegradationChain,
    pub sequences: Vec<ManifestEntry>,
}

impl MixedSetManifest {
    pub fn low(&self) -> impl Iterator<Item = &str> {
        self.sequences
            .iter()
            .filter(|e| e.quality == Quality::Low)
            .map(|e| e.id.as_str())
    }

    pub fn quality_of(&self, id: &str) -> Option<Quality> {
        self.sequences.iter().find(|e| e.id == id).map(|e| e.quality)
    }
}

/// Chooses which sequences to degrade; listing order follows the input.
pub fn build_mixed_set(
    sequences: &[String],
    ratio: MixRatio,
    chain: &DegradationChain,
    seed: u64,
) -> Result<MixedSetManifest> {
    if sequences.is_empty() {
        return Err(Error::Config("mixed set needs at least one sequence".into()));
    }
    ratio.validate()?;
    chain.validate()?;
    let n_low = ratio.low_count(sequences.len());
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut low = vec![false; sequences.len()];
    for &i in &order[..n_low] {
        low[i] = true;
    }
    Ok(MixedSetManifest {
        ratio,
        seed,
        chain: chain.clone(),
        sequences: sequences
            .iter()
            .zip(low)
            .map(|(id, l)| ManifestEntry {
                id: id.clone(),
                quality: if l { Quality::Low } else { Quality::High },
            })
            .collect(),
    })
}
