//! Synthetic scenes: textured rectangles moving over a static textured
//! background, with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::GrayFrame;
use crate::trackset::{BBox, TrackRecord, TrackSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    Random,
    /// Targets 0 and 1 start on opposite sides and swap places mid-sequence.
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub num_targets: usize,
    pub box_width: (f64, f64),
    pub box_height: (f64, f64),
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Per-frame positional jitter standard deviation in pixels.
    pub jitter: f64,
    /// Per-frame sensor noise standard deviation.
    pub pixel_noise: f64,
    pub preset: ScenePreset,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 160,
            height: 120,
            num_frames: 24,
            num_targets: 4,
            box_width: (14.0, 22.0),
            box_height: (20.0, 32.0),
            speed: (1.0, 3.0),
            jitter: 0.5,
            pixel_noise: 0.01,
            preset: ScenePreset::Crossing,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_targets == 0 {
            return Err(Error::Config("a scene needs at least one target".into()));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("a scene needs at least two frames".into()));
        }
        if self.preset == ScenePreset::Crossing && self.num_targets < 2 {
            return Err(Error::Config("the crossing preset needs two targets".into()));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.box_width) || !range_ok(self.box_height) {
            return Err(Error::Config("box size ranges must satisfy 0 < lo <= hi".into()));
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return Err(Error::Config("speed range must satisfy 0 <= lo <= hi".into()));
        }
        if !(self.jitter >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.box_width.1 * 2.0 > self.width as f64 || self.box_height.1 * 2.0 > self.height as f64
        {
            return Err(Error::Config(format!(
                "targets up to {}x{} are too large for a {}x{} frame",
                self.box_width.1, self.box_height.1, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub intensity: f64,
    pub stripe_angle: f64,
    pub stripe_frequency: f64,
    pub stripe_amplitude: f64,
    /// 4x4 grid of additive offsets, row-major.
    pub blotches: Vec<f64>,
}

impl Appearance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Appearance {
            intensity: rng.gen_range(0.35..0.85),
            stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
            stripe_frequency: rng.gen_range(0.4..1.2),
            stripe_amplitude: rng.gen_range(0.05..0.2),
            blotches: (0..16).map(|_| rng.gen_range(-0.12..0.12)).collect(),
        }
    }

    /// Texture value at offset `(u, v)` inside a `w x h` box.
    fn shade(&self, u: f64, v: f64, w: f64, h: f64) -> f64 {
        let (s, c) = self.stripe_angle.sin_cos();
        let stripes = self.stripe_amplitude * (self.stripe_frequency * (u * c + v * s)).sin();
        let bx = ((u / w * 4.0) as usize).min(3);
        let by = ((v / h * 4.0) as usize).min(3);
        self.intensity + stripes + self.blotches[by * 4 + bx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub id: u32,
    pub start_frame: u32,
    pub end_frame: u32,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub size: (f64, f64),
    pub appearance: Appearance,
}

pub struct Scene {
    pub frames: Vec<GrayFrame>,
    pub gt: TrackSet,
    pub targets: Vec<TargetSpec>,
}

fn random_velocity(rng: &mut ChaCha8Rng, speed: (f64, f64)) -> (f64, f64) {
    let s = if speed.1 > speed.0 {
        rng.gen_range(speed.0..speed.1)
    } else {
        speed.0
    };
    let a = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    (s * a.cos(), s * a.sin())
}

fn plan_targets(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<TargetSpec> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let last = cfg.num_frames as u32 - 1;
    let size = |rng: &mut ChaCha8Rng| {
        let pick = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        (pick(rng, cfg.box_width), pick(rng, cfg.box_height))
    };
    (0..cfg.num_targets as u32)
        .map(|id| {
            let (bw, bh) = size(rng);
            let appearance = Appearance::random(rng);
            let crossing = cfg.preset == ScenePreset::Crossing && id < 2;
            let (start, velocity) = if crossing {
                // Centres meet at the middle frame on the same row.
                let mid = last as f64 / 2.0;
                let cy = h / 2.0;
                let span = (w / 2.0 - bw).min(cfg.speed.1.max(0.5) * mid);
                let dir = if id == 0 { 1.0 } else { -1.0 };
                let cx0 = w / 2.0 - dir * span;
                ((cx0 - bw / 2.0, cy - bh / 2.0), (dir * span / mid.max(1.0), 0.0))
            } else {
                let start = (rng.gen_range(0.0..w - bw), rng.gen_range(0.0..h - bh));
                (start, random_velocity(rng, cfg.speed))
            };
            TargetSpec {
                id,
                start_frame: 0,
                end_frame: last,
                start,
                velocity,
                size: (bw, bh),
                appearance,
            }
        })
        .collect()
}

/// Moves one coordinate and mirrors it back into `[0, limit]`; true when it bounced.
fn advance(pos: f64, step: f64, limit: f64) -> (f64, bool) {
    let p = pos + step;
    if p < 0.0 {
        ((-p).min(limit), true)
    } else if p > limit {
        ((2.0 * limit - p).max(0.0), true)
    } else {
        (p, false)
    }
}

/// Background tile edge in pixels and intensity spread of the tiles.
const TILE: usize = 6;
const TILE_AMPLITUDE: f64 = 0.15;

fn background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> GrayFrame {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let (tx, ty) = (cfg.width.div_ceil(TILE), cfg.height.div_ceil(TILE));
    let tiles: Vec<f64> = (0..tx * ty)
        .map(|_| rng.gen_range(-TILE_AMPLITUDE..TILE_AMPLITUDE))
        .collect();
    GrayFrame::from_fn(cfg.width, cfg.height, |x, y| {
        0.3 + tiles[(y / TILE) * tx + x / TILE]
            + waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
    })
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = plan_targets(cfg, &mut rng);
    let bg = background(cfg, &mut rng);
    let jitter = Normal::new(0.0, cfg.jitter).expect("validated");
    let sensor = Normal::new(0.0, cfg.pixel_noise).expect("validated");

    let mut state: Vec<((f64, f64), (f64, f64))> =
        targets.iter().map(|t| (t.start, t.velocity)).collect();
    let mut frames = Vec::with_capacity(cfg.num_frames);
    let mut records = Vec::new();
    for f in 0..cfg.num_frames as u32 {
        let mut frame = bg.clone();
        for (t, &((x, y), _)) in targets.iter().zip(&state) {
            if f < t.start_frame || f > t.end_frame {
                continue;
            }
            let (bw, bh) = t.size;
            let x0 = (x.floor() as usize).min(cfg.width - 1);
            let y0 = (y.floor() as usize).min(cfg.height - 1);
            let x1 = ((x + bw).ceil() as usize).min(cfg.width);
            let y1 = ((y + bh).ceil() as usize).min(cfg.height);
            for py in y0..y1 {
                for px in x0..x1 {
                    let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                    if cx >= x && cx < x + bw && cy >= y && cy < y + bh {
                        frame.set(px, py, t.appearance.shade(cx - x, cy - y, bw, bh));
                    }
                }
            }
            records.push(TrackRecord {
                frame: f,
                id: t.id,
                bbox: BBox::new(x, y, bw, bh),
                conf: 1.0,
            });
        }
        if cfg.pixel_noise > 0.0 {
            frame
                .pixels_mut()
                .iter_mut()
                .for_each(|v| *v += sensor.sample(&mut rng));
        }
        frame.clamp_unit();
        frames.push(frame);

        for (t, s) in targets.iter().zip(state.iter_mut()) {
            let ((x, y), (vx, vy)) = *s;
            let (jx, jy) = if cfg.jitter > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let (nx, bx) = advance(x, vx + jx, cfg.width as f64 - t.size.0);
            let (ny, by) = advance(y, vy + jy, cfg.height as f64 - t.size.1);
            let flip = |v: f64, b: bool| if b { -v } else { v };
            *s = ((nx, ny), (flip(vx, bx), flip(vy, by)));
        }
    }
    Ok(Scene {
        frames,
        gt: TrackSet::from_records(records)?,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = SceneConfig::default();
        let (a, b) = (generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 3).unwrap());
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.gt, b.gt);
        assert_ne!(generate_scene(&cfg, 4).unwrap().frames, a.frames);
    }

    #[test]
    fn counts_and_bounds() {
        let cfg = SceneConfig {
            num_targets: 2,
            num_frames: 10,
            preset: ScenePreset::Random,
            speed: (4.0, 6.0),
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(s.gt.len(), 20);
            for r in s.gt.records() {
                assert!(r.bbox.left >= 0.0 && r.bbox.right() <= cfg.width as f64);
                assert!(r.bbox.top >= 0.0 && r.bbox.bottom() <= cfg.height as f64);
            }
            assert!(s.frames.iter().flat_map(|f| f.pixels()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crossing_targets_overlap_mid_sequence() {
        let cfg = SceneConfig {
            jitter: 0.0,
            num_frames: 21,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, 11).unwrap();
        let box_of = |f: u32, id: u32| s.gt.in_frame(f).iter().find(|r| r.id == id).unwrap().bbox;
        assert!(box_of(10, 0).iou(&box_of(10, 1)) > 0.3);
        assert_eq!(box_of(0, 0).iou(&box_of(0, 1)), 0.0);
        let (c0, c1) = (box_of(0, 0).center().0, box_of(20, 0).center().0);
        let (d0, d1) = (box_of(0, 1).center().0, box_of(20, 1).center().0);
        assert!(c0 < d0 && c1 > d1, "targets swap sides");
    }

    #[test]
    fn oversized_targets_rejected() {
        let cfg = SceneConfig {
            box_width: (10.0, 100.0),
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
        let cfg = SceneConfig {
            num_frames: 1,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }
}
