//! Grayscale frames with values in `[0, 1]`, PGM I/O and resampling.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels cannot fill a {width}x{height} frame",
                data.len()
            )));
        }
        Ok(GrayFrame { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        GrayFrame {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayFrame { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// 8-bit quantisation, `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        GrayFrame::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Round-trips the frame through 8-bit storage.
    pub fn quantized(&self) -> GrayFrame {
        GrayFrame::from_bytes(self.width, self.height, &self.to_bytes()).expect("same size")
    }

    /// Writes a binary (P5) 8-bit PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder = PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        encoder.write_image(
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            ExtendedColorType::L8,
        )?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .into_luma8();
        GrayFrame::from_bytes(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Mirror index into `0..len` (edge pixel not repeated).
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Area-weighted resampling weights: for each destination index, the source
/// indices it covers and their coverage fractions (summing to 1).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((j, overlap / scale));
                }
                j += 1;
            }
            w
        })
        .collect()
}

/// Box-filter resize where each output pixel averages the source area it covers.
pub fn resize_area(frame: &GrayFrame, width: usize, height: usize) -> GrayFrame {
    let wx = area_weights(frame.width, width);
    let wy = area_weights(frame.height, height);
    let mut tmp = vec![0.0; width * frame.height];
    for y in 0..frame.height {
        for (x, ws) in wx.iter().enumerate() {
            tmp[y * width + x] = ws.iter().map(|&(j, w)| w * frame.get(j, y)).sum();
        }
    }
    GrayFrame::from_fn(width, height, |x, y| {
        wy[y].iter().map(|&(j, w)| w * tmp[j * width + x]).sum()
    })
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    s.clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize using pixel-centre alignment (exact identity at equal size).
pub fn resize_bilinear(frame: &GrayFrame, width: usize, height: usize) -> GrayFrame {
    let xs: Vec<(usize, usize, f64)> = (0..width)
        .map(|x| {
            let s = source_coord(x, frame.width, width);
            let x0 = s.floor() as usize;
            (x0, (x0 + 1).min(frame.width - 1), s - x0 as f64)
        })
        .collect();
    GrayFrame::from_fn(width, height, |x, y| {
        let sy = source_coord(y, frame.height, height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(frame.height - 1);
        let ty = sy - y0 as f64;
        let (x0, x1, tx) = xs[x];
        let top = frame.get(x0, y0) * (1.0 - tx) + frame.get(x1, y0) * tx;
        let bottom = frame.get(x0, y1) * (1.0 - tx) + frame.get(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

pub fn resize_nearest(frame: &GrayFrame, width: usize, height: usize) -> GrayFrame {
    let pick = |d: usize, src: usize, dst: usize| {
        (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
    };
    GrayFrame::from_fn(width, height, |x, y| {
        frame.get(pick(x, frame.width, width), pick(y, frame.height, height))
    })
}

/// Valid-region 3x3 correlation; output is `(w-2) x (h-2)` values, row-major.
pub(crate) fn correlate3_valid(frame: &GrayFrame, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let (w, h) = (frame.width, frame.height);
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for (dy, krow) in k.iter().enumerate() {
                for (dx, kv) in krow.iter().enumerate() {
                    acc += kv * frame.get(x + dx - 1, y + dy - 1);
                }
            }
            out.push(acc);
        }
    }
    out
}
