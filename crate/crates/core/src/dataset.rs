//! In-memory sequences and their on-disk layout:
//!
//! ```text
//! <root>/<name>/seqinfo.json
//! <root>/<name>/img1/000001.pgm ...
//! <root>/<name>/gt/gt.txt
//! <root>/<name>/det/det.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::{apply_chain_keyed, sequence_key, DegradationChain, FrameKey};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::frame::GrayFrame;
use crate::trackset::{BBox, TrackSet};

pub const INFO_FILE: &str = "seqinfo.json";
pub const IMAGE_DIR: &str = "img1";

/// One video with ground truth and per-frame detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub name: String,
    pub frames: Vec<GrayFrame>,
    pub gt: TrackSet,
    pub detections: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl SequenceData {
    pub fn info(&self) -> SequenceInfo {
        let (width, height) = self
            .frames
            .first()
            .map_or((0, 0), |f| (f.width(), f.height()));
        SequenceInfo {
            name: self.name.clone(),
            width,
            height,
            frames: self.frames.len(),
        }
    }

    /// Every frame passed through `chain`; noise is keyed by name and frame.
    pub fn degraded(&self, chain: &DegradationChain) -> Result<SequenceData> {
        let key = sequence_key(&self.name);
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(f, frame)| {
                apply_chain_keyed(
                    chain,
                    frame,
                    FrameKey {
                        sequence: key,
                        frame: f as u64,
                    },
                )
            })
            .collect::<Result<_>>()?;
        Ok(SequenceData {
            frames,
            ..self.clone()
        })
    }

    /// Writes the sequence to `root/<name>` and returns that directory.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(&self.name);
        for sub in [IMAGE_DIR, "gt", "det"] {
            create_dir(&dir.join(sub))?;
        }
        let info_path = dir.join(INFO_FILE);
        std::fs::write(&info_path, serde_json::to_string_pretty(&self.info())? + "\n")
            .map_err(|e| Error::io(&info_path, e))?;
        for (f, frame) in self.frames.iter().enumerate() {
            frame.write_pgm(&dir.join(IMAGE_DIR).join(frame_file_name(f)))?;
        }
        self.gt.write_mot(&dir.join("gt").join("gt.txt"))?;
        let det_path = dir.join("det").join("det.txt");
        std::fs::write(&det_path, detections_to_mot(&self.detections))
            .map_err(|e| Error::io(&det_path, e))?;
        Ok(dir)
    }

    pub fn read(dir: &Path) -> Result<SequenceData> {
        let info_path = dir.join(INFO_FILE);
        let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: SequenceInfo = serde_json::from_str(&text)?;
        let frames = read_frames(&dir.join(IMAGE_DIR))?;
        if frames.len() != info.frames {
            return Err(Error::Shape(format!(
                "{}: seqinfo lists {} frames, found {}",
                dir.display(),
                info.frames,
                frames.len()
            )));
        }
        if let Some(f) = frames
            .iter()
            .find(|f| (f.width(), f.height()) != (info.width, info.height))
        {
            return Err(Error::Shape(format!(
                "{}: frame is {}x{}, seqinfo says {}x{}",
                dir.display(),
                f.width(),
                f.height(),
                info.width,
                info.height
            )));
        }
        let gt = TrackSet::read_mot(&dir.join("gt").join("gt.txt"))?;
        let det_path = dir.join("det").join("det.txt");
        let det_text = std::fs::read_to_string(&det_path).map_err(|e| Error::io(&det_path, e))?;
        let detections = parse_detections(&det_text, &det_path, info.frames)?;
        Ok(SequenceData {
            name: info.name,
            frames,
            gt,
            detections,
        })
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{:06}.pgm", index + 1)
}

/// Loads every `.pgm` in `dir` in file-name order.
pub fn read_frames(dir: &Path) -> Result<Vec<GrayFrame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| GrayFrame::read_pgm(p)).collect()
}

pub fn write_dataset(root: &Path, sequences: &[SequenceData]) -> Result<()> {
    create_dir(root)?;
    for s in sequences {
        s.write(root)?;
    }
    Ok(())
}

/// Sequence directories under `root` (those holding a `seqinfo.json`), sorted.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(INFO_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<SequenceData>> {
    let dirs = sequence_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no sequences found under {}", root.display())));
    }
    dirs.iter().map(|d| SequenceData::read(d)).collect()
}

/// MOTChallenge detection lines: `frame,-1,left,top,width,height,conf,-1,-1,-1`.
pub fn detections_to_mot(detections: &[Vec<Detection>]) -> String {
    let mut s = String::new();
    for d in detections.iter().flatten() {
        let b = d.bbox;
        writeln!(
            s,
            "{},-1,{:.2},{:.2},{:.2},{:.2},{:.4},-1,-1,-1",
            d.frame + 1,
            b.left,
            b.top,
            b.width,
            b.height,
            d.confidence
        )
        .expect("writing to a String cannot fail");
    }
    s
}

/// Groups detection lines by frame; frames are 1-based on disk.
pub fn parse_detections(text: &str, path: &Path, num_frames: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); num_frames];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(err(format!("expected at least 7 fields, got {}", fields.len())));
        }
        let num = |k: usize| {
            fields[k]
                .parse::<f64>()
                .map_err(|_| err(format!("field {} is not a number: {:?}", k + 1, fields[k])))
        };
        let frame = num(0)?;
        if frame < 1.0 || frame.fract() != 0.0 || frame > num_frames as f64 {
            return Err(err(format!("frame {frame} outside 1..={num_frames}")));
        }
        let bbox = BBox::new(num(2)?, num(3)?, num(4)?, num(5)?);
        if !(bbox.width >= 0.0 && bbox.height >= 0.0) {
            return Err(err("box width and height must be non-negative".into()));
        }
        let confidence = num(6)?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(format!("confidence {confidence} outside [0, 1]")));
        }
        let f = frame as usize - 1;
        out[f].push(Detection {
            frame: f as u32,
            bbox,
            confidence,
        });
    }
    Ok(out)
}
