//! Per-frame boxes with identities, and MOTChallenge text I/O.
//!
//! Frames and ids are 0-based in memory and 1-based on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(left, top, width, height)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub const fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        BBox {
            left,
            top,
            width,
            height,
        }
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    /// Intersection over union; 0 when either box has zero area.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (a, b) = (self.area(), other.area());
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        let w = (self.right().min(other.right()) - self.left.max(other.left)).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.top.max(other.top)).max(0.0);
        let inter = w * h;
        inter / (a + b - inter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u32,
    pub id: u32,
    pub bbox: BBox,
    pub conf: f64,
}

/// Records sorted by `(frame, id)`; each pair occurs at most once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    records: Vec<TrackRecord>,
}

impl TrackSet {
    pub fn new() -> Self {
        TrackSet::default()
    }

    pub fn from_records(mut records: Vec<TrackRecord>) -> Result<Self> {
        records.sort_by_key(|r| (r.frame, r.id));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].frame, w[0].id) == (w[1].frame, w[1].id))
        {
            return Err(Error::Shape(format!(
                "id {} appears twice in frame {}",
                w[0].id + 1,
                w[0].frame + 1
            )));
        }
        Ok(TrackSet { records })
    }

    pub fn push(&mut self, record: TrackRecord) -> Result<()> {
        let key = (record.frame, record.id);
        match self.records.binary_search_by_key(&key, |r| (r.frame, r.id)) {
            Ok(_) => Err(Error::Shape(format!(
                "id {} appears twice in frame {}",
                record.id + 1,
                record.frame + 1
            ))),
            Err(pos) => {
                self.records.insert(pos, record);
                Ok(())
            }
        }
    }

    pub fn records(&self) -> &[TrackRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// One past the last frame index, or 0 when empty.
    pub fn frame_count(&self) -> u32 {
        self.records.last().map_or(0, |r| r.frame + 1)
    }

    pub fn in_frame(&self, frame: u32) -> &[TrackRecord] {
        let lo = self.records.partition_point(|r| r.frame < frame);
        let hi = self.records.partition_point(|r| r.frame <= frame);
        &self.records[lo..hi]
    }

    pub fn by_frame(&self) -> BTreeMap<u32, &[TrackRecord]> {
        let mut out = BTreeMap::new();
        let mut start = 0;
        while start < self.records.len() {
            let f = self.records[start].frame;
            let end = start + self.records[start..].partition_point(|r| r.frame == f);
            out.insert(f, &self.records[start..end]);
            start = end;
        }
        out
    }

    pub fn map_ids(&self, f: impl Fn(u32) -> u32) -> Result<TrackSet> {
        TrackSet::from_records(
            self.records
                .iter()
                .map(|r| TrackRecord { id: f(r.id), ..*r })
                .collect(),
        )
    }

    pub fn to_mot_string(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let b = r.bbox;
            writeln!(
                s,
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.4},-1,-1,-1",
                r.frame + 1,
                r.id + 1,
                b.left,
                b.top,
                b.width,
                b.height,
                r.conf
            )
            .expect("writing to a String cannot fail");
        }
        s
    }

    pub fn write_mot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_mot_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_mot(text: &str, path: &Path) -> Result<TrackSet> {
        let mut records = Vec::new();
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
            if fields.len() < 6 {
                return Err(err(format!("expected at least 6 fields, got {}", fields.len())));
            }
            let num = |k: usize| {
                fields[k]
                    .parse::<f64>()
                    .map_err(|_| err(format!("field {} is not a number: {:?}", k + 1, fields[k])))
            };
            let index = |k: usize| -> Result<u32> {
                let v = num(k)?;
                if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(err(format!("field {} must be a positive integer", k + 1)));
                }
                Ok(v as u32 - 1)
            };
            let bbox = BBox::new(num(2)?, num(3)?, num(4)?, num(5)?);
            if !(bbox.width >= 0.0 && bbox.height >= 0.0) {
                return Err(err("box width and height must be non-negative".into()));
            }
            records.push(TrackRecord {
                frame: index(0)?,
                id: index(1)?,
                bbox,
                conf: if fields.len() > 6 { num(6)? } else { 1.0 },
            });
        }
        TrackSet::from_records(records).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn read_mot(path: &Path) -> Result<TrackSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrackSet::parse_mot(&text, path)
    }
}
