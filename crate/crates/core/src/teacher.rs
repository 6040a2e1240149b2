//! Frozen teacher embeddings: loaded from a JSON-lines file, or produced by a
//! deterministic pseudo-teacher that projects a downsampled frame.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{resize_area, GrayFrame};
use crate::numeric::{matmul, Matrix};

pub const TEACHER_DIM: usize = 1024;
const THUMB: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    File,
    Pseudo,
}

/// A `1 x 1024` global frame feature. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbedding {
    vector: Matrix,
    source: EmbeddingSource,
}

impl TeacherEmbedding {
    pub fn new(values: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if values.len() != TEACHER_DIM {
            return Err(Error::Shape(format!(
                "teacher embedding needs {TEACHER_DIM} values, got {}",
                values.len()
            )));
        }
        Ok(TeacherEmbedding {
            vector: Matrix::row_vector(values),
            source,
        })
    }

    pub fn vector(&self) -> &Matrix {
        &self.vector
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    frame: u32,
    values: Vec<f64>,
}

/// Reads one embedding per line: `{"frame": <index>, "values": [1024 reals]}`.
pub fn load_embeddings(path: &Path) -> Result<BTreeMap<u32, TeacherEmbedding>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.values.len() != TEACHER_DIM {
            return Err(Error::EmbeddingDim {
                frame: rec.frame,
                got: rec.values.len(),
                expected: TEACHER_DIM,
            });
        }
        if rec.values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(format!("frame {} has non-finite values", rec.frame)));
        }
        if out.contains_key(&rec.frame) {
            return Err(parse_err(format!("duplicate frame {}", rec.frame)));
        }
        out.insert(rec.frame, TeacherEmbedding::new(rec.values, EmbeddingSource::File)?);
    }
    Ok(out)
}

pub fn save_embeddings(path: &Path, embeddings: &BTreeMap<u32, TeacherEmbedding>) -> Result<()> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (&frame, emb) in embeddings {
        let rec = Record {
            frame,
            values: emb.vector.as_slice().to_vec(),
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Stand-in for a frozen image encoder: 16x16 area thumbnail, flattened,
/// times a fixed seed-derived `256 x 1024` Gaussian matrix, then `tanh`.
#[derive(Debug, Clone)]
pub struct PseudoTeacher {
    seed: u64,
    projection: Matrix,
}

impl PseudoTeacher {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / THUMB as f64).expect("valid normal");
        let data = (0..THUMB * THUMB * TEACHER_DIM)
            .map(|_| normal.sample(&mut rng))
            .collect();
        PseudoTeacher {
            seed,
            projection: Matrix::new(THUMB * THUMB, TEACHER_DIM, data).expect("shape"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, frame: &GrayFrame) -> TeacherEmbedding {
        let thumb = resize_area(frame, THUMB, THUMB);
        let x = Matrix::row_vector(thumb.pixels().to_vec());
        let y = matmul(&x, &self.projection).expect("thumbnail width matches projection");
        TeacherEmbedding {
            vector: y.map(f64::tanh),
            source: EmbeddingSource::Pseudo,
        }
    }
}

pub fn pseudo_teacher(frame: &GrayFrame, seed: u64) -> TeacherEmbedding {
    PseudoTeacher::new(seed).embed(frame)
}

/// Where teacher embeddings come from; parsed from `file:<path>` or `pseudo:<seed>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TeacherSpec {
    File(PathBuf),
    Pseudo(u64),
}

impl FromStr for TeacherSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(TeacherSpec::File(PathBuf::from(p)));
        }
        if let Some(seed) = s.strip_prefix("pseudo:") {
            return seed
                .parse()
                .map(TeacherSpec::Pseudo)
                .map_err(|_| Error::Config(format!("bad pseudo-teacher seed {seed:?}")));
        }
        Err(Error::Config(format!(
            "teacher must be file:<path> or pseudo:<seed>, got {s:?}"
        )))
    }
}

impl TryFrom<String> for TeacherSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TeacherSpec> for String {
    fn from(t: TeacherSpec) -> String {
        t.to_string()
    }
}

impl fmt::Display for TeacherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherSpec::File(p) => write!(f, "file:{}", p.display()),
            TeacherSpec::Pseudo(s) => write!(f, "pseudo:{s}"),
        }
    }
}

/// Resolved teacher that can answer per-frame queries.
#[derive(Debug, Clone)]
pub enum Teacher {
    Table(BTreeMap<u32, TeacherEmbedding>),
    Pseudo(PseudoTeacher),
}

impl Teacher {
    pub fn open(spec: &TeacherSpec) -> Result<Self> {
        Ok(match spec {
            TeacherSpec::File(p) => Teacher::Table(load_embeddings(p)?),
            TeacherSpec::Pseudo(seed) => Teacher::Pseudo(PseudoTeacher::new(*seed)),
        })
    }

    pub fn embedding(&self, frame_index: u32, frame: &GrayFrame) -> Result<TeacherEmbedding> {
        match self {
            Teacher::Pseudo(p) => Ok(p.embed(frame)),
            Teacher::Table(t) => t.get(&frame_index).cloned().ok_or_else(|| {
                Error::Config(format!("no teacher embedding for frame {frame_index}"))
            }),
        }
    }
}
