//! The student encoder: input projection, a stack of post-norm transformer
//! encoder layers, and an output projection with a residual path from the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numeric::{join, Matrix, ParamSet, Parameter, Tape, Var};

/// Number of encoder layers in the student.
pub const STUDENT_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Identity when input and output widths agree, projection otherwise.
    Auto,
    Identity,
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub output_dim: usize,
    pub residual: ResidualMode,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            input_dim: 256,
            hidden_dim: 256,
            num_layers: STUDENT_LAYERS,
            num_heads: 4,
            ff_dim: 1024,
            output_dim: 256,
            residual: ResidualMode::Auto,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers != STUDENT_LAYERS {
            return Err(Error::Config(format!(
                "student must have {STUDENT_LAYERS} encoder layers, got {}",
                self.num_layers
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if [self.input_dim, self.hidden_dim, self.ff_dim, self.output_dim].contains(&0) {
            return Err(Error::Config("student dimensions must be positive".into()));
        }
        if self.residual == ResidualMode::Identity && self.input_dim != self.output_dim {
            return Err(Error::Config(
                "identity residual needs input_dim == output_dim".into(),
            ));
        }
        Ok(())
    }

    fn projected_residual(&self) -> bool {
        match self.residual {
            ResidualMode::Projected => true,
            ResidualMode::Identity => false,
            ResidualMode::Auto => self.input_dim != self.output_dim,
        }
    }

    /// Trainable scalar count, by layer-size arithmetic.
    pub fn parameter_count(&self) -> usize {
        let (i, h, f, o) = (self.input_dim, self.hidden_dim, self.ff_dim, self.output_dim);
        let attention = 4 * (h * h + h);
        let feed_forward = (h * f + f) + (f * h + h);
        let norms = 2 * 2 * h;
        let residual = if self.projected_residual() { i * o + o } else { 0 };
        (i * h + h) + self.num_layers * (attention + feed_forward + norms) + (h * o + o) + residual
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(cfg: &StudentConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_dim;
        EncoderLayer {
            query: Linear::new(h, h, rng),
            key: Linear::new(h, h, rng),
            value: Linear::new(h, h, rng),
            attn_out: Linear::new(h, h, rng),
            norm1: LayerNorm::new(h),
            ff1: Linear::new(h, cfg.ff_dim, rng),
            ff2: Linear::new(cfg.ff_dim, h, rng),
            norm2: LayerNorm::new(h),
        }
    }

    fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, heads: usize) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let width = tape.shape(q).1 / heads;
        let scale = 1.0 / (width as f64).sqrt();
        let mut per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * width, width)?;
            let kh = tape.slice_cols(k, hd * width, width)?;
            let vh = tape.slice_cols(v, hd * width, width)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, 1.0)?;
            per_head.push(tape.matmul(attn, vh)?);
        }
        let joined = tape.concat_cols(&per_head)?;
        let attended = self.attn_out.forward(tape, joined)?;
        let x = tape.add(x, attended)?;
        let x = self.norm1.forward(tape, x)?;
        let ff = self.ff1.forward(tape, x)?;
        let ff = tape.gelu(ff);
        let ff = self.ff2.forward(tape, ff)?;
        let x = tape.add(x, ff)?;
        self.norm2.forward(tape, x)
    }
}

impl ParamSet for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.query.visit(&join(prefix, "query"), out);
        self.key.visit(&join(prefix, "key"), out);
        self.value.visit(&join(prefix, "value"), out);
        self.attn_out.visit(&join(prefix, "attn_out"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.ff1.visit(&join(prefix, "ff1"), out);
        self.ff2.visit(&join(prefix, "ff2"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.query.visit_mut(&join(prefix, "query"), out);
        self.key.visit_mut(&join(prefix, "key"), out);
        self.value.visit_mut(&join(prefix, "value"), out);
        self.attn_out.visit_mut(&join(prefix, "attn_out"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.ff1.visit_mut(&join(prefix, "ff1"), out);
        self.ff2.visit_mut(&join(prefix, "ff2"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
    }
}

/// `Linear(Encoder(Linear(X))) + Residual(X)`, with no positional encoding so
/// the map is equivariant to row permutations.
#[derive(Debug, Clone)]
pub struct StudentModel {
    config: StudentConfig,
    pub input_projection: Linear,
    pub layers: Vec<EncoderLayer>,
    pub output_projection: Linear,
    pub residual_projection: Option<Linear>,
}

impl StudentModel {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_projection = Linear::new(config.input_dim, config.hidden_dim, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::new(&config, &mut rng))
            .collect();
        let output_projection = Linear::new(config.hidden_dim, config.output_dim, &mut rng);
        let residual_projection = config
            .projected_residual()
            .then(|| Linear::new(config.input_dim, config.output_dim, &mut rng));
        Ok(StudentModel {
            config,
            input_projection,
            layers,
            output_projection,
            residual_projection,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let (n, cols) = tape.shape(x);
        if cols != self.config.input_dim || n == 0 {
            return Err(Error::Dimension {
                op: "student_forward",
                lhs: (n, cols),
                rhs: (n.max(1), self.config.input_dim),
            });
        }
        let mut h = self.input_projection.forward(tape, x)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, self.config.num_heads)?;
        }
        let out = self.output_projection.forward(tape, h)?;
        let residual = match &self.residual_projection {
            Some(proj) => proj.forward(tape, x)?,
            None => x,
        };
        tape.add(out, residual)
    }

    /// Inference without keeping a tape around.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl ParamSet for StudentModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.input_projection.visit(&join(prefix, "input_projection"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), out);
        }
        self.output_projection.visit(&join(prefix, "output_projection"), out);
        if let Some(p) = &self.residual_projection {
            p.visit(&join(prefix, "residual_projection"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.input_projection.visit_mut(&join(prefix, "input_projection"), out);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), out);
        }
        self.output_projection.visit_mut(&join(prefix, "output_projection"), out);
        if let Some(p) = &mut self.residual_projection {
            p.visit_mut(&join(prefix, "residual_projection"), out);
        }
    }
}
