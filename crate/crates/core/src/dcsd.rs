//! Dual-constraint semantic distillation.
//!
//! The frozen `1 x 1024` teacher vector is projected to the student width,
//! stretched to the student sequence length, and compared two ways: a local
//! MSE against attention-aggregated teacher rows and a global L1 between the
//! sequence means. The two terms are mixed by softmax-normalised learnable
//! weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numeric::{join, Matrix, ParamSet, Parameter, Tape, Var};
use crate::teacher::{TeacherEmbedding, TEACHER_DIM};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct DcsdHead {
    pub teacher_projection: Linear,
    /// Pre-softmax logits for `(w1, w2)`, shape `1 x 2`.
    pub loss_logits: Parameter,
    temperature: f64,
}

/// Scalar values of one distillation evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcsdBreakdown {
    pub l_local: f64,
    pub l_global: f64,
    pub w1: f64,
    pub w2: f64,
    pub l_distill: f64,
}

/// Tape handles for the intermediate tensors of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DcsdVars {
    pub t_proj: Var,
    pub t_align: Var,
    pub attention: Var,
    pub t_weighted: Var,
    pub l_local: Var,
    pub l_global: Var,
    pub weights: Var,
    pub l_distill: Var,
}

impl DcsdVars {
    pub fn breakdown(&self, tape: &Tape<'_>) -> DcsdBreakdown {
        let w = tape.value(self.weights);
        DcsdBreakdown {
            l_local: tape.scalar(self.l_local),
            l_global: tape.scalar(self.l_global),
            w1: w.get(0, 0),
            w2: w.get(0, 1),
            l_distill: tape.scalar(self.l_distill),
        }
    }
}

impl DcsdHead {
    /// Projection `1024 -> student_dim` with bias; logits start at `(0, 0)`.
    pub fn new(student_dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "distillation temperature must be positive, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DcsdHead {
            teacher_projection: Linear::new(TEACHER_DIM, student_dim, &mut rng),
            loss_logits: Parameter::new(Matrix::zeros(1, 2)),
            temperature,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Freezes or unfreezes the learnable `(w1, w2)` logits.
    pub fn set_weights_trainable(&mut self, trainable: bool) {
        self.loss_logits.set_trainable(trainable);
    }

    /// `(w1, w2) = softmax(loss_logits)`.
    pub fn loss_weights(&self) -> (f64, f64) {
        let l = self.loss_logits.value().as_slice();
        let m = l[0].max(l[1]);
        let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
        (a / (a + b), b / (a + b))
    }

    /// Records the full loss on `tape`. `s` is the `n x d` student output.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        s: Var,
        teacher: &TeacherEmbedding,
    ) -> Result<DcsdVars> {
        let (n, d) = tape.shape(s);
        let out_dim = self.teacher_projection.out_dim();
        if n == 0 || d != out_dim {
            return Err(Error::Dimension {
                op: "dcsd student features",
                lhs: (n, d),
                rhs: (n.max(1), out_dim),
            });
        }
        let t = tape.constant(teacher.vector().clone());
        let t_proj = self.teacher_projection.forward(tape, t)?;
        let t_align = tape.interpolate_rows(t_proj, n)?;
        let s_norm = tape.l2_normalize_rows(s);
        let t_norm = tape.l2_normalize_rows(t_align);
        let sim = tape.matmul_nt(s_norm, t_norm)?;
        let attention = tape.softmax_rows(sim, self.temperature)?;
        let t_weighted = tape.matmul(attention, t_align)?;
        let l_local = tape.mse(s, t_weighted)?;
        let l_global = tape.l1_of_means(s, t_align)?;
        let logits = tape.param(&self.loss_logits);
        let weights = tape.softmax_rows(logits, 1.0)?;
        let w1 = tape.slice_cols(weights, 0, 1)?;
        let w2 = tape.slice_cols(weights, 1, 1)?;
        let local = tape.mul(w1, l_local)?;
        let global = tape.mul(w2, l_global)?;
        let l_distill = tape.add(local, global)?;
        Ok(DcsdVars {
            t_proj,
            t_align,
            attention,
            t_weighted,
            l_local,
            l_global,
            weights,
            l_distill,
        })
    }

    /// Evaluates the loss for a fixed student output.
    pub fn evaluate(&self, s: &Matrix, teacher: &TeacherEmbedding) -> Result<DcsdBreakdown> {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let vars = self.forward(&mut tape, sv, teacher)?;
        Ok(vars.breakdown(&tape))
    }
}

impl ParamSet for DcsdHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.teacher_projection
            .visit(&join(prefix, "teacher_projection"), out);
        out.push((join(prefix, "loss_logits"), &self.loss_logits));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.teacher_projection
            .visit_mut(&join(prefix, "teacher_projection"), out);
        out.push((join(prefix, "loss_logits"), &mut self.loss_logits));
    }
}
