//! Finite-difference checks of every differentiable operation, shared by the
//! gradient tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsdmot::dcsd::DcsdHead;
use vsdmot::dswr::DswrHead;
use vsdmot::layers::Linear;
use vsdmot::numeric::gradcheck::{numeric_gradient, sample_indices};
use vsdmot::numeric::{Matrix, ParamSet, Tape, Var};
use vsdmot::student::{ResidualMode, StudentConfig, StudentModel};
use vsdmot::teacher::{EmbeddingSource, TeacherEmbedding, TEACHER_DIM};
use vsdmot::tracker::{mot_loss, ModelSpec, MotTargets, TrackerModel, Variant, DESCRIPTOR_DIM};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
/// Entries probed per tensor.
const PROBES: usize = 12;

/// Worst error of one check over all seeds and probed entries.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub seeds: usize,
    pub probes: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// `|a − n| / max(|a|, |n|, 1)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[derive(Default)]
struct Worst {
    value: f64,
    at: String,
    probes: usize,
}

impl Worst {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.probes += 1;
        let e = rel_error(analytic, numeric);
        if e > self.value || self.at.is_empty() {
            self.value = self.value.max(e);
            self.at = at();
        }
    }
}

/// Weighted sum `Σ out ⊙ r` so every output entry matters with a distinct weight.
fn weighted_sum<'p>(tape: &mut Tape<'p>, out: Var, r: &Matrix) -> Var {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).expect("weights match output shape");
    tape.sum(prod)
}

/// `loss` builds a scalar from the input vars on a fresh tape.
fn check_inputs<'m>(worst: &mut Worst, inputs: &[Matrix], loss: &dyn Fn(&mut Tape<'m>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
    let l = loss(&mut tape, &vars);
    let grads = tape.backward(l).expect("backward");
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let idx = sample_indices(x.len(), PROBES);
        let mut f = |probe: &Matrix| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, m)| t.variable(if j == k { probe.clone() } else { m.clone() }))
                .collect();
            let l = loss(&mut t, &vs);
            t.scalar(l)
        };
        let numeric = numeric_gradient(&mut f, x, &idx, STEP);
        for (&i, n) in idx.iter().zip(numeric) {
            worst.record(analytic.as_slice()[i], n, || format!("input {k}[{i}]"));
        }
    }
}

fn check_params<M: ParamSet + Clone>(
    worst: &mut Worst,
    model: &M,
    loss: &dyn for<'p> Fn(&'p M, &mut Tape<'p>) -> Var,
) {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape);
    let grads = tape.backward(l).expect("backward");
    for (k, (name, p)) in model.named_parameters().into_iter().enumerate() {
        if !p.is_trainable() {
            continue;
        }
        let analytic = grads
            .for_param(p.id())
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(p.value().rows(), p.value().cols()));
        let idx = sample_indices(p.value().len(), PROBES);
        let mut f = |probe: &Matrix| {
            let mut m = model.clone();
            m.named_parameters_mut()[k].1.set_value(probe.clone());
            let mut t = Tape::new();
            let l = loss(&m, &mut t);
            t.scalar(l)
        };
        let numeric = numeric_gradient(&mut f, p.value(), &idx, STEP);
        for (&i, n) in idx.iter().zip(numeric) {
            worst.record(analytic.as_slice()[i], n, || format!("{name}[{i}]"));
        }
    }
}

fn finish(name: &'static str, worst: Worst) -> CheckResult {
    CheckResult {
        name,
        seeds: SEEDS.len(),
        probes: worst.probes,
        worst: worst.value,
        worst_at: worst.at,
    }
}

/// Checks an input-only operation. `shapes` gives the input shapes; `op`
/// maps input vars to an output which is reduced by a random weighting.
fn op_check(
    name: &'static str,
    shapes: &[(usize, usize)],
    op: &dyn for<'p> Fn(&mut Tape<'p>, &[Var]) -> Var,
    transform: fn(&mut Matrix, usize),
) -> CheckResult {
    let mut worst = Worst::default();
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Matrix> = shapes
            .iter()
            .enumerate()
            .map(|(k, &(r, c))| {
                let mut m = random_matrix(&mut rng, r, c);
                transform(&mut m, k);
                m
            })
            .collect();
        let mut probe = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|m| probe.constant(m.clone())).collect();
        let out = op(&mut probe, &vs);
        let (r, c) = probe.shape(out);
        let weights = random_matrix(&mut rng, r, c);
        let loss = move |t: &mut Tape<'_>, v: &[Var]| {
            let o = op(t, v);
            weighted_sum(t, o, &weights)
        };
        check_inputs(&mut worst, &inputs, &loss);
    }
    finish(name, worst)
}

fn keep(_: &mut Matrix, _: usize) {}

/// Keeps a 1x1 fusion weight inside (0, 1).
fn unit_first(m: &mut Matrix, k: usize) {
    if k == 0 {
        *m = m.map(|v| 0.5 + 0.4 * v);
    }
}

pub fn numeric_core_checks() -> Vec<CheckResult> {
    vec![
        op_check("matmul", &[(3, 4), (4, 5)], &|t, v| t.matmul(v[0], v[1]).unwrap(), keep),
        op_check("matmul_nt", &[(3, 4), (5, 4)], &|t, v| t.matmul_nt(v[0], v[1]).unwrap(), keep),
        op_check("transpose", &[(3, 4)], &|t, v| t.transpose(v[0]), keep),
        op_check("add", &[(3, 4), (3, 4)], &|t, v| t.add(v[0], v[1]).unwrap(), keep),
        op_check("sub", &[(3, 4), (3, 4)], &|t, v| t.sub(v[0], v[1]).unwrap(), keep),
        op_check("mul", &[(3, 4), (3, 4)], &|t, v| t.mul(v[0], v[1]).unwrap(), keep),
        op_check("add_row", &[(3, 4), (1, 4)], &|t, v| t.add_row(v[0], v[1]).unwrap(), keep),
        op_check("scale", &[(3, 4)], &|t, v| t.scale(v[0], -1.7), keep),
        op_check("shift", &[(3, 4)], &|t, v| t.shift(v[0], 0.3), keep),
        op_check("scale_by", &[(3, 4), (1, 1)], &|t, v| t.scale_by(v[0], v[1]).unwrap(), keep),
        op_check("fuse", &[(1, 1), (3, 4), (3, 4)], &|t, v| t.fuse(v[0], v[1], v[2]).unwrap(), unit_first),
        op_check("softmax_rows", &[(3, 5)], &|t, v| t.softmax_rows(v[0], 2.0).unwrap(), keep),
        op_check("l2_normalize_rows", &[(3, 5)], &|t, v| t.l2_normalize_rows(v[0]), keep),
        op_check("mse", &[(3, 4), (3, 4)], &|t, v| t.mse(v[0], v[1]).unwrap(), keep),
        op_check("column_mean", &[(3, 4)], &|t, v| t.column_mean(v[0]), keep),
        op_check("abs", &[(3, 4)], &|t, v| t.abs(v[0]), keep),
        op_check("mean", &[(3, 4)], &|t, v| t.mean(v[0]), keep),
        op_check("sum", &[(3, 4)], &|t, v| t.sum(v[0]), keep),
        op_check("l1_of_means", &[(3, 4), (2, 4)], &|t, v| t.l1_of_means(v[0], v[1]).unwrap(), keep),
        op_check("interpolate_rows up", &[(3, 4)], &|t, v| t.interpolate_rows(v[0], 7).unwrap(), keep),
        op_check("interpolate_rows down", &[(5, 4)], &|t, v| t.interpolate_rows(v[0], 2).unwrap(), keep),
        op_check("interpolate_rows single", &[(1, 4)], &|t, v| t.interpolate_rows(v[0], 3).unwrap(), keep),
        op_check(
            "layer_norm",
            &[(3, 6), (1, 6), (1, 6)],
            &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
            keep,
        ),
        op_check("gelu", &[(3, 4)], &|t, v| t.gelu(v[0]), keep),
        op_check("sigmoid", &[(3, 4)], &|t, v| t.sigmoid(v[0]), keep),
        op_check("tanh", &[(3, 4)], &|t, v| t.tanh(v[0]), keep),
        op_check("slice_cols", &[(3, 6)], &|t, v| t.slice_cols(v[0], 2, 3).unwrap(), keep),
        op_check("concat_cols", &[(3, 2), (3, 4)], &|t, v| t.concat_cols(&[v[0], v[1]]).unwrap(), keep),
        op_check("select_rows", &[(4, 3)], &|t, v| t.select_rows(v[0], &[2, 0, 2]).unwrap(), keep),
        op_check("concat_rows", &[(2, 3), (3, 3)], &|t, v| t.concat_rows(&[v[0], v[1]]).unwrap(), keep),
        op_check(
            "cross_entropy",
            &[(3, 5)],
            &|t, v| t.cross_entropy(v[0], &[4, 0, 2]).unwrap(),
            keep,
        ),
    ]
}

fn small_student(residual: ResidualMode, output_dim: usize) -> StudentConfig {
    StudentConfig {
        input_dim: 8,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 16,
        output_dim,
        residual,
        ..StudentConfig::default()
    }
}

fn student_check(name: &'static str, cfg: StudentConfig) -> CheckResult {
    let mut worst = Worst::default();
    for seed in SEEDS {
        let model = StudentModel::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
        let x = random_matrix(&mut rng, 5, cfg.input_dim);
        let r = random_matrix(&mut rng, 5, cfg.output_dim);
        check_inputs(&mut worst, std::slice::from_ref(&x), &|t, v| {
            let out = model.forward(t, v[0]).unwrap();
            weighted_sum(t, out, &r)
        });
        check_params(&mut worst, &model, &|m, t| {
            let xv = t.constant(x.clone());
            let out = m.forward(t, xv).unwrap();
            weighted_sum(t, out, &r)
        });
    }
    finish(name, worst)
}

pub fn student_checks() -> Vec<CheckResult> {
    vec![
        student_check("student_forward", small_student(ResidualMode::Auto, 8)),
        student_check("student_forward projected residual", small_student(ResidualMode::Auto, 6)),
    ]
}

fn teacher(rng: &mut ChaCha8Rng) -> TeacherEmbedding {
    TeacherEmbedding::new(
        (0..TEACHER_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        EmbeddingSource::Pseudo,
    )
    .unwrap()
}

pub fn dcsd_check() -> CheckResult {
    let mut worst = Worst::default();
    for seed in SEEDS {
        let mut head = DcsdHead::new(6, 2.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A);
        let logits = random_matrix(&mut rng, 1, 2);
        head.named_parameters_mut()
            .into_iter()
            .find(|(n, _)| n.contains("logits"))
            .expect("loss logits")
            .1
            .set_value(logits);
        let t = teacher(&mut rng);
        let s = random_matrix(&mut rng, 4, 6);
        check_inputs(&mut worst, std::slice::from_ref(&s), &|tape, v| {
            head.forward(tape, v[0], &t).unwrap().l_distill
        });
        check_params(&mut worst, &head, &|m, tape| {
            let sv = tape.constant(s.clone());
            m.forward(tape, sv, &t).unwrap().l_distill
        });
    }
    finish("dcsd_loss", worst)
}

pub fn semantic_weight_check() -> CheckResult {
    let mut worst = Worst::default();
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = DswrHead::new(rng.gen_range(-6.0..0.0), rng.gen_range(-1.0..3.0));
        let q = rng.gen_range(0.0..1.0);
        check_params(&mut worst, &head, &|m, tape| m.forward(tape, q).unwrap());
    }
    finish("semantic_weight", worst)
}

pub fn fuse_check() -> CheckResult {
    let mut r = op_check(
        "fuse",
        &[(1, 1), (4, 6), (4, 6)],
        &|t, v| {
            let w = t.sigmoid(v[0]);
            t.fuse(w, v[1], v[2]).unwrap()
        },
        keep,
    );
    r.name = "fuse (sigmoid weight)";
    r
}

fn mot_targets() -> MotTargets {
    MotTargets {
        pairs: vec![(0, 2), (1, 0), (2, 3)],
        boxes: vec![(0, [0.1, -0.05, 0.2, 0.0]), (3, [-0.1, 0.05, -0.15, 0.1])],
    }
}

pub fn mot_loss_check() -> CheckResult {
    let mut worst = Worst::default();
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = Linear::zeros(6, 4);
        for (_, p) in head.named_parameters_mut() {
            let (r, c) = p.value().shape();
            p.set_value(random_matrix(&mut rng, r, c));
        }
        let tracks = random_matrix(&mut rng, 3, 6);
        let props = random_matrix(&mut rng, 4, 6);
        check_inputs(&mut worst, &[tracks.clone(), props.clone()], &|tape, v| {
            mot_loss(tape, &head, v[0], v[1], &mot_targets(), 0.1, 1.0).unwrap().unwrap()
        });
        check_params(&mut worst, &head, &|m, tape| {
            let (a, b) = (tape.constant(tracks.clone()), tape.constant(props.clone()));
            mot_loss(tape, m, a, b, &mot_targets(), 0.1, 1.0).unwrap().unwrap()
        });
    }
    finish("l_mot", worst)
}

/// The whole training objective of the full model, with respect to every
/// trainable parameter.
pub fn objective_check() -> CheckResult {
    let mut worst = Worst::default();
    for seed in SEEDS {
        let spec = ModelSpec {
            variant: Variant::Full,
            student: small_student(ResidualMode::Auto, 8),
            ..ModelSpec::default()
        };
        let mut model = TrackerModel::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        for (_, p) in model.named_parameters_mut() {
            if p.value().as_slice().iter().all(|&v| v == 0.0) {
                let (r, c) = p.value().shape();
                p.set_value(random_matrix(&mut rng, r, c).map(|v| 0.1 * v));
            }
        }
        let desc = random_matrix(&mut rng, 7, DESCRIPTOR_DIM).map(|v| 0.5 * v);
        let t = teacher(&mut rng);
        let q = rng.gen_range(0.0..1.0);
        check_params(&mut worst, &model, &|m, tape| {
            let d = tape.constant(desc.clone());
            let fwd = m.forward(tape, d, q).unwrap();
            let tracks = tape.select_rows(fwd.fused, &[0, 1, 2]).unwrap();
            let props = tape.select_rows(fwd.fused, &[3, 4, 5, 6]).unwrap();
            let l_mot = mot_loss(tape, &m.box_head, tracks, props, &mot_targets(), 0.1, 1.0)
                .unwrap()
                .unwrap();
            let dcsd = m.dcsd.as_ref().unwrap();
            let l_distill = dcsd.forward(tape, fwd.student_out.unwrap(), &t).unwrap().l_distill;
            let a = tape.scale(l_distill, 0.4);
            let b = tape.scale(l_mot, 0.6);
            tape.add(a, b).unwrap()
        });
    }
    finish("full objective", worst)
}

pub fn all_checks() -> Vec<CheckResult> {
    let mut out = numeric_core_checks();
    out.extend(student_checks());
    out.push(dcsd_check());
    out.push(semantic_weight_check());
    out.push(fuse_check());
    out.push(mot_loss_check());
    out.push(objective_check());
    out
}
