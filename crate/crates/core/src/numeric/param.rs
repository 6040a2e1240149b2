use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::Matrix;
use super::tape::Gradients;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter within a process; used to route tape gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable (or frozen) weight with its accumulated gradient.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    value: Matrix,
    grad: Matrix,
    trainable: bool,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Parameter {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Parameter {
            id: ParamId::fresh(),
            value,
            grad: Matrix::zeros(r, c),
            trainable: true,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        Parameter {
            trainable: false,
            ..Parameter::new(value)
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Matrix) {
        assert_eq!(value.shape(), self.value.shape(), "parameter shape is fixed");
        self.value = value;
    }

    pub fn value_mut(&mut self) -> &mut Matrix {
        &mut self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad.fill(0.0);
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Adds this parameter's gradient from `grads`, if it has one.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if !self.trainable {
            return;
        }
        if let Some(g) = grads.for_param(self.id) {
            self.grad.axpy(1.0, g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Plain gradient-descent update.
    pub fn sgd_step(&mut self, lr: f64) {
        if self.trainable {
            self.value.axpy(-lr, &self.grad);
        }
    }
}

/// Anything that owns parameters, addressable by stable dotted names.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>);

    fn named_parameters(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    /// Number of trainable scalars.
    fn parameter_count(&self) -> usize {
        self.named_parameters()
            .iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p.numel())
            .sum()
    }

    fn accumulate(&mut self, grads: &Gradients) {
        for (_, p) in self.named_parameters_mut() {
            p.accumulate(grads);
        }
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_parameters_mut() {
            p.zero_grad();
        }
    }

    fn sgd_step(&mut self, lr: f64) {
        for (_, p) in self.named_parameters_mut() {
            p.sgd_step(lr);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for Parameter {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        out.push((prefix.to_string(), self));
    }
}
