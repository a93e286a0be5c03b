//! Parameter registry shared between tapes, the optimizer, and
//! checkpoints.

use std::sync::Arc;

use ndarray::ArrayD;

use crate::error::{data_err, Result};

/// Handle to one parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PRef(pub(crate) usize);

pub(crate) struct Entry {
    pub name: String,
    pub value: Arc<ArrayD<f64>>,
    pub grad: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Flat, name-addressable store of trainable arrays plus their Adam state.
#[derive(Default)]
pub struct Params {
    pub(crate) entries: Vec<Entry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> PRef {
        let zero = ArrayD::zeros(value.raw_dim());
        self.entries.push(Entry {
            name: name.into(),
            value: Arc::new(value),
            grad: zero.clone(),
            m: zero.clone(),
            v: zero,
        });
        PRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, p: PRef) -> &str {
        &self.entries[p.0].name
    }

    pub fn value(&self, p: PRef) -> &ArrayD<f64> {
        &self.entries[p.0].value
    }

    pub(crate) fn value_arc(&self, p: PRef) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.entries[p.0].value)
    }

    /// Mutable access for in-place edits (codebook reseeding, checkpoint
    /// restore, finite-difference probing). Requires no live tape to hold
    /// the array.
    pub fn value_mut(&mut self, p: PRef) -> &mut ArrayD<f64> {
        Arc::make_mut(&mut self.entries[p.0].value)
    }

    pub fn grad(&self, p: PRef) -> &ArrayD<f64> {
        &self.entries[p.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients. The caller folds
    /// per-sample gradient sets in a fixed order, which keeps training
    /// deterministic.
    pub fn accumulate(&mut self, grads: &GradAccum, scale: f64) {
        for (idx, g) in &grads.per_param {
            let e = &mut self.entries[*idx];
            e.grad.zip_mut_with(g, |acc, gi| *acc += scale * gi);
        }
    }

    pub fn iter_refs(&self) -> impl Iterator<Item = PRef> + '_ {
        (0..self.entries.len()).map(PRef)
    }

    pub fn find(&self, name: &str) -> Result<PRef> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(PRef)
            .ok_or_else(|| crate::error::Error::Data(format!("unknown parameter {name}")))
            .and_then(|p| Ok(p))
    }

    /// Replaces a parameter's value from a checkpoint, enforcing shape
    /// agreement.
    pub fn restore(&mut self, name: &str, value: ArrayD<f64>, m: ArrayD<f64>, v: ArrayD<f64>) -> Result<()> {
        let p = self.find(name)?;
        let e = &mut self.entries[p.0];
        if e.value.shape() != value.shape() {
            return data_err(format!(
                "checkpoint shape {:?} does not match parameter {name} of shape {:?}",
                value.shape(),
                e.value.shape()
            ));
        }
        e.value = Arc::new(value);
        e.m = m;
        e.v = v;
        Ok(())
    }
}

/// Per-sample gradient contributions keyed by parameter index.
#[derive(Default)]
pub struct GradAccum {
    pub(crate) per_param: Vec<(usize, ArrayD<f64>)>,
}
