use std::sync::Arc;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// Which optimizer owns a parameter: operator weights `w` or the
/// architecture logits `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weights,
    Arch,
}

#[derive(Debug, Clone)]
struct Param<S> {
    name: String,
    group: ParamGroup,
    value: Arc<Tensor<S>>,
}

/// Batch-norm running statistics (non-trainable buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }
}

/// Owns every trainable tensor of a model plus its batch-norm buffers.
///
/// Values are reference counted so a recording [`super::Graph`] can hold
/// them without copying; once the graph is consumed by `backward` the
/// optimizers mutate them in place.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    buffers: Vec<BnStats<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<S>) -> ParamId {
        let value = if value.requires_grad() {
            value
        } else {
            value.with_grad()
        };
        self.params.push(Param {
            name: name.into(),
            group,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn_stats(&mut self, channels: usize) -> BufferId {
        self.buffers.push(BnStats::new(channels));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<S>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn buffer(&self, id: BufferId) -> &BnStats<S> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut BnStats<S> {
        &mut self.buffers[id.0]
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group)
            .map(ParamId)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars in `group`.
    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            Arc::make_mut(&mut p.value).zero_grad();
        }
    }

    /// Adds the parameter gradients recorded in `grads` into each
    /// parameter's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for (id, g) in grads.params() {
            let t = Arc::make_mut(&mut self.params[id.0].value);
            if let Some(dst) = t.grad_mut() {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    /// Copies of every value in `group`, in id order.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<Vec<S>> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.data().to_vec())
            .collect()
    }
}
