//! A standalone single-path network: fixed operators plus one chosen block
//! per searchable layer.

use rand::Rng;

use crate::blocks::{block_flops, block_forward, BlockWeights, FixedOp, FixedWeights};
use crate::error::Result;
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::space::{validate_arch, ArchDescriptor, LayerPlan, SearchSpace};

#[derive(Debug, Clone)]
pub(crate) enum NetLayer {
    Fixed(FixedOp, FixedWeights),
    Block(BlockWeights, (usize, usize)),
}

#[derive(Debug, Clone)]
pub struct Network<S> {
    space: SearchSpace,
    arch: ArchDescriptor,
    store: ParamStore<S>,
    layers: Vec<NetLayer>,
}

/// Builds the network for `arch` with freshly initialized weights.
pub fn materialize<S: Scalar, R: Rng + ?Sized>(
    space: &SearchSpace,
    arch: &ArchDescriptor,
    rng: &mut R,
) -> Result<Network<S>> {
    validate_arch(space, arch)?;
    let configs = arch.configs(space)?;
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(space.plan().len());
    for (i, item) in space.plan().iter().enumerate() {
        match *item {
            LayerPlan::Fixed { op, .. } => {
                let w = FixedWeights::new(op, &mut store, &format!("fixed{i}"), rng);
                layers.push(NetLayer::Fixed(op, w));
            }
            LayerPlan::Searchable { slot } => {
                let cfg = configs[slot];
                let w = BlockWeights::new(cfg, &mut store, &format!("layer{slot}.{}", cfg.kind), rng)?;
                layers.push(NetLayer::Block(w, space.slots()[slot].input_hw));
            }
        }
    }
    Ok(Network {
        space: space.clone(),
        arch: arch.clone(),
        store,
        layers,
    })
}

impl<S: Scalar> Network<S> {
    pub(crate) fn from_parts(
        space: SearchSpace,
        arch: ArchDescriptor,
        store: ParamStore<S>,
        layers: Vec<NetLayer>,
    ) -> Self {
        Self {
            space,
            arch,
            store,
            layers,
        }
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                NetLayer::Fixed(_, w) => w.param_ids(),
                NetLayer::Block(w, _) => w.param_ids(),
            })
            .collect()
    }

    /// Trainable scalars reachable from this network's layers.
    pub fn param_count(&self) -> usize {
        self.param_ids().iter().map(|&id| self.store.get(id).len()).sum()
    }

    pub fn flops(&self) -> usize {
        self.layers
            .iter()
            .zip(self.space.plan())
            .map(|(l, plan)| match (l, plan) {
                (NetLayer::Fixed(op, _), LayerPlan::Fixed { input_hw, .. }) => op.flops(*input_hw),
                (NetLayer::Block(w, hw), _) => block_flops(w.config(), *hw),
                _ => unreachable!("layers follow the space plan"),
            })
            .sum()
    }

    /// Logits `[N, classes]`. `dropout` applies before the classifier.
    pub fn forward(
        &mut self,
        g: &mut Graph<S>,
        x: Var,
        mut dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                NetLayer::Fixed(op, w) => {
                    let d = match op {
                        FixedOp::Classifier { .. } => dropout.take(),
                        _ => None,
                    };
                    w.forward(g, &mut self.store, h, d)?
                }
                NetLayer::Block(w, _) => block_forward(w, g, &mut self.store, h)?,
            };
        }
        Ok(h)
    }

    /// Forward pass without recording gradients for parameters; returns
    /// the logits tensor.
    pub fn predict(&mut self, images: Tensor<S>, mode: crate::nn::BnMode) -> Result<Tensor<S>> {
        let mut g = Graph::new(mode).freeze(ParamGroup::Weights);
        let x = g.input(images)?;
        let y = self.forward(&mut g, x, None)?;
        Ok(g.value(y).clone())
    }
}
