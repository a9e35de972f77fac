//! Candidate blocks and fixed operators.
//!
//! Every searchable block is a 1x1 (optionally grouped) expansion, a KxK
//! depthwise convolution and a 1x1 (optionally grouped) projection, each
//! followed by batch norm; ReLU follows the first two. Grouped 1x1
//! convolutions are followed by a channel shuffle. The `skip` candidate is
//! the identity.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{he_normal, BufferId, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "k3_e1")]
    K3E1,
    #[serde(rename = "k3_e1_g2")]
    K3E1G2,
    #[serde(rename = "k3_e3")]
    K3E3,
    #[serde(rename = "k3_e6")]
    K3E6,
    #[serde(rename = "k5_e1")]
    K5E1,
    #[serde(rename = "k5_e1_g2")]
    K5E1G2,
    #[serde(rename = "k5_e3")]
    K5E3,
    #[serde(rename = "k5_e6")]
    K5E6,
    #[serde(rename = "skip")]
    Skip,
}

impl BlockKind {
    /// The full candidate vocabulary, in table order.
    pub const ALL: [BlockKind; 9] = [
        BlockKind::K3E1,
        BlockKind::K3E1G2,
        BlockKind::K3E3,
        BlockKind::K3E6,
        BlockKind::K5E1,
        BlockKind::K5E1G2,
        BlockKind::K5E3,
        BlockKind::K5E6,
        BlockKind::Skip,
    ];

    /// `(expansion, kernel, groups)`; `None` for skip.
    pub fn params(self) -> Option<(usize, usize, usize)> {
        use BlockKind::*;
        match self {
            K3E1 => Some((1, 3, 1)),
            K3E1G2 => Some((1, 3, 2)),
            K3E3 => Some((3, 3, 1)),
            K3E6 => Some((6, 3, 1)),
            K5E1 => Some((1, 5, 1)),
            K5E1G2 => Some((1, 5, 2)),
            K5E3 => Some((3, 5, 1)),
            K5E6 => Some((6, 5, 1)),
            Skip => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        use BlockKind::*;
        match self {
            K3E1 => "k3_e1",
            K3E1G2 => "k3_e1_g2",
            K3E3 => "k3_e3",
            K3E6 => "k3_e6",
            K5E1 => "k5_e1",
            K5E1G2 => "k5_e1_g2",
            K5E3 => "k5_e3",
            K5E6 => "k5_e6",
            Skip => "skip",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err!("unknown block kind `{s}`"))
    }
}

/// A candidate block instantiated at a concrete layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let cfg = Self {
            kind,
            c_in,
            c_out,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(config_err!("{}: stride must be 1 or 2, got {}", self.kind, self.stride));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(config_err!("{}: channel counts must be positive", self.kind));
        }
        match self.kind.params() {
            None => {
                if self.stride != 1 || self.c_in != self.c_out {
                    return Err(config_err!(
                        "skip needs stride 1 and equal channels, got stride {} with {} -> {}",
                        self.stride,
                        self.c_in,
                        self.c_out
                    ));
                }
            }
            Some((e, _, g)) => {
                if self.c_in % g != 0 || (e * self.c_in) % g != 0 || self.c_out % g != 0 {
                    return Err(config_err!(
                        "{}: groups={g} must divide c_in={}, expanded {} and c_out={}",
                        self.kind,
                        self.c_in,
                        e * self.c_in,
                        self.c_out
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn expansion(&self) -> usize {
        self.kind.params().map_or(1, |p| p.0)
    }

    pub fn kernel(&self) -> usize {
        self.kind.params().map_or(1, |p| p.1)
    }

    pub fn groups(&self) -> usize {
        self.kind.params().map_or(1, |p| p.2)
    }

    pub fn hidden(&self) -> usize {
        self.expansion() * self.c_in
    }

    pub fn has_residual(&self) -> bool {
        self.kind != BlockKind::Skip && self.stride == 1 && self.c_in == self.c_out
    }

    pub fn output_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (out_len(h, self.stride), out_len(w, self.stride))
    }
}

/// Spatial output extent of a same-padded convolution.
pub fn out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Convolution (no bias) followed by an optional channel shuffle and batch
/// norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub shuffle: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        shuffle: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamGroup::Weights,
            he_normal(&[c_out, c_in / groups, kernel, kernel], rng),
        );
        let gamma = store.add(
            format!("{name}.bn.gamma"),
            ParamGroup::Weights,
            Tensor::full(&[c_out], S::one()),
        );
        let beta = store.add(format!("{name}.bn.beta"), ParamGroup::Weights, Tensor::zeros(&[c_out]));
        let stats = store.add_bn_stats(c_out);
        Self {
            weight,
            gamma,
            beta,
            stats,
            kernel,
            stride,
            groups,
            shuffle,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let mut y = g.conv2d(x, w, self.stride, (self.kernel - 1) / 2, self.groups)?;
        if self.shuffle {
            y = g.channel_shuffle(y, self.groups)?;
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(y, gamma, beta, store.buffer_mut(self.stats))
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.weight, self.gamma, self.beta]
    }
}

#[derive(Debug, Clone)]
struct BlockConvs {
    expand: ConvBn,
    depthwise: ConvBn,
    project: ConvBn,
}

/// Parameter handles of one block instance.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    cfg: BlockConfig,
    convs: Option<BlockConvs>,
}

impl BlockWeights {
    /// Allocates fresh He-initialized weights and identity batch norms.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        cfg: BlockConfig,
        store: &mut ParamStore<S>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let convs = cfg.kind.params().map(|(_, k, groups)| {
            let hidden = cfg.hidden();
            let shuffle = groups > 1;
            BlockConvs {
                expand: ConvBn::new(store, &format!("{name}.expand"), cfg.c_in, hidden, 1, 1, groups, shuffle, rng),
                depthwise: ConvBn::new(store, &format!("{name}.dw"), hidden, hidden, k, cfg.stride, hidden, false, rng),
                project: ConvBn::new(store, &format!("{name}.project"), hidden, cfg.c_out, 1, 1, groups, shuffle, rng),
            }
        });
        Ok(Self { cfg, convs })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|c| [&c.expand, &c.depthwise, &c.project])
            .flat_map(ConvBn::param_ids)
            .collect()
    }

    /// The expansion, depthwise and projection units (empty for skip).
    pub fn units(&self) -> Vec<&ConvBn> {
        self.convs
            .iter()
            .flat_map(|c| [&c.expand, &c.depthwise, &c.project])
            .collect()
    }
}

pub fn block_forward<S: Scalar>(
    w: &BlockWeights,
    g: &mut Graph<S>,
    store: &mut ParamStore<S>,
    x: Var,
) -> Result<Var> {
    let cfg = &w.cfg;
    let (_, c, _, _) = g.value(x).dims4();
    if c != cfg.c_in {
        return Err(config_err!(
            "{} expects {} input channels, got {c}",
            cfg.kind,
            cfg.c_in
        ));
    }
    let Some(convs) = &w.convs else {
        return Ok(x);
    };
    let h = convs.expand.forward(g, store, x)?;
    let h = g.relu(h)?;
    let h = convs.depthwise.forward(g, store, h)?;
    let h = g.relu(h)?;
    let y = convs.project.forward(g, store, h)?;
    if cfg.has_residual() {
        g.add(y, x)
    } else {
        Ok(y)
    }
}

fn conv_params(c_in: usize, c_out: usize, k: usize, groups: usize) -> usize {
    c_out * (c_in / groups) * k * k
}

/// Trainable scalars of one block (conv weights plus gamma/beta per BN channel).
pub fn block_param_count(cfg: &BlockConfig) -> usize {
    let Some((_, k, g)) = cfg.kind.params() else {
        return 0;
    };
    let hidden = cfg.hidden();
    conv_params(cfg.c_in, hidden, 1, g)
        + conv_params(hidden, hidden, k, hidden)
        + conv_params(hidden, cfg.c_out, 1, g)
        + 2 * (hidden + hidden + cfg.c_out)
}

/// Multiply-adds of the three convolutions at input resolution `hw`.
pub fn block_flops(cfg: &BlockConfig, hw: (usize, usize)) -> usize {
    let Some((_, k, g)) = cfg.kind.params() else {
        return 0;
    };
    let hidden = cfg.hidden();
    let (oh, ow) = cfg.output_hw(hw);
    conv_params(cfg.c_in, hidden, 1, g) * hw.0 * hw.1
        + conv_params(hidden, hidden, k, hidden) * oh * ow
        + conv_params(hidden, cfg.c_out, 1, g) * oh * ow
}

/// Non-searchable operators of the macro-architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FixedOp {
    /// 3x3 convolution + BN + ReLU (stem and any other fixed conv stage).
    Conv3x3 { c_in: usize, c_out: usize, stride: usize },
    /// 1x1 convolution + BN + ReLU before pooling.
    HeadConv { c_in: usize, c_out: usize },
    /// Global average pooling + fully connected classifier.
    Classifier { c_in: usize, classes: usize },
}

impl FixedOp {
    pub fn param_count(&self) -> usize {
        match *self {
            FixedOp::Conv3x3 { c_in, c_out, .. } => 9 * c_in * c_out + 2 * c_out,
            FixedOp::HeadConv { c_in, c_out } => c_in * c_out + 2 * c_out,
            FixedOp::Classifier { c_in, classes } => c_in * classes + classes,
        }
    }

    pub fn flops(&self, (h, w): (usize, usize)) -> usize {
        match *self {
            FixedOp::Conv3x3 { c_in, c_out, stride } => {
                9 * c_in * c_out * out_len(h, stride) * out_len(w, stride)
            }
            FixedOp::HeadConv { c_in, c_out } => c_in * c_out * h * w,
            FixedOp::Classifier { c_in, classes } => c_in * classes,
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            FixedOp::Conv3x3 { stride, .. } => stride,
            _ => 1,
        }
    }
}

/// Weights of a fixed operator.
#[derive(Debug, Clone)]
pub enum FixedWeights {
    Conv(ConvBn),
    Classifier { weight: ParamId, bias: ParamId },
}

impl FixedWeights {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        op: FixedOp,
        store: &mut ParamStore<S>,
        name: &str,
        rng: &mut R,
    ) -> Self {
        match op {
            FixedOp::Conv3x3 { c_in, c_out, stride } => {
                FixedWeights::Conv(ConvBn::new(store, name, c_in, c_out, 3, stride, 1, false, rng))
            }
            FixedOp::HeadConv { c_in, c_out } => {
                FixedWeights::Conv(ConvBn::new(store, name, c_in, c_out, 1, 1, 1, false, rng))
            }
            FixedOp::Classifier { c_in, classes } => {
                let bound = 1.0 / (c_in as f64).sqrt();
                let weight = store.add(
                    format!("{name}.weight"),
                    ParamGroup::Weights,
                    Tensor::uniform(&[c_in, classes], -bound, bound, rng),
                );
                let bias = store.add(format!("{name}.bias"), ParamGroup::Weights, Tensor::zeros(&[classes]));
                FixedWeights::Classifier { weight, bias }
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            FixedWeights::Conv(c) => c.param_ids().to_vec(),
            FixedWeights::Classifier { weight, bias } => vec![*weight, *bias],
        }
    }

    /// Runs the operator. `dropout` (probability, rng) applies to the pooled
    /// features right before the classifier.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        x: Var,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        match self {
            FixedWeights::Conv(c) => {
                let y = c.forward(g, store, x)?;
                g.relu(y)
            }
            FixedWeights::Classifier { weight, bias } => {
                let pooled = g.avg_pool_global(x)?;
                let mut flat = g.flatten(pooled)?;
                if let Some((p, rng)) = dropout {
                    if p > 0.0 {
                        flat = g.dropout(flat, p, rng)?;
                    }
                }
                let w = g.param(store, *weight);
                let b = g.param(store, *bias);
                g.linear(flat, w, b)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BnMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all_convs(store: &mut ParamStore<f64>, w: &BlockWeights) {
        for unit in w.units() {
            store.get_mut(unit.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn vocabulary_matches_table() {
        let expect = [
            ("k3_e1", Some((1, 3, 1))),
            ("k3_e1_g2", Some((1, 3, 2))),
            ("k3_e3", Some((3, 3, 1))),
            ("k3_e6", Some((6, 3, 1))),
            ("k5_e1", Some((1, 5, 1))),
            ("k5_e1_g2", Some((1, 5, 2))),
            ("k5_e3", Some((3, 5, 1))),
            ("k5_e6", Some((6, 5, 1))),
            ("skip", None),
        ];
        assert_eq!(BlockKind::ALL.len(), 9);
        for (kind, (name, params)) in BlockKind::ALL.iter().zip(expect) {
            assert_eq!(kind.as_str(), name);
            assert_eq!(kind.params(), params);
            assert_eq!(name.parse::<BlockKind>().unwrap(), *kind);
            assert_eq!(serde_json::to_string(kind).unwrap(), format!("\"{name}\""));
        }
    }

    #[test]
    fn skip_is_identity_with_no_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = BlockConfig::new(BlockKind::Skip, 8, 8, 1).unwrap();
        let w = BlockWeights::new(cfg, &mut store, "b", &mut rng).unwrap();
        assert_eq!(block_param_count(&cfg), 0);
        assert!(store.is_empty());
        let mut g = Graph::new(BnMode::Train);
        let x = g.input(Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng)).unwrap();
        let y = block_forward(&w, &mut g, &mut store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn skip_rejects_stride_or_channel_change() {
        assert!(BlockConfig::new(BlockKind::Skip, 8, 8, 2).is_err());
        assert!(BlockConfig::new(BlockKind::Skip, 8, 16, 1).is_err());
    }

    #[test]
    fn grouped_block_rejects_odd_channels() {
        assert!(BlockConfig::new(BlockKind::K3E1G2, 7, 8, 1).is_err());
        assert!(BlockConfig::new(BlockKind::K3E1G2, 8, 7, 1).is_err());
        assert!(BlockConfig::new(BlockKind::K3E1, 7, 9, 1).is_ok());
    }

    #[test]
    fn expansion_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let cfg = BlockConfig::new(BlockKind::K3E6, 16, 16, 1).unwrap();
        let w = BlockWeights::new(cfg, &mut store, "b", &mut rng).unwrap();
        let expand = w.units()[0];
        assert_eq!(store.get(expand.weight).shape(), &[96, 16, 1, 1]);
        assert_eq!(store.get(w.units()[1].weight).shape(), &[96, 1, 3, 3]);
        assert_eq!(store.get(w.units()[2].weight).shape(), &[16, 96, 1, 1]);
    }

    #[test]
    fn zeroed_main_branch_leaves_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cfg = BlockConfig::new(BlockKind::K5E1G2, 8, 8, 1).unwrap();
        let w = BlockWeights::new(cfg, &mut store, "b", &mut rng).unwrap();
        zero_all_convs(&mut store, &w);
        for mode in [BnMode::Train, BnMode::Eval] {
            let mut g = Graph::new(mode);
            let x = g.input(Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng)).unwrap();
            let y = block_forward(&w, &mut g, &mut store, x).unwrap();
            assert_eq!(g.value(y).data(), g.value(x).data());
        }
    }

    #[test]
    fn residual_only_when_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c_in, c_out, stride, expect) in [(8, 8, 1, true), (8, 16, 1, false), (8, 8, 2, false)] {
            let mut store = ParamStore::<f64>::new();
            let cfg = BlockConfig::new(BlockKind::K3E3, c_in, c_out, stride).unwrap();
            let w = BlockWeights::new(cfg, &mut store, "b", &mut rng).unwrap();
            zero_all_convs(&mut store, &w);
            let mut g = Graph::new(BnMode::Eval);
            let x = g.input(Tensor::full(&[1, c_in, 4, 4], 1.5)).unwrap();
            let y = block_forward(&w, &mut g, &mut store, x).unwrap();
            let sensitive = g.value(y).data().iter().any(|&v| v != 0.0);
            assert_eq!(sensitive, expect, "{cfg:?}");
            assert_eq!(cfg.has_residual(), expect);
        }
    }

    #[test]
    fn param_count_by_hand() {
        let cfg = BlockConfig::new(BlockKind::K3E1, 8, 8, 1).unwrap();
        assert_eq!(block_param_count(&cfg), 64 + 72 + 64 + 48);
        let grouped = BlockConfig::new(BlockKind::K3E1G2, 8, 8, 1).unwrap();
        let bn_and_dw = 72 + 48;
        assert_eq!(block_param_count(&grouped) - bn_and_dw, (block_param_count(&cfg) - bn_and_dw) / 2);
    }

    #[test]
    fn param_count_matches_allocated_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in BlockKind::ALL {
            let (c_in, c_out, stride) = if kind == BlockKind::Skip { (12, 12, 1) } else { (12, 20, 2) };
            let cfg = BlockConfig::new(kind, c_in, c_out, stride).unwrap();
            let mut store = ParamStore::<f32>::new();
            BlockWeights::new(cfg, &mut store, "b", &mut rng).unwrap();
            assert_eq!(store.scalar_count(ParamGroup::Weights), block_param_count(&cfg), "{kind}");
        }
    }

    #[test]
    fn flops_by_hand_and_quadratic_scaling() {
        let cfg = BlockConfig::new(BlockKind::K3E1, 8, 8, 1).unwrap();
        assert_eq!(block_flops(&cfg, (8, 8)), 64 * 64 + 72 * 64 + 64 * 64);
        assert_eq!(block_flops(&cfg, (8, 8)), 12_800);
        for kind in BlockKind::ALL {
            let cfg = if kind == BlockKind::Skip {
                BlockConfig::new(kind, 16, 16, 1).unwrap()
            } else {
                BlockConfig::new(kind, 16, 24, 2).unwrap()
            };
            assert_eq!(block_flops(&cfg, (16, 16)), 4 * block_flops(&cfg, (8, 8)));
        }
        let skip = BlockConfig::new(BlockKind::Skip, 8, 8, 1).unwrap();
        assert_eq!(block_flops(&skip, (8, 8)), 0);
    }

    #[test]
    fn output_shape_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in BlockKind::ALL {
            for (c_in, c_out, stride) in [(8, 8, 1), (8, 16, 2), (16, 24, 1)] {
                let Ok(cfg) = BlockConfig::new(kind, c_in, c_out, stride) else {
                    assert_eq!(kind, BlockKind::Skip);
                    continue;
                };
                let mut store = ParamStore::<f32>::new();
                let w = BlockWeights::new(cfg, &mut store, "b", &mut rng).unwrap();
                let mut g = Graph::new(BnMode::Train);
                let x = g.input(Tensor::randn(&[2, c_in, 7, 7], 1.0, &mut rng)).unwrap();
                let y = block_forward(&w, &mut g, &mut store, x).unwrap();
                let (oh, ow) = cfg.output_hw((7, 7));
                assert_eq!(g.shape(y), &[2, c_out, oh, ow]);
            }
        }
    }
}
