//! The stochastic supernet: every searchable layer holds all of its
//! candidate blocks and mixes their outputs with a Gumbel-Softmax mask
//! drawn from the layer's architecture logits θ.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, BlockWeights, FixedWeights};
use crate::error::{config_err, Error, Result};
use crate::io::{read_json, to_json_pretty, write_atomic};
use crate::network::{NetLayer, Network};
use crate::nn::{softmax_slice, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::space::{validate_arch, ArchDescriptor, LayerPlan, SearchSpace};

/// Lower and upper clamp of the uniform draw behind a Gumbel sample.
pub const GUMBEL_U_MIN: f64 = 1e-20;
pub const GUMBEL_U_MAX: f64 = 1.0 - 1e-7;

/// `softmax(theta_l)`, stabilized by max subtraction.
pub fn layer_probs(theta_l: &[f64]) -> Vec<f64> {
    softmax_slice(theta_l, 1.0)
}

/// One standard Gumbel sample `-ln(-ln u)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(GUMBEL_U_MIN, GUMBEL_U_MAX);
    -(-u.ln()).ln()
}

/// A relaxed mask row together with the noise and temperature behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelMask {
    pub mask: Vec<f64>,
    pub noise: Vec<f64>,
    pub tau: f64,
}

impl GumbelMask {
    /// Mask for fixed `noise`: `softmax((theta_l + noise) / tau)`.
    pub fn with_noise(theta_l: &[f64], noise: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(config_err!("Gumbel-Softmax temperature must be > 0, got {tau}"));
        }
        if noise.len() != theta_l.len() {
            return Err(config_err!("{} noise values for {} logits", noise.len(), theta_l.len()));
        }
        let z: Vec<f64> = theta_l.iter().zip(&noise).map(|(t, g)| t + g).collect();
        Ok(Self {
            mask: softmax_slice(&z, tau),
            noise,
            tau,
        })
    }

    /// Index of the largest `theta + noise`, the hard sample the mask
    /// approaches as `tau -> 0`.
    pub fn hard_index(&self, theta_l: &[f64]) -> usize {
        argmax(theta_l.iter().zip(&self.noise).map(|(t, g)| t + g))
    }
}

/// Draws fresh noise and returns the relaxed mask row.
pub fn sample_gumbel_mask<R: Rng + ?Sized>(theta_l: &[f64], tau: f64, rng: &mut R) -> Result<GumbelMask> {
    let noise = (0..theta_l.len()).map(|_| gumbel(rng)).collect();
    GumbelMask::with_noise(theta_l, noise, tau)
}

/// One noise row per searchable layer.
pub fn sample_noise<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Vec<Vec<f64>> {
    space
        .slots()
        .iter()
        .map(|s| (0..s.candidates.len()).map(|_| gumbel(rng)).collect())
        .collect()
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` slightly below 1; fall back to the last
    // candidate with nonzero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Independent categorical draw per layer. Returns the descriptor and its
/// log-probability under θ.
pub fn sample_arch<R: Rng + ?Sized>(
    space: &SearchSpace,
    theta: &[Vec<f64>],
    rng: &mut R,
) -> Result<(ArchDescriptor, f64)> {
    check_theta_shape(space, theta)?;
    let mut choices = Vec::with_capacity(theta.len());
    let mut log_prob = 0.0;
    for t in theta {
        let p = layer_probs(t);
        let c = categorical(&p, rng);
        log_prob += p[c].ln();
        choices.push(c);
    }
    Ok((ArchDescriptor::new(space, choices)?, log_prob))
}

/// `sum_l ln P(choice_l)` under θ.
pub fn arch_log_prob(theta: &[Vec<f64>], arch: &ArchDescriptor) -> Result<f64> {
    if theta.len() != arch.choices.len() {
        return Err(config_err!("{} theta rows for {} choices", theta.len(), arch.choices.len()));
    }
    let mut acc = 0.0;
    for (t, &c) in theta.iter().zip(&arch.choices) {
        let p = layer_probs(t);
        let pc = p.get(c).ok_or_else(|| config_err!("choice {c} out of range"))?;
        acc += pc.ln();
    }
    Ok(acc)
}

/// Most likely architecture under θ.
pub fn argmax_arch(space: &SearchSpace, theta: &[Vec<f64>]) -> Result<ArchDescriptor> {
    check_theta_shape(space, theta)?;
    ArchDescriptor::new(space, theta.iter().map(|t| argmax(t.iter().copied())).collect())
}

/// Summed per-layer entropy of the sampling distribution, in nats.
pub fn arch_entropy(theta: &[Vec<f64>]) -> f64 {
    theta
        .iter()
        .map(|t| {
            layer_probs(t)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum()
}

fn check_theta_shape(space: &SearchSpace, theta: &[Vec<f64>]) -> Result<()> {
    if theta.len() != space.slots().len() {
        return Err(config_err!(
            "theta has {} layers, space has {} searchable layers",
            theta.len(),
            space.slots().len()
        ));
    }
    for (l, (t, s)) in theta.iter().zip(space.slots()).enumerate() {
        if t.len() != s.candidates.len() {
            return Err(config_err!(
                "layer {l}: theta has {} entries for {} candidates",
                t.len(),
                s.candidates.len()
            ));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("layer {l}: non-finite theta")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum SuperLayer {
    Fixed(crate::blocks::FixedOp, FixedWeights),
    Choice { slot: usize, candidates: Vec<BlockWeights> },
}

/// Candidate weights for every (layer, candidate) pair, fixed operators
/// and the architecture logits, all in one parameter store.
#[derive(Debug, Clone)]
pub struct Supernet<S> {
    space: SearchSpace,
    store: ParamStore<S>,
    layers: Vec<SuperLayer>,
    theta: Vec<ParamId>,
}

impl<S: Scalar> Supernet<S> {
    /// Fresh weights for every candidate; θ starts at zero (uniform).
    pub fn new<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(space.plan().len());
        let mut theta = Vec::with_capacity(space.slots().len());
        for (i, item) in space.plan().iter().enumerate() {
            match *item {
                LayerPlan::Fixed { op, .. } => {
                    let w = FixedWeights::new(op, &mut store, &format!("fixed{i}"), rng);
                    layers.push(SuperLayer::Fixed(op, w));
                }
                LayerPlan::Searchable { slot } => {
                    let candidates = space.slots()[slot]
                        .candidates
                        .iter()
                        .map(|cfg| BlockWeights::new(*cfg, &mut store, &format!("layer{slot}.{}", cfg.kind), rng))
                        .collect::<Result<Vec<_>>>()?;
                    layers.push(SuperLayer::Choice { slot, candidates });
                }
            }
        }
        for (l, s) in space.slots().iter().enumerate() {
            theta.push(store.add(
                format!("theta{l}"),
                ParamGroup::Arch,
                Tensor::zeros(&[s.candidates.len()]),
            ));
        }
        Ok(Self {
            space: space.clone(),
            store,
            layers,
            theta,
        })
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

    pub fn theta_ids(&self) -> &[ParamId] {
        &self.theta
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.store.ids(ParamGroup::Weights)
    }

    /// θ as plain numbers, one row per searchable layer.
    pub fn theta(&self) -> Vec<Vec<f64>> {
        self.theta
            .iter()
            .map(|&id| self.store.get(id).data().iter().map(|v| v.as_f64()).collect())
            .collect()
    }

    pub fn set_theta(&mut self, theta: &[Vec<f64>]) -> Result<()> {
        check_theta_shape(&self.space, theta)?;
        for (&id, row) in self.theta.iter().zip(theta) {
            for (d, &v) in self.store.get_mut(id).data_mut().iter_mut().zip(row) {
                *d = S::lit(v);
            }
        }
        Ok(())
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.theta().iter().map(|t| layer_probs(t)).collect()
    }

    pub fn entropy(&self) -> f64 {
        arch_entropy(&self.theta())
    }

    /// Relaxed forward pass with the given noise (one row per layer).
    /// Returns the logits and the per-layer mask variables.
    pub fn forward(&mut self, g: &mut Graph<S>, x: Var, noise: &[Vec<f64>], tau: f64) -> Result<(Var, Vec<Var>)> {
        if noise.len() != self.theta.len() {
            return Err(config_err!("{} noise rows for {} layers", noise.len(), self.theta.len()));
        }
        let tau_s = S::lit(tau);
        let mut masks = Vec::with_capacity(self.theta.len());
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                SuperLayer::Fixed(_, w) => w.forward(g, &mut self.store, h, None)?,
                SuperLayer::Choice { slot, candidates } => {
                    let l = *slot;
                    let theta = g.param(&self.store, self.theta[l]);
                    let row: Vec<S> = noise[l].iter().map(|&v| S::lit(v)).collect();
                    let m = g.gumbel_softmax(theta, &row, tau_s).map_err(|e| at_layer(l, e))?;
                    let mut outs = Vec::with_capacity(candidates.len());
                    for c in candidates {
                        outs.push(block_forward(c, g, &mut self.store, h).map_err(|e| at_layer(l, e))?);
                    }
                    masks.push(m);
                    g.weighted_sum(&outs, m).map_err(|e| at_layer(l, e))?
                }
            };
        }
        Ok((h, masks))
    }

    /// The single-path network for `arch`, sharing this supernet's
    /// current weights.
    pub fn extract(&self, arch: &ArchDescriptor) -> Result<Network<S>> {
        validate_arch(&self.space, arch)?;
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                SuperLayer::Fixed(op, w) => NetLayer::Fixed(*op, w.clone()),
                SuperLayer::Choice { slot, candidates } => NetLayer::Block(
                    candidates[arch.choices[*slot]].clone(),
                    self.space.slots()[*slot].input_hw,
                ),
            })
            .collect();
        Ok(Network::from_parts(
            self.space.clone(),
            arch.clone(),
            self.store.clone(),
            layers,
        ))
    }
}

fn at_layer(l: usize, e: Error) -> Error {
    match e {
        Error::Divergence(m) => Error::Divergence(format!("searchable layer {l}: {m}")),
        other => other,
    }
}

/// Serialized state of the RNG driving a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// θ snapshot with the schedule position needed to resume or sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCheckpoint {
    pub space_config_hash: String,
    pub epoch: usize,
    pub tau: f64,
    pub theta: BTreeMap<usize, Vec<f64>>,
    pub rng: RngState,
}

impl ThetaCheckpoint {
    pub fn new(space: &SearchSpace, epoch: usize, tau: f64, theta: &[Vec<f64>], rng: RngState) -> Self {
        Self {
            space_config_hash: space.config_hash().to_string(),
            epoch,
            tau,
            theta: theta.iter().cloned().enumerate().collect(),
            rng,
        }
    }

    /// θ rows in layer order, checked against `space`.
    pub fn rows(&self, space: &SearchSpace) -> Result<Vec<Vec<f64>>> {
        if self.space_config_hash != space.config_hash() {
            return Err(config_err!(
                "checkpoint was written for space {} but the search space hash is {}",
                self.space_config_hash,
                space.config_hash()
            ));
        }
        let rows: Vec<Vec<f64>> = self.theta.values().cloned().collect();
        if self.theta.keys().copied().ne(0..rows.len()) {
            return Err(config_err!("checkpoint layer indices are not 0..{}", rows.len()));
        }
        check_theta_shape(space, &rows)?;
        Ok(rows)
    }

    pub fn to_json(&self) -> Vec<u8> {
        to_json_pretty(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_space, SpaceConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probs_examples() {
        let p = layer_probs(&[0.0; 9]);
        assert!(p.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        let p = layer_probs(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = layer_probs(&[0.3, -1.2, 2.0]);
        let b = layer_probs(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_limits() {
        let theta = [0.4, -0.3, 1.1, 0.0];
        let noise = vec![0.2, 1.5, -0.7, 0.1];
        let cold = GumbelMask::with_noise(&theta, noise.clone(), 1e-4).unwrap();
        let hot = GumbelMask::with_noise(&theta, noise, 1e6).unwrap();
        let k = cold.hard_index(&theta);
        assert_eq!(k, 1);
        for (i, &m) in cold.mask.iter().enumerate() {
            assert!((m - if i == k { 1.0 } else { 0.0 }).abs() < 1e-6);
        }
        for &m in &hot.mask {
            assert!((m - 0.25).abs() < 1e-3);
        }
        assert!(GumbelMask::with_noise(&theta, vec![0.0; 4], 0.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let uniform = vec![vec![0.0; 9]; 22];
        assert!((arch_entropy(&uniform) - 22.0 * 9f64.ln()).abs() < 1e-12);
        let mut peaked = vec![vec![0.0; 9]; 3];
        for row in &mut peaked {
            row[2] = 1e3;
        }
        assert!(arch_entropy(&peaked) < 1e-12);
        let shifted: Vec<Vec<f64>> = uniform.iter().map(|r| r.iter().map(|v| v + 7.0).collect()).collect();
        assert!((arch_entropy(&shifted) - arch_entropy(&uniform)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_theta_samples_deterministically() {
        let space = build_space(&SpaceConfig::desk()).unwrap();
        let theta: Vec<Vec<f64>> = space
            .slots()
            .iter()
            .map(|s| {
                let mut r = vec![0.0; s.candidates.len()];
                r[1] = 1e6;
                r
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, lp) = sample_arch(&space, &theta, &mut rng).unwrap();
            assert_eq!(a.choices, vec![1; 7]);
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn log_prob_matches_sum_of_logs() {
        let space = build_space(&SpaceConfig::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<Vec<f64>> = space
            .slots()
            .iter()
            .map(|s| (0..s.candidates.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let (arch, lp) = sample_arch(&space, &theta, &mut rng).unwrap();
        assert!((arch_log_prob(&theta, &arch).unwrap() - lp).abs() < 1e-12);
    }

    #[test]
    fn masks_are_row_stochastic() {
        let space = build_space(&SpaceConfig::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Supernet::<f32>::new(&space, &mut rng).unwrap();
        let noise = sample_noise(&space, &mut rng);
        let mut g = Graph::new(crate::nn::BnMode::Train);
        let x = g.input(Tensor::randn(&space.input_shape(2), 1.0, &mut rng)).unwrap();
        let (logits, masks) = net.forward(&mut g, x, &noise, 5.0).unwrap();
        assert_eq!(g.shape(logits), &[2, 10]);
        assert_eq!(masks.len(), 7);
        for m in masks {
            let v = g.value(m).data();
            assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
            assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_rejects_other_space() {
        let space = build_space(&SpaceConfig::desk()).unwrap();
        let theta = vec![vec![0.0; 9], vec![0.0; 8]];
        let ck = ThetaCheckpoint::new(&space, 0, 5.0, &theta, RngState { seed: 0, word_pos: 0 });
        assert!(ck.rows(&space).is_err());
        let mut other = ck.clone();
        other.space_config_hash = "x".into();
        assert!(other.rows(&space).unwrap_err().to_string().contains("x"));
    }
}
