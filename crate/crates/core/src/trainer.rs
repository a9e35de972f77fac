//! Latency-aware loss, the alternating weight/θ search loop and
//! standalone retraining of sampled architectures.

use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, make_batch, Augment, Dataset, Normalization};
use crate::error::{config_err, Error, Result};
use crate::latency::{bench_network, LatencyModel, LatencyTable};
use crate::network::{materialize, Network};
use crate::nn::{cosine_lr, step_lr, AdamState, BnMode, Graph, ParamGroup, SgdMomentum, Tensor, Var};
use crate::scalar::Scalar;
use crate::space::{ArchDescriptor, SearchSpace};
use crate::supernet::{sample_noise, RngState, Supernet, ThetaCheckpoint};

/// Loss values above this abort training as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// How cross-entropy and latency are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `ce * alpha * ln(lat)^beta`.
    #[default]
    Multiplicative,
    /// `ce + alpha * ln(lat)^beta`.
    Additive,
    /// `alpha * ln(lat)^beta`; accuracy is ignored.
    LatencyOnly,
}

/// Latency-aware loss for scalar `ce` and `lat_us` (microseconds).
pub fn latency_aware_loss<S: Scalar>(
    g: &mut Graph<S>,
    ce: Var,
    lat_us: Var,
    alpha: f64,
    beta: f64,
    mode: LossMode,
) -> Result<Var> {
    let lat = g.value(lat_us).data()[0].as_f64();
    if !(lat > 1.0) {
        return Err(Error::Domain(format!("latency must exceed 1 us, got {lat}")));
    }
    let ln = g.ln(lat_us)?;
    let p = g.powf(ln, S::lit(beta))?;
    let term = g.scale(p, S::lit(alpha))?;
    match mode {
        LossMode::Multiplicative => g.mul(ce, term),
        LossMode::Additive => g.add(ce, term),
        LossMode::LatencyOnly => Ok(term),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchHyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub tau0: f64,
    /// Per-epoch multiplicative temperature decay.
    pub tau_decay: f64,
    pub epochs: usize,
    /// θ is not trained during the first `postpone` epochs.
    pub postpone: usize,
    pub batch_size: usize,
    pub theta_batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    /// The desk default is higher than the full-scale one so that the much
    /// shorter θ schedule covers a comparable lr × step budget.
    pub theta_lr: f64,
    pub theta_weight_decay: f64,
    pub split_fraction: f64,
    pub loss_mode: LossMode,
    pub augment: bool,
}

impl Default for SearchHyperParams {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.6,
            tau0: 5.0,
            tau_decay: (-0.045f64).exp(),
            epochs: 30,
            postpone: 4,
            batch_size: 64,
            theta_batch_size: 16,
            w_lr: 0.1,
            w_momentum: 0.9,
            w_weight_decay: 1e-4,
            theta_lr: 0.3,
            theta_weight_decay: 5e-4,
            split_fraction: 0.8,
            loss_mode: LossMode::Multiplicative,
            augment: true,
        }
    }
}

impl SearchHyperParams {
    /// The full-scale schedule: 90 epochs, θ postponed 10, batch 192, θ lr 1e-2.
    pub fn full_scale() -> Self {
        Self {
            epochs: 90,
            postpone: 10,
            batch_size: 192,
            theta_batch_size: 192,
            theta_lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha > 0.0, "alpha must be > 0"),
            (self.beta > 0.0, "beta must be > 0"),
            (self.tau0 > 0.0, "tau0 must be > 0"),
            (self.tau_decay > 0.0 && self.tau_decay < 1.0, "tau_decay must be in (0, 1)"),
            (self.split_fraction > 0.0 && self.split_fraction < 1.0, "split_fraction must be in (0, 1)"),
            (self.postpone < self.epochs, "postpone must be smaller than epochs"),
            (self.batch_size >= 2 && self.theta_batch_size >= 2, "batch sizes must be >= 2"),
            (self.w_lr > 0.0 && self.theta_lr > 0.0, "learning rates must be > 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(config_err!("{msg}"));
            }
        }
        Ok(())
    }

    /// `tau0 * decay^epoch`.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        self.tau0 * (self.tau_decay.ln() * epoch as f64).exp()
    }
}

/// One line of the search metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `"weights"` or `"theta"`.
    pub phase: String,
    pub tau: f64,
    /// Mean cross-entropy over the phase's batches.
    pub ce: f64,
    /// Expected latency under the sampling distribution after the phase.
    pub expected_lat_us: f64,
    pub entropy_nats: f64,
    pub lr: f64,
}

/// Everything the search loop mutates.
pub struct SearchState<S> {
    pub hyper: SearchHyperParams,
    pub supernet: Supernet<S>,
    pub w_opt: SgdMomentum<S>,
    pub theta_opt: AdamState<S>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// θ after each completed epoch.
    pub theta_history: Vec<Vec<Vec<f64>>>,
    model: LatencyModel,
    rng: ChaCha8Rng,
    seed: u64,
}

impl<S: Scalar> SearchState<S> {
    pub fn new(space: &SearchSpace, table: &LatencyTable, hyper: SearchHyperParams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        table.check_space(space)?;
        let model = LatencyModel::resolve(table, space)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let supernet = Supernet::new(space, &mut rng)?;
        Ok(Self {
            w_opt: SgdMomentum::new(hyper.w_lr, hyper.w_momentum, hyper.w_weight_decay),
            theta_opt: AdamState::new(hyper.theta_lr, hyper.theta_weight_decay),
            hyper,
            supernet,
            epoch: 0,
            history: Vec::new(),
            theta_history: Vec::new(),
            model,
            rng,
            seed,
        })
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    /// Temperature of the current (next) epoch.
    pub fn tau(&self) -> f64 {
        self.hyper.tau_at(self.epoch)
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    /// Expected latency under the current sampling distribution.
    pub fn expected_latency(&self) -> Result<f64> {
        self.model.expected_value(&self.supernet.probs())
    }

    pub fn checkpoint(&self) -> ThetaCheckpoint {
        ThetaCheckpoint::new(
            self.supernet.space(),
            self.epoch,
            self.tau(),
            &self.supernet.theta(),
            self.rng_state(),
        )
    }

    fn batch_loss(
        &mut self,
        g: &mut Graph<S>,
        ds: &Dataset,
        norm: &Normalization,
        idx: &[usize],
        augment: bool,
        tau: f64,
    ) -> Result<(Var, f64)> {
        let (mut x, labels) = make_batch::<S>(ds, idx, norm);
        if augment {
            Augment::train().apply(&mut x, &mut self.rng);
        }
        let noise = sample_noise(self.supernet.space(), &mut self.rng);
        let xv = g.input(x)?;
        let (logits, masks) = self.supernet.forward(g, xv, &noise, tau)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let lat = self.model.expected_latency(g, &masks)?;
        let loss = latency_aware_loss(g, ce, lat, self.hyper.alpha, self.hyper.beta, self.hyper.loss_mode)?;
        Ok((loss, g.value(ce).data()[0].as_f64()))
    }

    /// One pass over `train` updating only the supernet weights.
    pub fn train_weights_epoch(&mut self, train: &Dataset, norm: &Normalization) -> Result<EpochMetrics> {
        let tau = self.tau();
        let lr = cosine_lr(self.epoch, self.hyper.epochs, self.hyper.w_lr);
        let ids = self.supernet.weight_ids();
        let batches = epoch_batches(train.len(), self.hyper.batch_size, &mut self.rng);
        let (mut ce_sum, mut seen) = (0.0, 0usize);
        for idx in &batches {
            let mut g = Graph::new(BnMode::Train).freeze(ParamGroup::Arch);
            let (loss, ce) = self.batch_loss(&mut g, train, norm, idx, self.hyper.augment, tau)?;
            check_loss(g.value(loss).data()[0].as_f64(), self.epoch, "weights")?;
            let grads = g.backward(loss)?;
            let store = self.supernet.store_mut();
            store.zero_grad();
            store.accumulate(&grads);
            self.w_opt.step(store, &ids, lr)?;
            ce_sum += ce * idx.len() as f64;
            seen += idx.len();
        }
        self.metrics("weights", tau, ce_sum / seen.max(1) as f64, lr)
    }

    /// One pass over `val` updating only θ. Leaves θ untouched while the
    /// epoch is inside the postponement window.
    pub fn train_theta_epoch(&mut self, val: &Dataset, norm: &Normalization) -> Result<Option<EpochMetrics>> {
        if self.epoch < self.hyper.postpone {
            return Ok(None);
        }
        let tau = self.tau();
        let lr = self.hyper.theta_lr;
        let ids = self.supernet.theta_ids().to_vec();
        let batches = epoch_batches(val.len(), self.hyper.theta_batch_size, &mut self.rng);
        let (mut ce_sum, mut seen) = (0.0, 0usize);
        for idx in &batches {
            let mut g = Graph::new(BnMode::Batch).freeze(ParamGroup::Weights);
            let (loss, ce) = if self.hyper.loss_mode == LossMode::LatencyOnly {
                // The loss does not depend on the network output.
                let noise = sample_noise(self.supernet.space(), &mut self.rng);
                let masks = ids
                    .iter()
                    .zip(&noise)
                    .map(|(&id, row)| {
                        let t = g.param(self.supernet.store(), id);
                        let row: Vec<S> = row.iter().map(|&v| S::lit(v)).collect();
                        g.gumbel_softmax(t, &row, S::lit(tau))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let lat = self.model.expected_latency(&mut g, &masks)?;
                let one = g.input(Tensor::scalar(S::one()))?;
                let loss = latency_aware_loss(&mut g, one, lat, self.hyper.alpha, self.hyper.beta, LossMode::LatencyOnly)?;
                (loss, 0.0)
            } else {
                self.batch_loss(&mut g, val, norm, idx, false, tau)?
            };
            check_loss(g.value(loss).data()[0].as_f64(), self.epoch, "theta")?;
            let grads = g.backward(loss)?;
            let store = self.supernet.store_mut();
            store.zero_grad();
            store.accumulate(&grads);
            self.theta_opt.step(store, &ids, lr)?;
            ce_sum += ce * idx.len() as f64;
            seen += idx.len();
        }
        self.metrics("theta", tau, ce_sum / seen.max(1) as f64, lr).map(Some)
    }

    fn metrics(&self, phase: &str, tau: f64, ce: f64, lr: f64) -> Result<EpochMetrics> {
        Ok(EpochMetrics {
            epoch: self.epoch,
            phase: phase.to_string(),
            tau,
            ce,
            expected_lat_us: self.expected_latency()?,
            entropy_nats: self.supernet.entropy(),
            lr,
        })
    }

    /// Weight phase, then θ phase, then advance the epoch counter (which
    /// anneals the temperature). The weight phase is skipped in
    /// latency-only mode since the loss ignores the weights.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset, norm: &Normalization) -> Result<()> {
        let t0 = Instant::now();
        if self.hyper.loss_mode != LossMode::LatencyOnly {
            let m = self.train_weights_epoch(train, norm)?;
            self.history.push(m);
        }
        if let Some(m) = self.train_theta_epoch(val, norm)? {
            self.history.push(m);
        }
        self.theta_history.push(self.supernet.theta());
        info!(
            "epoch {} done in {:.1}s: tau {:.4}, E[lat] {:.1} us, entropy {:.3}",
            self.epoch,
            t0.elapsed().as_secs_f64(),
            self.tau(),
            self.expected_latency()?,
            self.supernet.entropy()
        );
        self.epoch += 1;
        Ok(())
    }
}

fn check_loss(loss: f64, epoch: usize, phase: &str) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence(format!(
            "loss {loss} in {phase} phase of epoch {epoch} (limit {DIVERGENCE_LIMIT})"
        )));
    }
    Ok(())
}

/// Full search: `hyper.epochs` alternating epochs on a seeded 80/20 split.
/// `on_epoch` runs after every epoch (e.g. to persist a checkpoint).
pub fn run_search<S: Scalar>(
    space: &SearchSpace,
    table: &LatencyTable,
    hyper: SearchHyperParams,
    dataset: &Dataset,
    norm: &Normalization,
    seed: u64,
    on_epoch: &mut dyn FnMut(&SearchState<S>) -> Result<()>,
) -> Result<SearchState<S>> {
    check_dataset(space, dataset)?;
    let (train, val) = crate::data::split(
        dataset,
        crate::data::SplitSpec {
            fraction: hyper.split_fraction,
            seed,
        },
    )?;
    if train.len() < 2 || val.len() < 2 {
        return Err(config_err!(
            "dataset too small: {} training and {} validation records",
            train.len(),
            val.len()
        ));
    }
    let mut state = SearchState::new(space, table, hyper, seed)?;
    while state.epoch < state.hyper.epochs {
        state.run_epoch(&train, &val, norm)?;
        on_epoch(&state)?;
    }
    Ok(state)
}

fn check_dataset(space: &SearchSpace, ds: &Dataset) -> Result<()> {
    let cfg = space.config();
    if ds.resolution() != cfg.input_resolution || cfg.in_channels != crate::data::CHANNELS {
        return Err(config_err!(
            "dataset is {}x{} with 3 channels, space expects {}x{} with {}",
            ds.resolution(),
            ds.resolution(),
            cfg.input_resolution,
            cfg.input_resolution,
            cfg.in_channels
        ));
    }
    if ds.classes() != space.num_classes() {
        return Err(config_err!(
            "dataset has {} classes, space has {}",
            ds.classes(),
            space.num_classes()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Learning-rate drops by 10x at these fractions of `epochs`.
    pub milestones: Vec<f64>,
    pub augment: bool,
    /// Repeats for the end-to-end latency measurement.
    pub bench_repeats: usize,
}

impl Default for RetrainParams {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
            dropout: 0.2,
            milestones: vec![0.25, 0.5, 0.75],
            augment: true,
            bench_repeats: 20,
        }
    }
}

impl RetrainParams {
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }
}

/// Final metrics of a retrained architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub top1: f64,
    pub param_count: usize,
    pub flops: usize,
    pub predicted_latency_us: Option<f64>,
    pub measured_latency_us: f64,
    pub epochs: usize,
    pub final_train_ce: Option<f64>,
}

/// Top-1 accuracy with running batch-norm statistics.
pub fn evaluate<S: Scalar>(net: &mut Network<S>, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(config_err!("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = make_batch::<S>(ds, chunk, norm);
        let logits = net.predict(x, BnMode::Eval)?;
        let m = logits.shape()[1];
        for (row, &l) in logits.data().chunks_exact(m).zip(&labels) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == l);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains `arch` from fresh weights on `train` and reports accuracy on
/// `test` alongside size and latency figures.
pub fn train_from_scratch<S: Scalar>(
    space: &SearchSpace,
    arch: &ArchDescriptor,
    train: &Dataset,
    test: &Dataset,
    norm: &Normalization,
    params: &RetrainParams,
    table: Option<&LatencyTable>,
    seed: u64,
) -> Result<(Network<S>, RetrainMetrics)> {
    check_dataset(space, train)?;
    check_dataset(space, test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = materialize::<S, _>(space, arch, &mut rng)?;
    let ids = net.param_ids();
    let mut opt = SgdMomentum::<S>::new(params.lr, params.momentum, params.weight_decay);
    let milestones = params.milestone_epochs();
    let mut final_ce = None;
    for epoch in 0..params.epochs {
        let lr = step_lr(epoch, &milestones, params.lr, 0.1);
        let (mut ce_sum, mut seen) = (0.0, 0usize);
        for idx in epoch_batches(train.len(), params.batch_size, &mut rng) {
            let (mut x, labels) = make_batch::<S>(train, &idx, norm);
            if params.augment {
                Augment::train().apply(&mut x, &mut rng);
            }
            let mut g = Graph::new(BnMode::Train);
            let xv = g.input(x)?;
            let dropout: Option<(f64, &mut dyn RngCore)> = Some((params.dropout, &mut rng));
            let logits = net.forward(&mut g, xv, dropout)?;
            let ce = g.cross_entropy(logits, &labels)?;
            let v = g.value(ce).data()[0].as_f64();
            check_loss(v, epoch, "retrain")?;
            let grads = g.backward(ce)?;
            let store = net.store_mut();
            store.zero_grad();
            store.accumulate(&grads);
            opt.step(store, &ids, lr)?;
            ce_sum += v * idx.len() as f64;
            seen += idx.len();
        }
        let mean = ce_sum / seen.max(1) as f64;
        info!("retrain epoch {epoch}: lr {lr:.4}, ce {mean:.4}");
        final_ce = Some(mean);
    }
    let top1 = evaluate(&mut net, test, norm, 256)?;
    let predicted_latency_us = table
        .map(|t| LatencyModel::resolve(t, space).and_then(|m| m.arch_latency(arch)))
        .transpose()?;
    let measured_latency_us = bench_network::<S>(space, arch, params.bench_repeats.max(5), 2)?;
    let metrics = RetrainMetrics {
        top1,
        param_count: net.param_count(),
        flops: net.flops(),
        predicted_latency_us,
        measured_latency_us,
        epochs: params.epochs,
        final_train_ce: final_ce,
    };
    Ok((net, metrics))
}
