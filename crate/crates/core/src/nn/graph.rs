//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. [`Graph::backward`] consumes the tape, walks it in reverse and
//! returns the accumulated [`Gradients`]. Fan-out is handled by summing
//! contributions into the input's gradient buffer.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::params::{BnStats, ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch normalization treats its statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with batch statistics, leave running averages untouched.
    Batch,
    /// Normalize with the running averages.
    Eval,
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    AvgPoolGlobal {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    AddScalar {
        x: Var,
    },
    Ln {
        x: Var,
    },
    Powf {
        x: Var,
        p: S,
    },
    Sum {
        x: Var,
    },
    DotConst {
        x: Var,
        coeffs: Vec<S>,
    },
    TemperedSoftmax {
        x: Var,
        tau: S,
    },
    WeightedSum {
        xs: Vec<Var>,
        weights: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelShuffle { .. } => "channel_shuffle",
            Op::AvgPoolGlobal { .. } => "avg_pool_global",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Ln { .. } => "ln",
            Op::Powf { .. } => "powf",
            Op::Sum { .. } => "sum",
            Op::DotConst { .. } => "dot_const",
            Op::TemperedSoftmax { .. } => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(Var, ParamId)>,
    bn_mode: BnMode,
    frozen: Vec<ParamGroup>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(Var, ParamId)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of each parameter leaf, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params
            .iter()
            .filter_map(|(v, id)| self.grads[v.0].as_deref().map(|g| (*id, g)))
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    config_err!("{op}: {detail}")
}

impl<S: Scalar> Graph<S> {
    pub fn new(bn_mode: BnMode) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bn_mode,
            frozen: Vec::new(),
        }
    }

    /// Parameters of `group` become constants: no gradient is computed
    /// for them or for values depending only on them.
    pub fn freeze(mut self, group: ParamGroup) -> Self {
        self.frozen.push(group);
        self
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite output from {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked, e.g. a mask probed in a test.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let needs = !self.frozen.contains(&store.group(id));
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((v, id));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let t = Tensor::new(&geom.out_shape(), out)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(t, Op::Conv2d { x, w, geom }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let t = Tensor::new(src.shape(), data)?;
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// Per-channel batch normalization of an `[N,C,H,W]` tensor.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats<S>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if stats.mean.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("running stats hold {} channels, input has {c}", stats.mean.len()),
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let batch_stats = self.bn_mode != BnMode::Eval;
        if batch_stats && m < 2 {
            return Err(shape_err(
                "batch_norm",
                format!("training mode needs N*H*W >= 2, got {m}"),
            ));
        }
        let eps = S::lit(BN_EPS);
        let src = self.value(x).data();
        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        let mut xhat = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); c];
        let mf = S::from_usize(m).unwrap();
        for ch in 0..c {
            let (mean, var) = if batch_stats {
                let mut sum = S::zero();
                for b in 0..n {
                    sum += src[(b * c + ch) * hw..][..hw].iter().copied().sum::<S>();
                }
                let mean = sum / mf;
                let mut sq = S::zero();
                for b in 0..n {
                    for &v in &src[(b * c + ch) * hw..][..hw] {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                (mean, sq / mf)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let istd = S::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (src[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = gamma_v[ch] * xh + beta_v[ch];
                }
            }
            if self.bn_mode == BnMode::Train {
                let mom = S::lit(BN_MOMENTUM);
                let unbiased = var * mf / (mf - S::one());
                stats.mean[ch] = (S::one() - mom) * stats.mean[ch] + mom * mean;
                stats.var[ch] = (S::one() - mom) * stats.var[ch] + mom * unbiased;
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        )
    }

    /// Interleaves `groups` channel groups: input channel `g*cpg + j` moves
    /// to position `j*groups + g`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(
                "channel_shuffle",
                format!("{c} channels not divisible by {groups} groups"),
            ));
        }
        let src = self.value(x).data();
        let out = shuffle_channels(src, n, c, h * w, groups, false);
        let t = Tensor::new(&[n, c, h, w], out)?;
        let needs = self.needs(x);
        self.push(t, Op::ChannelShuffle { x, groups }, needs)
    }

    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err("avg_pool_global", "empty spatial extent".into()));
        }
        let scale = S::one() / S::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<S>() * scale)
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], out)?;
        let needs = self.needs(x);
        self.push(t, Op::AvgPoolGlobal { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::clone(self.value(x)).reshape(shape)?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape { x }, needs)
    }

    /// `[N,C,H,W] -> [N, C*H*W]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `x [N,D] * w [D,M] + b [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, d, m) = match (xs, ws, bs) {
            ([n, d], [d2, m], [m2]) if d == d2 && m == m2 => (*n, *d, *m),
            _ => {
                return Err(shape_err(
                    "linear",
                    format!("input {xs:?}, weight {ws:?}, bias {bs:?} do not compose"),
                ))
            }
        };
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        // SAFETY: extents match the slices validated above.
        unsafe {
            S::gemm(
                n,
                d,
                m,
                S::one(),
                self.value(x).data().as_ptr(),
                d as isize,
                1,
                self.value(w).data().as_ptr(),
                m as isize,
                1,
                S::one(),
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        let t = Tensor::new(&[n, m], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, Op::Linear { x, w, b }, needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, m] = self.shape(logits)[..] else {
            return Err(shape_err(
                "cross_entropy",
                format!("logits must be [N,M], got {:?}", self.shape(logits)),
            ));
        };
        if labels.len() != n {
            return Err(Error::Input(format!(
                "cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= m) {
            return Err(Error::Input(format!(
                "cross_entropy: label {l} at index {i} out of range for {m} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); n * m];
        let mut loss = S::zero();
        for (row, (&label, p)) in src.chunks(m).zip(labels.iter().zip(probs.chunks_mut(m))) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss += z.ln() + max - row[label];
        }
        loss /= S::from_usize(n).unwrap();
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v + c).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        self.push(t, Op::AddScalar { x }, needs)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v <= S::zero()) {
            return Err(Error::Domain(format!("ln of non-positive value {v}")));
        }
        let data = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        self.push(t, Op::Ln { x }, needs)
    }

    /// `x^p` for positive `x`.
    pub fn powf(&mut self, x: Var, p: S) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v <= S::zero()) {
            return Err(Error::Domain(format!("powf of non-positive base {v}")));
        }
        let data = self.value(x).data().iter().map(|&v| v.powf(p)).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        self.push(t, Op::Powf { x, p }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// `sum_i x_i * coeffs_i` with constant coefficients; accumulates in
    /// index order.
    pub fn dot_const(&mut self, x: Var, coeffs: &[S]) -> Result<Var> {
        let src = self.value(x).data();
        if src.len() != coeffs.len() {
            return Err(shape_err(
                "dot_const",
                format!("{} values vs {} coefficients", src.len(), coeffs.len()),
            ));
        }
        let mut acc = S::zero();
        for (&v, &c) in src.iter().zip(coeffs) {
            acc += v * c;
        }
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(acc),
            Op::DotConst {
                x,
                coeffs: coeffs.to_vec(),
            },
            needs,
        )
    }

    /// Softmax of a 1-D vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.tempered_softmax(x, S::one())
    }

    /// `softmax(x / tau)` of a 1-D vector.
    pub fn tempered_softmax(&mut self, x: Var, tau: S) -> Result<Var> {
        if !(tau > S::zero()) {
            return Err(config_err!("softmax temperature must be > 0, got {tau}"));
        }
        let out = softmax_slice(self.value(x).data(), tau);
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x);
        self.push(t, Op::TemperedSoftmax { x, tau }, needs)
    }

    /// Gumbel-Softmax relaxation `softmax((logits + noise) / tau)` with the
    /// noise draw held fixed (a constant input of the graph).
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &[S], tau: S) -> Result<Var> {
        if noise.len() != self.value(logits).len() {
            return Err(shape_err(
                "gumbel_softmax",
                format!(
                    "{} noise values for {} logits",
                    noise.len(),
                    self.value(logits).len()
                ),
            ));
        }
        let noise_var = self.input(Tensor::new(self.shape(logits), noise.to_vec())?)?;
        let perturbed = self.add(logits, noise_var)?;
        self.tempered_softmax(perturbed, tau)
    }

    /// `sum_i weights[i] * xs[i]`, summed in index order.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: Var) -> Result<Var> {
        if xs.is_empty() || self.value(weights).len() != xs.len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} inputs vs {} weights", xs.len(), self.value(weights).len()),
            ));
        }
        let shape = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(shape_err(
                    "weighted_sum",
                    format!("input shapes {:?} and {:?} differ", shape, self.shape(x)),
                ));
            }
        }
        let wv = self.value(weights).data();
        let mut out = vec![S::zero(); self.value(xs[0]).len()];
        for (&x, &m) in xs.iter().zip(wv) {
            for (o, &v) in out.iter_mut().zip(self.value(x).data()) {
                *o += m * v;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(weights) || xs.iter().any(|&x| self.needs(x));
        self.push(
            t,
            Op::WeightedSum {
                xs: xs.to_vec(),
                weights,
            },
            needs,
        )
    }

    /// Inverted dropout: zeroes with probability `p`, rescales survivors.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability must be in [0,1), got {p}"));
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, needs)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(config_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            if !dy.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at {} (node {i})",
                    node.op.name()
                )));
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params,
        })
    }

    fn backprop_node(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
            f(slot);
        };
        let add_into = |dst: &mut [S], src: &[S]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                if self.needs(*x) {
                    let dx = kernels::conv2d_backward_input(geom, val(*w), dy);
                    acc(*x, &mut |g| add_into(g, &dx));
                }
                if self.needs(*w) {
                    let dw = kernels::conv2d_backward_weight(geom, val(*x), dy);
                    acc(*w, &mut |g| add_into(g, &dw));
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > S::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let hw = h * w;
                let mf = S::from_usize(n * hw).unwrap();
                let gv = val(*gamma);
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |g| add_into(g, &sum_dy_xhat));
                acc(*beta, &mut |g| add_into(g, &sum_dy));
                acc(*x, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + hw {
                                if *batch_stats {
                                    g[i] += k / mf
                                        * (mf * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                                } else {
                                    g[i] += k * dy[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelShuffle { x, groups } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let back = shuffle_channels(dy, n, c, h * w, *groups, true);
                acc(*x, &mut |g| add_into(g, &back));
            }
            Op::AvgPoolGlobal { x } => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4();
                let hw = h * w;
                let scale = S::one() / S::from_usize(hw).unwrap();
                acc(*x, &mut |g| {
                    for (plane, &d) in g.chunks_mut(hw).zip(dy) {
                        for v in plane {
                            *v += d * scale;
                        }
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |g| add_into(g, dy)),
            Op::Linear { x, w, b } => {
                let [n, d] = self.nodes[x.0].value.shape()[..] else {
                    unreachable!()
                };
                let m = self.nodes[b.0].value.len();
                acc(*b, &mut |g| {
                    for row in dy.chunks(m) {
                        add_into(g, row);
                    }
                });
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |g| {
                    // dx [N,D] += dy [N,M] * w^T [M,D]
                    unsafe {
                        S::gemm(
                            n,
                            m,
                            d,
                            S::one(),
                            dy.as_ptr(),
                            m as isize,
                            1,
                            wv.as_ptr(),
                            1,
                            m as isize,
                            S::one(),
                            g.as_mut_ptr(),
                            d as isize,
                            1,
                        );
                    }
                });
                acc(*w, &mut |g| {
                    // dw [D,M] += x^T [D,N] * dy [N,M]
                    unsafe {
                        S::gemm(
                            d,
                            n,
                            m,
                            S::one(),
                            xv.as_ptr(),
                            1,
                            d as isize,
                            dy.as_ptr(),
                            m as isize,
                            1,
                            S::one(),
                            g.as_mut_ptr(),
                            m as isize,
                            1,
                        );
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let m = probs.len() / n.max(1);
                let k = dy[0] / S::from_usize(n).unwrap();
                acc(*logits, &mut |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            g[r * m + j] += k * (probs[r * m + j] - onehot);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *d += s * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(dy).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |g| {
                for (d, &s) in g.iter_mut().zip(dy) {
                    *d += s * *c;
                }
            }),
            Op::AddScalar { x } => acc(*x, &mut |g| add_into(g, dy)),
            Op::Ln { x } => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *d += s / v;
                    }
                });
            }
            Op::Powf { x, p } => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *d += s * *p * v.powf(*p - S::one());
                    }
                });
            }
            Op::Sum { x } => acc(*x, &mut |g| {
                for d in g.iter_mut() {
                    *d += dy[0];
                }
            }),
            Op::DotConst { x, coeffs } => acc(*x, &mut |g| {
                for (d, &c) in g.iter_mut().zip(coeffs) {
                    *d += dy[0] * c;
                }
            }),
            Op::TemperedSoftmax { x, tau } => {
                let y = node.value.data();
                let inner: S = dy.iter().zip(y).map(|(&d, &v)| d * v).sum();
                acc(*x, &mut |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(dy).zip(y) {
                        *d += v * (s - inner) / *tau;
                    }
                });
            }
            Op::WeightedSum { xs, weights } => {
                let wv = val(*weights);
                for (i, &x) in xs.iter().enumerate() {
                    let m = wv[i];
                    acc(x, &mut |g| {
                        for (d, &s) in g.iter_mut().zip(dy) {
                            *d += m * s;
                        }
                    });
                }
                if self.needs(*weights) {
                    let dots: Vec<S> = xs
                        .iter()
                        .map(|&x| val(x).iter().zip(dy).map(|(&v, &s)| v * s).sum())
                        .collect();
                    acc(*weights, &mut |g| add_into(g, &dots));
                }
            }
            Op::Dropout { x, mask } => acc(*x, &mut |g| {
                for ((d, &s), &m) in g.iter_mut().zip(dy).zip(mask) {
                    *d += s * m;
                }
            }),
        }
    }
}

/// Numerically stable `softmax(x / tau)`.
pub fn softmax_slice<S: Scalar>(x: &[S], tau: S) -> Vec<S> {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = x.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: S = out.iter().copied().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Channel shuffle permutation (`inverse = true` undoes it).
pub fn shuffle_channels<S: Scalar>(
    src: &[S],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    inverse: bool,
) -> Vec<S> {
    let cpg = c / groups;
    let mut out = vec![S::zero(); src.len()];
    for b in 0..n {
        for g in 0..groups {
            for j in 0..cpg {
                let from = g * cpg + j;
                let to = j * groups + g;
                let (s, d) = if inverse { (to, from) } else { (from, to) };
                out[(b * c + d) * hw..][..hw].copy_from_slice(&src[(b * c + s) * hw..][..hw]);
            }
        }
    }
    out
}
