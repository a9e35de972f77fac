//! Central finite-difference checks of tape gradients, in `f64`.

use super::graph::{BnMode, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Step size, error floor and sampling budget for a check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub floor: f64,
    /// Elements probed per tensor; larger tensors are strided.
    pub max_elems: usize,
    pub bn_mode: BnMode,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-5,
            max_elems: 64,
            bn_mode: BnMode::Train,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst element.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64, place: impl FnOnce() -> String) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", place());
        }
    }
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(config_err!("gradient check needs a scalar loss, got shape {:?}", t.shape()));
    }
    Ok(t.data()[0])
}

impl GradCheck {
    /// Checks `d f / d inputs` where `f` builds a scalar from leaves.
    pub fn leaves<F>(&self, inputs: &[Tensor<f64>], mut f: F) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let analytic: Vec<Vec<f64>> = {
            let mut g = Graph::new(self.bn_mode);
            let vars = inputs.iter().map(|x| g.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
            let loss = f(&mut g, &vars)?;
            scalar_of(&g, loss)?;
            let grads = g.backward(loss)?;
            vars.iter()
                .zip(inputs)
                .map(|(&v, x)| grads.wrt(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
                .collect()
        };
        let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new(self.bn_mode);
            let vars = xs.iter().map(|x| g.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
            let loss = f(&mut g, &vars)?;
            scalar_of(&g, loss)
        };
        let mut report = GradCheckReport::default();
        let mut work = inputs.to_vec();
        for (i, x) in inputs.iter().enumerate() {
            for j in probe_indices(x.len(), self.max_elems) {
                let orig = x.data()[j];
                work[i].data_mut()[j] = orig + self.eps;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.eps;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                report.record(analytic[i][j], numeric, self.floor, || format!("input {i}[{j}]"));
            }
        }
        Ok(report)
    }

    /// Checks gradients of parameters `ids` held by `model`'s store.
    /// `loss` must record every parameter through [`Graph::param`].
    pub fn params<M, St, F>(&self, model: &mut M, ids: &[ParamId], store: St, mut loss: F) -> Result<GradCheckReport>
    where
        St: Fn(&mut M) -> &mut ParamStore<f64>,
        F: FnMut(&mut M, &mut Graph<f64>) -> Result<Var>,
    {
        let mut g = Graph::new(self.bn_mode);
        let out = loss(model, &mut g)?;
        scalar_of(&g, out)?;
        let grads = g.backward(out)?;
        let mut analytic: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store(model).get(id).len()]).collect();
        for (id, grad) in grads.params() {
            if let Some(k) = ids.iter().position(|&i| i == id) {
                for (a, &g) in analytic[k].iter_mut().zip(grad) {
                    *a += g;
                }
            }
        }
        let mut report = GradCheckReport::default();
        for (k, &id) in ids.iter().enumerate() {
            let len = store(model).get(id).len();
            for j in probe_indices(len, self.max_elems) {
                let orig = store(model).get(id).data()[j];
                let mut at = |v: f64, model: &mut M| -> Result<f64> {
                    store(model).get_mut(id).data_mut()[j] = v;
                    let mut g = Graph::new(self.bn_mode);
                    let out = loss(model, &mut g)?;
                    scalar_of(&g, out)
                };
                let plus = at(orig + self.eps, model)?;
                let minus = at(orig - self.eps, model)?;
                store(model).get_mut(id).data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let name = store(model).name(id).to_string();
                report.record(analytic[k][j], numeric, self.floor, || format!("{name}[{j}]"));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_correct_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = GradCheck::default()
            .leaves(&[x], |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            })
            .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn strided_probing() {
        assert_eq!(probe_indices(3, 5), vec![0, 1, 2]);
        assert_eq!(probe_indices(10, 5), vec![0, 2, 4, 6, 8]);
    }
}
