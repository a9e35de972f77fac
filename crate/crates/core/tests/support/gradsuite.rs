// Finite-difference suite shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use dnas_core::blocks::{block_forward, BlockConfig, BlockKind, BlockWeights};
use dnas_core::latency::{required_keys, LatencyModel};
use dnas_core::nn::{BnMode, BnStats, GradCheck, GradCheckReport, Graph, ParamGroup, ParamStore, Var};
use dnas_core::space::{build_space, SearchSpace, SpaceConfig, StageConfig};
use dnas_core::supernet::sample_noise;
use dnas_core::trainer::latency_aware_loss;
use dnas_core::{LatencyTable, LossMode, Supernet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, &mut rng(seed))
}

/// Random linear functional of `v`, so every element gets a distinct gradient.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> dnas_core::Result<Var> {
    let r = g.input(randn(g.shape(v), seed ^ 0xabc))?;
    let p = g.mul(v, r)?;
    g.sum(p)
}

/// Two searchable layers at 8x8 input, 4 classes.
pub fn tiny_space() -> SearchSpace {
    let cfg = SpaceConfig {
        input_resolution: 8,
        in_channels: 3,
        channel_scale: 1.0,
        num_classes: 4,
        head_width: 16,
        stages: vec![
            StageConfig { f: 4, n: 1, s: 2, searchable: false },
            StageConfig { f: 4, n: 1, s: 1, searchable: true },
            StageConfig { f: 8, n: 1, s: 2, searchable: true },
        ],
    };
    build_space(&cfg).expect("tiny space builds")
}

/// Table with distinct made-up costs for every operator of `space`.
pub fn synthetic_table(space: &SearchSpace) -> LatencyTable {
    let entries = required_keys(space)
        .into_keys()
        .enumerate()
        .map(|(i, k)| {
            let us = if k.is_skip() { 0.0 } else { 5.0 + 3.7 * i as f64 };
            (k, us)
        });
    LatencyTable::from_entries("synthetic", space.config_hash(), entries).expect("valid table")
}

pub fn op_reports() -> Vec<(String, GradCheckReport)> {
    let gc = GradCheck::default();
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut push = |name: &str, r: dnas_core::Result<GradCheckReport>| {
        out.push((name.to_string(), r.unwrap_or_else(|e| panic!("{name}: {e}"))));
    };

    for (name, xs, ws, stride, pad, groups) in [
        ("conv2d 3x3 stride 2 grouped", [2, 4, 5, 5], [6, 2, 3, 3], 2, 1, 2),
        ("conv2d 1x1", [2, 3, 4, 4], [5, 3, 1, 1], 1, 0, 1),
        ("conv2d 5x5 depthwise", [1, 4, 6, 6], [4, 1, 5, 5], 1, 2, 4),
    ] {
        push(
            name,
            gc.leaves(&[randn(&xs, 1), randn(&ws, 2)], |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad, groups)?;
                project(g, y, 3)
            }),
        );
    }
    push("relu", gc.leaves(&[randn(&[3, 7], 4)], |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, 5)
    }));
    for mode in [BnMode::Train, BnMode::Batch, BnMode::Eval] {
        let mut stats = BnStats::<f64>::new(4);
        stats.mean = vec![0.1, -0.2, 0.3, 0.0];
        stats.var = vec![1.5, 0.7, 1.0, 2.0];
        let check = GradCheck { bn_mode: mode, ..gc };
        push(
            &format!("batch_norm {mode:?}"),
            check.leaves(&[randn(&[3, 4, 2, 2], 6), positive(&[4], 7), randn(&[4], 8)], |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], &mut stats)?;
                project(g, y, 9)
            }),
        );
    }
    push("channel_shuffle", gc.leaves(&[randn(&[2, 6, 2, 2], 10)], |g, v| {
        let y = g.channel_shuffle(v[0], 3)?;
        project(g, y, 11)
    }));
    push("avg_pool_global", gc.leaves(&[randn(&[2, 3, 3, 3], 12)], |g, v| {
        let y = g.avg_pool_global(v[0])?;
        project(g, y, 13)
    }));
    push("flatten", gc.leaves(&[randn(&[2, 3, 2, 2], 14)], |g, v| {
        let y = g.flatten(v[0])?;
        project(g, y, 15)
    }));
    push("linear", gc.leaves(&[randn(&[3, 5], 16), randn(&[5, 4], 17), randn(&[4], 18)], |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        project(g, y, 19)
    }));
    push("cross_entropy", gc.leaves(&[randn(&[4, 5], 20)], |g, v| g.cross_entropy(v[0], &[0, 3, 4, 1])));
    push("add", gc.leaves(&[randn(&[6], 21), randn(&[6], 22)], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 23)
    }));
    push("mul", gc.leaves(&[randn(&[6], 24), randn(&[6], 25)], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 26)
    }));
    push("scale", gc.leaves(&[randn(&[6], 27)], |g, v| {
        let y = g.scale(v[0], -1.7)?;
        project(g, y, 28)
    }));
    push("add_scalar", gc.leaves(&[randn(&[6], 29)], |g, v| {
        let y = g.add_scalar(v[0], 3.0)?;
        project(g, y, 30)
    }));
    push("ln", gc.leaves(&[positive(&[6], 31)], |g, v| {
        let y = g.ln(v[0])?;
        project(g, y, 32)
    }));
    push("powf", gc.leaves(&[positive(&[6], 33)], |g, v| {
        let y = g.powf(v[0], 0.6)?;
        project(g, y, 34)
    }));
    push("sum", gc.leaves(&[randn(&[2, 3], 35)], |g, v| {
        let s = g.sum(v[0])?;
        g.mul(s, s)
    }));
    push("dot_const", gc.leaves(&[randn(&[5], 36)], |g, v| {
        let d = g.dot_const(v[0], &[1.0, -2.0, 0.5, 4.0, 0.0])?;
        g.mul(d, d)
    }));
    push("softmax", gc.leaves(&[randn(&[5], 37)], |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, 38)
    }));
    push("tempered_softmax", gc.leaves(&[randn(&[5], 39)], |g, v| {
        let y = g.tempered_softmax(v[0], 0.7)?;
        project(g, y, 40)
    }));
    let noise = randn(&[5], 41).into_data();
    push("gumbel_softmax", gc.leaves(&[randn(&[5], 42)], |g, v| {
        let y = g.gumbel_softmax(v[0], &noise, 1.3)?;
        project(g, y, 43)
    }));
    push(
        "weighted_sum",
        gc.leaves(&[randn(&[2, 3], 44), randn(&[2, 3], 45), randn(&[2, 3], 46), randn(&[3], 47)], |g, v| {
            let y = g.weighted_sum(&v[..3], v[3])?;
            project(g, y, 48)
        }),
    );
    push("dropout", gc.leaves(&[randn(&[10], 49)], |g, v| {
        let y = g.dropout(v[0], 0.3, &mut rng(50))?;
        project(g, y, 51)
    }));
    for mode in [LossMode::Multiplicative, LossMode::Additive, LossMode::LatencyOnly] {
        push(
            &format!("latency_aware_loss {mode:?}"),
            gc.leaves(&[Tensor::scalar(1.3), Tensor::scalar(320.0)], |g, v| {
                latency_aware_loss(g, v[0], v[1], 0.2, 0.6, mode)
            }),
        );
    }
    let space = tiny_space();
    let model = LatencyModel::resolve(&synthetic_table(&space), &space).expect("covered");
    let masks: Vec<Tensor<f64>> = space
        .slots()
        .iter()
        .enumerate()
        .map(|(i, s)| positive(&[s.candidates.len()], 52 + i as u64))
        .collect();
    push("expected_latency", gc.leaves(&masks, |g, v| {
        let l = model.expected_latency(g, v)?;
        g.ln(l)
    }));

    let mut block_cases: Vec<(BlockKind, usize, usize)> = BlockKind::ALL
        .into_iter()
        .filter(|&k| k != BlockKind::Skip)
        .map(|k| (k, 6, 2))
        .collect();
    // Residual variants.
    block_cases.extend([(BlockKind::K3E6, 4, 1), (BlockKind::K5E1G2, 4, 1), (BlockKind::Skip, 4, 1)]);
    for (kind, c_out, stride) in block_cases {
        let cfg = BlockConfig::new(kind, 4, c_out, stride).expect("valid block");
        let mut store = ParamStore::<f64>::new();
        let w = BlockWeights::new(cfg, &mut store, "b", &mut rng(60)).expect("block");
        let x = randn(&[2, 4, 4, 4], 61);
        let ids = store.ids(ParamGroup::Weights);
        let r = if ids.is_empty() {
            gc.leaves(&[x], |g, v| {
                let y = block_forward(&w, g, &mut store, v[0])?;
                project(g, y, 62)
            })
        } else {
            gc.params(&mut store, &ids, |s| s, |s, g| {
                let xv = g.leaf(x.clone())?;
                let y = block_forward(&w, g, s, xv)?;
                project(g, y, 62)
            })
        };
        push(&format!("block {kind} stride {stride}"), r);
    }
    out
}

/// Composed loss of a two-layer supernet with frozen Gumbel noise,
/// checked with respect to every θ entry and sampled operator weights.
pub fn supernet_report() -> GradCheckReport {
    let space = tiny_space();
    let model = LatencyModel::resolve(&synthetic_table(&space), &space).expect("covered");
    let mut r = rng(70);
    let mut net = Supernet::<f64>::new(&space, &mut r).expect("supernet");
    let theta: Vec<Vec<f64>> = space
        .slots()
        .iter()
        .map(|s| (0..s.candidates.len()).map(|j| 0.3 * ((j * 7 % 5) as f64 - 2.0)).collect())
        .collect();
    net.set_theta(&theta).expect("theta shape");
    let noise = sample_noise(&space, &mut r);
    let x = Tensor::randn(&space.input_shape(4), 1.0, &mut r);
    let labels = [0, 1, 2, 3];
    let mut ids = net.theta_ids().to_vec();
    ids.extend(net.weight_ids());
    let gc = GradCheck {
        bn_mode: BnMode::Batch,
        max_elems: 6,
        ..GradCheck::default()
    };
    gc.params(&mut net, &ids, |n| n.store_mut(), |n, g| {
        let xv = g.input(x.clone())?;
        let (logits, masks) = n.forward(g, xv, &noise, 1.5)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let lat = model.expected_latency(g, &masks)?;
        latency_aware_loss(g, ce, lat, 0.2, 0.6, LossMode::Multiplicative)
    })
    .expect("supernet gradient check runs")
}
