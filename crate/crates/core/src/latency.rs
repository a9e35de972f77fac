//! Host-measured operator latencies and the additive cost model built on
//! them.
//!
//! Every searchable candidate and every fixed operator of a space is timed
//! once per distinct [`LatencyKey`] at batch size 1. An architecture's
//! latency is the sum of its operators' entries; the relaxed (expected)
//! latency weighs each candidate's entry by its mask value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, BlockConfig, BlockKind, BlockWeights, FixedOp, FixedWeights};
use crate::error::{config_err, Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::network::materialize;
use crate::nn::{BnMode, Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::space::{ArchDescriptor, LayerPlan, SearchSpace};

pub const KIND_CONV3X3: &str = "conv3x3";
pub const KIND_HEAD: &str = "head_conv1x1";
pub const KIND_CLASSIFIER: &str = "pool_fc";

pub const DEFAULT_REPEATS: usize = 50;
pub const DEFAULT_WARMUP: usize = 10;

/// Identifies one benchmarked operator instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatencyKey {
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl LatencyKey {
    pub fn block(cfg: &BlockConfig, (h, w): (usize, usize)) -> Self {
        Self {
            kind: cfg.kind.as_str().to_string(),
            c_in: cfg.c_in,
            c_out: cfg.c_out,
            stride: cfg.stride,
            h,
            w,
        }
    }

    pub fn fixed(op: &FixedOp, (h, w): (usize, usize)) -> Self {
        let (kind, c_in, c_out) = match *op {
            FixedOp::Conv3x3 { c_in, c_out, .. } => (KIND_CONV3X3, c_in, c_out),
            FixedOp::HeadConv { c_in, c_out } => (KIND_HEAD, c_in, c_out),
            FixedOp::Classifier { c_in, classes } => (KIND_CLASSIFIER, c_in, classes),
        };
        Self {
            kind: kind.to_string(),
            c_in,
            c_out,
            stride: op.stride(),
            h,
            w,
        }
    }

    pub fn is_skip(&self) -> bool {
        self.kind == BlockKind::Skip.as_str()
    }
}

impl fmt::Display for LatencyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(c_in={}, c_out={}, stride={}, {}x{})",
            self.kind, self.c_in, self.c_out, self.stride, self.h, self.w
        )
    }
}

/// What to run for a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Block(BlockConfig),
    Fixed(FixedOp),
}

/// All distinct operators a space needs, keyed and deduplicated.
pub fn required_keys(space: &SearchSpace) -> BTreeMap<LatencyKey, (Operator, (usize, usize))> {
    let mut keys = BTreeMap::new();
    for item in space.plan() {
        match *item {
            LayerPlan::Fixed { op, input_hw } => {
                keys.insert(LatencyKey::fixed(&op, input_hw), (Operator::Fixed(op), input_hw));
            }
            LayerPlan::Searchable { slot } => {
                let s = &space.slots()[slot];
                for cfg in &s.candidates {
                    keys.insert(LatencyKey::block(cfg, s.input_hw), (Operator::Block(*cfg), s.input_hw));
                }
            }
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    #[serde(flatten)]
    pub key: LatencyKey,
    pub latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableFile {
    device_label: String,
    created_unix: u64,
    repeats: usize,
    warmup: usize,
    aggregation: String,
    space_config_hash: String,
    entries: Vec<LatencyEntry>,
}

/// Per-operator latency in microseconds for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    pub device_label: String,
    pub created_unix: u64,
    pub repeats: usize,
    pub warmup: usize,
    pub aggregation: String,
    pub space_config_hash: String,
    entries: BTreeMap<LatencyKey, f64>,
}

impl LatencyTable {
    /// Builds a table from explicit entries. Non-skip entries must be
    /// positive and finite; skip entries must be exactly zero.
    pub fn from_entries(
        device_label: impl Into<String>,
        space_config_hash: impl Into<String>,
        entries: impl IntoIterator<Item = (LatencyKey, f64)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in entries {
            check_entry(&k, v)?;
            map.insert(k, v);
        }
        Ok(Self {
            device_label: device_label.into(),
            created_unix: 0,
            repeats: 0,
            warmup: 0,
            aggregation: "median".to_string(),
            space_config_hash: space_config_hash.into(),
            entries: map,
        })
    }

    pub fn get(&self, key: &LatencyKey) -> Result<f64> {
        self.entries
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingLatency(key.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&LatencyKey, f64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails unless the table was built for `space`.
    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.space_config_hash != space.config_hash() {
            return Err(config_err!(
                "latency table was built for space {} but the search space hash is {}",
                self.space_config_hash,
                space.config_hash()
            ));
        }
        Ok(())
    }

    /// Fails naming the first operator of `space` without an entry.
    pub fn check_coverage(&self, space: &SearchSpace) -> Result<()> {
        for key in required_keys(space).keys() {
            self.get(key)?;
        }
        Ok(())
    }

    fn to_file(&self) -> TableFile {
        TableFile {
            device_label: self.device_label.clone(),
            created_unix: self.created_unix,
            repeats: self.repeats,
            warmup: self.warmup,
            aggregation: self.aggregation.clone(),
            space_config_hash: self.space_config_hash.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, &v)| LatencyEntry {
                    key: k.clone(),
                    latency_us: v,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        crate::io::to_json_pretty(&self.to_file())
    }

    pub fn from_json(bytes: &[u8], origin: &Path) -> Result<Self> {
        let file: TableFile = serde_json::from_slice(bytes).map_err(|e| Error::json(origin, e))?;
        let mut entries = BTreeMap::new();
        for e in file.entries {
            check_entry(&e.key, e.latency_us)?;
            if entries.insert(e.key.clone(), e.latency_us).is_some() {
                return Err(config_err!("duplicate latency entry for {}", e.key));
            }
        }
        Ok(Self {
            device_label: file.device_label,
            created_unix: file.created_unix,
            repeats: file.repeats,
            warmup: file.warmup,
            aggregation: file.aggregation,
            space_config_hash: file.space_config_hash,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json_atomic(path, &self.to_file())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,c_in,c_out,stride,h,w,latency_us\n");
        for (k, v) in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                k.kind, k.c_in, k.c_out, k.stride, k.h, k.w, v
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

fn check_entry(key: &LatencyKey, v: f64) -> Result<()> {
    let ok = if key.is_skip() { v == 0.0 } else { v.is_finite() && v > 0.0 };
    if ok {
        Ok(())
    } else {
        Err(config_err!("invalid latency {v} for {key}"))
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    static RES: OnceLock<Duration> = OnceLock::new();
    *RES.get_or_init(|| {
        let mut best = Duration::from_secs(1);
        for _ in 0..200 {
            let t0 = Instant::now();
            let mut t1 = Instant::now();
            while t1 == t0 {
                t1 = Instant::now();
            }
            best = best.min(t1 - t0);
        }
        best.max(Duration::from_nanos(1))
    })
}

/// Median per-call time of `f` in microseconds. Each sample repeats `f`
/// enough times to last at least 100 timer ticks.
pub fn time_median<F: FnMut() -> Result<()>>(mut f: F, repeats: usize, warmup: usize) -> Result<f64> {
    if repeats < 5 || warmup < 1 {
        return Err(config_err!(
            "benchmarking needs repeats >= 5 and warmup >= 1, got {repeats} and {warmup}"
        ));
    }
    for _ in 0..warmup {
        f()?;
    }
    let floor = timer_resolution() * 100;
    let mut inner = 1usize;
    loop {
        let t0 = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        if t0.elapsed() >= floor || inner >= 1 << 24 {
            break;
        }
        inner *= 2;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(t0.elapsed().as_secs_f64() * 1e6 / inner as f64);
    }
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    // A positive entry is required even for operators below clock precision.
    Ok(median.max(1e-3))
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| config_err!("cannot build benchmark thread pool: {e}"))?;
    Ok(pool.install(f))
}

/// Median eval-mode latency of one block at batch size 1, in microseconds.
/// Skip blocks are 0 by definition and never timed.
pub fn bench_block<S: Scalar>(cfg: &BlockConfig, hw: (usize, usize), repeats: usize, warmup: usize) -> Result<f64> {
    cfg.validate()?;
    if cfg.kind == BlockKind::Skip {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let mut store = ParamStore::<S>::new();
    let w = BlockWeights::new(*cfg, &mut store, "bench", &mut rng)?;
    let x = Tensor::<S>::randn(&[1, cfg.c_in, hw.0, hw.1], 1.0, &mut rng);
    single_threaded(|| {
        time_median(
            || {
                let mut g = Graph::new(BnMode::Eval).freeze(ParamGroup::Weights);
                let xv = g.input(x.clone())?;
                block_forward(&w, &mut g, &mut store, xv).map(|_| ())
            },
            repeats,
            warmup,
        )
    })?
}

/// Median eval-mode latency of a fixed operator at batch size 1.
pub fn bench_fixed<S: Scalar>(op: &FixedOp, hw: (usize, usize), repeats: usize, warmup: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let mut store = ParamStore::<S>::new();
    let w = FixedWeights::new(*op, &mut store, "bench", &mut rng);
    let c_in = match *op {
        FixedOp::Conv3x3 { c_in, .. } | FixedOp::HeadConv { c_in, .. } | FixedOp::Classifier { c_in, .. } => c_in,
    };
    let x = Tensor::<S>::randn(&[1, c_in, hw.0, hw.1], 1.0, &mut rng);
    single_threaded(|| {
        time_median(
            || {
                let mut g = Graph::new(BnMode::Eval).freeze(ParamGroup::Weights);
                let xv = g.input(x.clone())?;
                w.forward(&mut g, &mut store, xv, None).map(|_| ())
            },
            repeats,
            warmup,
        )
    })?
}

/// Median end-to-end latency of a materialized architecture at batch 1.
pub fn bench_network<S: Scalar>(space: &SearchSpace, arch: &ArchDescriptor, repeats: usize, warmup: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let mut net = materialize::<S, _>(space, arch, &mut rng)?;
    let x = Tensor::<S>::randn(&space.input_shape(1), 1.0, &mut rng);
    single_threaded(|| {
        time_median(
            || {
                let mut g = Graph::new(BnMode::Eval).freeze(ParamGroup::Weights);
                let xv = g.input(x.clone())?;
                net.forward(&mut g, xv, None).map(|_| ())
            },
            repeats,
            warmup,
        )
    })?
}

/// Benchmarks every distinct operator of `space` sequentially on this host.
pub fn build_lut(space: &SearchSpace, repeats: usize, warmup: usize, device_label: &str) -> Result<LatencyTable> {
    let keys = required_keys(space);
    let mut entries = BTreeMap::new();
    for (i, (key, (op, hw))) in keys.iter().enumerate() {
        let us = match op {
            Operator::Block(cfg) => bench_block::<f32>(cfg, *hw, repeats, warmup)?,
            Operator::Fixed(f) => bench_fixed::<f32>(f, *hw, repeats, warmup)?,
        };
        debug!("[{}/{}] {key}: {us:.3} us", i + 1, keys.len());
        entries.insert(key.clone(), us);
    }
    soft_check_ordering(&entries);
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(LatencyTable {
        device_label: device_label.to_string(),
        created_unix,
        repeats,
        warmup,
        aggregation: "median".to_string(),
        space_config_hash: space.config_hash().to_string(),
        entries,
    })
}

/// Warns when the widest block is measured faster than the narrowest one
/// at the same shape; host noise can cause this, so it is not an error.
fn soft_check_ordering(entries: &BTreeMap<LatencyKey, f64>) {
    for (k, &v) in entries {
        if k.kind != BlockKind::K5E6.as_str() {
            continue;
        }
        let small = LatencyKey {
            kind: BlockKind::K3E1.as_str().to_string(),
            ..k.clone()
        };
        if let Some(&s) = entries.get(&small) {
            if v < s {
                warn!("{k} measured faster ({v:.2} us) than k3_e1 ({s:.2} us)");
            }
        }
    }
}

/// A latency table resolved against one search space, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    items: Vec<Resolved>,
    slots: Vec<Vec<f64>>,
    kinds: Vec<Vec<BlockKind>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Resolved {
    Fixed { name: String, us: f64 },
    Slot(usize),
}

/// One line of a per-layer latency breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownRow {
    pub layer: String,
    pub kind: String,
    pub latency_us: f64,
}

impl LatencyModel {
    /// Looks up every operator of `space`; a missing entry is an error
    /// naming its key.
    pub fn resolve(table: &LatencyTable, space: &SearchSpace) -> Result<Self> {
        let mut items = Vec::with_capacity(space.plan().len());
        for item in space.plan() {
            match *item {
                LayerPlan::Fixed { op, input_hw } => {
                    let key = LatencyKey::fixed(&op, input_hw);
                    items.push(Resolved::Fixed {
                        us: table.get(&key)?,
                        name: key.kind,
                    });
                }
                LayerPlan::Searchable { slot } => items.push(Resolved::Slot(slot)),
            }
        }
        let mut slots = Vec::with_capacity(space.slots().len());
        let mut kinds = Vec::with_capacity(space.slots().len());
        for s in space.slots() {
            let costs = s
                .candidates
                .iter()
                .map(|c| table.get(&LatencyKey::block(c, s.input_hw)))
                .collect::<Result<Vec<_>>>()?;
            slots.push(costs);
            kinds.push(s.candidates.iter().map(|c| c.kind).collect());
        }
        Ok(Self { items, slots, kinds })
    }

    /// Candidate latencies of searchable layer `slot`, in candidate order.
    pub fn slot_costs(&self, slot: usize) -> &[f64] {
        &self.slots[slot]
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Summed latency of the fixed operators.
    pub fn fixed_total(&self) -> f64 {
        let mut acc = 0.0;
        for item in &self.items {
            if let Resolved::Fixed { us, .. } = item {
                acc += us;
            }
        }
        acc
    }

    /// Index of the cheapest candidate per layer (first on ties).
    pub fn argmin_choices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|c| {
                let mut best = 0;
                for (i, &v) in c.iter().enumerate() {
                    if v < c[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    fn check_choices(&self, choices: &[usize]) -> Result<()> {
        if choices.len() != self.slots.len() {
            return Err(config_err!(
                "architecture has {} choices, space has {} searchable layers",
                choices.len(),
                self.slots.len()
            ));
        }
        for (l, (&c, costs)) in choices.iter().zip(&self.slots).enumerate() {
            if c >= costs.len() {
                return Err(config_err!("layer {l}: candidate {c} out of range ({} candidates)", costs.len()));
            }
        }
        Ok(())
    }

    /// Sum of per-operator latencies for `choices`, in network order.
    pub fn latency_of(&self, choices: &[usize]) -> Result<f64> {
        self.check_choices(choices)?;
        let mut acc = 0.0;
        for item in &self.items {
            match item {
                Resolved::Fixed { us, .. } => acc += us,
                Resolved::Slot(l) => acc += self.slots[*l][choices[*l]],
            }
        }
        Ok(acc)
    }

    pub fn arch_latency(&self, arch: &ArchDescriptor) -> Result<f64> {
        self.latency_of(&arch.choices)
    }

    /// Per-layer rows whose latencies sum (in order) to `arch_latency`.
    pub fn breakdown(&self, arch: &ArchDescriptor) -> Result<Vec<BreakdownRow>> {
        self.check_choices(&arch.choices)?;
        Ok(self
            .items
            .iter()
            .map(|item| match item {
                Resolved::Fixed { name, us } => BreakdownRow {
                    layer: name.clone(),
                    kind: name.clone(),
                    latency_us: *us,
                },
                Resolved::Slot(l) => BreakdownRow {
                    layer: format!("layer{l}"),
                    kind: self.kinds[*l][arch.choices[*l]].to_string(),
                    latency_us: self.slots[*l][arch.choices[*l]],
                },
            })
            .collect())
    }

    /// `sum_l sum_i m[l][i] * LAT(l, i)` plus fixed operators, evaluated on
    /// plain numbers in the same order as [`LatencyModel::latency_of`].
    pub fn expected_value(&self, masks: &[Vec<f64>]) -> Result<f64> {
        if masks.len() != self.slots.len() {
            return Err(config_err!("{} mask rows for {} layers", masks.len(), self.slots.len()));
        }
        let mut acc = 0.0;
        for item in &self.items {
            match item {
                Resolved::Fixed { us, .. } => acc += us,
                Resolved::Slot(l) => {
                    let (m, c) = (&masks[*l], &self.slots[*l]);
                    if m.len() != c.len() {
                        return Err(config_err!("layer {l}: {} mask values for {} candidates", m.len(), c.len()));
                    }
                    let mut dot = 0.0;
                    for (&mi, &ci) in m.iter().zip(c) {
                        dot += mi * ci;
                    }
                    acc += dot;
                }
            }
        }
        Ok(acc)
    }

    /// Differentiable expected latency of relaxed `masks` (one vector per
    /// searchable layer). The gradient w.r.t. each mask entry is the
    /// candidate's table latency.
    pub fn expected_latency<S: Scalar>(&self, g: &mut Graph<S>, masks: &[Var]) -> Result<Var> {
        if masks.len() != self.slots.len() {
            return Err(config_err!("{} mask rows for {} layers", masks.len(), self.slots.len()));
        }
        let mut acc = g.input(Tensor::scalar(S::zero()))?;
        for item in &self.items {
            acc = match item {
                Resolved::Fixed { us, .. } => g.add_scalar(acc, S::lit(*us))?,
                Resolved::Slot(l) => {
                    let coeffs: Vec<S> = self.slots[*l].iter().map(|&c| S::lit(c)).collect();
                    let d = g.dot_const(masks[*l], &coeffs)?;
                    g.add(acc, d)?
                }
            };
        }
        Ok(acc)
    }
}

/// Hard latency of `arch` under `table`.
pub fn arch_latency(table: &LatencyTable, space: &SearchSpace, arch: &ArchDescriptor) -> Result<f64> {
    LatencyModel::resolve(table, space)?.arch_latency(arch)
}

/// Differentiable expected latency of relaxed `masks`.
pub fn expected_latency<S: Scalar>(
    table: &LatencyTable,
    space: &SearchSpace,
    g: &mut Graph<S>,
    masks: &[Var],
) -> Result<Var> {
    LatencyModel::resolve(table, space)?.expected_latency(g, masks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditivitySample {
    pub arch_id: usize,
    pub choices: Vec<BlockKind>,
    pub predicted_us: f64,
    pub measured_us: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditivityReport {
    pub device_label: String,
    pub samples: Vec<AdditivitySample>,
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
    pub note: String,
}

/// Compares table-predicted latency against end-to-end timings of
/// `sample_archs` uniformly random architectures.
pub fn validate_additivity<R: Rng + ?Sized>(
    table: &LatencyTable,
    space: &SearchSpace,
    sample_archs: usize,
    tolerance: f64,
    repeats: usize,
    warmup: usize,
    rng: &mut R,
) -> Result<AdditivityReport> {
    if sample_archs < 5 {
        return Err(config_err!("additivity check needs at least 5 architectures, got {sample_archs}"));
    }
    let model = LatencyModel::resolve(table, space)?;
    let mut samples = Vec::with_capacity(sample_archs);
    for arch_id in 0..sample_archs {
        let choices: Vec<usize> = space
            .slots()
            .iter()
            .map(|s| rng.random_range(0..s.candidates.len()))
            .collect();
        let arch = ArchDescriptor::new(space, choices)?;
        let predicted_us = model.arch_latency(&arch)?;
        let measured_us = bench_network::<f32>(space, &arch, repeats, warmup)?;
        let rel_err = (predicted_us - measured_us).abs() / measured_us;
        debug!("arch {arch_id}: predicted {predicted_us:.1} us, measured {measured_us:.1} us");
        samples.push(AdditivitySample {
            arch_id,
            choices: arch.kinds(space)?,
            predicted_us,
            measured_us,
            rel_err,
        });
    }
    let mean_rel_err = samples.iter().map(|s| s.rel_err).sum::<f64>() / samples.len() as f64;
    let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    Ok(AdditivityReport {
        device_label: table.device_label.clone(),
        samples,
        mean_rel_err,
        max_rel_err,
        tolerance,
        within_tolerance: mean_rel_err <= tolerance,
        note: "predictions assume operators run one after another with no interaction; \
               caches, frequency scaling and allocator effects on a desktop CPU violate this, \
               so some error is expected"
            .to_string(),
    })
}
