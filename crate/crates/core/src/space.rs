//! Macro-architecture and per-layer candidate lists.
//!
//! A [`SpaceConfig`] (JSON) lists stages of `(f, n, s, searchable)`. Fixed
//! stages become 3x3 conv + BN + ReLU layers; searchable stages expand into
//! one [`LayerSlot`] per repeat. A 1x1 head convolution, global average
//! pooling and a fully connected classifier close the network.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{out_len, BlockConfig, BlockKind, FixedOp};
use crate::error::{config_err, Error, Result};
use crate::io;

const IMAGENET_JSON: &str = include_str!("../configs/imagenet.json");
const DESK_JSON: &str = include_str!("../configs/desk.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub f: usize,
    pub n: usize,
    pub s: usize,
    pub searchable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub input_resolution: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub channel_scale: f64,
    pub num_classes: usize,
    pub head_width: usize,
    pub stages: Vec<StageConfig>,
}

fn default_in_channels() -> usize {
    3
}

impl SpaceConfig {
    /// The 22-layer ImageNet macro-architecture (head width 1984).
    pub fn imagenet() -> Self {
        serde_json::from_str(IMAGENET_JSON).expect("bundled config parses")
    }

    /// 32x32 input, 7 searchable layers, 10 classes.
    pub fn desk() -> Self {
        serde_json::from_str(DESK_JSON).expect("bundled config parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, self)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Channel width after scaling: unchanged at scale 1, otherwise rounded
    /// to the nearest multiple of 2 (minimum 2).
    pub fn scaled(&self, f: usize) -> usize {
        if self.channel_scale == 1.0 {
            f
        } else {
            let half = (f as f64 * self.channel_scale / 2.0).round() as usize;
            2 * half.max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    FixedConv,
    Searchable,
    FixedHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub role: StageRole,
    pub f: usize,
    pub n: usize,
    pub s: usize,
    pub input_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroSpec {
    pub stages: Vec<Stage>,
    pub classifier_width: usize,
    pub num_classes: usize,
}

/// One searchable layer and its candidate blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub input_hw: (usize, usize),
    pub candidates: Vec<BlockConfig>,
}

impl LayerSlot {
    pub fn skip_legal(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn position(&self, kind: BlockKind) -> Option<usize> {
        self.candidates.iter().position(|c| c.kind == kind)
    }
}

/// A layer of the full network in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPlan {
    Fixed { op: FixedOp, input_hw: (usize, usize) },
    Searchable { slot: usize },
}

#[derive(Debug, Clone)]
pub struct SearchSpace {
    config: SpaceConfig,
    hash: String,
    macro_spec: MacroSpec,
    plan: Vec<LayerPlan>,
    slots: Vec<LayerSlot>,
}

pub fn build_space(config: &SpaceConfig) -> Result<SearchSpace> {
    if !(config.channel_scale > 0.0) || !config.channel_scale.is_finite() {
        return Err(config_err!("channel_scale must be > 0, got {}", config.channel_scale));
    }
    if config.num_classes == 0 || config.in_channels == 0 || config.input_resolution == 0 {
        return Err(config_err!("num_classes, in_channels and input_resolution must be positive"));
    }
    let Some(first) = config.stages.first() else {
        return Err(config_err!("space needs at least one stage"));
    };
    if first.searchable {
        return Err(config_err!("stage 0 must be a fixed convolution"));
    }
    for (i, st) in config.stages.iter().enumerate() {
        if st.n == 0 || st.f == 0 {
            return Err(config_err!("stage {i}: f and n must be positive"));
        }
        if !(st.s == 1 || st.s == 2) {
            return Err(config_err!("stage {i}: stride must be 1 or 2, got {}", st.s));
        }
    }
    let stride_product: usize = config.stages.iter().map(|s| s.s).product();
    if config.input_resolution % stride_product != 0 {
        return Err(config_err!(
            "input resolution {} is not divisible by total stride {stride_product}",
            config.input_resolution
        ));
    }

    let mut stages = Vec::new();
    let mut plan = Vec::new();
    let mut slots = Vec::new();
    let mut res = config.input_resolution;
    let mut channels = config.in_channels;
    for (i, st) in config.stages.iter().enumerate() {
        let f = config.scaled(st.f);
        if st.searchable && f % 2 != 0 {
            return Err(config_err!(
                "stage {i}: {f} channels after scaling cannot host 2-group convolutions"
            ));
        }
        stages.push(Stage {
            role: if st.searchable {
                StageRole::Searchable
            } else {
                StageRole::FixedConv
            },
            f,
            n: st.n,
            s: st.s,
            input_resolution: res,
        });
        for rep in 0..st.n {
            let stride = if rep == 0 { st.s } else { 1 };
            if st.searchable {
                let index = slots.len();
                let candidates = BlockKind::ALL
                    .iter()
                    .filter_map(|&kind| BlockConfig::new(kind, channels, f, stride).ok())
                    .collect::<Vec<_>>();
                if candidates.len() < 8 {
                    return Err(config_err!(
                        "stage {i}: layer {index} ({channels} -> {f}) admits only {} candidates",
                        candidates.len()
                    ));
                }
                slots.push(LayerSlot {
                    index,
                    c_in: channels,
                    c_out: f,
                    stride,
                    input_hw: (res, res),
                    candidates,
                });
                plan.push(LayerPlan::Searchable { slot: index });
            } else {
                plan.push(LayerPlan::Fixed {
                    op: FixedOp::Conv3x3 {
                        c_in: channels,
                        c_out: f,
                        stride,
                    },
                    input_hw: (res, res),
                });
            }
            channels = f;
            res = out_len(res, stride);
        }
    }
    let head = config.scaled(config.head_width);
    stages.push(Stage {
        role: StageRole::FixedHead,
        f: head,
        n: 1,
        s: 1,
        input_resolution: res,
    });
    plan.push(LayerPlan::Fixed {
        op: FixedOp::HeadConv {
            c_in: channels,
            c_out: head,
        },
        input_hw: (res, res),
    });
    plan.push(LayerPlan::Fixed {
        op: FixedOp::Classifier {
            c_in: head,
            classes: config.num_classes,
        },
        input_hw: (res, res),
    });
    Ok(SearchSpace {
        hash: config.hash(),
        config: config.clone(),
        macro_spec: MacroSpec {
            stages,
            classifier_width: head,
            num_classes: config.num_classes,
        },
        plan,
        slots,
    })
}

impl SearchSpace {
    pub fn config(&self) -> &SpaceConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn macro_spec(&self) -> &MacroSpec {
        &self.macro_spec
    }

    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn plan(&self) -> &[LayerPlan] {
        &self.plan
    }

    pub fn fixed_ops(&self) -> impl Iterator<Item = (FixedOp, (usize, usize))> + '_ {
        self.plan.iter().filter_map(|p| match *p {
            LayerPlan::Fixed { op, input_hw } => Some((op, input_hw)),
            LayerPlan::Searchable { .. } => None,
        })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let r = self.config.input_resolution;
        [batch, self.config.in_channels, r, r]
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// `log10` of the number of distinct architectures.
    pub fn log10_size(&self) -> f64 {
        self.slots.iter().map(|s| (s.candidates.len() as f64).log10()).sum()
    }

    /// `log10(|vocabulary|^layers)`, counting all 9 kinds at every layer.
    pub fn log10_nominal_size(&self) -> f64 {
        self.slots.len() as f64 * (BlockKind::ALL.len() as f64).log10()
    }

    /// Total multiply-adds of the fixed operators.
    pub fn fixed_flops(&self) -> usize {
        self.fixed_ops().map(|(op, hw)| op.flops(hw)).sum()
    }

    pub fn fixed_params(&self) -> usize {
        self.fixed_ops().map(|(op, _)| op.param_count()).sum()
    }
}

/// A concrete architecture: one candidate index per searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub space_config_hash: String,
    pub choices: Vec<usize>,
}

/// On-disk form of an [`ArchDescriptor`], naming candidates by kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchFile {
    pub space_config_hash: String,
    pub choices: Vec<BlockKind>,
}

impl ArchDescriptor {
    pub fn new(space: &SearchSpace, choices: Vec<usize>) -> Result<Self> {
        let arch = Self {
            space_config_hash: space.config_hash().to_string(),
            choices,
        };
        validate_arch(space, &arch)?;
        Ok(arch)
    }

    /// Resolves kinds against the slots; a kind absent from a slot's
    /// candidate list (e.g. skip at a stride-2 layer) is an error.
    pub fn from_kinds(space: &SearchSpace, kinds: &[BlockKind]) -> Result<Self> {
        if kinds.len() != space.slots().len() {
            return Err(Error::InvalidArch(vec![(
                kinds.len().min(space.slots().len()),
                format!("{} choices for {} searchable layers", kinds.len(), space.slots().len()),
            )]));
        }
        let mut errors = Vec::new();
        let mut choices = Vec::with_capacity(kinds.len());
        for (slot, &kind) in space.slots().iter().zip(kinds) {
            match slot.position(kind) {
                Some(i) => choices.push(i),
                None => errors.push((
                    slot.index,
                    format!(
                        "{kind} is not a candidate (stride {}, {} -> {} channels)",
                        slot.stride, slot.c_in, slot.c_out
                    ),
                )),
            }
        }
        if !errors.is_empty() {
            return Err(Error::InvalidArch(errors));
        }
        Ok(Self {
            space_config_hash: space.config_hash().to_string(),
            choices,
        })
    }

    pub fn kinds(&self, space: &SearchSpace) -> Result<Vec<BlockKind>> {
        validate_arch(space, self)?;
        Ok(self.configs(space)?.iter().map(|c| c.kind).collect())
    }

    pub fn configs(&self, space: &SearchSpace) -> Result<Vec<BlockConfig>> {
        validate_arch(space, self)?;
        Ok(space
            .slots()
            .iter()
            .zip(&self.choices)
            .map(|(s, &i)| s.candidates[i])
            .collect())
    }

    pub fn to_file(&self, space: &SearchSpace) -> Result<ArchFile> {
        Ok(ArchFile {
            space_config_hash: self.space_config_hash.clone(),
            choices: self.kinds(space)?,
        })
    }

    pub fn from_file(space: &SearchSpace, file: &ArchFile) -> Result<Self> {
        if file.space_config_hash != space.config_hash() {
            return Err(config_err!(
                "architecture was built for space {} but the space hash is {}",
                file.space_config_hash,
                space.config_hash()
            ));
        }
        Self::from_kinds(space, &file.choices)
    }

    pub fn save(&self, space: &SearchSpace, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, &self.to_file(space)?)
    }

    pub fn load(space: &SearchSpace, path: impl AsRef<Path>) -> Result<Self> {
        let file: ArchFile = io::read_json(path)?;
        Self::from_file(space, &file)
    }
}

/// Checks space identity, choice count, index ranges and skip legality.
pub fn validate_arch(space: &SearchSpace, arch: &ArchDescriptor) -> Result<()> {
    if arch.space_config_hash != space.config_hash() {
        return Err(config_err!(
            "architecture belongs to space {} but the space hash is {}",
            arch.space_config_hash,
            space.config_hash()
        ));
    }
    let mut errors = Vec::new();
    if arch.choices.len() != space.slots().len() {
        errors.push((
            arch.choices.len().min(space.slots().len()),
            format!(
                "{} choices for {} searchable layers",
                arch.choices.len(),
                space.slots().len()
            ),
        ));
    }
    for (slot, &choice) in space.slots().iter().zip(&arch.choices) {
        match slot.candidates.get(choice) {
            None => errors.push((
                slot.index,
                format!(
                    "candidate index {choice} out of range (layer has {})",
                    slot.candidates.len()
                ),
            )),
            Some(c) if c.kind == BlockKind::Skip && !slot.skip_legal() => {
                errors.push((slot.index, "skip needs stride 1 and equal channels".into()))
            }
            Some(_) => {}
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArch(errors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imagenet_config_matches_macro_table() {
        let space = build_space(&SpaceConfig::imagenet()).unwrap();
        assert_eq!(space.slots().len(), 22);
        let searchable: Vec<(usize, usize, usize)> = space
            .macro_spec()
            .stages
            .iter()
            .filter(|s| s.role == StageRole::Searchable)
            .map(|s| (s.f, s.n, s.s))
            .collect();
        assert_eq!(
            searchable,
            [(16, 1, 1), (24, 4, 2), (32, 4, 2), (64, 4, 2), (112, 4, 1), (184, 4, 2), (352, 1, 1)]
        );
        let stages = &space.macro_spec().stages;
        assert_eq!((stages[0].role, stages[0].f, stages[0].s), (StageRole::FixedConv, 16, 2));
        let head = stages.last().unwrap();
        assert_eq!((head.role, head.f, head.input_resolution), (StageRole::FixedHead, 1984, 7));
        assert_eq!(space.macro_spec().num_classes, 1000);
        let resolutions: Vec<usize> = stages.iter().map(|s| s.input_resolution).collect();
        assert_eq!(resolutions, [224, 112, 112, 56, 28, 14, 14, 7, 7]);
    }

    #[test]
    fn imagenet_space_size() {
        let space = build_space(&SpaceConfig::imagenet()).unwrap();
        // nominal 9^22
        assert!((space.log10_nominal_size() - 20.994).abs() < 1e-3);
        // skip is illegal at the 6 layers that change shape: 9^16 * 8^6
        let nines = space.slots().iter().filter(|s| s.candidates.len() == 9).count();
        assert_eq!(nines, 16);
        let exact = 16.0 * 9f64.log10() + 6.0 * 8f64.log10();
        assert!((space.log10_size() - exact).abs() < 1e-12);
        assert_eq!(space.log10_size().round(), 21.0);
    }

    #[test]
    fn desk_space_has_seven_slots() {
        let space = build_space(&SpaceConfig::desk()).unwrap();
        assert_eq!(space.slots().len(), 7);
        assert_eq!(space.config().input_resolution, 32);
        assert_eq!(space.num_classes(), 10);
        let counts: Vec<usize> = space.slots().iter().map(|s| s.candidates.len()).collect();
        assert_eq!(counts, [9, 8, 9, 8, 9, 8, 9]);
    }

    #[test]
    fn slots_share_shape_across_candidates() {
        let space = build_space(&SpaceConfig::imagenet()).unwrap();
        for slot in space.slots() {
            assert!(matches!(slot.candidates.len(), 8 | 9));
            assert_eq!(slot.candidates.len() == 9, slot.skip_legal());
            for c in &slot.candidates {
                assert_eq!((c.c_in, c.c_out, c.stride), (slot.c_in, slot.c_out, slot.stride));
            }
        }
    }

    #[test]
    fn channel_scaling_rounds_to_even() {
        let mut cfg = SpaceConfig::imagenet();
        cfg.channel_scale = 0.5;
        assert_eq!(cfg.scaled(24), 12);
        assert_eq!(cfg.scaled(184), 92);
        cfg.channel_scale = 0.35;
        assert_eq!(cfg.scaled(24), 8);
        assert_eq!(cfg.scaled(16), 6);
        let space = build_space(&cfg).unwrap();
        assert!(space.slots().iter().all(|s| s.c_out % 2 == 0));
    }

    #[test]
    fn odd_searchable_width_is_rejected() {
        let mut cfg = SpaceConfig::desk();
        cfg.stages[2].f = 15;
        let err = build_space(&cfg).unwrap_err().to_string();
        assert!(err.contains("stage 2"), "{err}");
    }

    #[test]
    fn resolution_must_divide_stride_product() {
        let mut cfg = SpaceConfig::desk();
        cfg.input_resolution = 36;
        assert!(build_space(&cfg).is_err());
        cfg.input_resolution = 48;
        assert!(build_space(&cfg).is_ok());
    }

    #[test]
    fn build_is_pure() {
        let cfg = SpaceConfig::desk();
        let a = build_space(&cfg).unwrap();
        let b = build_space(&cfg).unwrap();
        assert_eq!(a.slots(), b.slots());
        assert_eq!(a.plan(), b.plan());
        assert_eq!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn validate_arch_cases() {
        let space = build_space(&SpaceConfig::imagenet()).unwrap();
        let zeros = ArchDescriptor::new(&space, vec![0; 22]).unwrap();
        assert!(validate_arch(&space, &zeros).is_ok());

        let mut bad = zeros.clone();
        bad.choices[5] = 9;
        match validate_arch(&space, &bad) {
            Err(Error::InvalidArch(errs)) => {
                assert_eq!(errs.len(), 1);
                assert_eq!(errs[0].0, 5);
                assert!(errs[0].1.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }

        let mut kinds = zeros.kinds(&space).unwrap();
        kinds[1] = BlockKind::Skip; // first layer of the stride-2 stage
        match ArchDescriptor::from_kinds(&space, &kinds) {
            Err(Error::InvalidArch(errs)) => assert_eq!(errs[0].0, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn arch_file_round_trip() {
        let space = build_space(&SpaceConfig::desk()).unwrap();
        let arch = ArchDescriptor::new(&space, vec![8, 7, 0, 1, 8, 3, 2]).unwrap();
        let file = arch.to_file(&space).unwrap();
        assert_eq!(file.choices[0], BlockKind::Skip);
        let json = serde_json::to_string(&file).unwrap();
        let back: ArchFile = serde_json::from_str(&json).unwrap();
        assert_eq!(ArchDescriptor::from_file(&space, &back).unwrap(), arch);
    }
}
