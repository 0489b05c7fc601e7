//! Residual backbone as five numbered blocks, and the Coarse/Fine split.
//!
//! Block 1 is the stem (7×7 stride-2 convolution, normalization,
//! rectification, 3×3 stride-2 max-pool). Blocks 2–5 are the four residual
//! stages. The max-pool belongs to block 1.
//!
//! A [`NetworkPlan`] assigns each block to the per-view Coarse Layer (shared
//! weights, applied to both views) or to the Fine Layer (applied once to the
//! fused feature).

use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FusionConfig, FusionType};
use crate::error::{Error, Result};
use crate::nn::{
    join, BatchNorm, Conv2d, GlobalAvgPool, Linear, MaxPool, Mode, Param, Parameterized, Piecewise,
    Relu,
};
use crate::tensor::FeatureMap;

pub const NUM_CLASSES: usize = 2;
pub const CANONICAL_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const CANONICAL_STEM: usize = 64;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(try_from = "String", into = "String")]
pub enum Depth {
    #[default]
    R18,
    R34,
}

impl Depth {
    pub fn stage_block_counts(self) -> [usize; 4] {
        match self {
            Depth::R18 => [2, 2, 2, 2],
            Depth::R34 => [3, 4, 6, 3],
        }
    }

    pub fn layers(self) -> usize {
        match self {
            Depth::R18 => 18,
            Depth::R34 => 34,
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.layers())
    }
}

impl FromStr for Depth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .trim_start_matches("resnet")
            .trim_start_matches(['r', '-'])
        {
            "18" => Ok(Depth::R18),
            "34" => Ok(Depth::R34),
            _ => Err(Error::config(
                "depth",
                format!("unknown depth `{s}` (expected 18 or 34)"),
            )),
        }
    }
}

impl TryFrom<String> for Depth {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Depth> for String {
    fn from(d: Depth) -> String {
        d.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub depth: Depth,
    pub stage_block_counts: [usize; 4],
    pub stage_widths: [usize; 4],
    pub stem_width: usize,
    pub input_channels: usize,
}

impl BackboneSpec {
    /// The canonical 18- or 34-layer backbone.
    pub fn new(depth: Depth, input_channels: usize) -> Self {
        Self {
            depth,
            stage_block_counts: depth.stage_block_counts(),
            stage_widths: CANONICAL_WIDTHS,
            stem_width: CANONICAL_STEM,
            input_channels,
        }
    }

    pub fn from_config(config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        Self::new(config.depth, config.input_channels).with_width_divisor(config.width_divisor)
    }

    /// Same topology with every width divided by `divisor`.
    pub fn with_width_divisor(mut self, divisor: usize) -> Result<Self> {
        if divisor == 0
            || !self.stem_width.is_multiple_of(divisor)
            || self.stage_widths.iter().any(|w| w % divisor != 0)
        {
            return Err(Error::config(
                "width_divisor",
                format!("{divisor} does not divide every width"),
            ));
        }
        self.stem_width /= divisor;
        self.stage_widths.iter_mut().for_each(|w| *w /= divisor);
        Ok(self)
    }

    /// A minimal five-block backbone (one residual unit per stage, widths 2–4)
    /// used for exhaustive finite-difference checks.
    pub fn toy(input_channels: usize) -> Self {
        Self {
            depth: Depth::R18,
            stage_block_counts: [1, 1, 1, 1],
            stage_widths: [2, 3, 4, 4],
            stem_width: 2,
            input_channels,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.stage_block_counts == self.depth.stage_block_counts()
            && self.stage_widths == CANONICAL_WIDTHS
            && self.stem_width == CANONICAL_STEM
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be at least 1"));
        }
        if self.stem_width == 0
            || self.stage_widths.contains(&0)
            || self.stage_block_counts.contains(&0)
        {
            return Err(Error::config(
                "backbone",
                "widths and block counts must be positive",
            ));
        }
        Ok(())
    }

    /// Output channels of a block.
    pub fn block_width(&self, block: BlockId) -> usize {
        match block.index() {
            1 => self.stem_width,
            i => self.stage_widths[i - 2],
        }
    }

    pub fn final_width(&self) -> usize {
        self.stage_widths[3]
    }
}

/// Backbone block number, 1 (stem) through 5 (last residual stage).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BlockId(u8);

impl BlockId {
    pub const ALL: [BlockId; 5] = [BlockId(1), BlockId(2), BlockId(3), BlockId(4), BlockId(5)];

    pub fn new(index: u8) -> Result<Self> {
        if (1..=5).contains(&index) {
            Ok(BlockId(index))
        } else {
            Err(Error::config(
                "block",
                format!("block index {index} outside 1..=5"),
            ))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Spatial downsampling from the input image to this block's output.
    pub fn downsample(self) -> usize {
        match self.0 {
            1 | 2 => 4,
            3 => 8,
            4 => 16,
            _ => 32,
        }
    }
}

impl TryFrom<u8> for BlockId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        BlockId::new(v)
    }
}

impl From<BlockId> for u8 {
    fn from(b: BlockId) -> u8 {
        b.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}", self.0)
    }
}

/// Where the two per-view streams meet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionSite {
    /// Raw images, `channels` = input channels.
    ImageLevel { channels: usize },
    /// Spatial maps after the last coarse block.
    FeatureMap { channels: usize, downsample: usize },
    /// Pooled, flattened vectors.
    FlattenedVector { width: usize },
}

impl FusionSite {
    /// Per-view width at the site; the fusion block restores it.
    pub fn channels(&self) -> usize {
        match *self {
            FusionSite::ImageLevel { channels } | FusionSite::FeatureMap { channels, .. } => {
                channels
            }
            FusionSite::FlattenedVector { width } => width,
        }
    }

    /// Per-view shape at the site for a given batch and square image edge.
    pub fn shape(&self, batch: usize, image_size: usize) -> [usize; 4] {
        match *self {
            FusionSite::ImageLevel { channels } => [batch, channels, image_size, image_size],
            FusionSite::FeatureMap {
                channels,
                downsample,
            } => {
                let edge = image_size.div_ceil(downsample);
                [batch, channels, edge, edge]
            }
            FusionSite::FlattenedVector { width } => [batch, width, 1, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub fusion_type: FusionType,
    pub coarse_blocks: Vec<BlockId>,
    pub fine_blocks: Vec<BlockId>,
    pub fusion_site: FusionSite,
    /// Global pooling runs inside the Coarse Layer (post fusion only).
    pub pool_in_coarse: bool,
    pub backbone: BackboneSpec,
}

impl NetworkPlan {
    pub fn per_view_width(&self) -> usize {
        self.fusion_site.channels()
    }
}

/// Resolves a fusion type into the Coarse/Fine partition of the five blocks.
pub fn plan_network(config: &FusionConfig, spec: &BackboneSpec) -> Result<NetworkPlan> {
    config.validate()?;
    spec.validate()?;
    let split = match config.fusion_type {
        FusionType::Pre => 0,
        FusionType::Early => 1,
        FusionType::Middle => 3,
        FusionType::Last | FusionType::Post => 5,
    };
    let (coarse, fine) = BlockId::ALL.split_at(split);
    let fusion_site = match (config.fusion_type, coarse.last()) {
        (FusionType::Post, _) => FusionSite::FlattenedVector {
            width: spec.final_width(),
        },
        (_, None) => FusionSite::ImageLevel {
            channels: spec.input_channels,
        },
        (_, Some(&last)) => FusionSite::FeatureMap {
            channels: spec.block_width(last),
            downsample: last.downsample(),
        },
    };
    Ok(NetworkPlan {
        fusion_type: config.fusion_type,
        coarse_blocks: coarse.to_vec(),
        fine_blocks: fine.to_vec(),
        fusion_site,
        pool_in_coarse: config.fusion_type == FusionType::Post,
        backbone: spec.clone(),
    })
}

/// Two 3×3 convolutions with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm::new(out_ch),
            )
        });
        Self {
            conv1,
            bn1: BatchNorm::new(out_ch),
            relu1: Relu::default(),
            conv2,
            bn2: BatchNorm::new(out_ch),
            downsample,
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h);
        let h = self.conv2.forward(&h, mode)?;
        let mut h = self.bn2.forward(&h, mode)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                h.add_assign(&bn.forward(&s, mode)?)?;
            }
            None => h.add_assign(x)?,
        }
        Ok(self.relu_out.forward(&h))
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> Result<FeatureMap> {
        let g = self.relu_out.backward(grad)?;
        let mut shortcut = match &mut self.downsample {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)?)?,
            None => g.clone(),
        };
        let h = self.bn2.backward(&g)?;
        let h = self.conv2.backward(&h)?;
        let h = self.relu1.backward(&h)?;
        let h = self.bn1.backward(&h)?;
        shortcut.add_assign(&self.conv1.backward(&h)?)?;
        Ok(shortcut)
    }
}

impl Parameterized for BasicBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.downsample {
            conv.visit_params(&join(prefix, "downsample/conv"), f);
            bn.visit_params(&join(prefix, "downsample/bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params_mut(&join(prefix, "downsample/conv"), f);
            bn.visit_params_mut(&join(prefix, "downsample/bn"), f);
        }
    }
}

impl Piecewise for BasicBlock {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.relu1.hash_pattern(h);
        self.relu_out.hash_pattern(h);
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    conv: Conv2d,
    bn: BatchNorm,
    relu: Relu,
    pool: MaxPool,
}

impl Stem {
    pub fn new<R: Rng>(in_ch: usize, width: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_ch, width, 7, 2, 3, false, rng),
            bn: BatchNorm::new(width),
            relu: Relu::default(),
            pool: MaxPool::new(3, 2, 1),
        }
    }

    fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let h = self.conv.forward(x, mode)?;
        let h = self.bn.forward(&h, mode)?;
        let h = self.relu.forward(&h);
        self.pool.forward(&h)
    }

    fn backward(&mut self, grad: &FeatureMap) -> Result<FeatureMap> {
        let g = self.pool.backward(grad)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl Piecewise for Stem {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.relu.hash_pattern(h);
        self.pool.hash_pattern(h);
    }
}

/// One of the five numbered backbone blocks.
#[derive(Clone, Debug)]
pub enum Block {
    Stem(Stem),
    Stage(Vec<BasicBlock>),
}

impl Block {
    pub fn build<R: Rng>(id: BlockId, spec: &BackboneSpec, rng: &mut R) -> Self {
        match id.index() {
            1 => Block::Stem(Stem::new(spec.input_channels, spec.stem_width, rng)),
            i => {
                let stage = i - 2;
                let in_ch = if stage == 0 {
                    spec.stem_width
                } else {
                    spec.stage_widths[stage - 1]
                };
                let out_ch = spec.stage_widths[stage];
                let stride = if stage == 0 { 1 } else { 2 };
                let units = (0..spec.stage_block_counts[stage])
                    .map(|u| {
                        if u == 0 {
                            BasicBlock::new(in_ch, out_ch, stride, rng)
                        } else {
                            BasicBlock::new(out_ch, out_ch, 1, rng)
                        }
                    })
                    .collect();
                Block::Stage(units)
            }
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        match self {
            Block::Stem(stem) => stem.forward(x, mode),
            Block::Stage(units) => {
                let mut h = x.clone();
                for unit in units.iter_mut() {
                    h = unit.forward(&h, mode)?;
                }
                Ok(h)
            }
        }
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Block::Stem(stem) => stem.backward(grad),
            Block::Stage(units) => {
                let mut g = grad.clone();
                for unit in units.iter_mut().rev() {
                    g = unit.backward(&g)?;
                }
                Ok(g)
            }
        }
    }
}

impl Piecewise for Block {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        match self {
            Block::Stem(stem) => stem.hash_pattern(h),
            Block::Stage(units) => units.iter().for_each(|u| u.hash_pattern(h)),
        }
    }
}

impl Parameterized for Block {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Block::Stem(stem) => {
                let p = join(prefix, "layer0");
                stem.conv.visit_params(&join(&p, "conv"), f);
                stem.bn.visit_params(&join(&p, "bn"), f);
            }
            Block::Stage(units) => {
                for (m, unit) in units.iter().enumerate() {
                    unit.visit_params(&join(prefix, &format!("layer{m}")), f);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Block::Stem(stem) => {
                let p = join(prefix, "layer0");
                stem.conv.visit_params_mut(&join(&p, "conv"), f);
                stem.bn.visit_params_mut(&join(&p, "bn"), f);
            }
            Block::Stage(units) => {
                for (m, unit) in units.iter_mut().enumerate() {
                    unit.visit_params_mut(&join(prefix, &format!("layer{m}")), f);
                }
            }
        }
    }
}

/// Ordered run of blocks with an optional trailing global pool.
#[derive(Clone, Debug)]
struct BlockChain {
    blocks: Vec<(BlockId, Block)>,
    pool: Option<GlobalAvgPool>,
}

impl BlockChain {
    fn build<R: Rng>(ids: &[BlockId], pool: bool, spec: &BackboneSpec, rng: &mut R) -> Self {
        Self {
            blocks: ids
                .iter()
                .map(|&id| (id, Block::build(id, spec, rng)))
                .collect(),
            pool: pool.then(GlobalAvgPool::default),
        }
    }

    fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let mut h = x.clone();
        for (_, block) in self.blocks.iter_mut() {
            h = block.forward(&h, mode)?;
        }
        if let Some(pool) = &mut self.pool {
            h = pool.forward(&h);
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &FeatureMap) -> Result<FeatureMap> {
        let mut g = grad.clone();
        if let Some(pool) = &mut self.pool {
            g = pool.backward(&g)?;
        }
        for (_, block) in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (id, block) in &self.blocks {
            block.visit_params(&id.to_string(), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (id, block) in self.blocks.iter_mut() {
            block.visit_params_mut(&id.to_string(), f);
        }
    }
}

impl Piecewise for BlockChain {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.blocks.iter().for_each(|(_, b)| b.hash_pattern(h));
    }
}

/// Per-view extractor `C(.)`; one parameter set shared by both views.
#[derive(Clone, Debug)]
pub struct CoarseLayer {
    chain: BlockChain,
    entry_channels: usize,
}

impl CoarseLayer {
    pub fn build<R: Rng>(plan: &NetworkPlan, rng: &mut R) -> Self {
        Self {
            chain: BlockChain::build(
                &plan.coarse_blocks,
                plan.pool_in_coarse,
                &plan.backbone,
                rng,
            ),
            entry_channels: plan.backbone.input_channels,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.chain.blocks.is_empty() && self.chain.pool.is_none()
    }

    /// Maps images to the fusion interface. Identity when no block is coarse.
    pub fn forward(&mut self, images: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        if images.channels() != self.entry_channels {
            return Err(Error::dimension(
                "coarse layer input channels",
                self.entry_channels,
                images.channels(),
            ));
        }
        self.chain.forward(images, mode)
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> Result<FeatureMap> {
        self.chain.backward(grad)
    }
}

impl Piecewise for CoarseLayer {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.chain.hash_pattern(h);
    }
}

impl Parameterized for CoarseLayer {
    fn visit_params(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.chain.visit_params(f);
    }

    fn visit_params_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.chain.visit_params_mut(f);
    }
}

/// Remaining blocks, global pool (unless pooled before fusion), classifier.
#[derive(Clone, Debug)]
pub struct FineLayer {
    chain: BlockChain,
    classifier: Linear,
    entry_channels: usize,
}

impl FineLayer {
    pub fn build<R: Rng>(plan: &NetworkPlan, rng: &mut R) -> Self {
        let chain = BlockChain::build(&plan.fine_blocks, !plan.pool_in_coarse, &plan.backbone, rng);
        Self {
            chain,
            classifier: Linear::new(plan.backbone.final_width(), NUM_CLASSES, rng),
            entry_channels: plan.per_view_width(),
        }
    }

    /// Fused feature to logits `(batch, 2, 1, 1)`.
    pub fn forward(&mut self, fused: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        if fused.channels() != self.entry_channels {
            return Err(Error::dimension(
                "fine layer input channels",
                self.entry_channels,
                fused.channels(),
            ));
        }
        let h = self.chain.forward(fused, mode)?;
        self.classifier.forward(&h)
    }

    pub fn backward(&mut self, grad_logits: &FeatureMap) -> Result<FeatureMap> {
        let g = self.classifier.backward(grad_logits)?;
        self.chain.backward(&g)
    }
}

impl Piecewise for FineLayer {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.chain.hash_pattern(h);
    }
}

impl Parameterized for FineLayer {
    fn visit_params(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.chain.visit_params(f);
        self.classifier.visit_params("head/fc", f);
    }

    fn visit_params_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.chain.visit_params_mut(f);
        self.classifier.visit_params_mut("head/fc", f);
    }
}
