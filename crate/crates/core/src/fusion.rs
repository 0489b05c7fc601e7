//! Fusion block: aggregation of the two per-view features, a 1×1 projection
//! back to the per-view width, normalization and rectification, with optional
//! residual-style skips from either view.
//!
//! Order inside the block:
//!
//! ```text
//! aggregate(a, b) -> 1×1 projection -> normalization -> + skips -> rectification
//! ```
//!
//! At the flattened-vector site the projection is a dense layer; on a
//! `(batch, width, 1, 1)` map the 1×1 convolution is exactly that.

use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv2d, Mode, Param, Parameterized, Piecewise, Relu};
use crate::tensor::FeatureMap;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationKind {
    /// Pixel-wise mean of the two features.
    Average,
    /// Channel-wise stacking `[a, b]`.
    #[default]
    Concatenate,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 2] = [AggregationKind::Average, AggregationKind::Concatenate];

    /// Projection input width for a per-view width.
    pub fn fused_width(self, per_view: usize) -> usize {
        match self {
            AggregationKind::Average => per_view,
            AggregationKind::Concatenate => 2 * per_view,
        }
    }
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationKind::Average => "average",
            AggregationKind::Concatenate => "concatenate",
        })
    }
}

impl FromStr for AggregationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "average" | "avg" | "mean" => Ok(AggregationKind::Average),
            "concatenate" | "concat" | "cat" => Ok(AggregationKind::Concatenate),
            _ => Err(Error::config(
                "aggregation",
                format!("unknown aggregation `{s}` (expected average or concatenate)"),
            )),
        }
    }
}

impl TryFrom<String> for AggregationKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationKind> for String {
    fn from(k: AggregationKind) -> String {
        k.to_string()
    }
}

/// Which coarse features are added back onto the fused feature. All four
/// combinations are legal.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(deny_unknown_fields, default)]
pub struct SkipFlags {
    pub examined: bool,
    pub auxiliary: bool,
}

impl SkipFlags {
    pub const NONE: SkipFlags = SkipFlags {
        examined: false,
        auxiliary: false,
    };
    pub const EXAMINED: SkipFlags = SkipFlags {
        examined: true,
        auxiliary: false,
    };
    pub const BOTH: SkipFlags = SkipFlags {
        examined: true,
        auxiliary: true,
    };
    pub const ALL: [SkipFlags; 4] = [
        SkipFlags::NONE,
        SkipFlags::EXAMINED,
        SkipFlags {
            examined: false,
            auxiliary: true,
        },
        SkipFlags::BOTH,
    ];

    pub fn label(self) -> &'static str {
        match (self.examined, self.auxiliary) {
            (false, false) => "none",
            (true, false) => "examined",
            (false, true) => "auxiliary",
            (true, true) => "both",
        }
    }
}

impl FromStr for SkipFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(SkipFlags::NONE),
            "examined" => Ok(SkipFlags::EXAMINED),
            "auxiliary" => Ok(SkipFlags {
                examined: false,
                auxiliary: true,
            }),
            "both" | "examined+auxiliary" | "ea" => Ok(SkipFlags::BOTH),
            _ => Err(Error::config("skip", format!("unknown skip setting `{s}`"))),
        }
    }
}

/// Pixel-wise mean, or channel stacking `[a, b]`.
pub fn aggregate(a: &FeatureMap, b: &FeatureMap, kind: AggregationKind) -> Result<FeatureMap> {
    a.ensure_same_shape(b, "aggregation operands")?;
    match kind {
        AggregationKind::Average => {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x + y) / 2.0)
                .collect();
            FeatureMap::from_vec(a.shape(), data)
        }
        AggregationKind::Concatenate => {
            let [n, c, h, w] = a.shape();
            let len = a.sample_len();
            let mut data = Vec::with_capacity(2 * a.data().len());
            for s in 0..n {
                data.extend_from_slice(&a.data()[s * len..(s + 1) * len]);
                data.extend_from_slice(&b.data()[s * len..(s + 1) * len]);
            }
            FeatureMap::from_vec([n, 2 * c, h, w], data)
        }
    }
}

/// Splits a gradient on the aggregated feature back onto the two operands.
fn aggregate_backward(
    grad: &FeatureMap,
    kind: AggregationKind,
) -> Result<(FeatureMap, FeatureMap)> {
    match kind {
        AggregationKind::Average => {
            let half = grad.map(|g| g / 2.0);
            Ok((half.clone(), half))
        }
        AggregationKind::Concatenate => {
            let [n, c2, h, w] = grad.shape();
            let c = c2 / 2;
            let len = c * h * w;
            let mut ga = Vec::with_capacity(n * len);
            let mut gb = Vec::with_capacity(n * len);
            for s in 0..n {
                let sample = grad.sample(s);
                ga.extend_from_slice(&sample[..len]);
                gb.extend_from_slice(&sample[len..]);
            }
            Ok((
                FeatureMap::from_vec([n, c, h, w], ga)?,
                FeatureMap::from_vec([n, c, h, w], gb)?,
            ))
        }
    }
}

/// `fused + [examined] + [auxiliary]`, element-wise.
pub fn apply_skip(
    fused: &FeatureMap,
    examined: &FeatureMap,
    auxiliary: &FeatureMap,
    flags: SkipFlags,
) -> Result<FeatureMap> {
    fused.ensure_same_shape(examined, "examined skip")?;
    fused.ensure_same_shape(auxiliary, "auxiliary skip")?;
    let mut out = fused.clone();
    if flags.examined {
        out.add_assign(examined)?;
    }
    if flags.auxiliary {
        out.add_assign(auxiliary)?;
    }
    Ok(out)
}

/// Learnable state of the fusion block.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub kind: AggregationKind,
    pub skip: SkipFlags,
    pub width: usize,
    pub projection: Conv2d,
    pub norm: BatchNorm,
    relu: Relu,
}

impl FusionBlock {
    /// `width` is the per-view width at the fusion site.
    pub fn new<R: Rng>(width: usize, kind: AggregationKind, skip: SkipFlags, rng: &mut R) -> Self {
        Self {
            kind,
            skip,
            width,
            projection: Conv2d::new(kind.fused_width(width), width, 1, 1, 0, true, rng),
            norm: BatchNorm::new(width),
            relu: Relu::default(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.projection.in_channels
    }

    fn project(&mut self, fused: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        if fused.channels() != self.input_width() {
            return Err(Error::dimension(
                "fusion projection width",
                self.input_width(),
                fused.channels(),
            ));
        }
        let z = self.projection.forward(fused, mode)?;
        self.norm.forward(&z, mode)
    }

    /// 1×1 projection, normalization, rectification. Output width is the
    /// per-view width.
    pub fn project_normalize(&mut self, fused: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let z = self.project(fused, mode)?;
        Ok(self.relu.forward(&z))
    }

    /// Full block on the examined (`a`) and auxiliary (`b`) coarse features.
    pub fn fuse_views(&mut self, a: &FeatureMap, b: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let agg = aggregate(a, b, self.kind)?;
        let z = self.project(&agg, mode)?;
        let z = apply_skip(&z, a, b, self.skip)?;
        Ok(self.relu.forward(&z))
    }

    /// Gradients with respect to the examined and auxiliary inputs of the
    /// last `fuse_views` call; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        let g = self.relu.backward(grad)?;
        let gz = self.norm.backward(&g)?;
        let gagg = self.projection.backward(&gz)?;
        let (mut ga, mut gb) = aggregate_backward(&gagg, self.kind)?;
        if self.skip.examined {
            ga.add_assign(&g)?;
        }
        if self.skip.auxiliary {
            gb.add_assign(&g)?;
        }
        Ok((ga, gb))
    }

    /// Sets the projection to the identity (or the stacked identity `[I, 0]`
    /// for concatenation) with zero bias.
    pub fn set_identity_projection(&mut self) {
        let cin = self.input_width();
        let w = &mut self.projection.weight.value;
        w.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..self.width {
            w[o * cin + o] = 1.0;
        }
        if let Some(b) = &mut self.projection.bias {
            b.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Piecewise for FusionBlock {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.relu.hash_pattern(h);
    }
}

impl Parameterized for FusionBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.projection.visit_params(&join(prefix, "projection"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.projection
            .visit_params_mut(&join(prefix, "projection"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}
