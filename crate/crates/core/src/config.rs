//! The experiment point: where to split the backbone and how to fuse.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Depth;
use crate::error::{Error, Result};
use crate::fusion::{AggregationKind, SkipFlags};

/// Split position of the fusion block along the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionType {
    /// Before block 1: the two images are fused directly.
    Pre,
    /// Between block 1 and block 2.
    Early,
    /// Between block 3 and block 4.
    Middle,
    /// After block 5, before global pooling.
    Last,
    /// After global pooling and flattening.
    Post,
}

impl FusionType {
    pub const ALL: [FusionType; 5] = [
        FusionType::Pre,
        FusionType::Early,
        FusionType::Middle,
        FusionType::Last,
        FusionType::Post,
    ];

    pub fn code(self) -> &'static str {
        match self {
            FusionType::Pre => "PreF",
            FusionType::Early => "EF",
            FusionType::Middle => "MF",
            FusionType::Last => "LF",
            FusionType::Post => "PostF",
        }
    }
}

impl fmt::Display for FusionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for FusionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "");
        Ok(match norm.as_str() {
            "pref" | "pre" | "prefusion" => FusionType::Pre,
            "ef" | "early" | "earlyfusion" => FusionType::Early,
            "mf" | "middle" | "middlefusion" => FusionType::Middle,
            "lf" | "last" | "lastfusion" | "late" => FusionType::Last,
            "postf" | "post" | "postfusion" => FusionType::Post,
            _ => {
                return Err(Error::config(
                    "fusion_type",
                    format!("unknown fusion type `{s}` (expected PreF, EF, MF, LF or PostF)"),
                ))
            }
        })
    }
}

impl TryFrom<String> for FusionType {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionType> for String {
    fn from(t: FusionType) -> String {
        t.code().to_string()
    }
}

/// One point of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub fusion_type: FusionType,
    pub aggregation: AggregationKind,
    pub skip: SkipFlags,
    pub depth: Depth,
    /// Channels of the input images (1 for grayscale).
    pub input_channels: usize,
    /// Divides every backbone width; 1 is the canonical backbone.
    pub width_divisor: usize,
    /// Replace the auxiliary view by zeros (single-view ablation).
    pub zero_auxiliary: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            fusion_type: FusionType::Middle,
            aggregation: AggregationKind::Concatenate,
            skip: SkipFlags::default(),
            depth: Depth::R18,
            input_channels: 1,
            width_divisor: 1,
            zero_auxiliary: false,
        }
    }
}

impl FusionConfig {
    pub fn new(fusion_type: FusionType, aggregation: AggregationKind) -> Self {
        Self {
            fusion_type,
            aggregation,
            ..Self::default()
        }
    }

    pub fn with_skip(mut self, skip: SkipFlags) -> Self {
        self.skip = skip;
        self
    }

    pub fn with_depth(mut self, depth: Depth) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be at least 1"));
        }
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::config(
                "width_divisor",
                "must be a positive divisor of 64",
            ));
        }
        Ok(())
    }
}
