//! Central finite-difference checks of the analytic gradients.
//!
//! The networks are piecewise smooth: rectifiers and max-pooling switch
//! pieces. A central difference whose stencil switches piece does not
//! estimate the derivative, so every evaluation also records the active
//! piece and coordinates whose stencil leaves the base piece are counted as
//! kink crossings instead of being compared. A report fails if more than
//! [`MAX_KINK_FRACTION`] of the coordinates cross a kink, since the check would then compare
//! too little.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbone::BackboneSpec;
use crate::config::{FusionConfig, FusionType};
use crate::error::{Error, Result};
use crate::fusion::{AggregationKind, FusionBlock, SkipFlags};
use crate::loss::{focal_loss, focal_loss_batch, focal_loss_gradient, FocalLossParams};
use crate::model::FusionNet;
use crate::nn::{Mode, Param, Parameterized, Piecewise};
use crate::tensor::FeatureMap;

pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const LOSS_STEP: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const NETWORK_STEP: f64 = 1e-4;

/// Denominator floor so that gradients that are zero up to rounding do not
/// register as large relative errors.
const REL_FLOOR: f64 = 1e-7;

pub const MAX_KINK_FRACTION: f64 = 0.1;
pub const END_TO_END_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Loss,
    Fusion,
    EndToEndToy,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "loss" => Ok(Scope::Loss),
            "fusion" => Ok(Scope::Fusion),
            "end_to_end_toy" | "e2e" => Ok(Scope::EndToEndToy),
            _ => Err(Error::config(
                "scope",
                format!("unknown scope `{s}` (loss, fusion, end_to_end_toy)"),
            )),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Loss => "loss",
            Scope::Fusion => "fusion",
            Scope::EndToEndToy => "end_to_end_toy",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the stencil crossed a kink.
    pub kinks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn kink_fraction(&self) -> f64 {
        let total: usize = self.groups.iter().map(|g| g.checked + g.kinks).sum();
        let kinks: usize = self.groups.iter().map(|g| g.kinks).sum();
        if total == 0 {
            0.0
        } else {
            kinks as f64 / total as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.max_rel_error <= self.tolerance)
            && self.kink_fraction() <= MAX_KINK_FRACTION
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck scope={} tolerance={:e}",
            self.scope, self.tolerance
        )?;
        for g in &self.groups {
            let mark = if g.max_rel_error <= self.tolerance {
                "ok  "
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "  {mark} {:<48} max_rel_err={:.3e} n={} kinks={}",
                g.group, g.max_rel_error, g.checked, g.kinks
            )?;
        }
        writeln!(
            f,
            "  kink crossings: {:.3}% of coordinates",
            100.0 * self.kink_fraction()
        )?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn run(scope: Scope, seed: u64) -> Result<GradcheckReport> {
    match scope {
        Scope::Loss => check_loss(seed, 200),
        Scope::Fusion => check_fusion(seed),
        Scope::EndToEndToy => check_end_to_end(seed),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn normal_map(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    let data = normal_vec(rng, shape.iter().product(), 1.0);
    FeatureMap::from_vec(shape, data).expect("shape")
}

/// Focal-loss gradient against central differences over random logits,
/// targets, `γ` and `α`.
pub fn check_loss(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas = [0.0, 0.5, 1.0, 2.0, 5.0];
    let mut groups = Vec::new();
    for &gamma in &gammas {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for _ in 0..instances {
            let classes = 2;
            let logits = normal_vec(&mut rng, classes, 2.0);
            let target = rng.random_range(0..classes);
            let params = FocalLossParams {
                gamma,
                alpha: (0..classes).map(|_| rng.random_range(0.05..1.0)).collect(),
            };
            let analytic = focal_loss_gradient(&logits, target, &params)?;
            for j in 0..classes {
                let mut up = logits.clone();
                up[j] += LOSS_STEP;
                let mut down = logits.clone();
                down[j] -= LOSS_STEP;
                let numeric = (focal_loss(&up, target, &params)?
                    - focal_loss(&down, target, &params)?)
                    / (2.0 * LOSS_STEP);
                worst = worst.max(relative_error(analytic[j], numeric));
                checked += 1;
            }
        }
        groups.push(GroupError {
            group: format!("focal_loss gamma={gamma}"),
            max_rel_error: worst,
            checked,
            kinks: 0,
        });
    }
    Ok(GradcheckReport {
        scope: Scope::Loss,
        tolerance: LOSS_TOLERANCE,
        groups,
    })
}

/// Walks the learnable parameters in visit order.
fn learnable_layout(model: &impl Parameterized) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p: &Param| {
        if p.learnable {
            out.push((name.to_string(), p.len()));
        }
    });
    out
}

fn nudge(model: &mut impl Parameterized, target: usize, elem: usize, delta: f64) {
    let mut idx = 0;
    model.visit_params_mut("", &mut |_, p| {
        if p.learnable {
            if idx == target {
                p.value[elem] += delta;
            }
            idx += 1;
        }
    });
}

fn grads(model: &impl Parameterized) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.visit_params("", &mut |_, p| {
        if p.learnable {
            out.push(p.grad.clone());
        }
    });
    out
}

fn pattern_of(layer: &impl Piecewise) -> u64 {
    let mut h = DefaultHasher::new();
    layer.hash_pattern(&mut h);
    h.finish()
}

/// Accumulates one group: compares a coordinate only when both stencil
/// evaluations stayed on the base piece.
#[derive(Default)]
struct Tally {
    worst: f64,
    checked: usize,
    kinks: usize,
}

impl Tally {
    fn record(
        &mut self,
        base: u64,
        (up, up_pat): (f64, u64),
        (down, down_pat): (f64, u64),
        analytic: f64,
    ) {
        if up_pat != base || down_pat != base {
            self.kinks += 1;
            return;
        }
        let numeric = (up - down) / (2.0 * NETWORK_STEP);
        self.worst = self.worst.max(relative_error(analytic, numeric));
        self.checked += 1;
    }

    fn finish(self, group: String) -> GroupError {
        GroupError {
            group,
            max_rel_error: self.worst,
            checked: self.checked,
            kinks: self.kinks,
        }
    }
}

/// Compares parameter gradients of `model` with central differences of
/// `objective`, which returns the value and the active piece. The model's
/// gradients must already hold the analytic values.
fn check_params<M: Parameterized>(
    model: &mut M,
    label: &str,
    groups: &mut Vec<GroupError>,
    mut objective: impl FnMut(&mut M) -> Result<(f64, u64)>,
) -> Result<()> {
    let analytic = grads(model);
    let (_, base) = objective(model)?;
    for (pi, (name, len)) in learnable_layout(model).into_iter().enumerate() {
        let mut tally = Tally::default();
        for e in 0..len {
            nudge(model, pi, e, NETWORK_STEP);
            let up = objective(model)?;
            nudge(model, pi, e, -2.0 * NETWORK_STEP);
            let down = objective(model)?;
            nudge(model, pi, e, NETWORK_STEP);
            tally.record(base, up, down, analytic[pi][e]);
        }
        groups.push(tally.finish(format!("{label} {name}")));
    }
    Ok(())
}

fn weighted_sum(out: &FeatureMap, weights: &FeatureMap) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// The fusion block for both aggregations and all four skip settings, with
/// respect to both inputs and every parameter. Objective: `Σ r ⊙ out` for a
/// fixed random `r`.
pub fn check_fusion(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let shape = [4, 3, 3, 3];
    for kind in AggregationKind::ALL {
        for flags in SkipFlags::ALL {
            let label = format!("{kind}/skip={}", flags.label());
            let mut block = FusionBlock::new(3, kind, flags, &mut rng);
            // Move scale and shift off their initial values.
            block.norm.scale.value = normal_vec(&mut rng, 3, 0.5)
                .iter()
                .map(|v| 1.0 + v)
                .collect();
            block.norm.shift.value = normal_vec(&mut rng, 3, 0.5);
            let a = normal_map(&mut rng, shape);
            let b = normal_map(&mut rng, shape);
            let r = normal_map(&mut rng, shape);

            block.zero_grad();
            block.fuse_views(&a, &b, Mode::Train)?;
            let base = pattern_of(&block);
            let (ga, gb) = block.backward(&r)?;

            for (which, input, grad) in [("examined", &a, &ga), ("auxiliary", &b, &gb)] {
                let mut tally = Tally::default();
                for i in 0..input.data().len() {
                    let eval = |delta: f64, block: &mut FusionBlock| -> Result<(f64, u64)> {
                        let mut x = input.clone();
                        x.data_mut()[i] += delta;
                        let out = if which == "examined" {
                            block.fuse_views(&x, &b, Mode::Train)?
                        } else {
                            block.fuse_views(&a, &x, Mode::Train)?
                        };
                        Ok((weighted_sum(&out, &r), pattern_of(block)))
                    };
                    let up = eval(NETWORK_STEP, &mut block)?;
                    let down = eval(-NETWORK_STEP, &mut block)?;
                    tally.record(base, up, down, grad.data()[i]);
                }
                groups.push(tally.finish(format!("{label} d/d{which}")));
            }
            check_params(&mut block, &label, &mut groups, |blk| {
                let out = blk.fuse_views(&a, &b, Mode::Train)?;
                Ok((weighted_sum(&out, &r), pattern_of(blk)))
            })?;
        }
    }
    Ok(GradcheckReport {
        scope: Scope::Fusion,
        tolerance: NETWORK_TOLERANCE,
        groups,
    })
}

/// Whole network on the toy backbone for every fusion type and aggregation,
/// with both skips on. Objective: mean focal loss on a random batch.
pub fn check_end_to_end(seed: u64) -> Result<GradcheckReport> {
    check_end_to_end_with(seed, END_TO_END_BATCH)
}

/// [`check_end_to_end`] with a chosen number of cases per batch.
pub fn check_end_to_end_with(seed: u64, batch: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let spec = BackboneSpec::toy(1);
    let params = FocalLossParams {
        gamma: 2.0,
        alpha: vec![0.4, 0.6],
    };
    let shape = [batch, 1, 16, 16];
    for fusion_type in FusionType::ALL {
        for kind in AggregationKind::ALL {
            let config = FusionConfig::new(fusion_type, kind).with_skip(SkipFlags::BOTH);
            let mut net = FusionNet::with_backbone(&config, &spec, rng.random())?;
            let ex = normal_map(&mut rng, shape);
            let aux = normal_map(&mut rng, shape);
            let labels: Vec<usize> = (0..batch)
                .map(|i| usize::from(i % 4 == 1 || i % 4 == 2))
                .collect();
            let objective = |net: &mut FusionNet| -> Result<(f64, u64)> {
                let logits = net.forward(&ex, &aux, Mode::Train)?;
                Ok((
                    focal_loss_batch(&logits, &labels, &params)?.0,
                    pattern_of(net),
                ))
            };
            net.zero_grad();
            let logits = net.forward(&ex, &aux, Mode::Train)?;
            let (_, g) = focal_loss_batch(&logits, &labels, &params)?;
            net.backward(&g)?;
            let label = format!("{fusion_type}/{kind}");
            check_params(&mut net, &label, &mut groups, objective)?;
        }
    }
    Ok(GradcheckReport {
        scope: Scope::EndToEndToy,
        tolerance: NETWORK_TOLERANCE,
        groups,
    })
}
