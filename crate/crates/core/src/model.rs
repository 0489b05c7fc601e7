//! The two-view network: shared Coarse Layer, fusion block, Fine Layer.

use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    plan_network, BackboneSpec, CoarseLayer, FineLayer, NetworkPlan, NUM_CLASSES,
};
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionBlock;
use crate::nn::{Mode, Param, Parameterized, Piecewise};
use crate::tensor::FeatureMap;

/// Learnable parameter counts by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub coarse: usize,
    /// 1×1 projection weights and bias.
    pub fusion_projection: usize,
    /// Normalization scale and shift of the fusion block.
    pub fusion_norm: usize,
    /// Fine-layer blocks, excluding the classifier.
    pub fine: usize,
    pub classifier: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.coarse + self.fusion_projection + self.fusion_norm + self.fine + self.classifier
    }
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub plan: NetworkPlan,
    pub coarse: CoarseLayer,
    pub fusion: FusionBlock,
    pub fine: FineLayer,
}

impl FusionNet {
    /// Builds the network for `config` with weights drawn from `seed`.
    pub fn new(config: &FusionConfig, seed: u64) -> Result<Self> {
        let spec = BackboneSpec::from_config(config)?;
        Self::with_backbone(config, &spec, seed)
    }

    pub fn with_backbone(config: &FusionConfig, spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let plan = plan_network(config, spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = CoarseLayer::build(&plan, &mut rng);
        let fusion = FusionBlock::new(
            plan.per_view_width(),
            config.aggregation,
            config.skip,
            &mut rng,
        );
        let fine = FineLayer::build(&plan, &mut rng);
        Ok(Self {
            config: config.clone(),
            plan,
            coarse,
            fusion,
            fine,
        })
    }

    /// `C(x)` for a batch of single-view images.
    pub fn coarse_forward(&mut self, images: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        self.coarse.forward(images, mode)
    }

    /// Fine Layer and classifier on a fused feature.
    pub fn fine_forward(&mut self, fused: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        self.fine.forward(fused, mode)
    }

    /// Logits `(batch, 2, 1, 1)` for a batch of (examined, auxiliary) image pairs.
    ///
    /// Both views run through the Coarse Layer as one stacked batch, so the
    /// shared weights see both views in every normalization statistic.
    pub fn forward(
        &mut self,
        examined: &FeatureMap,
        auxiliary: &FeatureMap,
        mode: Mode,
    ) -> Result<FeatureMap> {
        examined.ensure_same_shape(auxiliary, "view pair")?;
        let stacked = if self.config.zero_auxiliary {
            FeatureMap::stack_batch(examined, &FeatureMap::zeros(auxiliary.shape()))?
        } else {
            FeatureMap::stack_batch(examined, auxiliary)?
        };
        let (a, b) = self.coarse.forward(&stacked, mode)?.split_batch()?;
        let fused = self.fusion.fuse_views(&a, &b, mode)?;
        self.fine.forward(&fused, mode)
    }

    /// Backpropagates `d loss / d logits` from the last train-mode forward.
    pub fn backward(&mut self, grad_logits: &FeatureMap) -> Result<()> {
        let g = self.fine.backward(grad_logits)?;
        let (ga, gb) = self.fusion.backward(&g)?;
        let stacked = FeatureMap::stack_batch(&ga, &gb)?;
        self.coarse.backward(&stacked)?;
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut count = ParamCount::default();
        self.coarse.visit_params("", &mut |_, p| {
            if p.learnable {
                count.coarse += p.len();
            }
        });
        self.fusion
            .projection
            .visit_params("", &mut |_, p| count.fusion_projection += p.len());
        self.fusion.norm.visit_params("", &mut |_, p| {
            if p.learnable {
                count.fusion_norm += p.len();
            }
        });
        self.fine.visit_params("", &mut |name, p| {
            if !p.learnable {
                return;
            }
            if name.starts_with("head/") {
                count.classifier += p.len();
            } else {
                count.fine += p.len();
            }
        });
        count
    }

    /// Logits to positive-class probabilities and argmax predictions.
    pub fn predict(logits: &FeatureMap) -> (Vec<f64>, Vec<usize>) {
        let mut probs = Vec::with_capacity(logits.batch());
        let mut preds = Vec::with_capacity(logits.batch());
        for s in 0..logits.batch() {
            let z = logits.sample(s);
            let p = crate::loss::softmax(z);
            probs.push(p[1]);
            preds.push(usize::from(z[1] > z[0]));
        }
        (probs, preds)
    }

    pub fn ensure_batch_logits(logits: &FeatureMap) -> Result<()> {
        if logits.sample_len() != NUM_CLASSES {
            return Err(Error::dimension("logits", NUM_CLASSES, logits.shape()));
        }
        Ok(())
    }
}

impl Piecewise for FusionNet {
    fn hash_pattern(&self, h: &mut dyn Hasher) {
        self.coarse.hash_pattern(h);
        self.fusion.hash_pattern(h);
        self.fine.hash_pattern(h);
    }
}

impl Parameterized for FusionNet {
    fn visit_params(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.coarse.visit_params("", f);
        self.fusion.visit_params("fusion", f);
        self.fine.visit_params("", f);
    }

    fn visit_params_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.coarse.visit_params_mut("", f);
        self.fusion.visit_params_mut("fusion", f);
        self.fine.visit_params_mut("", f);
    }
}
