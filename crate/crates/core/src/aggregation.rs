//! View completion and object/context dual-channel aggregation.
//!
//! Every image is evaluated on a fixed number of view slots: the full image,
//! the ranked crops from region discovery, and random context crops filling
//! the rest. Random crops are kept only if they do not overlap any accepted
//! box by `tau_rand` or more; slots that cannot be filled are padded and
//! masked out.
//!
//! Search crops form the object channel and random crops the context channel.
//! Inside each channel a crop's weight mixes a softmax over visual scores with
//! a softmax over text scores:
//!
//! ```text
//! w_i   = (1 - beta) softmax(s_visual / tau_v)_i + beta softmax(s_text / tau_t)_i
//! z_k   = sum_i w_i s_i                       (s_i: class similarities of crop i)
//! z_dc  = alpha_dc z_o + (1 - alpha_dc) z_c
//! z_fin = lambda z_dc + (1 - lambda) z_full
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};
use crate::features::{cosine, Embedding, FeatureBundle};
use crate::geometry::{clamp_to_image, iou, BoundingBox};
use crate::math;
use crate::rng;
use crate::search::{score_box, CropOrigin, ScoredCrop};
use crate::textbank::stage2_prototype;
use crate::two_stage::{
    gamma_map, mean_pool_top_crops, predict_confidence, run_two_stage, TwoStageConfig,
};

/// Attempts allowed per random slot before sampling stops.
pub const MAX_REJECTIONS_PER_SLOT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub tau_v: f64,
    pub tau_t: f64,
    pub beta: f64,
    pub alpha_dc: f64,
    pub lambda: f64,
    pub tau_rand: f64,
    /// Total view slots, full image included.
    pub views: usize,
    /// Range of random crop width and height, as image fractions.
    pub random_scale: (f64, f64),
    /// Whether the full-image box takes part in the random-crop IoU filter.
    pub filter_against_full: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            tau_v: 0.05,
            tau_t: 0.05,
            beta: 0.5,
            alpha_dc: 0.6,
            lambda: 0.8,
            tau_rand: 0.95,
            views: 16,
            random_scale: (0.3, 0.8),
            filter_against_full: false,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let (lo, hi) = self.random_scale;
        let ok = self.tau_v > 0.0
            && self.tau_t > 0.0
            && unit(self.beta)
            && unit(self.alpha_dc)
            && unit(self.lambda)
            && self.tau_rand > 0.0
            && self.tau_rand <= 1.0
            && self.views >= 2
            && 0.0 < lo
            && lo <= hi
            && hi <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(LagoError::InvalidConfig(format!(
                "invalid aggregation config {self:?}"
            )))
        }
    }
}

/// Region discovery plus aggregation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PipelineConfig {
    pub two_stage: TwoStageConfig,
    pub aggregation: AggregationConfig,
    /// When set, class prototypes are rebuilt by template reweighting at
    /// this temperature before inference.
    pub template_temperature: Option<f64>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.two_stage.validate()?;
        self.aggregation.validate()?;
        if let Some(t) = self.template_temperature {
            if !(t > 0.0) {
                return Err(LagoError::InvalidConfig(
                    "template temperature must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fixed-length view slots with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<ScoredCrop>,
    pub valid: Vec<bool>,
    /// Class similarities of the full image.
    pub full_logits: Vec<f64>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Appends `n` masked zero slots.
    pub fn pad(&mut self, n: usize) {
        let dim = self.views.first().map(|v| v.embedding.dim()).unwrap_or(0);
        for _ in 0..n {
            self.views.push(ScoredCrop::zero_padding(dim));
            self.valid.push(false);
        }
    }
}

/// Samples a box with a uniform center and uniform extents, clamped.
pub fn sample_random_box<R: Rng>(rng: &mut R, scale: (f64, f64)) -> BoundingBox {
    let cx: f64 = rng.random();
    let cy: f64 = rng.random();
    let (lo, hi) = scale;
    let w = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let h = if hi > lo { rng.random_range(lo..hi) } else { lo };
    clamp_to_image(BoundingBox {
        x: cx - 0.5 * w,
        y: cy - 0.5 * h,
        w,
        h,
    })
    .expect("positive extents")
}

fn full_image_crop(bundle: &FeatureBundle, w_text: &Embedding, gamma: f64) -> Result<ScoredCrop> {
    ScoredCrop::from_embedding(
        BoundingBox::FULL,
        bundle.full_embedding.clone(),
        &bundle.full_embedding,
        Some(w_text),
        gamma,
        CropOrigin::FullImage,
    )
}

/// Fills `cfg.views` slots: full image, ranked crops, then IoU-filtered random
/// context crops, padding with masked slots once a slot exhausts
/// [`MAX_REJECTIONS_PER_SLOT`] attempts.
pub fn complete_views(
    ranked: &[ScoredCrop],
    bundle: &FeatureBundle,
    w_text: &Embedding,
    gamma: f64,
    cfg: &AggregationConfig,
    rng_seed: u64,
) -> Result<ViewSet> {
    let mut views = Vec::with_capacity(cfg.views);
    views.push(full_image_crop(bundle, w_text, gamma)?);
    for c in ranked.iter().take(cfg.views - 1) {
        views.push(c.clone());
    }

    let mut accepted: Vec<BoundingBox> = views[1..].iter().map(|c| c.bbox).collect();
    if cfg.filter_against_full {
        accepted.push(BoundingBox::FULL);
    }
    let mut rng = rng::stream(rng_seed, &bundle.image_id, rng::label::RANDOM_CROPS);
    'slots: while views.len() < cfg.views {
        for _ in 0..MAX_REJECTIONS_PER_SLOT {
            let b = sample_random_box(&mut rng, cfg.random_scale);
            if accepted.iter().all(|a| iou(a, &b) < cfg.tau_rand) {
                let mut crop = score_box(bundle, &b, Some(w_text), gamma)?;
                crop.origin = CropOrigin::RandomCompletion;
                views.push(crop);
                accepted.push(b);
                continue 'slots;
            }
        }
        break;
    }

    let valid = vec![true; views.len()];
    let mut vs = ViewSet {
        views,
        valid,
        full_logits: bundle.class_similarities(&bundle.full_embedding)?,
    };
    let missing = cfg.views - vs.len();
    vs.pad(missing);
    Ok(vs)
}

/// Indices of the valid object-channel and context-channel views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub object: Vec<usize>,
    pub context: Vec<usize>,
}

/// Search crops go to the object channel, random crops to the context
/// channel; the full image and padded slots go to neither.
pub fn assign_channels(vs: &ViewSet) -> Channels {
    let mut ch = Channels {
        object: Vec::new(),
        context: Vec::new(),
    };
    for (i, (view, valid)) in vs.views.iter().zip(&vs.valid).enumerate() {
        if !valid {
            continue;
        }
        match view.origin {
            CropOrigin::ProposalSearch => ch.object.push(i),
            CropOrigin::RandomCompletion => ch.context.push(i),
            CropOrigin::FullImage => {}
        }
    }
    ch
}

/// Within-channel crop weights.
pub fn channel_weights(
    crops: &[&ScoredCrop],
    w_text: &Embedding,
    tau_v: f64,
    tau_t: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let visual: Vec<f64> = crops.iter().map(|c| c.s_visual).collect();
    let text = crops
        .iter()
        .map(|c| match c.s_text {
            Some(t) => Ok(t),
            None => cosine(&c.embedding, w_text),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mixed_weights(&visual, &text, tau_v, tau_t, beta))
}

/// `(1 - beta) softmax(visual / tau_v) + beta softmax(text / tau_t)`.
pub fn mixed_weights(visual: &[f64], text: &[f64], tau_v: f64, tau_t: f64, beta: f64) -> Vec<f64> {
    let p = math::softmax(visual, tau_v);
    let q = math::softmax(text, tau_t);
    p.iter()
        .zip(&q)
        .map(|(p, q)| (1.0 - beta) * p + beta * q)
        .collect()
}

/// One aggregation channel: crop weights and class-similarity vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Channel {
    pub weights: Vec<f64>,
    pub sims: Vec<Vec<f64>>,
}

impl Channel {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn pooled(&self, classes: usize) -> Vec<f64> {
        let mut z = vec![0.0; classes];
        for (w, s) in self.weights.iter().zip(&self.sims) {
            for (zk, sk) in z.iter_mut().zip(s) {
                *zk += w * sk;
            }
        }
        z
    }
}

/// Fuses the two channels and the full-image logits.
///
/// With one channel empty the other is used alone; with both empty the
/// full-image logits are returned unchanged.
pub fn aggregate(
    object: &Channel,
    context: &Channel,
    z_full: &[f64],
    alpha_dc: f64,
    lambda: f64,
) -> Vec<f64> {
    let y = z_full.len();
    let z_dc = match (object.is_empty(), context.is_empty()) {
        (true, true) => return z_full.to_vec(),
        (false, true) => object.pooled(y),
        (true, false) => context.pooled(y),
        (false, false) => {
            let zo = object.pooled(y);
            let zc = context.pooled(y);
            zo.iter()
                .zip(&zc)
                .map(|(o, c)| alpha_dc * o + (1.0 - alpha_dc) * c)
                .collect()
        }
    };
    z_dc.iter()
        .zip(z_full)
        .map(|(dc, f)| lambda * dc + (1.0 - lambda) * f)
        .collect()
}

/// Builds both channels of a view set.
pub fn build_channels(
    vs: &ViewSet,
    bundle: &FeatureBundle,
    w_text: &Embedding,
    cfg: &AggregationConfig,
) -> Result<(Channels, Channel, Channel)> {
    let ch = assign_channels(vs);
    let make = |idx: &[usize]| -> Result<Channel> {
        let crops: Vec<&ScoredCrop> = idx.iter().map(|&i| &vs.views[i]).collect();
        Ok(Channel {
            weights: channel_weights(&crops, w_text, cfg.tau_v, cfg.tau_t, cfg.beta)?,
            sims: crops
                .iter()
                .map(|c| bundle.class_similarities(&c.embedding))
                .collect::<Result<_>>()?,
        })
    };
    let object = make(&ch.object)?;
    let context = make(&ch.context)?;
    Ok((ch, object, context))
}

/// How region candidates are produced before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Two-stage region discovery.
    Lago,
    /// Discovery replaced by uniformly random crops in the same slots.
    Random,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Lago => f.write_str("lago"),
            Strategy::Random => f.write_str("random"),
        }
    }
}

/// Region-discovery output that aggregation consumes.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub ranked: Vec<ScoredCrop>,
    pub stage_one: Vec<ScoredCrop>,
    pub z1: Vec<f64>,
    pub confidence: f64,
    pub gamma: f64,
    pub w_text: Embedding,
}

/// Runs two-stage discovery.
pub fn discover(bundle: &FeatureBundle, cfg: &TwoStageConfig) -> Result<Discovery> {
    let out = run_two_stage(bundle, cfg)?;
    Ok(Discovery {
        ranked: out.ranked,
        stage_one: out.stage_one.crops,
        z1: out.stage_one.z1,
        confidence: out.stage_one.confidence,
        gamma: out.stage_one.gamma,
        w_text: out.stage_one.w_text,
    })
}

/// Random-crop ablation: `min(k_final, views - 1)` uniformly random boxes
/// take the place of the discovered crops, and the intermediate prediction,
/// guidance weight and text target are derived from them the same way.
pub fn discover_random(
    bundle: &FeatureBundle,
    cfg: &TwoStageConfig,
    views: usize,
    scale: (f64, f64),
    rng_seed: u64,
) -> Result<Discovery> {
    let n = cfg.k_final.min(views.saturating_sub(1)).max(1);
    let mut rng = rng::stream(rng_seed, &bundle.image_id, rng::label::ABLATION_CROPS);
    let crops = (0..n)
        .map(|_| score_box(bundle, &sample_random_box(&mut rng, scale), None, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let v_ens = mean_pool_top_crops(&crops, cfg.k1)?;
    let z1 = bundle.class_similarities(&v_ens)?;
    let (_, confidence) = predict_confidence(&z1, &cfg.confidence);
    let gamma = gamma_map(confidence, &cfg.gamma);
    let w_text = stage2_prototype(&z1, cfg.prototype_temperature, &bundle.text_bank)?.embedding;
    let ranked = crops
        .iter()
        .map(|c| c.rescored(Some(&w_text), gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(Discovery {
        stage_one: crops,
        ranked,
        z1,
        confidence,
        gamma,
        w_text,
    })
}

/// Final per-image output.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub image_id: String,
    pub z_final: Vec<f64>,
    pub z_full: Vec<f64>,
    pub predicted: usize,
    /// Argmax of the full-image logits alone.
    pub full_predicted: usize,
    pub ground_truth: Option<usize>,
    pub z1: Vec<f64>,
    pub confidence: f64,
    pub gamma: f64,
    pub w_text: Embedding,
    pub stage_one: Vec<ScoredCrop>,
    pub ranked: Vec<ScoredCrop>,
    pub views: ViewSet,
    pub channels: Channels,
    pub object: Channel,
    pub context: Channel,
}

impl InferenceResult {
    pub fn is_correct(&self) -> Option<bool> {
        self.ground_truth.map(|gt| gt == self.predicted)
    }
}

/// View completion and aggregation on top of a discovery result.
pub fn finish(
    bundle: &FeatureBundle,
    discovery: Discovery,
    cfg: &AggregationConfig,
    rng_seed: u64,
) -> Result<InferenceResult> {
    let vs = complete_views(
        &discovery.ranked,
        bundle,
        &discovery.w_text,
        discovery.gamma,
        cfg,
        rng_seed,
    )?;
    let (channels, object, context) = build_channels(&vs, bundle, &discovery.w_text, cfg)?;
    let z_final = aggregate(&object, &context, &vs.full_logits, cfg.alpha_dc, cfg.lambda);
    Ok(InferenceResult {
        image_id: bundle.image_id.clone(),
        predicted: math::argmax(&z_final),
        full_predicted: math::argmax(&vs.full_logits),
        z_full: vs.full_logits.clone(),
        z_final,
        ground_truth: bundle.ground_truth,
        z1: discovery.z1,
        confidence: discovery.confidence,
        gamma: discovery.gamma,
        w_text: discovery.w_text,
        stage_one: discovery.stage_one,
        ranked: discovery.ranked,
        views: vs,
        channels,
        object,
        context,
    })
}

fn prepared(bundle: &FeatureBundle, cfg: &PipelineConfig) -> Result<Option<FeatureBundle>> {
    match cfg.template_temperature {
        Some(t) if bundle.text_bank.has_templates() => {
            let mut b = bundle.clone();
            b.text_bank = bundle.text_bank.reweighted(t)?;
            Ok(Some(b))
        }
        _ => Ok(None),
    }
}

/// Region discovery with the chosen strategy, then aggregation.
pub fn classify_with_strategy(
    bundle: &FeatureBundle,
    cfg: &PipelineConfig,
    strategy: Strategy,
    rng_seed: u64,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let owned = prepared(bundle, cfg)?;
    let bundle = owned.as_ref().unwrap_or(bundle);
    let discovery = match strategy {
        Strategy::Lago => discover(bundle, &cfg.two_stage)?,
        Strategy::Random => discover_random(
            bundle,
            &cfg.two_stage,
            cfg.aggregation.views,
            cfg.aggregation.random_scale,
            rng_seed,
        )?,
    };
    finish(bundle, discovery, &cfg.aggregation, rng_seed)
}

/// End-to-end zero-shot classification of one bundle.
pub fn classify(
    bundle: &FeatureBundle,
    cfg: &PipelineConfig,
    rng_seed: u64,
) -> Result<InferenceResult> {
    classify_with_strategy(bundle, cfg, Strategy::Lago, rng_seed)
}
