//! Confidence-aware two-stage region discovery.
//!
//! Stage 1 searches from every proposal with visual scores only. The top
//! Stage-1 crops are mean-pooled into an ensemble embedding whose class
//! similarities give the intermediate logits `z1`, a prediction and a
//! confidence. The confidence is mapped to a guidance weight `gamma`, `z1` to
//! a soft text target, and Stage 2 searches again from the best Stage-1 crops
//! with the mixed objective. Both crop sets are finally rescored on the same
//! basis, deduplicated and ranked.

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};
use crate::features::{Embedding, FeatureBundle};
use crate::math;
use crate::search::{diverse_top_crops, search_top_k_crops, ScoredCrop, SearchConfig};
use crate::textbank::{stage2_prototype, DEFAULT_PROTOTYPE_TEMPERATURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Largest softmax probability.
    SoftmaxMax,
    /// Gap between the two largest softmax probabilities.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePolicy {
    pub mode: ConfidenceMode,
    pub temperature: f64,
}

impl Default for ConfidencePolicy {
    fn default() -> Self {
        ConfidencePolicy {
            mode: ConfidenceMode::Margin,
            temperature: 0.05,
        }
    }
}

/// Piecewise-linear map from confidence to guidance weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPolicy {
    pub c_lo: f64,
    pub c_hi: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for GammaPolicy {
    fn default() -> Self {
        GammaPolicy {
            c_lo: 0.05,
            c_hi: 0.40,
            gamma_min: 0.0,
            gamma_max: 0.7,
        }
    }
}

impl GammaPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.c_lo
            && self.c_lo < self.c_hi
            && self.c_hi <= 1.0
            && 0.0 <= self.gamma_min
            && self.gamma_min <= self.gamma_max
            && self.gamma_max <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(LagoError::InvalidConfig(format!(
                "gamma policy needs 0 <= c_lo < c_hi <= 1 and 0 <= gamma_min <= gamma_max <= 1, got {self:?}"
            )))
        }
    }
}

/// Settings for the whole region-discovery pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub search: SearchConfig,
    pub confidence: ConfidencePolicy,
    pub gamma: GammaPolicy,
    /// Stage-1 crops pooled into the ensemble embedding.
    pub k1: usize,
    /// Stage-1 crops used as Stage-2 seeds.
    pub n1: usize,
    /// Cap on the cross-proposal Stage-1 set.
    pub k_global: usize,
    /// Cap on the final ranked set.
    pub k_final: usize,
    /// Temperature of the soft text prototype.
    pub prototype_temperature: f64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            search: SearchConfig::default(),
            confidence: ConfidencePolicy::default(),
            gamma: GammaPolicy::default(),
            k1: 4,
            n1: 3,
            k_global: 8,
            k_final: 12,
            prototype_temperature: DEFAULT_PROTOTYPE_TEMPERATURE,
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.gamma.validate()?;
        if !(self.confidence.temperature > 0.0) || !(self.prototype_temperature > 0.0) {
            return Err(LagoError::InvalidConfig(
                "temperatures must be positive".into(),
            ));
        }
        if self.k1 == 0 || self.n1 == 0 || self.k_global == 0 || self.k_final == 0 {
            return Err(LagoError::InvalidConfig(
                "k1, n1, k_global and k_final must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Intermediate results of Stage 1 and the quantities derived from them.
#[derive(Debug, Clone)]
pub struct StageOneResult {
    /// Raw union of the per-proposal searches.
    pub union: Vec<ScoredCrop>,
    /// `union` after the cross-proposal diversity pass.
    pub crops: Vec<ScoredCrop>,
    pub z1: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
    pub gamma: f64,
    pub w_text: Embedding,
    /// Class mixing weights behind `w_text`.
    pub class_weights: Vec<f64>,
}

/// Output of [`run_two_stage`].
#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    pub ranked: Vec<ScoredCrop>,
    pub stage_one: StageOneResult,
    /// Raw Stage-2 crops; empty when `gamma` is zero.
    pub stage_two: Vec<ScoredCrop>,
}

/// Union of visual-only searches from every proposal.
pub fn stage1_union(bundle: &FeatureBundle, cfg: &SearchConfig) -> Result<Vec<ScoredCrop>> {
    let mut union = Vec::new();
    for b0 in &bundle.proposals {
        union.extend(search_top_k_crops(bundle, b0, None, 0.0, cfg)?);
    }
    Ok(union)
}

/// Stage-1 candidates: the union of per-proposal searches, deduplicated
/// across proposals and capped at `k_global`.
pub fn stage1_discover(
    bundle: &FeatureBundle,
    cfg: &SearchConfig,
    k_global: usize,
) -> Result<Vec<ScoredCrop>> {
    let union = stage1_union(bundle, cfg)?;
    Ok(diverse_top_crops(&union, k_global, cfg.tau_search))
}

/// Crops sorted by descending `s_combined`, stable on input order.
fn by_score(crops: &[ScoredCrop]) -> Vec<&ScoredCrop> {
    let mut sorted: Vec<&ScoredCrop> = crops.iter().collect();
    sorted.sort_by(|a, b| b.s_combined.total_cmp(&a.s_combined));
    sorted
}

/// Normalized mean embedding of the `k1` best crops.
pub fn mean_pool_top_crops(crops: &[ScoredCrop], k1: usize) -> Result<Embedding> {
    let top = by_score(crops);
    let top = &top[..k1.min(top.len())];
    let first = top
        .first()
        .ok_or(LagoError::DegenerateVector("no crops to pool"))?;
    let mut acc = vec![0.0; first.embedding.dim()];
    for c in top {
        for (a, v) in acc.iter_mut().zip(c.embedding.iter()) {
            *a += v;
        }
    }
    Embedding::unit(&acc)
}

/// Argmax class (lowest index on ties) and its confidence.
pub fn predict_confidence(z: &[f64], policy: &ConfidencePolicy) -> (usize, f64) {
    let predicted = math::argmax(z);
    let p = math::softmax(z, policy.temperature);
    let confidence = match policy.mode {
        ConfidenceMode::SoftmaxMax => p.iter().copied().fold(0.0, f64::max),
        ConfidenceMode::Margin => {
            let mut sorted = p;
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[0] - sorted.get(1).copied().unwrap_or(0.0)
        }
    };
    (predicted, confidence.clamp(0.0, 1.0))
}

/// Guidance weight for a confidence value.
pub fn gamma_map(c: f64, policy: &GammaPolicy) -> f64 {
    if c <= policy.c_lo {
        policy.gamma_min
    } else if c >= policy.c_hi {
        policy.gamma_max
    } else {
        let t = (c - policy.c_lo) / (policy.c_hi - policy.c_lo);
        policy.gamma_min + t * (policy.gamma_max - policy.gamma_min)
    }
}

/// Text-guided searches seeded from the `n1` best Stage-1 crops.
pub fn stage2_refine(
    bundle: &FeatureBundle,
    seeds: &[ScoredCrop],
    w_text: &Embedding,
    gamma: f64,
    cfg: &SearchConfig,
    n1: usize,
) -> Result<Vec<ScoredCrop>> {
    let mut out = Vec::new();
    for seed in by_score(seeds).into_iter().take(n1) {
        out.extend(search_top_k_crops(bundle, &seed.bbox, Some(w_text), gamma, cfg)?);
    }
    Ok(out)
}

/// Rescores `c1 ∪ c2` against `(w_text, gamma)`, keeps a diverse top
/// `k_final` and returns it ranked by combined score.
pub fn merge_and_refine(
    c1: &[ScoredCrop],
    c2: &[ScoredCrop],
    w_text: &Embedding,
    gamma: f64,
    tau_search: f64,
    k_final: usize,
) -> Result<Vec<ScoredCrop>> {
    let merged = c1
        .iter()
        .chain(c2)
        .map(|c| c.rescored(Some(w_text), gamma))
        .collect::<Result<Vec<_>>>()?;
    // diverse_top_crops already visits by descending score, so its output is ranked.
    Ok(diverse_top_crops(&merged, k_final, tau_search))
}

fn stage_one(bundle: &FeatureBundle, cfg: &TwoStageConfig) -> Result<StageOneResult> {
    let union = stage1_union(bundle, &cfg.search)?;
    let crops = diverse_top_crops(&union, cfg.k_global, cfg.search.tau_search);
    let v_ens = mean_pool_top_crops(&crops, cfg.k1)?;
    let z1 = bundle.class_similarities(&v_ens)?;
    let (predicted, confidence) = predict_confidence(&z1, &cfg.confidence);
    let gamma = gamma_map(confidence, &cfg.gamma);
    let proto = stage2_prototype(&z1, cfg.prototype_temperature, &bundle.text_bank)?;
    Ok(StageOneResult {
        union,
        crops,
        z1,
        predicted,
        confidence,
        gamma,
        w_text: proto.embedding,
        class_weights: proto.weights,
    })
}

/// The full two-stage discovery pipeline.
///
/// Stage 2 is skipped when `gamma` is zero: its objective then coincides with
/// the Stage-1 objective, and the output equals [`run_stage_one_only`].
pub fn run_two_stage(bundle: &FeatureBundle, cfg: &TwoStageConfig) -> Result<TwoStageOutput> {
    cfg.validate()?;
    let s1 = stage_one(bundle, cfg)?;
    let stage_two = if s1.gamma > 0.0 {
        stage2_refine(bundle, &s1.crops, &s1.w_text, s1.gamma, &cfg.search, cfg.n1)?
    } else {
        Vec::new()
    };
    let ranked = merge_and_refine(
        &s1.crops,
        &stage_two,
        &s1.w_text,
        s1.gamma,
        cfg.search.tau_search,
        cfg.k_final,
    )?;
    Ok(TwoStageOutput {
        ranked,
        stage_one: s1,
        stage_two,
    })
}

/// Ablation without text-guided refinement: Stage-1 crops ranked by their
/// visual score alone.
pub fn run_stage_one_only(bundle: &FeatureBundle, cfg: &TwoStageConfig) -> Result<TwoStageOutput> {
    cfg.validate()?;
    let mut s1 = stage_one(bundle, cfg)?;
    s1.gamma = 0.0;
    let ranked = merge_and_refine(
        &s1.crops,
        &[],
        &s1.w_text,
        0.0,
        cfg.search.tau_search,
        cfg.k_final,
    )?;
    Ok(TwoStageOutput {
        ranked,
        stage_one: s1,
        stage_two: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::search::CropOrigin;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn crop(bbox: BoundingBox, emb: &[f64], s_visual: f64, s_text: Option<f64>) -> ScoredCrop {
        ScoredCrop {
            bbox,
            embedding: Embedding::new(emb.to_vec()),
            s_visual,
            s_text,
            s_combined: s_visual,
            gamma: 0.0,
            origin: CropOrigin::ProposalSearch,
        }
    }

    /// Independent softmax for the oracle values below.
    fn naive_softmax(z: &[f64], t: f64) -> Vec<f64> {
        let ex: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
        let s: f64 = ex.iter().sum();
        ex.iter().map(|v| v / s).collect()
    }

    #[test]
    fn confidence_examples() {
        let margin = ConfidencePolicy { mode: ConfidenceMode::Margin, temperature: 1.0 };
        let smax = ConfidencePolicy { mode: ConfidenceMode::SoftmaxMax, temperature: 1.0 };

        let (k, c) = predict_confidence(&[0.3, 0.3, 0.3], &margin);
        assert_eq!((k, c), (0, 0.0));

        for p in [margin, smax] {
            let (k, c) = predict_confidence(&[0.0, 50.0, 0.0], &p);
            assert_eq!(k, 1);
            assert_abs_diff_eq!(c, 1.0, epsilon = 1e-6);
        }

        let oracle = naive_softmax(&[2.0, 1.0, 0.0], 1.0);
        assert_abs_diff_eq!(oracle[0], 0.6652, epsilon = 1e-4);
        assert_abs_diff_eq!(oracle[1], 0.2447, epsilon = 1e-4);
        let (k, c) = predict_confidence(&[2.0, 1.0, 0.0], &margin);
        assert_eq!(k, 0);
        assert_abs_diff_eq!(c, oracle[0] - oracle[1], epsilon = 1e-12);
        assert_abs_diff_eq!(c, 0.4205, epsilon = 1e-4);
    }

    #[test]
    fn gamma_map_examples() {
        let p = GammaPolicy { c_lo: 0.1, c_hi: 0.6, gamma_min: 0.0, gamma_max: 0.7 };
        assert_eq!(gamma_map(0.05, &p), 0.0);
        assert_eq!(gamma_map(0.6, &p), 0.7);
        assert_abs_diff_eq!(gamma_map(0.35, &p), 0.35, epsilon = 1e-12);
        assert!(GammaPolicy { c_lo: 0.5, c_hi: 0.5, ..p }.validate().is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let b = BoundingBox::FULL;
        let single = [crop(b, &[0.6, 0.8], 0.5, None)];
        assert_eq!(mean_pool_top_crops(&single, 4).unwrap().as_slice(), &[0.6, 0.8]);

        let same = vec![crop(b, &[0.0, 1.0], 0.5, None); 3];
        assert_eq!(mean_pool_top_crops(&same, 3).unwrap().as_slice(), &[0.0, 1.0]);

        let two = [crop(b, &[1.0, 0.0], 0.9, None), crop(b, &[0.0, 1.0], 0.8, None)];
        let v = mean_pool_top_crops(&two, 2).unwrap();
        assert_abs_diff_eq!(v[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);

        // Only the best crop is pooled when k1 = 1.
        let v = mean_pool_top_crops(&two, 1).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn merge_rescoring_flips_order() {
        // Text scores come from cosines against w_text = e1 in a 2-d space.
        let w_text = Embedding::new(vec![0.0, 1.0]);
        let a_emb = [(1.0f64 - 0.01).sqrt(), 0.1]; // s_text = 0.1
        let b_emb = [(1.0f64 - 0.81).sqrt(), 0.9]; // s_text = 0.9
        let a = crop(BoundingBox::new(0.0, 0.0, 0.3, 0.3).unwrap(), &a_emb, 0.9, None);
        let b = crop(BoundingBox::new(0.6, 0.6, 0.3, 0.3).unwrap(), &b_emb, 0.5, None);
        let out = merge_and_refine(&[a.clone(), b.clone()], &[], &w_text, 0.7, 0.6, 12).unwrap();
        assert_eq!(out[0].bbox, b.bbox);
        // 0.3 * 0.5 + 0.7 * 0.9 = 0.78 and 0.3 * 0.9 + 0.7 * 0.1 = 0.34.
        assert_abs_diff_eq!(out[0].s_combined, 0.78, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1].s_combined, 0.34, epsilon = 1e-12);

        // gamma = 0 keeps the visual order.
        let out = merge_and_refine(&[a.clone(), b.clone()], &[], &w_text, 0.0, 0.6, 12).unwrap();
        assert_eq!(out[0].bbox, a.bbox);
        // Exact duplicates in c2 are absorbed.
        let dup = merge_and_refine(&[a.clone(), b.clone()], &[a, b], &w_text, 0.0, 0.6, 12).unwrap();
        assert_eq!(dup, out);
    }

    proptest! {
        #[test]
        fn gamma_map_is_monotone(
            lo in 0.0f64..0.9, span in 0.01f64..1.0,
            gmin in 0.0f64..1.0, gspan in 0.0f64..1.0,
            c1 in 0.0f64..1.0, c2 in 0.0f64..1.0,
        ) {
            let p = GammaPolicy {
                c_lo: lo,
                c_hi: (lo + span).min(1.0),
                gamma_min: gmin,
                gamma_max: (gmin + gspan).min(1.0),
            };
            prop_assume!(p.validate().is_ok());
            let (a, b) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(gamma_map(a, &p) <= gamma_map(b, &p));
            let g = gamma_map(a, &p);
            prop_assert!(g >= p.gamma_min && g <= p.gamma_max);
        }

        #[test]
        fn argmax_invariant_to_shift_and_scale(
            z in prop::collection::vec(-1.0f64..1.0, 2..8),
            shift in -3.0f64..3.0,
            scale in 0.1f64..10.0,
            t in 0.01f64..2.0,
        ) {
            for mode in [ConfidenceMode::Margin, ConfidenceMode::SoftmaxMax] {
                let p = ConfidencePolicy { mode, temperature: t };
                let (k, c) = predict_confidence(&z, &p);
                prop_assert!((0.0..=1.0).contains(&c));
                let moved: Vec<f64> = z.iter().map(|v| v + shift).collect();
                prop_assert_eq!(predict_confidence(&moved, &p).0, k);
                let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
                let p2 = ConfidencePolicy { mode, temperature: t * scale };
                prop_assert_eq!(predict_confidence(&scaled, &p2).0, k);
            }
        }
    }
}
