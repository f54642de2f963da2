//! Box scoring and proposal-centered greedy search.
//!
//! A box is scored by pooling its crop embedding from the patch grid and
//! comparing it with the full-image embedding (visual score) and, when a text
//! target is given, with that target (text score). The two are mixed with the
//! guidance weight `gamma`.
//!
//! [`search_top_k_crops`] climbs from a starting box through an 8-move
//! neighborhood, first with a coarse step schedule and then a fine one, and
//! returns an IoU-diverse top-`k` of every box it scored along the way.

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};
use crate::features::{cosine, pool_crop_embedding, Embedding, FeatureBundle};
use crate::geometry::{clamp_to_image, diverse_top_k_indices, generate_neighbors, BoundingBox};

/// Where a crop came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropOrigin {
    ProposalSearch,
    RandomCompletion,
    FullImage,
}

/// A box with its pooled embedding and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCrop {
    pub bbox: BoundingBox,
    pub embedding: Embedding,
    pub s_visual: f64,
    pub s_text: Option<f64>,
    pub s_combined: f64,
    /// Guidance weight used to form `s_combined`; zero when `s_text` is absent.
    pub gamma: f64,
    pub origin: CropOrigin,
}

/// `(1 - gamma) * visual + gamma * text`.
pub fn combine_scores(s_visual: f64, s_text: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * s_visual + gamma * s_text
}

impl ScoredCrop {
    /// Scores an already-pooled embedding.
    pub fn from_embedding(
        bbox: BoundingBox,
        embedding: Embedding,
        full_embedding: &Embedding,
        w_text: Option<&Embedding>,
        gamma: f64,
        origin: CropOrigin,
    ) -> Result<Self> {
        let s_visual = cosine(&embedding, full_embedding)?;
        let (s_text, s_combined, gamma) = match w_text {
            Some(t) => {
                let s_text = cosine(&embedding, t)?;
                (Some(s_text), combine_scores(s_visual, s_text, gamma), gamma)
            }
            None => (None, s_visual, 0.0),
        };
        Ok(ScoredCrop {
            bbox,
            embedding,
            s_visual,
            s_text,
            s_combined,
            gamma,
            origin,
        })
    }

    /// Re-scores against a new text target and guidance weight, reusing the
    /// stored embedding and visual score.
    pub fn rescored(&self, w_text: Option<&Embedding>, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        match w_text {
            Some(t) => {
                let s_text = cosine(&self.embedding, t)?;
                out.s_text = Some(s_text);
                out.s_combined = combine_scores(self.s_visual, s_text, gamma);
                out.gamma = gamma;
            }
            None => {
                out.s_text = None;
                out.s_combined = self.s_visual;
                out.gamma = 0.0;
            }
        }
        Ok(out)
    }

    pub fn zero_padding(dim: usize) -> Self {
        ScoredCrop {
            bbox: BoundingBox::FULL,
            embedding: Embedding::zeros(dim),
            s_visual: 0.0,
            s_text: None,
            s_combined: 0.0,
            gamma: 0.0,
            origin: CropOrigin::RandomCompletion,
        }
    }
}

/// Scores one box. `gamma` is ignored (treated as zero) without a text target.
pub fn score_box(
    bundle: &FeatureBundle,
    b: &BoundingBox,
    w_text: Option<&Embedding>,
    gamma: f64,
) -> Result<ScoredCrop> {
    let embedding = pool_crop_embedding(&bundle.grid, b)?;
    ScoredCrop::from_embedding(
        *b,
        embedding,
        &bundle.full_embedding,
        w_text,
        gamma,
        CropOrigin::ProposalSearch,
    )
}

/// Step count and move sizes for one stage of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub steps: usize,
    /// Translation as a fraction of the box extent.
    pub delta: f64,
    /// Relative scale change.
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub coarse: StageSchedule,
    pub fine: StageSchedule,
    /// A move is taken only if it improves the score by at least this much.
    pub epsilon: f64,
    /// Crops kept per starting box.
    pub k: usize,
    pub tau_search: f64,
    /// Boxes narrower or shorter than this are scored but never moved to.
    pub min_box: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            coarse: StageSchedule {
                steps: 6,
                delta: 0.35,
                rho: 0.30,
            },
            fine: StageSchedule {
                steps: 6,
                delta: 0.12,
                rho: 0.10,
            },
            epsilon: 1e-4,
            k: 4,
            tau_search: 0.6,
            min_box: 0.05,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LagoError::InvalidConfig(msg.to_string()));
        for s in [&self.coarse, &self.fine] {
            if !(s.delta > 0.0) || !(s.rho > 0.0 && s.rho < 1.0) {
                return bad("stage moves need delta > 0 and 0 < rho < 1");
            }
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.tau_search > 0.0 && self.tau_search <= 1.0) {
            return bad("tau_search must lie in (0, 1]");
        }
        if !(self.min_box >= 0.0 && self.min_box < 1.0) {
            return bad("min_box must lie in [0, 1)");
        }
        Ok(())
    }

    /// Upper bound on scored boxes per search: one start plus 8 per step.
    pub fn visited_bound(&self) -> usize {
        (self.coarse.steps + self.fine.steps) * 8 + 1
    }
}

/// Everything a single search touched.
#[derive(Debug, Clone)]
pub struct SearchTrace {
    /// Every scored box in evaluation order; the start box is first.
    pub visited: Vec<ScoredCrop>,
    /// Scores of the boxes on the greedy path, start box included.
    pub path_scores: Vec<f64>,
    /// Final box of each stage (coarse, fine).
    pub stage_ends: [BoundingBox; 2],
}

/// Runs the two-stage greedy climb from `b0` and records the trajectory.
pub fn search_trace(
    bundle: &FeatureBundle,
    b0: &BoundingBox,
    w_text: Option<&Embedding>,
    gamma: f64,
    cfg: &SearchConfig,
) -> Result<SearchTrace> {
    let start = score_box(bundle, &clamp_to_image(*b0)?, w_text, gamma)?;
    let mut current = start.bbox;
    let mut current_score = start.s_combined;
    let mut visited = Vec::with_capacity(cfg.visited_bound());
    visited.push(start);
    let mut path_scores = vec![current_score];
    let mut stage_ends = [current; 2];

    for (stage, schedule) in [cfg.coarse, cfg.fine].iter().enumerate() {
        for _ in 0..schedule.steps {
            let first_new = visited.len();
            for nb in generate_neighbors(&current, schedule.delta, schedule.rho) {
                visited.push(score_box(bundle, &nb, w_text, gamma)?);
            }
            let best = visited[first_new..]
                .iter()
                .filter(|c| c.bbox.w >= cfg.min_box && c.bbox.h >= cfg.min_box)
                .fold(None::<&ScoredCrop>, |acc, c| match acc {
                    Some(a) if a.s_combined >= c.s_combined => Some(a),
                    _ => Some(c),
                });
            let Some(best) = best else { break };
            let gain = best.s_combined - current_score;
            // A zero gain never counts as progress, even with epsilon = 0.
            if gain < cfg.epsilon || gain <= 0.0 {
                break;
            }
            current = best.bbox;
            current_score = best.s_combined;
            path_scores.push(current_score);
        }
        stage_ends[stage] = current;
    }

    Ok(SearchTrace {
        visited,
        path_scores,
        stage_ends,
    })
}

/// IoU-diverse top-`k` of the crops in `crops`, by `s_combined`.
pub fn diverse_top_crops(crops: &[ScoredCrop], k: usize, tau: f64) -> Vec<ScoredCrop> {
    let boxes: Vec<BoundingBox> = crops.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = crops.iter().map(|c| c.s_combined).collect();
    diverse_top_k_indices(&boxes, &scores, k, tau)
        .into_iter()
        .map(|i| crops[i].clone())
        .collect()
}

/// Greedy coarse-to-fine search from `b0`, returning a diverse top-`k` of the
/// visited boxes.
pub fn search_top_k_crops(
    bundle: &FeatureBundle,
    b0: &BoundingBox,
    w_text: Option<&Embedding>,
    gamma: f64,
    cfg: &SearchConfig,
) -> Result<Vec<ScoredCrop>> {
    let trace = search_trace(bundle, b0, w_text, gamma, cfg)?;
    Ok(diverse_top_crops(&trace.visited, cfg.k, cfg.tau_search))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{full_image_embedding, PatchGrid};
    use crate::textbank::{ClassText, ClassTextBank};
    use approx::assert_abs_diff_eq;

    fn bank(d: usize) -> ClassTextBank {
        let classes = (0..2)
            .map(|k| {
                let mut v = vec![0.0; d];
                v[k] = 1.0;
                ClassText::from_descriptions(format!("c{k}"), vec![Embedding::new(v)], None).unwrap()
            })
            .collect();
        ClassTextBank::new(classes).unwrap()
    }

    fn bundle_from_cells(h: usize, w: usize, d: usize, cells: Vec<f64>) -> FeatureBundle {
        let grid = PatchGrid::new(h, w, d, cells).unwrap();
        let full_embedding = full_image_embedding(&grid).unwrap();
        FeatureBundle {
            image_id: "t".into(),
            grid,
            full_embedding,
            proposals: vec![BoundingBox::new(0.25, 0.25, 0.25, 0.25).unwrap()],
            text_bank: bank(d),
            ground_truth: None,
        }
    }

    /// Background along e2 with one cell at (row 2, col 5) along e0.
    fn planted_bundle() -> FeatureBundle {
        let (h, w, d) = (8, 8, 3);
        let mut cells = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if (r, c) == (2, 5) {
                    cells.extend_from_slice(&[1.0, 0.0, 0.0]);
                } else {
                    cells.extend_from_slice(&[0.0, 0.1, 1.0]);
                }
            }
        }
        bundle_from_cells(h, w, d, cells)
    }

    #[test]
    fn score_box_mixing() {
        let b = planted_bundle();
        let bx = BoundingBox::new(0.5, 0.125, 0.25, 0.25).unwrap();
        let t = Embedding::new(vec![1.0, 0.0, 0.0]);
        let v = score_box(&b, &bx, None, 0.0).unwrap();
        assert_eq!(v.s_combined, v.s_visual);
        let g0 = score_box(&b, &bx, Some(&t), 0.0).unwrap();
        assert_eq!(g0.s_combined, g0.s_visual);
        let g1 = score_box(&b, &bx, Some(&t), 1.0).unwrap();
        assert_eq!(g1.s_combined, g1.s_text.unwrap());
        assert_abs_diff_eq!(combine_scores(0.8, 0.5, 0.3), 0.71, epsilon = 1e-15);
    }

    #[test]
    fn flat_field_breaks_immediately() {
        let b = bundle_from_cells(4, 4, 2, [1.0, 0.0].repeat(16));
        let cfg = SearchConfig::default();
        let b0 = BoundingBox::new(0.3, 0.3, 0.3, 0.3).unwrap();
        let trace = search_trace(&b, &b0, None, 0.0, &cfg).unwrap();
        assert_eq!(trace.path_scores.len(), 1);
        // One neighborhood per stage before each break.
        assert_eq!(trace.visited.len(), 1 + 8 + 8);
        let out = search_top_k_crops(&b, &b0, None, 0.0, &cfg).unwrap();
        assert!(out.len() <= cfg.k);
        assert_eq!(out[0].bbox, b0);
    }

    #[test]
    fn k_one_returns_best_visited() {
        let b = planted_bundle();
        let cfg = SearchConfig { k: 1, ..SearchConfig::default() };
        let t = Embedding::new(vec![1.0, 0.0, 0.0]);
        let b0 = BoundingBox::new(0.25, 0.25, 0.25, 0.25).unwrap();
        let trace = search_trace(&b, &b0, Some(&t), 0.7, &cfg).unwrap();
        let best = trace
            .visited
            .iter()
            .map(|c| c.s_combined)
            .fold(f64::NEG_INFINITY, f64::max);
        let out = search_top_k_crops(&b, &b0, Some(&t), 0.7, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].s_combined, best);
    }

    #[test]
    fn text_guided_search_finds_planted_cell() {
        let b = planted_bundle();
        let cfg = SearchConfig::default();
        let t = Embedding::new(vec![1.0, 0.0, 0.0]);
        let b0 = BoundingBox::new(0.375, 0.125, 0.25, 0.25).unwrap();
        let out = search_top_k_crops(&b, &b0, Some(&t), 1.0, &cfg).unwrap();
        let planted = BoundingBox::new(0.625, 0.25, 0.125, 0.125).unwrap();
        assert!(crate::geometry::iou(&out[0].bbox, &planted) > 0.3, "{:?}", out[0].bbox);
    }

    #[test]
    fn path_and_visited_invariants() {
        let b = planted_bundle();
        let cfg = SearchConfig::default();
        let t = Embedding::new(vec![1.0, 0.0, 0.0]);
        for gamma in [0.0, 0.4, 1.0] {
            let b0 = BoundingBox::new(0.1, 0.6, 0.3, 0.2).unwrap();
            let trace = search_trace(&b, &b0, Some(&t), gamma, &cfg).unwrap();
            assert!(trace.visited.len() <= cfg.visited_bound());
            for pair in trace.path_scores.windows(2) {
                assert!(pair[1] - pair[0] >= cfg.epsilon);
            }
        }
    }

    #[test]
    fn min_box_blocks_tiny_moves() {
        let b = planted_bundle();
        let cfg = SearchConfig { min_box: 0.2, ..SearchConfig::default() };
        let t = Embedding::new(vec![1.0, 0.0, 0.0]);
        let b0 = BoundingBox::new(0.5, 0.1, 0.25, 0.25).unwrap();
        let trace = search_trace(&b, &b0, Some(&t), 1.0, &cfg).unwrap();
        for end in trace.stage_ends {
            assert!(end.w >= 0.2 && end.h >= 0.2);
        }
    }

    #[test]
    fn rescoring_reuses_embedding() {
        let b = planted_bundle();
        let bx = BoundingBox::new(0.5, 0.125, 0.25, 0.25).unwrap();
        let c = score_box(&b, &bx, None, 0.0).unwrap();
        let t = Embedding::new(vec![1.0, 0.0, 0.0]);
        let r = c.rescored(Some(&t), 0.5).unwrap();
        let direct = score_box(&b, &bx, Some(&t), 0.5).unwrap();
        assert_eq!(r, direct);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let c = SearchConfig { k: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = SearchConfig::default();
        c.fine.rho = 1.0;
        assert!(c.validate().is_err());
        let c = SearchConfig { tau_search: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
