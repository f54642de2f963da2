//! Grid search over the aggregation mixing weights on cached crop scores.
//!
//! A [`ScoreCache`] keeps, per image, everything aggregation needs: the
//! visual and text score and class similarities of each channel crop, the
//! full-image logits and the label. Re-aggregating from the cache is cheap, so
//! every `(beta, alpha_dc, lambda)` triple of a grid is evaluated exactly.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, mixed_weights, Channel, InferenceResult};
use crate::error::{LagoError, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCrop {
    pub s_visual: f64,
    pub s_text: f64,
    pub sims: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedImage {
    pub image_id: String,
    pub tau_v: f64,
    pub tau_t: f64,
    pub object: Vec<CachedCrop>,
    pub context: Vec<CachedCrop>,
    pub z_full: Vec<f64>,
    pub label: usize,
}

fn cached_channel(result: &InferenceResult, idx: &[usize], ch: &Channel) -> Result<Vec<CachedCrop>> {
    idx.iter()
        .zip(&ch.sims)
        .map(|(&i, sims)| {
            let v = &result.views.views[i];
            let s_text = v.s_text.ok_or_else(|| {
                LagoError::InvalidConfig(format!("view {i} of {} has no text score", result.image_id))
            })?;
            Ok(CachedCrop {
                s_visual: v.s_visual,
                s_text,
                sims: sims.clone(),
            })
        })
        .collect()
}

impl CachedImage {
    /// Captures the aggregation inputs of a finished inference.
    pub fn from_result(result: &InferenceResult, tau_v: f64, tau_t: f64) -> Result<Self> {
        let label = result.ground_truth.ok_or_else(|| {
            LagoError::InvalidConfig(format!("{} has no ground-truth label", result.image_id))
        })?;
        Ok(CachedImage {
            image_id: result.image_id.clone(),
            tau_v,
            tau_t,
            object: cached_channel(result, &result.channels.object, &result.object)?,
            context: cached_channel(result, &result.channels.context, &result.context)?,
            z_full: result.z_full.clone(),
            label,
        })
    }

    fn channel(&self, crops: &[CachedCrop], beta: f64) -> Channel {
        let visual: Vec<f64> = crops.iter().map(|c| c.s_visual).collect();
        let text: Vec<f64> = crops.iter().map(|c| c.s_text).collect();
        Channel {
            weights: mixed_weights(&visual, &text, self.tau_v, self.tau_t, beta),
            sims: crops.iter().map(|c| c.sims.clone()).collect(),
        }
    }

    /// Final logits under the given mixing weights.
    pub fn logits(&self, beta: f64, alpha_dc: f64, lambda: f64) -> Vec<f64> {
        aggregate(
            &self.channel(&self.object, beta),
            &self.channel(&self.context, beta),
            &self.z_full,
            alpha_dc,
            lambda,
        )
    }

    pub fn is_correct(&self, beta: f64, alpha_dc: f64, lambda: f64) -> bool {
        math::argmax(&self.logits(beta, alpha_dc, lambda)) == self.label
    }
}

/// Cached aggregation inputs for a calibration set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreCache {
    pub images: Vec<CachedImage>,
}

impl ScoreCache {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes one `<image_id>.json` per image.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LagoError::io(dir, e))?;
        for img in &self.images {
            let path = dir.join(format!("{}.json", img.image_id));
            let text = serde_json::to_string_pretty(img).map_err(|e| LagoError::Json {
                path: path.clone(),
                source: e,
            })?;
            fs::write(&path, text).map_err(|e| LagoError::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads every `*.json` in `dir`, ordered by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| LagoError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| LagoError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| LagoError::Json {
                    path: p.clone(),
                    source: e,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ScoreCache { images })
    }

    /// Number of images classified correctly.
    pub fn correct(&self, beta: f64, alpha_dc: f64, lambda: f64) -> usize {
        self.images
            .iter()
            .filter(|img| img.is_correct(beta, alpha_dc, lambda))
            .count()
    }

    pub fn accuracy(&self, beta: f64, alpha_dc: f64, lambda: f64) -> f64 {
        self.correct(beta, alpha_dc, lambda) as f64 / self.len() as f64
    }
}

/// Candidate values for each mixing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub beta: Vec<f64>,
    pub alpha_dc: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl CalibrationGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, values) in [
            ("beta", &self.beta),
            ("alpha_dc", &self.alpha_dc),
            ("lambda", &self.lambda),
        ] {
            if values.is_empty() {
                return Err(LagoError::InvalidConfig(format!("{name} grid is empty")));
            }
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(LagoError::InvalidConfig(format!(
                    "{name} grid value {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn triples(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.beta.len() * self.alpha_dc.len() * self.lambda.len());
        for &b in &self.beta {
            for &a in &self.alpha_dc {
                for &l in &self.lambda {
                    out.push((b, a, l));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub beta: f64,
    pub alpha_dc: f64,
    pub lambda: f64,
    pub accuracy: f64,
    /// Number of values tried for beta, alpha_dc and lambda.
    pub grid_sizes: [usize; 3],
}

fn lex(a: (f64, f64, f64), b: (f64, f64, f64)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
}

/// Evaluates every grid triple and returns the most accurate one. Ties go to
/// the lexicographically smallest `(beta, alpha_dc, lambda)`.
pub fn grid_search(cache: &ScoreCache, grid: &CalibrationGrid) -> Result<CalibrationResult> {
    if cache.is_empty() {
        return Err(LagoError::EmptyCache);
    }
    grid.validate()?;
    let scored: Vec<((f64, f64, f64), usize)> = grid
        .triples()
        .into_par_iter()
        .map(|t| (t, cache.correct(t.0, t.1, t.2)))
        .collect();
    let (best, correct) = scored
        .into_iter()
        .reduce(|cur, cand| match cand.1.cmp(&cur.1) {
            Ordering::Greater => cand,
            Ordering::Less => cur,
            Ordering::Equal if lex(cand.0, cur.0) == Ordering::Less => cand,
            Ordering::Equal => cur,
        })
        .expect("grid is non-empty");
    Ok(CalibrationResult {
        beta: best.0,
        alpha_dc: best.1,
        lambda: best.2,
        accuracy: correct as f64 / cache.len() as f64,
        grid_sizes: [grid.beta.len(), grid.alpha_dc.len(), grid.lambda.len()],
    })
}
