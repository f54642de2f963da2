//! Deterministic synthetic scenes with known ground truth.
//!
//! A scene is a patch grid in which every cell carries the prototype of the
//! object whose box contains the cell center (or a background prototype),
//! plus Gaussian noise. Class descriptions are noisy copies of the class
//! prototypes. All randomness comes from labelled streams keyed by the scene
//! seed, and every stored value is rounded to `f32` so a saved scene reloads
//! bit-for-bit.
//!
//! [`brute_force_best_box`] exhaustively scores a quantized box lattice and
//! serves as the yardstick for the greedy search.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::sample_random_box;
use crate::error::{LagoError, Result};
use crate::features::{full_image_embedding, Embedding, FeatureBundle, PatchGrid};
use crate::geometry::{clamp_to_image, generate_neighbors, BoundingBox};
use crate::math;
use crate::rng;
use crate::search::{score_box, ScoredCrop};
use crate::textbank::{ClassText, ClassTextBank};

/// Jitter applied to object boxes when deriving proposals.
const PROPOSAL_DELTA: f64 = 0.25;
const PROPOSAL_RHO: f64 = 0.2;
/// Extent range of the extra random proposal.
const RANDOM_PROPOSAL_SCALE: (f64, f64) = (0.2, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BoundingBox,
}

/// Recipe for one synthetic scene. The first object is the labelled target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub descriptions_per_class: usize,
    pub objects: Vec<SceneObject>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn image_id(&self) -> String {
        self.image_id
            .clone()
            .unwrap_or_else(|| format!("scene-{:016x}", self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LagoError::InvalidSpec(m));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.objects.is_empty() {
            return bad("scene needs at least one object".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        for o in &self.objects {
            if o.class >= self.num_classes {
                return bad(format!("object class {} out of range", o.class));
            }
            o.bbox
                .validate()
                .map_err(|e| LagoError::InvalidSpec(e.to_string()))?;
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// `count` random unit vectors, orthonormalized when `dim` allows.
fn draw_prototypes<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut protos: Vec<Vec<f64>> = (0..count)
        .map(|_| loop {
            if let Some(v) = math::normalized(&gaussian(rng, dim)) {
                break v;
            }
        })
        .collect();
    if dim >= count {
        for i in 0..count {
            for j in 0..i {
                let proj = math::dot(&protos[i], &protos[j]);
                let (head, tail) = protos.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= proj * b;
                }
            }
            protos[i] = math::normalized(&protos[i]).expect("independent gaussian draws");
        }
    }
    protos
}

/// Perturbs `base` by `sigma`-scaled Gaussian noise and renormalizes.
fn noisy_unit<R: Rng>(rng: &mut R, base: &[f64], sigma: f64) -> Vec<f64> {
    let noise = gaussian(rng, base.len());
    let v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + sigma * n).collect();
    math::normalized(&v).unwrap_or_else(|| base.to_vec())
}

/// Builds the bundle described by `spec`.
pub fn make_scene(spec: &SceneSpec) -> Result<FeatureBundle> {
    spec.validate()?;
    let (h, w, d, y) = (spec.grid_h, spec.grid_w, spec.dim, spec.num_classes);
    let key = "scene";
    let objects: Vec<SceneObject> = spec
        .objects
        .iter()
        .map(|o| {
            Ok(SceneObject {
                class: o.class,
                bbox: clamp_to_image(o.bbox)?,
            })
        })
        .collect::<Result<_>>()?;

    // Class prototypes 0..y, background last.
    let mut proto_rng = rng::stream(spec.seed, key, rng::label::PROTOTYPES);
    let protos = draw_prototypes(&mut proto_rng, y + 1, d);
    let background = &protos[y];

    let mut noise_rng = rng::stream(spec.seed, key, rng::label::NOISE);
    let mut cells = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            let cy = (r as f64 + 0.5) / h as f64;
            let owner = objects.iter().find(|o| {
                o.bbox.x <= cx && cx < o.bbox.right() && o.bbox.y <= cy && cy < o.bbox.bottom()
            });
            let base = owner.map(|o| &protos[o.class]).unwrap_or(background);
            cells.extend(to_f32(&noisy_unit(&mut noise_rng, base, spec.noise_sigma)));
        }
    }
    let grid = PatchGrid::new(h, w, d, cells)?;
    let full_embedding = full_image_embedding(&grid)?.to_storage_precision();

    let mut desc_rng = rng::stream(spec.seed, key, rng::label::DESCRIPTIONS);
    let classes = (0..y)
        .map(|k| {
            let template = Embedding::new(to_f32(&protos[k]));
            let descriptions: Vec<Embedding> = (0..spec.descriptions_per_class)
                .map(|_| {
                    Embedding::new(to_f32(&noisy_unit(
                        &mut desc_rng,
                        &protos[k],
                        0.5 * spec.noise_sigma,
                    )))
                })
                .collect();
            let mut class = if descriptions.is_empty() {
                ClassText {
                    name: String::new(),
                    descriptions,
                    prototype: template.clone(),
                    template: Some(template),
                }
            } else {
                ClassText::from_descriptions("", descriptions, Some(template))?
            };
            class.name = format!("class_{k}");
            class.prototype = class.prototype.to_storage_precision();
            Ok(class)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut prop_rng = rng::stream(spec.seed, key, rng::label::PROPOSALS);
    let mut proposals = Vec::with_capacity(objects.len() + 1);
    for o in &objects {
        let moves = generate_neighbors(&o.bbox, PROPOSAL_DELTA, PROPOSAL_RHO);
        proposals.push(*moves.choose(&mut prop_rng).unwrap_or(&o.bbox));
    }
    proposals.push(sample_random_box(&mut prop_rng, RANDOM_PROPOSAL_SCALE));
    let proposals = proposals
        .into_iter()
        .map(|b| {
            let v = to_f32(&[b.x, b.y, b.w, b.h]);
            BoundingBox::new(v[0], v[1], v[2], v[3])
        })
        .collect::<Result<Vec<_>>>()?;

    let bundle = FeatureBundle {
        image_id: spec.image_id(),
        grid,
        full_embedding,
        proposals,
        text_bank: ClassTextBank::new(classes)?,
        ground_truth: Some(spec.objects[0].class),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Every lattice box `(i/q, j/q, k/q, l/q)` inside the image with both
/// extents at least `min_box`, in lexicographic `(x, y, w, h)` order.
pub fn lattice_boxes(q: usize, min_box: f64) -> Vec<BoundingBox> {
    let qf = q as f64;
    let mut out = Vec::new();
    for i in 0..q {
        for j in 0..q {
            for k in 1..=(q - i) {
                for l in 1..=(q - j) {
                    let b = BoundingBox {
                        x: i as f64 / qf,
                        y: j as f64 / qf,
                        w: k as f64 / qf,
                        h: l as f64 / qf,
                    };
                    if b.w >= min_box && b.h >= min_box {
                        out.push(b);
                    }
                }
            }
        }
    }
    out
}

/// Exhaustive maximum of the box score over the `q`-lattice. Ties go to the
/// lexicographically smallest `(x, y, w, h)`.
pub fn brute_force_best_box(
    bundle: &FeatureBundle,
    w_text: Option<&Embedding>,
    gamma: f64,
    q: usize,
    min_box: f64,
) -> Result<ScoredCrop> {
    if q < 2 {
        return Err(LagoError::InvalidConfig(format!(
            "lattice resolution must be at least 2, got {q}"
        )));
    }
    let mut best: Option<ScoredCrop> = None;
    for b in lattice_boxes(q, min_box) {
        let c = score_box(bundle, &b, w_text, gamma)?;
        if best.as_ref().is_none_or(|cur| c.s_combined > cur.s_combined) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| LagoError::InvalidConfig("lattice has no admissible box".into()))
}

/// Shape parameters for a family of random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub grid: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub descriptions_per_class: usize,
    pub noise_sigma: f64,
    /// Extent range of the labelled object.
    pub target_scale: (f64, f64),
    /// Inclusive range of the number of distractor objects.
    pub distractors: (usize, usize),
    pub distractor_scale: (f64, f64),
}

impl SuiteParams {
    /// 8x8 grid, 16 dimensions, 5 classes, sigma 0.05.
    pub fn search_quality() -> Self {
        SuiteParams {
            grid: 8,
            dim: 16,
            num_classes: 5,
            descriptions_per_class: 4,
            noise_sigma: 0.05,
            target_scale: (0.25, 0.5),
            distractors: (0, 2),
            distractor_scale: (0.2, 0.4),
        }
    }

    /// Parameters of the default classification benchmark: one dominant
    /// target drawn over four to eight smaller distractors of other classes.
    pub fn benchmark() -> Self {
        SuiteParams {
            grid: 8,
            dim: 16,
            num_classes: 5,
            descriptions_per_class: 4,
            noise_sigma: 0.1,
            target_scale: (0.35, 0.55),
            distractors: (4, 8),
            distractor_scale: (0.2, 0.35),
        }
    }
}

fn random_object<R: Rng>(rng: &mut R, class: usize, scale: (f64, f64)) -> SceneObject {
    let w = rng.random_range(scale.0..=scale.1);
    let h = rng.random_range(scale.0..=scale.1);
    let x = rng.random_range(0.0..=(1.0 - w));
    let y = rng.random_range(0.0..=(1.0 - h));
    SceneObject {
        class,
        bbox: BoundingBox { x, y, w, h },
    }
}

/// `count` scene specs drawn from `params`, reproducible from `master_seed`.
pub fn random_suite(params: &SuiteParams, count: usize, master_seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let id = format!("scene-{i:04}");
            let mut r = rng::stream(master_seed, &id, "suite");
            let target = r.random_range(0..params.num_classes);
            let mut objects = vec![random_object(&mut r, target, params.target_scale)];
            let n = r.random_range(params.distractors.0..=params.distractors.1);
            for _ in 0..n {
                let class = loop {
                    let c = r.random_range(0..params.num_classes);
                    if c != target {
                        break c;
                    }
                };
                objects.push(random_object(&mut r, class, params.distractor_scale));
            }
            SceneSpec {
                image_id: Some(id),
                grid_h: params.grid,
                grid_w: params.grid,
                dim: params.dim,
                num_classes: params.num_classes,
                descriptions_per_class: params.descriptions_per_class,
                objects,
                noise_sigma: params.noise_sigma,
                seed: r.random(),
            }
        })
        .collect()
}

/// Master seed of the default benchmark suite.
pub const BENCHMARK_SEED: u64 = 2024;
/// Scene count of the default benchmark suite.
pub const BENCHMARK_SIZE: usize = 200;

/// The default seeded benchmark suite.
pub fn benchmark_suite() -> Vec<SceneSpec> {
    random_suite(&SuiteParams::benchmark(), BENCHMARK_SIZE, BENCHMARK_SEED)
}

pub const SEARCH_QUALITY_SEED: u64 = 8;
pub const SEARCH_QUALITY_SIZE: usize = 100;

/// Seeded scenes for comparing the greedy search with the lattice oracle.
pub fn search_quality_suite() -> Vec<SceneSpec> {
    random_suite(&SuiteParams::search_quality(), SEARCH_QUALITY_SIZE, SEARCH_QUALITY_SEED)
}
