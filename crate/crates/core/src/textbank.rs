//! Class text representations.
//!
//! Each class carries a set of description embeddings, a pooled prototype
//! `t_y` and an optional canonical template embedding `u_y`. Prototypes are
//! mean pools of the descriptions by default; [`template_reweight`] offers a
//! softmax reweighting toward the template instead. [`stage2_prototype`]
//! mixes the class prototypes into a single soft text target from a logit
//! vector.

use crate::error::{LagoError, Result};
use crate::features::{cosine, Embedding};
use crate::math;

/// Default sharpness of the template reweighting softmax.
pub const DEFAULT_TEMPLATE_TEMPERATURE: f64 = 10.0;
/// Default temperature for the soft text prototype.
pub const DEFAULT_PROTOTYPE_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassText {
    pub name: String,
    pub descriptions: Vec<Embedding>,
    pub prototype: Embedding,
    pub template: Option<Embedding>,
}

impl ClassText {
    /// Builds a class entry whose prototype is the mean pool of `descriptions`.
    pub fn from_descriptions(
        name: impl Into<String>,
        descriptions: Vec<Embedding>,
        template: Option<Embedding>,
    ) -> Result<Self> {
        let prototype = pool_class_descriptions(&descriptions)?;
        Ok(ClassText {
            name: name.into(),
            descriptions,
            prototype,
            template,
        })
    }
}

/// Per-class description embeddings and prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextBank {
    dim: usize,
    classes: Vec<ClassText>,
}

impl ClassTextBank {
    pub fn new(classes: Vec<ClassText>) -> Result<Self> {
        let dim = classes.first().map(|c| c.prototype.dim()).unwrap_or(0);
        let bank = ClassTextBank { dim, classes };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(LagoError::InvalidBundle(format!(
                "text bank needs at least 2 classes, found {}",
                self.classes.len()
            )));
        }
        let m = self.classes[0].descriptions.len();
        let has_templates = self.classes[0].template.is_some();
        for class in &self.classes {
            let dims = std::iter::once(&class.prototype)
                .chain(&class.descriptions)
                .chain(class.template.as_ref());
            for e in dims {
                if e.dim() != self.dim {
                    return Err(LagoError::DimensionMismatch {
                        expected: self.dim,
                        found: e.dim(),
                    });
                }
                if !e.is_finite() {
                    return Err(LagoError::InvalidBundle(format!(
                        "non-finite text embedding in class {:?}",
                        class.name
                    )));
                }
            }
            if !class.prototype.is_unit() {
                return Err(LagoError::InvalidBundle(format!(
                    "prototype of class {:?} is not unit norm",
                    class.name
                )));
            }
            if class.descriptions.len() != m {
                return Err(LagoError::InvalidBundle(
                    "description count must be uniform across classes".into(),
                ));
            }
            if class.template.is_some() != has_templates {
                return Err(LagoError::InvalidBundle(
                    "templates must be present for every class or none".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn descriptions_per_class(&self) -> usize {
        self.classes[0].descriptions.len()
    }

    pub fn has_templates(&self) -> bool {
        self.classes[0].template.is_some()
    }

    pub fn classes(&self) -> &[ClassText] {
        &self.classes
    }

    pub fn prototype(&self, class: usize) -> &Embedding {
        &self.classes[class].prototype
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Cosine similarity of `embedding` against every class prototype.
    pub fn similarities(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.classes
            .iter()
            .map(|c| cosine(embedding, &c.prototype))
            .collect()
    }

    /// Returns a copy whose prototypes are recomputed with
    /// [`template_reweight`]. Classes without templates or descriptions keep
    /// their stored prototype.
    pub fn reweighted(&self, temperature: f64) -> Result<Self> {
        let classes = self
            .classes
            .iter()
            .map(|c| {
                let mut c = c.clone();
                if let (Some(t), false) = (&c.template, c.descriptions.is_empty()) {
                    c.prototype = template_reweight(&c.descriptions, t, temperature)?.0;
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        ClassTextBank::new(classes)
    }
}

/// Mean of the description embeddings, L2-normalized.
pub fn pool_class_descriptions(descriptions: &[Embedding]) -> Result<Embedding> {
    let first = descriptions
        .first()
        .ok_or(LagoError::DegenerateVector("no descriptions to pool"))?;
    let mut acc = vec![0.0; first.dim()];
    for d in descriptions {
        if d.dim() != acc.len() {
            return Err(LagoError::DimensionMismatch {
                expected: acc.len(),
                found: d.dim(),
            });
        }
        for (a, v) in acc.iter_mut().zip(d.iter()) {
            *a += v;
        }
    }
    let m = descriptions.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Embedding::unit(&acc)
}

/// Softmax-weighted description pool: `a_i = softmax(tau * <template, desc_i>)`,
/// output `normalize(sum_i a_i desc_i)`. Returns the output and the weights.
pub fn template_reweight(
    descriptions: &[Embedding],
    template: &Embedding,
    temperature: f64,
) -> Result<(Embedding, Vec<f64>)> {
    if descriptions.is_empty() {
        return Err(LagoError::DegenerateVector("no descriptions to reweight"));
    }
    if !(temperature > 0.0) {
        return Err(LagoError::InvalidConfig(
            "template temperature must be positive".into(),
        ));
    }
    let alignments = descriptions
        .iter()
        .map(|d| {
            if d.dim() != template.dim() {
                return Err(LagoError::DimensionMismatch {
                    expected: template.dim(),
                    found: d.dim(),
                });
            }
            Ok(temperature * math::dot(template, d))
        })
        .collect::<Result<Vec<f64>>>()?;
    // Uniform alignments reduce exactly to mean pooling.
    if alignments.iter().all(|a| *a == alignments[0]) {
        let uniform = vec![1.0 / descriptions.len() as f64; descriptions.len()];
        return Ok((pool_class_descriptions(descriptions)?, uniform));
    }
    let weights = math::softmax(&alignments, 1.0);
    let mut acc = vec![0.0; template.dim()];
    for (w, d) in weights.iter().zip(descriptions) {
        for (a, v) in acc.iter_mut().zip(d.iter()) {
            *a += w * v;
        }
    }
    Ok((Embedding::unit(&acc)?, weights))
}

/// The soft text target built from a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototype {
    pub embedding: Embedding,
    /// Class mixing weights `pi = softmax(z / tau_z)`.
    pub weights: Vec<f64>,
}

/// `w_text = normalize(sum_y softmax(z / tau_z)_y * t_y)`.
pub fn stage2_prototype(
    logits: &[f64],
    temperature: f64,
    bank: &ClassTextBank,
) -> Result<TextPrototype> {
    if logits.len() != bank.num_classes() {
        return Err(LagoError::DimensionMismatch {
            expected: bank.num_classes(),
            found: logits.len(),
        });
    }
    if !(temperature > 0.0) {
        return Err(LagoError::InvalidConfig(
            "prototype temperature must be positive".into(),
        ));
    }
    let weights = math::softmax(logits, temperature);
    let mut acc = vec![0.0; bank.dim()];
    for (pi, class) in weights.iter().zip(bank.classes()) {
        for (a, v) in acc.iter_mut().zip(class.prototype.iter()) {
            *a += pi * v;
        }
    }
    Ok(TextPrototype {
        embedding: Embedding::unit(&acc)?,
        weights,
    })
}
