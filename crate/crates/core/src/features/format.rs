//! The `LAGO0001` binary bundle layout and its JSON manifest.
//!
//! ```text
//! bytes 0..8   b"LAGO0001"
//! header       7 x u32 LE: d, H, W, Y, m, M, flags
//! payload      f32 LE: grid [H*W*d], full [d], prototypes [Y*d],
//!              descriptions [Y*m*d], templates [Y*d] (flags bit 1),
//!              proposals [M*4] as (x, y, w, h)
//! trailer      u32 LE ground-truth class (flags bit 0)
//! ```
//!
//! The manifest is a sibling `.json` file repeating the header fields plus
//! the image id and class names. The binary is authoritative; the manifest
//! only contributes the names, which the binary does not carry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Embedding, FeatureBundle, PatchGrid};
use crate::error::{DecodeError, LagoError, Result};
use crate::geometry::BoundingBox;
use crate::textbank::{ClassText, ClassTextBank};

pub const MAGIC: &[u8; 8] = b"LAGO0001";
/// File extension of bundle files; the manifest sits next to it as `.json`.
pub const BUNDLE_EXTENSION: &str = "lago";
pub const FLAG_GROUND_TRUTH: u32 = 1;
pub const FLAG_TEMPLATES: u32 = 1 << 1;

const HEADER_LEN: usize = MAGIC.len() + 7 * 4;

/// The fixed-size header following the magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub d: u32,
    #[serde(rename = "H")]
    pub h: u32,
    #[serde(rename = "W")]
    pub w: u32,
    #[serde(rename = "Y")]
    pub classes: u32,
    pub m: u32,
    #[serde(rename = "M")]
    pub proposals: u32,
    pub flags: u32,
}

impl BundleHeader {
    fn of(bundle: &FeatureBundle) -> Self {
        let bank = &bundle.text_bank;
        let mut flags = 0;
        if bundle.ground_truth.is_some() {
            flags |= FLAG_GROUND_TRUTH;
        }
        if bank.has_templates() {
            flags |= FLAG_TEMPLATES;
        }
        BundleHeader {
            d: bundle.grid.dim() as u32,
            h: bundle.grid.height() as u32,
            w: bundle.grid.width() as u32,
            classes: bank.num_classes() as u32,
            m: bank.descriptions_per_class() as u32,
            proposals: bundle.proposals.len() as u32,
            flags,
        }
    }

    /// Number of `d`-sized vectors in the payload.
    fn vectors_per_dim(&self) -> usize {
        let y = self.classes as usize;
        let templates = if self.flags & FLAG_TEMPLATES != 0 { y } else { 0 };
        (self.h as usize) * (self.w as usize) + 1 + y + y * (self.m as usize) + templates
    }

    fn trailer_len(&self) -> usize {
        if self.flags & FLAG_GROUND_TRUTH != 0 {
            4
        } else {
            0
        }
    }

    /// Payload length in bytes, trailer included.
    pub fn payload_len(&self) -> usize {
        4 * (self.d as usize * self.vectors_per_dim() + 4 * self.proposals as usize)
            + self.trailer_len()
    }
}

/// Human-readable sibling of a bundle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_id: String,
    pub class_names: Vec<String>,
    #[serde(flatten)]
    pub header: BundleHeader,
}

/// `foo.lago` -> `foo.json`.
pub fn manifest_path(bundle_path: &Path) -> PathBuf {
    bundle_path.with_extension("json")
}

pub fn encode_bundle(bundle: &FeatureBundle) -> Vec<u8> {
    let header = BundleHeader::of(bundle);
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(MAGIC);
    for v in [
        header.d,
        header.h,
        header.w,
        header.classes,
        header.m,
        header.proposals,
        header.flags,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |values: &[f64]| {
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    let bank = &bundle.text_bank;
    put(bundle.grid.cells());
    put(&bundle.full_embedding);
    for c in bank.classes() {
        put(&c.prototype);
    }
    for c in bank.classes() {
        for d in &c.descriptions {
            put(d);
        }
    }
    for c in bank.classes() {
        if let Some(t) = &c.template {
            put(t);
        }
    }
    for p in &bundle.proposals {
        put(&[p.x, p.y, p.w, p.h]);
    }
    if let Some(gt) = bundle.ground_truth {
        out.extend_from_slice(&(gt as u32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn floats(&mut self, n: usize) -> Vec<f64> {
        let out = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        self.pos += 4 * n;
        out
    }
}

fn parse_header(bytes: &[u8]) -> std::result::Result<BundleHeader, DecodeError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DecodeError::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let header = BundleHeader {
        d: r.u32(),
        h: r.u32(),
        w: r.u32(),
        classes: r.u32(),
        m: r.u32(),
        proposals: r.u32(),
        flags: r.u32(),
    };
    if header.d == 0 || header.h == 0 || header.w == 0 {
        return Err(DecodeError::InvalidHeader(
            "d, H and W must be positive".into(),
        ));
    }
    if header.flags & !(FLAG_GROUND_TRUTH | FLAG_TEMPLATES) != 0 {
        return Err(DecodeError::InvalidHeader(format!(
            "unknown flag bits {:#x}",
            header.flags
        )));
    }
    Ok(header)
}

/// Checks the payload length against the header, reporting a dimension
/// mismatch when the bytes present would fit the header with another `d`.
fn check_payload_len(header: &BundleHeader, actual: usize) -> std::result::Result<(), DecodeError> {
    let expected = header.payload_len();
    if actual == expected {
        return Ok(());
    }
    let body = actual.checked_sub(header.trailer_len());
    let fixed = 16 * header.proposals as usize;
    let per_dim = 4 * header.vectors_per_dim();
    if let Some(dim_bytes) = body.and_then(|b| b.checked_sub(fixed)) {
        if dim_bytes > 0 && dim_bytes % per_dim == 0 {
            return Err(DecodeError::DimMismatch {
                header: header.d as usize,
                payload: dim_bytes / per_dim,
            });
        }
    }
    if actual < expected {
        Err(DecodeError::Truncated { expected, actual })
    } else {
        Err(DecodeError::TrailingBytes {
            extra: actual - expected,
        })
    }
}

/// Decodes a bundle from raw bytes. Names come from the manifest; when
/// `class_names` is `None` classes are named `class_<k>`.
pub fn decode_bundle(
    bytes: &[u8],
    image_id: &str,
    class_names: Option<&[String]>,
) -> Result<FeatureBundle> {
    let header = parse_header(bytes)?;
    check_payload_len(&header, bytes.len() - HEADER_LEN)?;

    let (d, y, m) = (
        header.d as usize,
        header.classes as usize,
        header.m as usize,
    );
    let (h, w) = (header.h as usize, header.w as usize);
    let mut r = Reader {
        bytes,
        pos: HEADER_LEN,
    };
    let grid = PatchGrid::new(h, w, d, r.floats(h * w * d))?;
    let full_embedding = Embedding::new(r.floats(d));
    let prototypes: Vec<Embedding> = (0..y).map(|_| Embedding::new(r.floats(d))).collect();
    let descriptions: Vec<Vec<Embedding>> = (0..y)
        .map(|_| (0..m).map(|_| Embedding::new(r.floats(d))).collect())
        .collect();
    let templates: Vec<Option<Embedding>> = (0..y)
        .map(|_| (header.flags & FLAG_TEMPLATES != 0).then(|| Embedding::new(r.floats(d))))
        .collect();
    let proposals = (0..header.proposals)
        .map(|_| {
            let v = r.floats(4);
            BoundingBox::new(v[0], v[1], v[2], v[3])
        })
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = (header.flags & FLAG_GROUND_TRUTH != 0).then(|| r.u32() as usize);

    if let Some(names) = class_names {
        if names.len() != y {
            return Err(LagoError::InvalidBundle(format!(
                "manifest lists {} class names for {y} classes",
                names.len()
            )));
        }
    }
    let classes = prototypes
        .into_iter()
        .zip(descriptions)
        .zip(templates)
        .enumerate()
        .map(|(k, ((prototype, descriptions), template))| ClassText {
            name: class_names
                .map(|n| n[k].clone())
                .unwrap_or_else(|| format!("class_{k}")),
            descriptions,
            prototype,
            template,
        })
        .collect();

    let bundle = FeatureBundle {
        image_id: image_id.to_string(),
        grid,
        full_embedding,
        proposals,
        text_bank: ClassTextBank::new(classes)?,
        ground_truth,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `path` (binary) and its sibling manifest.
pub fn save_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    fs::write(path, encode_bundle(bundle)).map_err(|e| LagoError::io(path, e))?;
    let manifest = Manifest {
        image_id: bundle.image_id.clone(),
        class_names: bundle.text_bank.names(),
        header: BundleHeader::of(bundle),
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(|e| LagoError::io(&mpath, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| LagoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| LagoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a bundle and, when present, its manifest. Without a manifest the
/// image id is the file stem.
pub fn load_bundle(path: &Path) -> Result<FeatureBundle> {
    let bytes = fs::read(path).map_err(|e| LagoError::io(path, e))?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        Some(load_manifest(&mpath)?)
    } else {
        None
    };
    let wrap = |e: LagoError| match e {
        LagoError::Format(source) => LagoError::Decode {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    };
    if let Some(m) = &manifest {
        let header = parse_header(&bytes).map_err(|e| wrap(e.into()))?;
        if header != m.header {
            return Err(LagoError::InvalidBundle(format!(
                "manifest {} disagrees with binary header",
                mpath.display()
            )));
        }
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (image_id, names) = match &manifest {
        Some(m) => (m.image_id.as_str(), Some(m.class_names.as_slice())),
        None => (stem.as_str(), None),
    };
    decode_bundle(&bytes, image_id, names).map_err(wrap)
}
