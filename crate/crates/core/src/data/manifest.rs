use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{crop_resize, image_dimensions, load_image, normalize_side};
use super::label::FractureLabel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Axis-aligned box in source pixels, serialised as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BoundingBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn check_within(&self, width: usize, height: usize, id: &str) -> Result<()> {
        let invalid = |msg: String| Err(Error::Validation { id: id.to_string(), msg });
        if self.w == 0 || self.h == 0 {
            return invalid(format!("degenerate box {}x{}", self.w, self.h));
        }
        if self.x as u64 + self.w as u64 > width as u64 || self.y as u64 + self.h as u64 > height as u64 {
            return invalid(format!(
                "box [{}, {}, {}, {}] exceeds image bounds {width}x{height}",
                self.x, self.y, self.w, self.h
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub path: String,
    pub bbox: BoundingBox,
    pub side: Side,
    pub label: FractureLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub provenance: Option<String>,
    pub samples: Vec<Sample>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { format_version: FORMAT_VERSION, provenance: None, samples: Vec::new() }
    }
}

impl Manifest {
    /// Parses JSON Lines text: an optional header object carrying
    /// `format_version`, then one sample per line. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = Manifest::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(raw).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            let is_header = value.get("format_version").is_some() && value.get("id").is_none();
            if is_header {
                if !manifest.samples.is_empty() {
                    return Err(Error::Parse { line, msg: "header must precede all samples".into() });
                }
                let h: Header = serde_json::from_value(value).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                if h.format_version != FORMAT_VERSION {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unsupported format version {}", h.format_version),
                    });
                }
                manifest.format_version = h.format_version;
                manifest.provenance = h.provenance;
                continue;
            }
            let sample: Sample =
                serde_json::from_value(value).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            if !seen.insert(sample.id.clone()) {
                return Err(Error::Validation { id: sample.id, msg: "duplicate id".into() });
            }
            if sample.bbox.w == 0 || sample.bbox.h == 0 {
                return Err(Error::Validation { id: sample.id, msg: "degenerate bounding box".into() });
            }
            manifest.samples.push(sample);
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header { format_version: self.format_version, provenance: self.provenance.clone() };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Checks every bounding box against the dimensions of its image.
    pub fn validate_images(&self, base: &Path) -> Result<()> {
        for s in &self.samples {
            let path = resolve(base, s);
            let (w, h) = image_dimensions(&path).map_err(|e| Error::Validation {
                id: s.id.clone(),
                msg: format!("cannot read image {}: {e}", path.display()),
            })?;
            s.bbox.check_within(w, h, &s.id)?;
        }
        Ok(())
    }
}

/// Directory against which relative image paths of a manifest resolve.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn resolve(base: &Path, sample: &Sample) -> PathBuf {
    let p = Path::new(&sample.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads and fully validates a manifest, including bounding boxes against
/// the referenced images.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let manifest = Manifest::parse(&std::fs::read_to_string(path)?)?;
    manifest.validate_images(&manifest_dir(path))?;
    Ok(manifest)
}

/// Exact per-class counts in [`FractureLabel::ALL`] order.
pub fn class_histogram(manifest: &Manifest) -> [usize; FractureLabel::COUNT] {
    let mut counts = [0; FractureLabel::COUNT];
    for s in &manifest.samples {
        counts[s.label.index()] += 1;
    }
    counts
}

/// Loads, crops, resizes and side-normalises one sample.
pub fn load_sample(base: &Path, sample: &Sample, target: usize) -> Result<Tensor> {
    let img = load_image(&resolve(base, sample))?;
    sample.bbox.check_within(img.width, img.height, &sample.id)?;
    Ok(normalize_side(&crop_resize(&img, &sample.bbox, target)?, sample.side))
}

pub fn load_samples(base: &Path, manifest: &Manifest, target: usize) -> Result<Vec<Tensor>> {
    manifest.samples.iter().map(|s| load_sample(base, s, target)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROW: &str = r#"{"id":"a","path":"a.png","bbox":[0,0,4,4],"side":"left","label":"A2"}"#;

    #[test]
    fn empty_manifest_is_valid() {
        let m = Manifest::parse("").unwrap();
        assert!(m.samples.is_empty());
        assert_eq!(class_histogram(&m), [0; 7]);
    }

    #[test]
    fn header_and_sample_parse() {
        let text = format!("{{\"format_version\":1,\"provenance\":\"test\"}}\n{ROW}\n");
        let m = Manifest::parse(&text).unwrap();
        assert_eq!(m.provenance.as_deref(), Some("test"));
        assert_eq!(m.samples[0].label, FractureLabel::A2);
        assert_eq!(m.samples[0].bbox, BoundingBox { x: 0, y: 0, w: 4, h: 4 });
        assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!("{ROW}\n{ROW}\n");
        assert!(matches!(Manifest::parse(&text), Err(Error::Validation { id, .. }) if id == "a"));
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let text = format!("{ROW}\n\n{{\"id\":\"b\",\"path\":\"b.png\"}}\n");
        assert!(matches!(Manifest::parse(&text), Err(Error::Parse { line: 3, .. })));
        let text = ROW.replace("A2", "C9");
        assert!(matches!(Manifest::parse(&text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn out_of_bounds_box_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        super::super::image::GrayImage::filled(3, 3, 0.5).save_png(&dir.path().join("a.png")).unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, ROW).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Validation { .. })));
    }
}
