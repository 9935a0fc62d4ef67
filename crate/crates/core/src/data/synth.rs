//! Deterministic synthetic femur radiographs.
//!
//! Each image shows a stylised proximal femur (head, neck, greater
//! trochanter, shaft) inside a jittered bounding box. Fractured classes
//! carry a class-specific set of dark line segments; Unbroken carries none.
//! Right-side samples are drawn mirrored, so side normalisation restores the
//! canonical left orientation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{crop_resize, normalize_side, GrayImage};
use super::label::FractureLabel;
use super::manifest::{BoundingBox, Manifest, Sample, Side, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SOURCE_SIZE: usize = 96;
/// Half width of a fracture line in box-normalised units.
pub const LINE_HALF_WIDTH: f32 = 0.04;
const LINE_INTENSITY: f32 = 0.15;
const ENDPOINT_JITTER: f32 = 0.01;

type Point = (f32, f32);

/// Nominal fracture segments of a class, in box-normalised `(u, v)`
/// coordinates of a left femur.
pub fn motif(label: FractureLabel) -> &'static [(Point, Point)] {
    match label {
        FractureLabel::Unbroken => &[],
        FractureLabel::A1 => &[((0.62, 0.20), (0.80, 0.40))],
        FractureLabel::A2 => &[((0.58, 0.46), (0.64, 0.60)), ((0.72, 0.46), (0.78, 0.60))],
        FractureLabel::A3 => &[((0.54, 0.80), (0.78, 0.70))],
        FractureLabel::B1 => &[((0.34, 0.12), (0.40, 0.34))],
        FractureLabel::B2 => &[((0.47, 0.28), (0.47, 0.44))],
        FractureLabel::B3 => &[((0.14, 0.16), (0.22, 0.34)), ((0.20, 0.10), (0.28, 0.28))],
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn inside_bone(p: Point) -> bool {
    let circle = |c: Point, r: f32| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() <= r;
    circle((0.26, 0.24), 0.18)
        || segment_distance(p, (0.30, 0.30), (0.60, 0.40)) <= 0.11
        || circle((0.70, 0.32), 0.16)
        || segment_distance(p, (0.66, 0.40), (0.66, 1.00)) <= 0.15
}

pub struct SynthDataset {
    pub manifest: Manifest,
    pub images: Vec<GrayImage>,
}

impl SynthDataset {
    /// Model inputs for every sample, prepared in memory the same way
    /// `load_sample` prepares them from disk (minus 8-bit quantisation).
    pub fn tensors(&self, target: usize) -> Result<Vec<Tensor>> {
        self.manifest
            .samples
            .iter()
            .zip(&self.images)
            .map(|(s, img)| Ok(normalize_side(&crop_resize(img, &s.bbox, target)?, s.side)))
            .collect()
    }
}

fn render(label: FractureLabel, rng: &mut ChaCha8Rng) -> (GrayImage, BoundingBox, Side) {
    let n = SOURCE_SIZE as i32;
    let w = 72 + rng.random_range(-3..=3);
    let h = 80 + rng.random_range(-3..=3);
    let x0 = ((n - w) / 2 + rng.random_range(-4..=4)).clamp(0, n - w);
    let y0 = ((n - h) / 2 + rng.random_range(-4..=4)).clamp(0, n - h);
    let side = if rng.random_bool(0.5) { Side::Right } else { Side::Left };
    let bone = rng.random_range(0.65f32..0.85);
    let background = rng.random_range(0.08f32..0.16);
    let noise = Normal::new(0.0f32, 0.03).expect("valid deviation");
    let segments: Vec<(Point, Point)> = motif(label)
        .iter()
        .map(|&(a, b)| {
            let mut j = || rng.random_range(-ENDPOINT_JITTER..ENDPOINT_JITTER);
            ((a.0 + j(), a.1 + j()), (b.0 + j(), b.1 + j()))
        })
        .collect();

    let mut data = vec![0.0f32; SOURCE_SIZE * SOURCE_SIZE];
    for py in 0..SOURCE_SIZE {
        for px in 0..SOURCE_SIZE {
            let u = (px as f32 + 0.5 - x0 as f32) / w as f32;
            let v = (py as f32 + 0.5 - y0 as f32) / h as f32;
            let mut value = if inside_bone((u, v)) { bone - 0.1 * v } else { background };
            if segments.iter().any(|&(a, b)| segment_distance((u, v), a, b) <= LINE_HALF_WIDTH) {
                value = LINE_INTENSITY;
            }
            data[py * SOURCE_SIZE + px] = (value + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let mut bbox = BoundingBox { x: x0 as u32, y: y0 as u32, w: w as u32, h: h as u32 };
    if side == Side::Right {
        data.chunks_mut(SOURCE_SIZE).for_each(<[f32]>::reverse);
        bbox.x = (n - x0 - w) as u32;
    }
    let img = GrayImage::new(SOURCE_SIZE, SOURCE_SIZE, data).expect("square source image");
    (img, bbox, side)
}

/// Generates `n_per_class` images for each of the seven classes. Output is a
/// pure function of `(n_per_class, seed)`.
pub fn synth_generate(n_per_class: usize, seed: u64) -> Result<SynthDataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(n_per_class * FractureLabel::COUNT);
    let mut images = Vec::with_capacity(samples.capacity());
    for i in 0..n_per_class {
        for label in FractureLabel::ALL {
            let index = samples.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            let (img, bbox, side) = render(label, &mut rng);
            let id = format!("synth-{}-{i:04}", label.name().to_lowercase());
            samples.push(Sample { path: format!("images/{id}.png"), id, bbox, side, label });
            images.push(img);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        provenance: Some(format!("synthetic femur generator, {n_per_class} per class, seed {seed}")),
        samples,
    };
    Ok(SynthDataset { manifest, images })
}

/// Writes `manifest.jsonl` and `images/*.png` under `dir`; returns the
/// manifest path.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (s, img) in dataset.manifest.samples.iter().zip(&dataset.images) {
        img.save_png(&dir.join(&s.path))?;
    }
    let path = dir.join("manifest.jsonl");
    dataset.manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let a = synth_generate(3, 7).unwrap();
        let b = synth_generate(3, 7).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.images, b.images);
        assert_eq!(a.manifest.samples.len(), 21);
        assert_ne!(synth_generate(3, 8).unwrap().images, a.images);
    }

    #[test]
    fn boxes_fit_the_source() {
        let d = synth_generate(5, 1).unwrap();
        for s in &d.manifest.samples {
            s.bbox.check_within(SOURCE_SIZE, SOURCE_SIZE, &s.id).unwrap();
        }
    }

    #[test]
    fn motif_segments_lie_on_bone() {
        for label in FractureLabel::ALL {
            for &(a, b) in motif(label) {
                for k in 0..=10 {
                    let t = k as f32 / 10.0;
                    let p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                    assert!(inside_bone(p), "{label} segment leaves the bone at {p:?}");
                }
            }
        }
    }
}
