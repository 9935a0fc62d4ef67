use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{BoundingBox, Side};
use crate::error::{Error, Result};
use crate::io::decode_matrix;
use crate::tensor::Tensor;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels do not form a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("dimensions checked at construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [1, h, w] => Self::new(*w, *h, t.data().to_vec()),
            other => Err(Error::Shape(format!("expected a [1, H, W] image tensor, got {other:?}"))),
        }
    }

    /// Encodes as 8-bit grayscale PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let pixels: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Decodes PNG bytes (any color type, converted to luma) or a matrix file
/// holding raw intensities.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        return GrayImage::new(w as usize, h as usize, data);
    }
    let m = decode_matrix(bytes).map_err(|e| {
        Error::Image(image::ImageError::Unsupported(image::error::UnsupportedError::from_format_and_kind(
            image::error::ImageFormatHint::Unknown,
            image::error::UnsupportedErrorKind::GenericFeature(format!("not a PNG or raw matrix image ({e})")),
        )))
    })?;
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Shape("empty raw image".into()));
    }
    GrayImage::new(m.cols, m.rows, m.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    decode_image(&std::fs::read(path)?)
}

/// Width and height without decoding pixel data where possible.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; 8];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        let n = f.read(&mut head)?;
        if n == 8 && head == PNG_SIGNATURE {
            let (w, h) = image::image_dimensions(path)?;
            return Ok((w as usize, h as usize));
        }
    }
    let img = load_image(path)?;
    Ok((img.width, img.height))
}

/// Crops `bbox` and resamples it bilinearly (pixel centres aligned) to a
/// `target × target` tensor `[1, target, target]` with values in `[0, 1]`.
pub fn crop_resize(img: &GrayImage, bbox: &BoundingBox, target: usize) -> Result<Tensor> {
    bbox.check_within(img.width, img.height, "")?;
    if target == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let (bx, by, bw, bh) = (bbox.x as f32, bbox.y as f32, bbox.w as f32, bbox.h as f32);
    let sx = bw / target as f32;
    let sy = bh / target as f32;
    let x_max = (bbox.x + bbox.w - 1) as f32;
    let y_max = (bbox.y + bbox.h - 1) as f32;
    let mut out = Vec::with_capacity(target * target);
    for ty in 0..target {
        let fy = (by + (ty as f32 + 0.5) * sy - 0.5).clamp(by, y_max);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(y_max as usize);
        let wy = fy - y0 as f32;
        for tx in 0..target {
            let fx = (bx + (tx as f32 + 0.5) * sx - 0.5).clamp(bx, x_max);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(x_max as usize);
            let wx = fx - x0 as f32;
            let top = img.get(x0, y0) * (1.0 - wx) + img.get(x1, y0) * wx;
            let bottom = img.get(x0, y1) * (1.0 - wx) + img.get(x1, y1) * wx;
            out.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![1, target, target], out)
}

/// Mirrors right-side images about the vertical axis so every sample shows a
/// left femur.
pub fn normalize_side(t: &Tensor, side: Side) -> Tensor {
    match side {
        Side::Left => t.clone(),
        Side::Right => flip_horizontal(t),
    }
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("image tensor has a width");
    let mut data = t.data().to_vec();
    data.chunks_mut(w).for_each(<[f32]>::reverse);
    Tensor::new(t.shape().to_vec(), data).expect("shape unchanged")
}

/// Random photometric/geometric perturbation used by the augmentation
/// balancing strategy. Horizontal flips are deliberately absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub rotation_deg: f32,
    /// Relative brightness change, e.g. `0.1` brightens by 10%.
    pub brightness: f32,
}

/// Rotates each channel about the image centre (bilinear, edge-clamped).
pub fn rotate(t: &Tensor, degrees: f32) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => panic!("rotate expects [C, H, W]"),
    };
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f32);
                let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f32);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape unchanged")
}

pub fn adjust_brightness(t: &Tensor, relative: f32) -> Tensor {
    let data = t.data().iter().map(|v| (v * (1.0 + relative)).clamp(0.0, 1.0)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape unchanged")
}

pub fn augment(t: &Tensor, aug: &Augmentation) -> Tensor {
    adjust_brightness(&rotate(t, aug.rotation_deg), aug.brightness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    #[test]
    fn full_box_same_size_is_identity() {
        let data: Vec<f32> = (0..16 * 16).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = GrayImage::new(16, 16, data.clone()).unwrap();
        let t = crop_resize(&img, &bbox(0, 0, 16, 16), 16).unwrap();
        assert_eq!(t.data(), &data[..]);
    }

    #[test]
    fn constant_region_stays_constant() {
        let img = GrayImage::filled(448, 448, 0.375);
        let t = crop_resize(&img, &bbox(0, 0, 448, 448), 224).unwrap();
        assert_eq!(t.shape(), &[1, 224, 224]);
        assert!(t.data().iter().all(|v| *v == 0.375));
    }

    #[test]
    fn degenerate_or_outside_box_is_rejected() {
        let img = GrayImage::filled(10, 10, 0.0);
        assert!(matches!(crop_resize(&img, &bbox(0, 0, 0, 5), 4), Err(Error::Validation { .. })));
        assert!(matches!(crop_resize(&img, &bbox(5, 5, 6, 2), 4), Err(Error::Validation { .. })));
    }

    #[test]
    fn flip_maps_column_j_to_mirror() {
        let data: Vec<f32> = (0..224).map(|j| j as f32).collect::<Vec<_>>().repeat(2);
        let t = Tensor::new(vec![1, 2, 224], data).unwrap();
        let f = normalize_side(&t, Side::Right);
        for j in 0..224 {
            assert_eq!(f.data()[j], (223 - j) as f32);
        }
        assert_eq!(normalize_side(&f, Side::Right), t);
        assert_eq!(normalize_side(&t, Side::Left), t);
    }

    #[test]
    fn zero_rotation_and_brightness_are_identity() {
        let data: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        let t = Tensor::new(vec![1, 8, 8], data).unwrap();
        let a = augment(&t, &Augmentation { rotation_deg: 0.0, brightness: 0.0 });
        for (x, y) in a.data().iter().zip(t.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let img = GrayImage::new(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let back = decode_image(&img.to_png().unwrap()).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn garbage_bytes_are_an_image_error() {
        assert!(matches!(decode_image(b"definitely not an image"), Err(Error::Image(_))));
        let img = GrayImage::filled(4, 4, 0.5);
        let png = img.to_png().unwrap();
        assert!(decode_image(&png[..png.len() / 2]).is_err());
    }
}
