use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits `image[channels, H, W]` into non-overlapping square patches in
/// row-major grid order. Each patch is flattened channel-major, then by row.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::Shape(format!("patchify expects [channels, H, W], got {other:?}"))),
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = c * patch_size * patch_size;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..patch_size {
                    let row = ch * h * w + (gy * patch_size + py) * w + gx * patch_size;
                    out.extend_from_slice(&src[row..row + patch_size]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`] for a square `side × side` image.
pub fn unpatchify(patches: &Tensor, patch_size: usize, channels: usize, side: usize) -> Result<Tensor> {
    let grid = side / patch_size;
    let dim = channels * patch_size * patch_size;
    if patches.shape() != [grid * grid, dim] || side % patch_size != 0 {
        return Err(Error::Shape(format!(
            "cannot rebuild a {channels}x{side}x{side} image from patches of shape {:?}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0f32; channels * side * side];
    for (p, patch) in patches.data().chunks(dim).enumerate() {
        let (gy, gx) = (p / grid, p % grid);
        for ch in 0..channels {
            for py in 0..patch_size {
                let dst = ch * side * side + (gy * patch_size + py) * side + gx * patch_size;
                let src = (ch * patch_size + py) * patch_size;
                out[dst..dst + patch_size].copy_from_slice(&patch[src..src + patch_size]);
            }
        }
    }
    Tensor::new(vec![channels, side, side], out)
}
