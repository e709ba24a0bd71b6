//! Color-mapped renderings of class maps and attention rows.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use transcam::cam::{attention_map, attention_row, BlockRange, ClassActivationMap, Coupling};
use transcam::conformer::Conformer;
use transcam::train::{fused_cam, infer_scales};
use transcam::{Error, Result, Tensor};

use crate::colormap::{color, normalize_min_max};

/// Min-max normalized `plane` (`h × w`) through the color table, blended
/// over `base` (`[3, h, w]` in `[0, 1]`) with weight `alpha` on the heatmap.
pub fn render(plane: &[f64], h: usize, w: usize, base: Option<&Tensor>, alpha: f64) -> Result<RgbImage> {
    if plane.len() != h * w {
        return Err(Error::shape("render", format!("{} values for a {h}x{w} image", plane.len())));
    }
    if let Some(b) = base {
        if b.dims() != [3, h, w] {
            return Err(Error::shape("render", format!("base image {:?} vs {h}x{w}", b.dims())));
        }
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("blend factor {alpha} outside [0, 1]")));
    }
    let norm = normalize_min_max(plane);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = color(norm[y * w + x]);
            let px: [u8; 3] = std::array::from_fn(|k| match base {
                Some(b) => {
                    let under = b.data()[k * h * w + y * w + x] * 255.0;
                    (alpha * c[k] as f64 + (1.0 - alpha) * under).round().clamp(0.0, 255.0) as u8
                }
                None => c[k],
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// File-name stem of a coupling stage.
pub fn stage_name(c: Coupling) -> &'static str {
    match c {
        Coupling::None => "cam",
        Coupling::ClsAttn => "clsattn",
        Coupling::AttnAgg => "attnagg",
        Coupling::TransCam => "transcam",
    }
}

/// Writes `{stage}_{class}.png` for every class plane of `map`, classes
/// numbered from 1 like the mask indices.
pub fn write_class_maps(
    map: &ClassActivationMap,
    stage: &str,
    base: &Tensor,
    alpha: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (h, w) = (map.height(), map.width());
    (0..map.num_classes())
        .map(|c| {
            let path = out_dir.join(format!("{stage}_{}.png", c + 1));
            save_png(&render(map.plane(c), h, w, Some(base), alpha)?, &path)?;
            Ok(path)
        })
        .collect()
}

/// One map per requested coupling at the image's extent.
pub fn stage_maps(
    model: &Conformer,
    image: &Tensor,
    stages: &[Coupling],
    range: BlockRange,
    scales: &[f64],
) -> Result<Vec<(Coupling, ClassActivationMap)>> {
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let outputs = infer_scales(model, &[image], scales)?.remove(0);
    let head = model.cam_weights()?.transpose()?;
    stages
        .iter()
        .map(|&c| Ok((c, fused_cam(&outputs, &head, c, range, h, w)?)))
        .collect()
}

/// Attention of the patch token under image pixel `(y, x)` towards every
/// other patch, resized to the image extent.
pub fn reference_row(model: &Conformer, image: &Tensor, pixel: (usize, usize), range: BlockRange) -> Result<Tensor> {
    let (h, w) = (image.dims()[1], image.dims()[2]);
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::Config(format!(
            "reference pixel ({}, {}) outside the {h}x{w} image",
            pixel.0, pixel.1
        )));
    }
    let out = infer_scales(model, &[image], &[1.0])?.remove(0).remove(0);
    let a = attention_map(&out.attn, range)?;
    let grid = (a.num_tokens() as f64).sqrt().round() as usize;
    let index = (pixel.0 * grid / h) * grid + pixel.1 * grid / w;
    let row = attention_row(&a, index)?;
    row.reshape(&[1, grid, grid])?.resize_bilinear(h, w)?.reshape(&[h, w])
}
