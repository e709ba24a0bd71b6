//! Synthetic shapes dataset: generation, on-disk layout, loading and
//! training-time augmentation.
//!
//! Layout: `root/images/<stem>.png` (8-bit RGB), `root/masks/<stem>.png`
//! (8-bit gray, pixel = class index, 0 background), `root/manifest.json`.
//! Images in memory are `[3, H, W]` tensors with values in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 3] = ["disk", "rectangle", "triangle"];
pub const MANIFEST_VERSION: u32 = 1;
pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSpec {
    pub num_train: usize,
    pub num_eval: usize,
    /// Subset of [`SHAPE_CLASSES`]; order fixes the label indices.
    pub classes: Vec<String>,
    pub size: usize,
    pub seed: u64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            num_train: 400,
            num_eval: 100,
            classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            size: 64,
            seed: 0,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one shape class is required".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !SHAPE_CLASSES.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown shape class `{c}`; expected one of {SHAPE_CLASSES:?}"
                )));
            }
            if self.classes[..i].contains(c) {
                return Err(Error::Config(format!("shape class `{c}` listed twice")));
            }
        }
        if self.size < 16 {
            return Err(Error::Config(format!("image size {} is below 16", self.size)));
        }
        Ok(())
    }
}

/// Index file of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub size: usize,
    pub seed: u64,
    pub stems: Vec<String>,
    /// Split name of each entry of `stems`.
    pub split: Vec<String>,
}

impl Manifest {
    pub fn num_fg_classes(&self) -> usize {
        self.classes.len()
    }

    /// Stems of `split`, sorted.
    pub fn split_stems(&self, split: &str) -> Vec<&str> {
        let mut s: Vec<&str> = self
            .stems
            .iter()
            .zip(&self.split)
            .filter(|(_, sp)| *sp == split)
            .map(|(st, _)| st.as_str())
            .collect();
        s.sort_unstable();
        s
    }

    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.stems.len() != self.split.len() {
            return Err(Error::Format(format!(
                "{} stems but {} split entries",
                self.stems.len(),
                self.split.len()
            )));
        }
        let mut sorted = self.stems.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Format("duplicate stems in manifest".into()));
        }
        Ok(())
    }
}

/// One image with its multi-hot label and optional ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `labels[c]` is true iff foreground class `c + 1` is present.
    pub labels: Vec<bool>,
    /// Row-major `H × W` class indices.
    pub mask: Option<Vec<u8>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }
}

/// Multi-hot labels read off a mask.
pub fn labels_from_mask(mask: &[u8], num_fg: usize) -> Vec<bool> {
    let mut labels = vec![false; num_fg];
    for &m in mask {
        if m > 0 && (m as usize) <= num_fg {
            labels[m as usize - 1] = true;
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disk { r: f64 },
    Rect { hw: f64, hh: f64 },
    Triangle { r: f64, angle: f64 },
}

impl Shape {
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Disk { r } => dx * dx + dy * dy <= r * r,
            Shape::Rect { hw, hh } => dx.abs() <= hw && dy.abs() <= hh,
            Shape::Triangle { r, angle } => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = angle + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0)
            }
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

const PLACEMENT_ATTEMPTS: usize = 50;

/// Renders sample `index`; the result depends only on `(spec, index)`.
/// Pixel values are already quantized to 8 bits.
pub fn render_sample(spec: &GenerationSpec, index: u64) -> (Tensor, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.size;
    let sf = s as f64;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let theta: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let mut rgb = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let t = ((x as f64 + 0.5) / sf - 0.5) * gx + ((y as f64 + 0.5) / sf - 0.5) * gy;
            for c in 0..3 {
                let noise: f64 = rng.random_range(-0.08..0.08);
                rgb[c * s * s + y * s + x] = base[c] + slope[c] * t + noise;
            }
        }
    }

    let mut mask = vec![0u8; s * s];
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let class = rng.random_range(0..spec.classes.len());
        let kind = SHAPE_CLASSES.iter().position(|&n| n == spec.classes[class]).expect("validated class");
        let r = rng.random_range(0.18..0.30) * sf;
        let margin = r * 1.15;
        // Shapes never touch; one that finds no free spot is dropped.
        let spot = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let cx = rng.random_range(margin..sf - margin);
            let cy = rng.random_range(margin..sf - margin);
            let free = placed.iter().all(|&(px, py, pr)| (cx - px).hypot(cy - py) > (r + pr) * 1.15 + 1.0);
            free.then_some((cx, cy))
        });
        let Some((cx, cy)) = spot else { continue };
        placed.push((cx, cy, r));
        let shape = match kind {
            0 => Shape::Disk { r },
            1 => {
                let short = rng.random_range(0.3..0.5) * r;
                if rng.random_bool(0.5) {
                    Shape::Rect { hw: r, hh: short }
                } else {
                    Shape::Rect { hw: short, hh: r }
                }
            }
            _ => Shape::Triangle {
                r: r * 1.15,
                angle: rng.random_range(0.0..2.0 * std::f64::consts::PI),
            },
        };
        let color: [f64; 3] = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 0.6 {
                break c;
            }
        };
        for y in 0..s {
            for x in 0..s {
                if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                    mask[y * s + x] = class as u8 + 1;
                    for c in 0..3 {
                        rgb[c * s * s + y * s + x] = color[c];
                    }
                }
            }
        }
    }
    let rgb = rgb.into_iter().map(|v| quantize(v) as f64 / 255.0).collect();
    (Tensor::new(&[3, s, s], rgb).expect("render extent"), mask)
}

fn stem_for(split: &str, i: usize) -> String {
    format!("{split}_{i:04}")
}

fn write_png(path: &Path, write: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    write(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match *image.dims() {
        [3, h, w] => (h, w),
        ref d => return Err(Error::shape("save_image", format!("expected [3, H, W], got {d:?}"))),
    };
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([quantize(d[p]), quantize(d[h * w + p]), quantize(d[2 * h * w + p])])
    });
    write_png(path, |p| img.save(p))
}

pub fn save_mask(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, mask.to_vec())
        .ok_or_else(|| Error::shape("save_mask", format!("{} values for {height}x{width}", mask.len())))?;
    write_png(path, |p| img.save(p))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Any PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open_png(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = open_png(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// Renders and writes the whole dataset under `root`.
pub fn generate_dataset(spec: &GenerationSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    for dir in ["images", "masks"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut stems = Vec::new();
    let mut split = Vec::new();
    let mut index = 0u64;
    for (name, count) in [(TRAIN, spec.num_train), (EVAL, spec.num_eval)] {
        for i in 0..count {
            let stem = stem_for(name, i);
            let (image, mask) = render_sample(spec, index);
            index += 1;
            save_image(&root.join("images").join(format!("{stem}.png")), &image)?;
            save_mask(&root.join("masks").join(format!("{stem}.png")), &mask, spec.size, spec.size)?;
            stems.push(stem);
            split.push(name.to_string());
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        classes: spec.classes.clone(),
        size: spec.size,
        seed: spec.seed,
        stems,
        split,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load_sample(&self, stem: &str) -> Result<Sample> {
        let named = |e: Error| match e {
            Error::Io { path, source } => Error::Io {
                path,
                source: std::io::Error::new(source.kind(), format!("sample `{stem}`: {source}")),
            },
            Error::Format(msg) => Error::Format(format!("sample `{stem}`: {msg}")),
            other => other,
        };
        let image = load_image(&self.root.join("images").join(format!("{stem}.png"))).map_err(named)?;
        let mask_path = self.root.join("masks").join(format!("{stem}.png"));
        let mask = if mask_path.exists() {
            let (m, h, w) = load_mask(&mask_path).map_err(named)?;
            if [h, w] != image.dims()[1..] {
                return Err(Error::shape("load_sample", format!("sample `{stem}`: mask {h}x{w} vs image {:?}", image.dims())));
            }
            Some(m)
        } else {
            None
        };
        let labels = match &mask {
            Some(m) => labels_from_mask(m, self.manifest.num_fg_classes()),
            None => vec![false; self.manifest.num_fg_classes()],
        };
        Ok(Sample {
            stem: stem.to_string(),
            image,
            labels,
            mask,
        })
    }

    /// Lazily loads `split` in stem order.
    pub fn iter_split<'a>(&'a self, split: &str) -> impl Iterator<Item = Result<Sample>> + 'a {
        self.manifest
            .split_stems(split)
            .into_iter()
            .map(move |s| self.load_sample(s))
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        self.iter_split(split).collect()
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Random training-time transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Uniform range of the rescale factor. The default keeps the stored
    /// size; rescale-and-crop slows convergence past the 30-epoch budget.
    pub scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Side of the square crop.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (1.0, 1.0),
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            crop: 64,
        }
    }
}

impl AugmentConfig {
    /// Leaves samples of side `crop` untouched.
    pub fn identity(crop: usize) -> Self {
        Self {
            scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            crop,
        }
    }
}

fn nearest_resize(mask: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = vec![0; oh * ow];
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out[y * ow + x] = mask[sy * w + sx];
        }
    }
    out
}

/// Mirrors image and mask left to right.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let img = sample.image.data();
    let image = Tensor::from_fn(sample.image.dims(), |i| {
        let (row, x) = (i / w, i % w);
        img[row * w + (w - 1 - x)]
    });
    let mask = sample.mask.as_ref().map(|m| (0..h * w).map(|i| m[(i / w) * w + (w - 1 - i % w)]).collect());
    Sample {
        stem: sample.stem.clone(),
        image,
        labels: sample.labels.clone(),
        mask,
    }
}

/// Scale, flip, brightness/contrast jitter, then random crop. Masks follow
/// every geometric step with nearest-neighbour sampling and labels are
/// re-derived from the cropped mask.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let (lo, hi) = cfg.scale;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("invalid scale range {:?}", cfg.scale)));
    }
    let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = (
        ((h as f64 * factor).round() as usize).max(1),
        ((w as f64 * factor).round() as usize).max(1),
    );
    if cfg.crop > sh || cfg.crop > sw {
        return Err(Error::Config(format!(
            "crop {} exceeds the scaled image {sh}x{sw}",
            cfg.crop
        )));
    }
    let mut out = Sample {
        stem: sample.stem.clone(),
        image: sample.image.resize_bilinear(sh, sw)?,
        labels: sample.labels.clone(),
        mask: sample.mask.as_ref().map(|m| nearest_resize(m, h, w, sh, sw)),
    };
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        out = flip_horizontal(&out);
    }
    let b = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let c = if cfg.contrast > 0.0 {
        rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
    } else {
        1.0
    };
    if b != 0.0 || c != 1.0 {
        let mean = out.image.mean();
        out.image = out.image.map(|v| ((v - mean) * c + mean + b).clamp(0.0, 1.0));
    }
    let oy = rng.random_range(0..=sh - cfg.crop);
    let ox = rng.random_range(0..=sw - cfg.crop);
    let k = cfg.crop;
    if k != sh || k != sw {
        let img = out.image.data();
        out.image = Tensor::from_fn(&[3, k, k], |i| {
            let (ch, y, x) = (i / (k * k), (i / k) % k, i % k);
            img[ch * sh * sw + (y + oy) * sw + x + ox]
        });
        out.mask = out
            .mask
            .map(|m| (0..k * k).map(|i| m[(i / k + oy) * sw + i % k + ox]).collect());
    }
    if let Some(m) = &out.mask {
        out.labels = labels_from_mask(m, sample.labels.len());
    }
    Ok(out)
}
