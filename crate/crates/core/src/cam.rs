//! Class activation maps and their refinement by transformer attention.
//!
//! Spatial planes are flattened row-major: token `i` of a `g × g` grid sits
//! at row `i / g`, column `i % g`. Attention matrices carry the class token
//! at index 0 until [`slice_class_token`] removes it.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::conformer::{AttentionStack, ForwardOutput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-class score planes, `classes × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    refined: bool,
    normalized: bool,
}

impl ClassActivationMap {
    /// Unrefined, unnormalized planes; `data` holds `classes` planes back to back.
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != classes * height * width {
            return Err(Error::shape(
                "class_activation_map",
                format!("{} values for {classes} planes of {height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
            refined: false,
            normalized: false,
        })
    }

    /// From a `[classes, h, w]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [k, h, w] => Self::new(k, h, w, t.data().to_vec()),
            ref d => Err(Error::shape("class_activation_map", format!("expected [classes, h, w], got {d:?}"))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_refined(&self) -> bool {
        self.refined
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[class * n..(class + 1) * n]
    }

    pub fn plane_mut(&mut self, class: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[class * n..(class + 1) * n]
    }

    /// `[classes, h, w]`; fails for a map with no classes.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.classes, self.height, self.width], self.data.clone())
    }

    fn with_data(&self, height: usize, width: usize, data: Vec<f64>) -> Self {
        Self {
            classes: self.classes,
            height,
            width,
            data,
            refined: self.refined,
            normalized: self.normalized,
        }
    }
}

/// Spatial affinity between patch tokens, class token removed.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `N × N`.
    pub matrix: Tensor,
    /// 0-based blocks averaged into this map; empty when unknown.
    pub blocks: Range<usize>,
}

impl AttentionMap {
    pub fn num_tokens(&self) -> usize {
        self.matrix.dims()[0]
    }
}

/// Per-pixel class indices; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

/// Which transformer blocks feed the attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRange {
    /// First half, blocks `0..L/2`.
    #[serde(rename = "AS")]
    Shallow,
    /// Second half, blocks `L/2..L`.
    #[serde(rename = "AD")]
    Deep,
    #[default]
    #[serde(rename = "AA")]
    All,
}

impl BlockRange {
    pub const ALL: [BlockRange; 3] = [BlockRange::Shallow, BlockRange::Deep, BlockRange::All];

    pub fn blocks(self, num_blocks: usize) -> Range<usize> {
        let half = num_blocks / 2;
        match self {
            BlockRange::Shallow => 0..half,
            BlockRange::Deep => half..num_blocks,
            BlockRange::All => 0..num_blocks,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BlockRange::Shallow => "AS",
            BlockRange::Deep => "AD",
            BlockRange::All => "AA",
        }
    }
}

/// How attention is coupled with the CNN activation map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// Plain CAM.
    None,
    /// Hadamard product with the class token's attention row.
    ClsAttn,
    /// Activation-weighted sum of per-token attention, `Aᵀ·m`.
    AttnAgg,
    /// Attention-map product, `A·m`.
    #[default]
    TransCam,
}

impl Coupling {
    pub const ALL: [Coupling; 4] = [Coupling::None, Coupling::ClsAttn, Coupling::AttnAgg, Coupling::TransCam];

    pub fn label(self) -> &'static str {
        match self {
            Coupling::None => "baseline",
            Coupling::ClsAttn => "ClsAttn",
            Coupling::AttnAgg => "AttnAgg",
            Coupling::TransCam => "TransCAM",
        }
    }
}

/// `M_c[k] = Σ_ch θ[ch, c] · f[ch, k]` for `f: [f_c, g, g]`, `θ: [f_c, C-1]`.
pub fn compute_cam(f: &Tensor, head_weights: &Tensor) -> Result<ClassActivationMap> {
    let (fc, h, w) = match *f.dims() {
        [c, h, w] => (c, h, w),
        ref d => return Err(Error::shape("compute_cam", format!("features {d:?}"))),
    };
    if head_weights.rank() != 2 || head_weights.dims()[0] != fc {
        return Err(Error::shape(
            "compute_cam",
            format!("features with {fc} channels, head weights {:?}", head_weights.dims()),
        ));
    }
    let flat = f.clone().reshape(&[fc, h * w])?;
    let maps = head_weights.transpose()?.matmul(&flat)?;
    ClassActivationMap::new(head_weights.dims()[1], h, w, maps.into_data())
}

/// Elementwise mean over the head axis of `[S, T, T]`.
pub fn average_heads(a: &Tensor) -> Result<Tensor> {
    let (s, t, t2) = match *a.dims() {
        [s, t, t2] => (s, t, t2),
        ref d => return Err(Error::shape("average_heads", format!("expected [heads, T, T], got {d:?}"))),
    };
    let mut out = vec![0.0; t * t2];
    for head in a.data().chunks_exact(t * t2) {
        out.iter_mut().zip(head).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= s as f64);
    Tensor::new(&[t, t2], out)
}

/// Mean of the per-block matrices in `blocks` (0-based, half-open).
pub fn average_blocks(stack: &AttentionStack, blocks: Range<usize>) -> Result<Tensor> {
    if blocks.is_empty() || blocks.end > stack.len() {
        return Err(Error::Config(format!(
            "block range {blocks:?} is empty or exceeds {} blocks",
            stack.len()
        )));
    }
    let first = &stack.per_block[blocks.start];
    let mut out = vec![0.0; first.numel()];
    for a in &stack.per_block[blocks.clone()] {
        if a.dims() != first.dims() {
            return Err(Error::shape("average_blocks", format!("{:?} vs {:?}", a.dims(), first.dims())));
        }
        out.iter_mut().zip(a.data()).for_each(|(o, v)| *o += v);
    }
    let n = blocks.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Tensor::new(first.dims(), out)
}

/// Drops the class-token row and column of a `(1+N) × (1+N)` matrix.
pub fn slice_class_token(a_bar: &Tensor) -> Result<AttentionMap> {
    let t = match *a_bar.dims() {
        [t, t2] if t == t2 => t,
        ref d => return Err(Error::shape("slice_class_token", format!("expected square matrix, got {d:?}"))),
    };
    if t < 2 {
        return Err(Error::Config("attention matrix has no patch tokens".into()));
    }
    let n = t - 1;
    let matrix = Tensor::from_fn(&[n, n], |i| a_bar.data()[(i / n + 1) * t + i % n + 1]);
    Ok(AttentionMap { matrix, blocks: 0..0 })
}

/// Averages the blocks selected by `range`, then removes the class token.
pub fn attention_map(stack: &AttentionStack, range: BlockRange) -> Result<AttentionMap> {
    let blocks = range.blocks(stack.len());
    let mut map = slice_class_token(&average_blocks(stack, blocks.clone())?)?;
    map.blocks = blocks;
    Ok(map)
}

fn check_tokens(op: &'static str, n: usize, m: &ClassActivationMap) -> Result<()> {
    if m.height * m.width != n {
        return Err(Error::shape(
            op,
            format!("{n} tokens for {}x{} planes", m.height, m.width),
        ));
    }
    Ok(())
}

fn product(a: &Tensor, transpose: bool, m: &ClassActivationMap) -> Result<ClassActivationMap> {
    let n = m.height * m.width;
    let mut out = vec![0.0; m.data.len()];
    if m.classes > 0 {
        let planes = Tensor::new(&[m.classes, n], m.data.clone())?;
        // Row-wise M · Aᵀ applies A to every flattened plane at once.
        let at = if transpose { a.clone() } else { a.transpose()? };
        out = planes.matmul(&at)?.into_data();
    }
    let mut r = m.with_data(m.height, m.width, out);
    r.refined = true;
    r.normalized = false;
    Ok(r)
}

/// `M*_c = A* · flatten(M_c)`, reshaped back to the grid.
pub fn refine(a: &AttentionMap, m: &ClassActivationMap) -> Result<ClassActivationMap> {
    check_tokens("refine", a.num_tokens(), m)?;
    product(&a.matrix, false, m)
}

/// `Σ_i m_i · A*[i, :]`, i.e. `refine(A*ᵀ, M)`.
pub fn attn_agg(a: &AttentionMap, m: &ClassActivationMap) -> Result<ClassActivationMap> {
    check_tokens("attn_agg", a.num_tokens(), m)?;
    product(&a.matrix, true, m)
}

/// Class-token attention over patches times each class plane.
pub fn cls_attn(a_bar: &Tensor, m: &ClassActivationMap) -> Result<ClassActivationMap> {
    let t = match *a_bar.dims() {
        [t, t2] if t == t2 && t >= 2 => t,
        ref d => return Err(Error::shape("cls_attn", format!("attention {d:?}"))),
    };
    check_tokens("cls_attn", t - 1, m)?;
    let row = &a_bar.data()[1..t];
    let data = m
        .data
        .chunks_exact(t - 1)
        .flat_map(|plane| plane.iter().zip(row).map(|(v, a)| v * a))
        .collect();
    let mut r = m.with_data(m.height, m.width, data);
    r.refined = true;
    r.normalized = false;
    Ok(r)
}

/// Per-plane min-max scaling to `[0, 1]`; constant planes become zero.
pub fn normalize_cam(m: &ClassActivationMap) -> ClassActivationMap {
    let mut r = m.clone();
    for k in 0..m.classes {
        let plane = r.plane_mut(k);
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for v in plane.iter_mut() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    r.normalized = true;
    r
}

/// Bilinear resize of every plane.
pub fn resize_cam(m: &ClassActivationMap, height: usize, width: usize) -> Result<ClassActivationMap> {
    if height == 0 || width == 0 {
        return Err(Error::shape("resize_cam", format!("target {height}x{width}")));
    }
    if m.classes == 0 {
        return Ok(m.with_data(height, width, Vec::new()));
    }
    let t = m.to_tensor()?.resize_bilinear(height, width)?;
    Ok(m.with_data(height, width, t.into_data()))
}

/// Zeroes the planes of classes flagged absent.
pub fn suppress_absent(m: &ClassActivationMap, present: &[bool]) -> Result<ClassActivationMap> {
    if present.len() != m.classes {
        return Err(Error::shape(
            "suppress_absent",
            format!("{} flags for {} classes", present.len(), m.classes),
        ));
    }
    let mut r = m.clone();
    for (k, &keep) in present.iter().enumerate() {
        if !keep {
            r.plane_mut(k).fill(0.0);
        }
    }
    Ok(r)
}

/// Upsamples to `height × width`, prepends a constant `tau` background
/// plane and takes the per-pixel argmax; ties go to the lower index.
pub fn pseudo_label(m: &ClassActivationMap, tau: f64, height: usize, width: usize) -> Result<PseudoLabelMap> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("threshold {tau} outside [0, 1]")));
    }
    if m.classes > u8::MAX as usize {
        return Err(Error::Config(format!("{} classes do not fit 8-bit labels", m.classes)));
    }
    let up = resize_cam(m, height, width)?;
    let labels = (0..height * width)
        .map(|p| {
            let mut best = (0u8, tau);
            for k in 0..up.classes {
                let v = up.data[k * height * width + p];
                if v > best.1 {
                    best = (k as u8 + 1, v);
                }
            }
            best.0
        })
        .collect();
    Ok(PseudoLabelMap { height, width, labels })
}

/// Resizes every map to `height × width`, averages, then normalizes.
pub fn multiscale_fuse(maps: &[ClassActivationMap], height: usize, width: usize) -> Result<ClassActivationMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("multi-scale fusion of zero maps".into()))?;
    let mut acc = vec![0.0; first.classes * height * width];
    for m in maps {
        if m.classes != first.classes {
            return Err(Error::shape(
                "multiscale_fuse",
                format!("{} vs {} classes", m.classes, first.classes),
            ));
        }
        let r = resize_cam(m, height, width)?;
        acc.iter_mut().zip(&r.data).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(normalize_cam(&first.with_data(height, width, acc)))
}

/// Raw class maps of one forward pass under `coupling`, attention taken
/// from the blocks selected by `range`.
pub fn coupled_cam(
    out: &ForwardOutput,
    head_weights: &Tensor,
    coupling: Coupling,
    range: BlockRange,
) -> Result<ClassActivationMap> {
    let cam = compute_cam(&out.features, head_weights)?;
    match coupling {
        Coupling::None => Ok(cam),
        Coupling::ClsAttn => {
            let a_bar = average_blocks(&out.attn, range.blocks(out.attn.len()))?;
            cls_attn(&a_bar, &cam)
        }
        Coupling::AttnAgg => attn_agg(&attention_map(&out.attn, range)?, &cam),
        Coupling::TransCam => refine(&attention_map(&out.attn, range)?, &cam),
    }
}

/// Attention row of patch token `index` as a `grid × grid` plane.
pub fn attention_row(a: &AttentionMap, index: usize) -> Result<Tensor> {
    let n = a.num_tokens();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || index >= n {
        return Err(Error::shape("attention_row", format!("token {index} of {n}")));
    }
    Tensor::new(&[grid, grid], a.matrix.data()[index * n..(index + 1) * n].to_vec())
}
