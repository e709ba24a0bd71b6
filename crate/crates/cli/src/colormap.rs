//! Fixed blue-to-red color table and min-max normalization for heatmaps.

/// Piecewise-linear blue → cyan → green → yellow → red over 256 entries,
/// computed in integer arithmetic at compile time.
pub const COLORMAP: [[u8; 3]; 256] = build();

const fn ramp(i: usize, lo: usize) -> u8 {
    // 0 at `lo`, 255 at `lo + 63`, clamped outside.
    if i <= lo {
        0
    } else if i >= lo + 63 {
        255
    } else {
        ((i - lo) * 255 / 63) as u8
    }
}

const fn build() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let (r, g, b) = if i < 64 {
            (0, ramp(i, 0), 255)
        } else if i < 128 {
            (0, 255, 255 - ramp(i, 64))
        } else if i < 192 {
            (ramp(i, 128), 255, 0)
        } else {
            (255, 255 - ramp(i, 192), 0)
        };
        t[i] = [r, g, b];
        i += 1;
    }
    t
}

/// Rescales `values` to `[0, 1]` by their minimum and maximum; a constant
/// input maps to all zeros.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Table entry for a value in `[0, 1]`; values outside are clamped.
pub fn color(v: f64) -> [u8; 3] {
    let i = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    COLORMAP[i]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_blue_and_red() {
        assert_eq!(COLORMAP[0], [0, 0, 255]);
        assert_eq!(COLORMAP[255], [255, 0, 0]);
        assert_eq!(color(-3.0), COLORMAP[0]);
        assert_eq!(color(7.0), COLORMAP[255]);
    }

    #[test]
    fn red_rises_and_blue_falls_monotonically() {
        for i in 1..256 {
            assert!(COLORMAP[i][0] >= COLORMAP[i - 1][0]);
            assert!(COLORMAP[i][2] <= COLORMAP[i - 1][2]);
        }
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        assert_eq!(normalize_min_max(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        assert_eq!(normalize_min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
