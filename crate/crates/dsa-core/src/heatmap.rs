//! Attention heatmaps as binary PPM (P6) images.
//!
//! Per-patch attention received (mean over layers, heads, and query rows,
//! cls column excluded) is min-max normalized, mapped through a fixed
//! 256-entry viridis-like lookup table, and upsampled nearest-neighbour
//! to the image grid. Output is a pure function of checkpoint + input, so
//! renders are bitwise reproducible.

use crate::attack::{patch_importance, LayerMode};
use crate::datagen::Dataset;
use crate::error::{DsaError, Result};
use crate::vit::{dataset_patches, forward_frozen, ViTConfig, ViTParams};

/// Anchor colours along the viridis ramp (dark purple → yellow).
const ANCHORS: [[u8; 3]; 10] = [
    [68, 1, 84],
    [72, 40, 120],
    [62, 74, 137],
    [49, 104, 142],
    [38, 130, 142],
    [31, 158, 137],
    [53, 183, 121],
    [109, 205, 89],
    [180, 222, 44],
    [253, 231, 37],
];

const fn build_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let segments = ANCHORS.len() - 1; // 9
    let mut p = 0;
    while p < 256 {
        // fixed-point position in [0, segments] with 8 fractional bits
        let x = p * segments * 256 / 255;
        let mut seg = x >> 8;
        if seg >= segments {
            seg = segments - 1;
        }
        let frac = (x - (seg << 8)) as i32;
        let mut c = 0;
        while c < 3 {
            let a = ANCHORS[seg][c] as i32;
            let b = ANCHORS[seg + 1][c] as i32;
            lut[p][c] = (a + ((b - a) * frac + 128).div_euclid(256)) as u8;
            c += 1;
        }
        p += 1;
    }
    lut
}

pub const VIRIDIS: [[u8; 3]; 256] = build_lut();

/// Mean attention received per image patch for one example: the per-layer
/// column sums averaged over layers, heads, and query rows.
pub fn patch_attention(
    vit_cfg: &ViTConfig,
    params: &ViTParams,
    ds: &Dataset,
    index: usize,
) -> Result<Vec<f64>> {
    if index >= ds.len() {
        return Err(DsaError::Config(format!(
            "example index {index} out of range for dataset of {}",
            ds.len()
        )));
    }
    let patches = dataset_patches(vit_cfg, ds, &[index])?;
    let out = forward_frozen(vit_cfg, params, patches)?;
    let imp = patch_importance(&out.attn, LayerMode::SumAll)?;
    let norm = (vit_cfg.num_layers * vit_cfg.num_heads * vit_cfg.seq_len()) as f64;
    // aggregate[0] is the cls column; the rest align with image patches
    Ok(imp[0].aggregate[1..].iter().map(|&t| t / norm).collect())
}

/// Renders per-patch values (row-major over the patch grid) to P6 bytes,
/// min-max normalized and nearest-neighbour upsampled by `patch`.
pub fn render_ppm(values: &[f64], grid_h: usize, grid_w: usize, patch: usize) -> Result<Vec<u8>> {
    if values.len() != grid_h * grid_w || patch == 0 {
        return Err(DsaError::Config(format!(
            "patch grid {grid_h}×{grid_w} (scale {patch}) does not match {} values",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(DsaError::NonFinite { context: format!("heatmap value {v}") });
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (h, w) = (grid_h * patch, grid_w * patch);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            let v = values[(r / patch) * grid_w + (c / patch)];
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let idx = (t * 255.0).round() as usize;
            out.extend_from_slice(&VIRIDIS[idx.min(255)]);
        }
    }
    Ok(out)
}

/// End-to-end: attention map for `ds[index]` rendered at image resolution.
pub fn heatmap_ppm(
    vit_cfg: &ViTConfig,
    params: &ViTParams,
    ds: &Dataset,
    index: usize,
) -> Result<Vec<u8>> {
    let values = patch_attention(vit_cfg, params, ds, index)?;
    let grid_w = vit_cfg.image_hw.1 / vit_cfg.patch_size;
    let grid_h = vit_cfg.image_hw.0 / vit_cfg.patch_size;
    render_ppm(&values, grid_h, grid_w, vit_cfg.patch_size)
}
