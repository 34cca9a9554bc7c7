//! Nearest-neighbor PNG heatmaps of mean surfaces (quick-look output, not
//! publication rendering).

use anyhow::{Context, Result};
use spfmm::grid::SurfaceGrid;
use std::path::Path;

const STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.5, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.0, [253, 231, 37]),
];

fn color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let (a, ca) = w[0];
        let (b, cb) = w[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return [
                (ca[0] as f64 + t * (cb[0] as f64 - ca[0] as f64)) as u8,
                (ca[1] as f64 + t * (cb[1] as f64 - ca[1] as f64)) as u8,
                (ca[2] as f64 + t * (cb[2] as f64 - ca[2] as f64)) as u8,
            ];
        }
    }
    STOPS[4].1
}

/// Render a full-grid surface (row-major values) to a PNG, scaled
/// `upscale`-fold with nearest-neighbor sampling.
pub fn write_heatmap(
    path: &Path,
    grid: &SurfaceGrid,
    values: &[f64],
    upscale: u32,
) -> Result<()> {
    assert_eq!(values.len(), grid.total());
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let w = grid.n_circumferential as u32 * upscale;
    let h = grid.n_meridional as u32 * upscale;
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let r = (y / upscale) as usize;
        let c = (x / upscale) as usize;
        let v = (values[grid.flat(r, c)] - lo) / span;
        image::Rgb(color(v))
    });
    img.save(path).with_context(|| format!("writing heatmap {}", path.display()))?;
    Ok(())
}
