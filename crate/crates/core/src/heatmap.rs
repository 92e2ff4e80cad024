//! Heatmap rendering: 8-bit viridis PNG plus a JSON sidecar with the raw range.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::scoring::AnomalyMap;

/// How raw anomaly values map onto the colour ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapScale {
    /// `[0, 2s]` for `s` scales, comparable across images and runs.
    #[default]
    Fixed,
    /// `[min, max]` of each map.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub score: f32,
    pub min: f32,
    pub max: f32,
    /// Raw values mapped to the ends of the colour ramp.
    pub scale_low: f32,
    pub scale_high: f32,
}

pub fn render_heatmap(map: &AnomalyMap, n_scales: usize, scale: HeatmapScale) -> (RgbImage, HeatmapSidecar) {
    let (lo, hi) = match scale {
        HeatmapScale::Fixed => (0.0, 2.0 * n_scales as f32),
        HeatmapScale::Relative => (map.min(), map.score),
    };
    let span = (hi - lo).max(f32::EPSILON);
    let img = RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = map.map[y as usize * map.width + x as usize];
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        let c = colorous::VIRIDIS.eval_continuous(t as f64);
        Rgb([c.r, c.g, c.b])
    });
    let sidecar = HeatmapSidecar {
        score: map.score,
        min: map.min(),
        max: map.score,
        scale_low: lo,
        scale_high: hi,
    };
    (img, sidecar)
}

/// Write `<stem>.png` and `<stem>.json` next to each other.
pub fn write_heatmap(map: &AnomalyMap, n_scales: usize, scale: HeatmapScale, png: &Path) -> Result<HeatmapSidecar> {
    let (img, sidecar) = render_heatmap(map, n_scales, scale);
    img.save(png)?;
    let json = png.with_extension("json");
    std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| MmrError::io(&json, e))?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_scale_ends() {
        let map = AnomalyMap::new(vec![0.0, 6.0, 3.0, 9.0], 2, 2).unwrap();
        let (img, side) = render_heatmap(&map, 3, HeatmapScale::Fixed);
        let lo = colorous::VIRIDIS.eval_continuous(0.0);
        let hi = colorous::VIRIDIS.eval_continuous(1.0);
        assert_eq!(img.get_pixel(0, 0).0, [lo.r, lo.g, lo.b]);
        assert_eq!(img.get_pixel(1, 0).0, [hi.r, hi.g, hi.b]);
        assert_eq!(img.get_pixel(1, 1).0, [hi.r, hi.g, hi.b]);
        assert_eq!((side.min, side.max, side.scale_high), (0.0, 9.0, 6.0));
    }

    #[test]
    fn sidecar_written_beside_png() {
        let dir = tempfile::tempdir().unwrap();
        let map = AnomalyMap::new(vec![0.5; 16], 4, 4).unwrap();
        let png = dir.path().join("a.png");
        write_heatmap(&map, 2, HeatmapScale::Relative, &png).unwrap();
        let side: HeatmapSidecar = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
        assert_eq!(side.score, 0.5);
        assert!(png.exists());
    }
}
