//! Report files and prediction overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::metrics::MetricsReport;
use crate::error::{Error, Result};
use crate::head::{Detection, Keypoint};
use crate::numerics::Tensor;

/// Plain-text table of a metrics report.
pub fn metrics_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    let row = |s: &mut String, k: &str, v: String| {
        let _ = writeln!(s, "{k:<20} {v:>12}");
    };
    row(&mut s, "images", r.n_images.to_string());
    row(&mut s, "keypoints", r.n_keypoints.to_string());
    row(&mut s, "missing", r.n_missing.to_string());
    row(&mut s, "epe_px", r.epe.map_or("n/a".into(), |e| format!("{e:.3}")));
    for (a, v) in &r.pck {
        row(&mut s, &format!("pck@{a}"), format!("{v:.4}"));
    }
    row(&mut s, "t_avg_ms", format!("{:.3}", r.t_avg_ms));
    row(&mut s, "throughput_per_s", format!("{:.2}", r.throughput_per_s));
    s
}

/// Write `value` as pretty JSON at `path`, creating parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// `report.json` and `report.txt` under `dir`.
pub fn write_metrics(dir: &Path, r: &MetricsReport) -> Result<()> {
    write_json(&dir.join("report.json"), r)?;
    let path = dir.join("report.txt");
    fs::write(&path, metrics_table(r)).map_err(|e| Error::io(&path, e))
}

const GREEN: Rgb<u8> = Rgb([40, 220, 60]);
const RED: Rgb<u8> = Rgb([230, 40, 40]);

fn dot(img: &mut RgbImage, x: f64, y: f64, radius: i64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if dx * dx + dy * dy <= radius * radius && (0..w).contains(&px) && (0..h).contains(&py) {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Grayscale image upscaled by `scale` with ground truth in green and
/// predictions in red.
pub fn overlay(image: &Tensor, gts: &[Keypoint], dets: &[Detection], scale: u32) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if scale == 0 {
        return Err(Error::param("overlay scale must be positive"));
    }
    let mut out = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (r, cc) = ((y / scale) as usize, (x / scale) as usize);
        let v = (0..c).map(|k| image.data()[(k * h + r) * w + cc]).sum::<f64>() / c as f64;
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = Rgb([g, g, g]);
    }
    let (sw, sh) = ((w as u32 * scale) as f64, (h as u32 * scale) as f64);
    let radius = (scale as i64).max(2);
    for k in gts {
        dot(&mut out, k.x * sw, k.y * sh, radius, GREEN);
    }
    for d in dets {
        dot(&mut out, d.x * sw, d.y * sh, radius - 1, RED);
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &Tensor, gts: &[Keypoint], dets: &[Detection]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    overlay(image, gts, dets, 3)?
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
