//! Static PNG figures: grouped metric bars and interpolation strips.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::MetricsReport;
use crate::error::{Result, WsdfError};
use crate::mesh::FaceMesh;

const PALETTE: [[u8; 3]; 6] = [[66, 99, 235], [230, 119, 0], [47, 158, 68], [201, 42, 42], [112, 72, 232], [12, 166, 120]];
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| WsdfError::Validation(format!("{}: {e}", path.display())))
}

/// One cluster of bars per metric (avd, id, exp, neu), one bar per report,
/// each cluster scaled to its own maximum. Missing metrics leave a gap.
pub fn render_metric_bars(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(WsdfError::Validation("no reports to plot".into()));
    }
    let (bar_w, gap, height) = (24u32, 32u32, 240u32);
    let n = reports.len() as u32;
    let width = gap + 4 * (n * bar_w + gap);
    let mut img = RgbImage::from_pixel(width, height + 20, BACKGROUND);
    let metrics: [Box<dyn Fn(&MetricsReport) -> Option<f64>>; 4] = [
        Box::new(|r| Some(r.avd.mean)),
        Box::new(|r| r.id.map(|s| s.mean)),
        Box::new(|r| r.exp.map(|s| s.mean)),
        Box::new(|r| r.neu.map(|s| s.mean)),
    ];
    for (m, get) in metrics.iter().enumerate() {
        let max = reports.iter().filter_map(get).fold(0.0f64, f64::max);
        let x0 = gap + m as u32 * (n * bar_w + gap);
        for (k, r) in reports.iter().enumerate() {
            let Some(v) = get(r) else { continue };
            let h = if max > 0.0 { ((v / max) * height as f64).round() as u32 } else { 0 };
            let colour = Rgb(PALETTE[k % PALETTE.len()]);
            for x in x0 + k as u32 * bar_w..x0 + (k as u32 + 1) * bar_w - 2 {
                for y in height - h..height {
                    img.put_pixel(x, y + 10, colour);
                }
            }
        }
    }
    save(&img, path)
}

/// Renders meshes left to right, viewed along −z with Lambert shading.
pub fn render_strip(meshes: &[FaceMesh], cell: u32, path: &Path) -> Result<()> {
    if meshes.is_empty() || cell < 8 {
        return Err(WsdfError::Validation("strip needs meshes and a cell of at least 8 px".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for m in meshes {
        for v in m.vertices().rows() {
            for a in 0..2 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::EPSILON);
    let scale = (cell as f64 - 4.0) / span;
    let mut img = RgbImage::from_pixel(cell * meshes.len() as u32, cell, BACKGROUND);
    for (i, m) in meshes.iter().enumerate() {
        let mut depth = vec![f64::NEG_INFINITY; (cell * cell) as usize];
        let verts = m.vertices();
        let project = |v: usize| {
            let x = 2.0 + (verts[[v, 0]] - lo[0]) * scale;
            let y = cell as f64 - 2.0 - (verts[[v, 1]] - lo[1]) * scale;
            [x, y, verts[[v, 2]]]
        };
        for f in m.topology().faces() {
            let p = [project(f[0]), project(f[1]), project(f[2])];
            let shade = lambert(&verts, f);
            fill_triangle(&p, cell, &mut depth, |x, y| {
                let g = (40.0 + 200.0 * shade) as u8;
                img.put_pixel(i as u32 * cell + x, y, Rgb([g, g, (g as f64 * 0.95) as u8]));
            });
        }
    }
    save(&img, path)
}

fn lambert(verts: &ndarray::ArrayView2<'_, f64>, f: &[usize; 3]) -> f64 {
    let p = |k: usize| [verts[[f[k], 0]], verts[[f[k], 1]], verts[[f[k], 2]]];
    let (a, b, c) = (p(0), p(1), p(2));
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len == 0.0 {
        return 0.0;
    }
    let light = [0.3, 0.4, 0.866];
    ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / len).abs()
}

fn fill_triangle(p: &[[f64; 3]; 3], cell: u32, depth: &mut [f64], mut plot: impl FnMut(u32, u32)) {
    let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min(cell as f64 - 1.0) as u32;
    let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min(cell as f64 - 1.0) as u32;
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if area.abs() < 1e-12 {
        return;
    }
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let w0 = ((p[1][0] - px) * (p[2][1] - py) - (p[2][0] - px) * (p[1][1] - py)) / area;
            let w1 = ((p[2][0] - px) * (p[0][1] - py) - (p[0][0] - px) * (p[2][1] - py)) / area;
            let w2 = 1.0 - w0 - w1;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let z = w0 * p[0][2] + w1 * p[1][2] + w2 * p[2][2];
            let slot = &mut depth[(y * cell + x) as usize];
            if z > *slot {
                *slot = z;
                plot(x, y);
            }
        }
    }
}
