//! Minimal raster plots of training curves: no text, one panel per series.

use std::collections::BTreeMap;
use std::path::Path;

use aibnet_core::train::RunPaths;
use anyhow::{bail, Context};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 800;
const PANEL_HEIGHT: u32 = 300;
const MARGIN: u32 = 20;
const STAGE_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// `(stage, value)` points in file order.
type Series = Vec<(usize, f64)>;

fn read_csv(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn loss_series(path: &Path) -> anyhow::Result<Series> {
    read_csv(path)?
        .iter()
        .map(|r| Ok((r[0].parse()?, r[3].parse()?)))
        .collect()
}

/// Mean PSNR per `(stage, iter, split)` group of the test split.
fn psnr_series(path: &Path) -> anyhow::Result<Series> {
    let mut groups: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in read_csv(path)? {
        if r.get(2).map(String::as_str) != Some("test") {
            continue;
        }
        let key = (r[0].parse()?, r[1].parse()?);
        let e = groups.entry(key).or_default();
        e.0 += r[4].parse::<f64>()?;
        e.1 += 1;
    }
    Ok(groups.into_iter().map(|((s, _), (sum, n))| (s, sum / n as f64)).collect())
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_panel(img: &mut RgbImage, top: u32, series: &Series, markers: bool) {
    let (left, right) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
    let (upper, lower) = ((top + MARGIN) as i64, (top + PANEL_HEIGHT - MARGIN) as i64);
    let axis = Rgb([0, 0, 0]);
    draw_line(img, (left, lower), (right, lower), axis);
    draw_line(img, (left, upper), (left, lower), axis);
    let finite: Vec<f64> = series.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = series.len().max(2) - 1;
    let to_px = |i: usize, v: f64| {
        let x = left + ((right - left) as f64 * i as f64 / n as f64).round() as i64;
        let y = lower - ((lower - upper) as f64 * (v - lo) / span).round() as i64;
        (x, y)
    };
    let mut prev: Option<(i64, i64)> = None;
    for (i, &(stage, v)) in series.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let color = Rgb(STAGE_COLORS[stage % STAGE_COLORS.len()]);
        let p = to_px(i, v);
        if let Some(q) = prev {
            draw_line(img, q, p, color);
        }
        if markers {
            for d in -2..=2 {
                draw_line(img, (p.0 - 2, p.1 + d), (p.0 + 2, p.1 + d), color);
            }
        }
        prev = Some(p);
    }
}

/// Writes the training-loss curve (top) and held-out PSNR after each
/// evaluation (bottom), colored by stage.
pub fn render(paths: &RunPaths, out: &Path) -> anyhow::Result<()> {
    let log = paths.train_log();
    if !log.exists() {
        bail!("no training log at {}", log.display());
    }
    let loss = loss_series(&log)?;
    let metrics = paths.metrics_csv();
    let psnr = if metrics.exists() { psnr_series(&metrics)? } else { Vec::new() };
    let mut img = RgbImage::from_pixel(WIDTH, 2 * PANEL_HEIGHT, Rgb([255, 255, 255]));
    draw_panel(&mut img, 0, &loss, false);
    draw_panel(&mut img, PANEL_HEIGHT, &psnr, true);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
