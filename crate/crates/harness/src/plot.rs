//! Top-class probability timelines for the sources, the mixture and the
//! soft-OR of the sources.

use std::path::{Path, PathBuf};

use condsep::classifier::{classify, ClassifierParams};
use condsep::embeddings::{soft_or, to_prob, top_classes, LogitsEmbedding};
use condsep::synthdata::MixtureExample;
use image::{Rgb, RgbImage};

use crate::error::{HarnessError, Result};

pub const TOP_K: usize = 5;
const WIDTH: u32 = 640;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 24;
const COLORS: [[u8; 3]; TOP_K] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189]];

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub name: String,
    /// Top classes by mean probability, best first.
    pub classes: Vec<usize>,
    /// `curves[k][f]`: probability of `classes[k]` at frame `f`.
    pub curves: Vec<Vec<f64>>,
    pub csv: PathBuf,
    pub png: PathBuf,
}

fn panel_data(name: &str, logits: &LogitsEmbedding) -> (String, Vec<usize>, Vec<Vec<f64>>) {
    let prob = to_prob(logits);
    let classes = top_classes(&prob, TOP_K);
    let curves = classes.iter().map(|&c| (0..prob.values.rows()).map(|f| prob.values.row(f)[c]).collect()).collect();
    (name.to_string(), classes, curves)
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

fn render(curves: &[Vec<f64>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN as i64, (WIDTH - MARGIN) as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    let grid = Rgb([220, 220, 220]);
    draw_line(&mut img, (left + 1, (top + bottom) / 2), (right, (top + bottom) / 2), grid);
    draw_line(&mut img, (left + 1, top), (right, top), grid);
    for (k, curve) in curves.iter().enumerate() {
        let n = curve.len().max(2) - 1;
        let point = |i: usize| {
            let x = left + ((right - left) as f64 * i as f64 / n as f64).round() as i64;
            let y = bottom - ((bottom - top) as f64 * curve[i].clamp(0.0, 1.0)).round() as i64;
            (x, y)
        };
        let c = Rgb(COLORS[k % COLORS.len()]);
        for i in 1..curve.len() {
            draw_line(&mut img, point(i - 1), point(i), c);
        }
    }
    img
}

/// Writes `<panel>.csv` and `<panel>.png` for every source, the mixture
/// and the soft-OR of the sources.
pub fn plot_embeddings(
    example: &MixtureExample,
    classifier: &ClassifierParams,
    class_names: &[String],
    out_dir: &Path,
) -> Result<Vec<Panel>> {
    std::fs::create_dir_all(out_dir)?;
    let source_logits = example.sources.iter().map(|s| classify(s, classifier)).collect::<condsep::Result<Vec<_>>>()?;
    let mut data = Vec::new();
    for (k, l) in source_logits.iter().enumerate() {
        data.push(panel_data(&format!("source{}", k + 1), l));
    }
    data.push(panel_data("mixture", &classify(&example.mixture, classifier)?));
    data.push(panel_data("soft_or", &soft_or(&source_logits)?));
    let name_of = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
    let mut panels = Vec::new();
    for (name, classes, curves) in data {
        let csv = out_dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&csv)?;
        let mut header = vec!["frame".to_string()];
        header.extend(classes.iter().map(|&c| name_of(c)));
        w.write_record(&header)?;
        let frames = curves.first().map_or(0, Vec::len);
        for f in 0..frames {
            let mut row = vec![f.to_string()];
            row.extend(curves.iter().map(|c| format!("{:.6}", c[f])));
            w.write_record(&row)?;
        }
        w.flush()?;
        let png = out_dir.join(format!("{name}.png"));
        render(&curves).save(&png).map_err(HarnessError::from)?;
        panels.push(Panel { name, classes, curves, csv, png });
    }
    Ok(panels)
}
