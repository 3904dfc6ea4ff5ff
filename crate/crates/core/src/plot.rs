//! Static figures: SVG loss curves and ablation bar charts, PNG mid-slice overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::trainer::AblationTable;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn missing(path: &Path) -> Error {
    Error::config(format!("missing input {}", path.display()))
}

fn svg_open(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        W / 2.0
    );
}

fn axes(s: &mut String, y_lo: f64, y_hi: f64, x_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 20.0, 35.0);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            x0 - 4.0,
            y + 4.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        (x0 + x1) / 2.0,
        H - 15.0
    );
}

/// Parses a numeric CSV with a header row; `NA` becomes NaN.
fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::config("empty csv"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| if v == "NA" { Ok(f64::NAN) } else { v.parse::<f64>() })
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::config(format!("bad csv row {l:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

/// Line chart of the per-subnet loss columns against iteration.
pub fn loss_curves_svg(losses_csv: &str) -> Result<String> {
    line_chart_svg(
        "Training losses",
        losses_csv,
        &["sn1_total", "sn2_total", "sn1_sup", "sn2_sup", "sn1_dyn", "sn2_dyn"],
    )
}

/// Plots the named columns of a CSV against its first column.
fn line_chart_svg(title: &str, csv: &str, wanted: &[&str]) -> Result<String> {
    let (header, rows) = parse_csv(csv)?;
    let cols: Vec<(usize, &str)> = wanted
        .iter()
        .filter_map(|w| header.iter().position(|h| h == w).map(|i| (i, *w)))
        .collect();
    if cols.is_empty() || rows.is_empty() {
        return Err(Error::config(format!("no data for {title}")));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let (x_lo, x_hi) = (xs[0], xs[xs.len() - 1].max(xs[0] + 1.0));
    let finite = rows
        .iter()
        .flat_map(|r| cols.iter().map(move |(i, _)| r[*i]))
        .filter(|v| v.is_finite());
    let y_hi = finite.fold(0.0f64, f64::max).max(1e-12);
    let mut s = String::new();
    svg_open(&mut s, title);
    axes(&mut s, 0.0, y_hi, "iteration");
    let px = |x: f64| MARGIN + (W - 20.0 - MARGIN) * (x - x_lo) / (x_hi - x_lo);
    let py = |y: f64| (H - MARGIN) - (H - MARGIN - 35.0) * y / y_hi;
    for (k, (i, name)) in cols.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r[*i].is_finite())
            .map(|r| format!("{:.1},{:.1}", px(r[0]), py(r[*i])))
            .collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = 45.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, W - 110.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grouped bars: one group per variant, one bar per metric. Each metric is
/// scaled to its own maximum; bar labels carry the actual values.
pub fn ablation_bars_svg(table: &AblationTable) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::config("ablation table is empty"));
    }
    let metrics: [(&str, fn(&crate::trainer::AblationRow) -> Option<f64>); 4] = [
        ("Dice", |r| r.dice),
        ("Jaccard", |r| r.jaccard),
        ("95HD", |r| r.hd95),
        ("ASD", |r| r.asd),
    ];
    let max_of = |f: fn(&crate::trainer::AblationRow) -> Option<f64>| {
        table.rows.iter().filter_map(f).fold(0.0f64, f64::max).max(1e-12)
    };
    let mut s = String::new();
    svg_open(&mut s, "Ablation (median over seeds)");
    axes(&mut s, 0.0, 1.0, "variant (bars scaled per metric)");
    let groups = table.rows.len() as f64;
    let group_w = (W - 20.0 - MARGIN) / groups;
    let bar_w = group_w * 0.8 / 4.0;
    let plot_h = H - MARGIN - 35.0;
    for (g, row) in table.rows.iter().enumerate() {
        let gx = MARGIN + group_w * g as f64 + group_w * 0.1;
        let _ = writeln!(s, r#"<g class="group" data-variant="{}">"#, row.variant);
        for (m, (name, f)) in metrics.iter().enumerate() {
            let v = f(row);
            let h = v.map_or(0.0, |v| plot_h * v / max_of(*f));
            let x = gx + bar_w * m as f64;
            let y = H - MARGIN - h;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-metric="{name}" x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                bar_w * 0.9,
                COLORS[m]
            );
            let label = v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="8" text-anchor="middle">{label}</text>"#,
                x + bar_w * 0.45,
                y - 2.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            gx + bar_w * 2.0,
            H - MARGIN + 14.0,
            row.variant
        );
        s.push_str("</g>\n");
    }
    for (m, (name, _)) in metrics.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}">{name}</text>"#,
            W - 80.0,
            45.0 + 14.0 * m as f64,
            COLORS[m]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// In-slice boundary: foreground pixels with a background or out-of-range 4-neighbour.
fn contour(mask: &Array2<u8>) -> Array2<bool> {
    let (nx, ny) = mask.dim();
    Array2::from_shape_fn((nx, ny), |(i, j)| {
        if mask[[i, j]] == 0 {
            return false;
        }
        let nb = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
        nb.iter().any(|&(di, dj)| {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 || mask[[a as usize, b as usize]] == 0
        })
    })
}

/// Three panels of the middle z-slice: image, image with ground-truth contour,
/// image with predicted contour.
pub fn overlay_image(image: &Array3<f32>, gt: &Array3<u8>, pred: &Array3<u8>, scale: u32) -> Result<RgbImage> {
    if image.dim() != gt.dim() || image.dim() != pred.dim() {
        return Err(Error::shape("image, ground truth and prediction differ in shape"));
    }
    let z = image.len_of(Axis(2)) / 2;
    let img = image.index_axis(Axis(2), z);
    let (nx, ny) = img.dim();
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6);
    let gray = |i: usize, j: usize| (((img[[i, j]] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    let gt_c = contour(&gt.index_axis(Axis(2), z).to_owned());
    let pr_c = contour(&pred.index_axis(Axis(2), z).to_owned());
    let gap = 2 * scale;
    let pw = nx as u32 * scale;
    let ph = ny as u32 * scale;
    let mut out = RgbImage::from_pixel(3 * pw + 2 * gap, ph, Rgb([255, 255, 255]));
    for panel in 0..3u32 {
        for i in 0..nx {
            for j in 0..ny {
                let g = gray(i, j);
                let px = match panel {
                    1 if gt_c[[i, j]] => Rgb([0, 220, 0]),
                    2 if pr_c[[i, j]] => Rgb([230, 0, 0]),
                    _ => Rgb([g, g, g]),
                };
                for di in 0..scale {
                    for dj in 0..scale {
                        // x runs along image columns, y down the rows
                        out.put_pixel(panel * (pw + gap) + i as u32 * scale + di, j as u32 * scale + dj, px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `losses.svg` (and `metrics.svg` when evaluations were logged) for a run directory.
pub fn plot_run(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let losses = run_dir.join("losses.csv");
    let text = fs::read_to_string(&losses).map_err(|_| missing(&losses))?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let p = out_dir.join("losses.svg");
    fs::write(&p, loss_curves_svg(&text)?)?;
    written.push(p);
    let metrics = run_dir.join("metrics.csv");
    if let Ok(text) = fs::read_to_string(&metrics) {
        if !parse_csv(&text)?.1.is_empty() {
            let p = out_dir.join("metrics.svg");
            fs::write(&p, line_chart_svg("Evaluation metrics", &text, &["dice", "jaccard"])?)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn plot_ablation(table_csv: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(table_csv).map_err(|_| missing(table_csv))?;
    let table = AblationTable::from_csv(&text)?;
    fs::create_dir_all(out_dir)?;
    let p = out_dir.join("ablation.svg");
    fs::write(&p, ablation_bars_svg(&table)?)?;
    Ok(p)
}

pub fn save_overlay(image: &Array3<f32>, gt: &Array3<u8>, pred: &Array3<u8>, path: &Path) -> Result<()> {
    overlay_image(image, gt, pred, 4)?.save(path)?;
    Ok(())
}
