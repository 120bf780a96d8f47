//! Raster charts for run artifacts. Charts carry axes and coloured series
//! but no text; every chart is written next to a CSV with the plotted data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::run::{load_run_config, read_log, LOG_FILE, PCA_FILE};
use crate::error::{Error, Result};
use crate::tensor_io::write_file;

pub const PLOT_DIR: &str = "plots";
pub const PLOT_FILES: [&str; 4] = ["pca.png", "losses.png", "mi.png", "attention_rate.png"];

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Lines,
    Points,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let dy = (y1 - y0) * 0.05;
    (x0, x1, y0 - dy, y1 + dy)
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, c);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn fill(img: &mut RgbImage, x: i64, y: i64, r: i64, c: Rgb<u8>) {
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            if xx >= 0 && yy >= 0 && (xx as u32) < img.width() && (yy as u32) < img.height() {
                img.put_pixel(xx as u32, yy as u32, c);
            }
        }
    }
}

/// Renders the series on shared axes. A legend of colour swatches in series
/// order sits in the top-right corner.
pub fn render_chart(series: &[Series], style: Style) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1, y0, y1) = bounds(series);
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let to_px = |x: f64, y: f64| {
        let px = left + (x - x0) / (x1 - x0) * (right - left);
        let py = bottom - (y - y0) / (y1 - y0) * (bottom - top);
        (px.round() as i64, py.round() as i64)
    };
    let grey = Rgb([200, 200, 200]);
    for k in 1..5 {
        let y = top + (bottom - top) * k as f64 / 5.0;
        line(&mut img, (left as i64, y as i64), (right as i64, y as i64), grey);
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left as i64, bottom as i64), (right as i64, bottom as i64), axis);
    line(&mut img, (left as i64, top as i64), (left as i64, bottom as i64), axis);
    if y0 < 0.0 && y1 > 0.0 {
        let (_, zy) = to_px(x0, 0.0);
        line(&mut img, (left as i64, zy), (right as i64, zy), Rgb([120, 120, 120]));
    }
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(i64, i64)> =
            s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| to_px(x, y)).collect();
        match style {
            Style::Lines => pts.windows(2).for_each(|w| line(&mut img, w[0], w[1], c)),
            Style::Points => pts.iter().for_each(|&(x, y)| fill(&mut img, x, y, 1, c)),
        }
        if style == Style::Lines && pts.len() == 1 {
            fill(&mut img, pts[0].0, pts[0].1, 1, c);
        }
        fill(&mut img, (WIDTH - MARGIN) as i64 - 12 * k as i64, (MARGIN / 2) as i64, 4, c);
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// CSV in long form: `series,x,y`.
pub fn series_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(out, "{},{x},{y}", s.name);
        }
    }
    out
}

pub fn parse_series_csv(text: &str) -> Result<Vec<Series>> {
    let mut out: Vec<Series> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Validation(format!("line {}: expected series,x,y", n + 1));
        let mut parts = line.split(',');
        let (name, x, y) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
        let x: f64 = x.parse().map_err(|_| bad())?;
        let y: f64 = y.parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some(s) if s.name == name => s.points.push((x, y)),
            _ => out.push(Series::new(name, vec![(x, y)])),
        }
    }
    Ok(out)
}

fn write_chart(dir: &Path, file: &str, series: &[Series], style: Style) -> Result<PathBuf> {
    let png = dir.join(file);
    save_png(&render_chart(series, style), &png)?;
    write_file(&png.with_extension("csv"), series_csv(series).as_bytes())?;
    Ok(png)
}

/// Writes the PCA scatter, loss curves, MI-estimate curve and attention-rate
/// curve of a finished run into `run_dir/plots`.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let config = load_run_config(run_dir)?;
    let pca_path = run_dir.join(PCA_FILE);
    if !pca_path.exists() {
        return Err(Error::Missing(format!("no PCA projection at {}; evaluate the run first", pca_path.display())));
    }
    let pca_text = std::fs::read_to_string(&pca_path).map_err(|e| Error::io(&pca_path, e))?;
    let pca = parse_series_csv(&pca_text).map_err(|e| Error::Format { path: pca_path.clone(), reason: e.to_string() })?;
    let log = read_log(&run_dir.join(LOG_FILE))?;
    if log.is_empty() {
        return Err(Error::Missing(format!("run log in {} has no training steps", run_dir.display())));
    }

    let curve = |name: &str, f: &dyn Fn(&super::StepRecord) -> Option<f64>| {
        Series::new(name, log.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect())
    };
    let losses = vec![
        curve("discriminator", &|r| Some(r.d_loss)),
        curve("gan", &|r| Some(r.gan)),
        curve("perceptual", &|r| Some(r.perc)),
        curve("lip", &|r| Some(r.lip)),
        curve("mi", &|r| r.mi_term),
        curve("total", &|r| Some(r.g_total)),
    ];
    let mi = vec![curve("estimator", &|r| r.mi_estimate), curve("generated", &|r| r.mi_term.map(|v| -v))];
    let schedule = config.schedule();
    let rate: Vec<(f64, f64)> =
        log.iter().map(|r| Ok((r.epoch, schedule.schedule_rate(r.epoch)?))).collect::<Result<_>>()?;

    let dir = run_dir.join(PLOT_DIR);
    Ok(vec![
        write_chart(&dir, PLOT_FILES[0], &pca, Style::Points)?,
        write_chart(&dir, PLOT_FILES[1], &losses, Style::Lines)?,
        write_chart(&dir, PLOT_FILES[2], &mi, Style::Lines)?,
        write_chart(&dir, PLOT_FILES[3], &[Series::new("rate", rate)], Style::Lines)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let s = vec![Series::new("a", vec![(0.0, 1.5), (1.0, -2.0)]), Series::new("b", vec![(0.25, 1e-9)])];
        assert_eq!(parse_series_csv(&series_csv(&s)).unwrap(), s);
        assert!(parse_series_csv("series,x,y\na,1\n").is_err());
    }

    #[test]
    fn chart_draws_series() {
        let s = vec![Series::new("a", vec![(0.0, 0.0), (1.0, 1.0)])];
        let img = render_chart(&s, Style::Lines);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        let blue = img.pixels().filter(|p| p.0 == PALETTE[0]).count();
        assert!(blue > 100, "{blue}");
        // Degenerate input still renders.
        render_chart(&[Series::new("c", vec![(2.0, 3.0)])], Style::Points);
        render_chart(&[], Style::Lines);
    }
}
