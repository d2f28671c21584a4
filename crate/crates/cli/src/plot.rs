//! Small SVG and PNG renderer for the line and scatter figures.
//!
//! Both backends draw the same primitives. The PNG backend has no font, so
//! titles and tick labels only appear in the SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ncae_core::Result;

use crate::config::PlotFormat;

pub type Color = [u8; 3];

pub const BLUE: Color = [31, 119, 180];
pub const RED: Color = [214, 39, 40];
const AXIS: Color = [40, 40, 40];
const GRID: Color = [225, 225, 225];

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Start,
    Middle,
    End,
}

pub trait Canvas {
    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Color, width: f64);
    fn dot(&mut self, c: (f64, f64), r: f64, color: Color);
    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: Color, alpha: f64);
    fn text(&mut self, pos: (f64, f64), s: &str, anchor: Anchor, size: f64, rotate: bool);

    fn cross(&mut self, c: (f64, f64), r: f64, color: Color) {
        self.line((c.0 - r, c.1 - r), (c.0 + r, c.1 + r), color, 1.5);
        self.line((c.0 - r, c.1 + r), (c.0 + r, c.1 - r), color, 1.5);
    }
}

pub struct Svg {
    body: String,
    w: u32,
    h: u32,
}

impl Svg {
    pub fn new(w: u32, h: u32) -> Self {
        let mut body = String::new();
        let _ = write!(body, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        Svg { body, w, h }
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n{}\n</svg>\n",
            self.body,
            w = self.w,
            h = self.h
        )
    }
}

fn hex(c: Color) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl Canvas for Svg {
    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Color, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="{width}"/>"#,
            a.0,
            a.1,
            b.0,
            b.1,
            hex(color)
        );
    }

    fn dot(&mut self, c: (f64, f64), r: f64, color: Color) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{}"/>"#,
            c.0,
            c.1,
            hex(color)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: Color, alpha: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{}" fill-opacity="{alpha:.3}"/>"#,
            hex(color)
        );
    }

    fn text(&mut self, pos: (f64, f64), s: &str, anchor: Anchor, size: f64, rotate: bool) {
        let anchor = match anchor {
            Anchor::Start => "start",
            Anchor::Middle => "middle",
            Anchor::End => "end",
        };
        let transform = if rotate {
            format!(r#" transform="rotate(-90 {:.2} {:.2})""#, pos.0, pos.1)
        } else {
            String::new()
        };
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-size="{size}" text-anchor="{anchor}"{transform}>{}</text>"#,
            pos.0,
            pos.1,
            escape(s)
        );
    }
}

pub struct Png(RgbImage);

impl Png {
    pub fn new(w: u32, h: u32) -> Self {
        Png(RgbImage::from_pixel(w, h, Rgb([255, 255, 255])))
    }

    pub fn finish(self) -> RgbImage {
        self.0
    }

    fn blend(&mut self, x: i64, y: i64, color: Color, alpha: f64) {
        if x < 0 || y < 0 || x >= self.0.width() as i64 || y >= self.0.height() as i64 {
            return;
        }
        let p = self.0.get_pixel_mut(x as u32, y as u32);
        for k in 0..3 {
            p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + color[k] as f64 * alpha).round() as u8;
        }
    }

    fn disc(&mut self, c: (f64, f64), r: f64, color: Color) {
        let (x0, x1) = ((c.0 - r).floor() as i64, (c.0 + r).ceil() as i64);
        let (y0, y1) = ((c.1 - r).floor() as i64, (c.1 + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - c.0, y as f64 + 0.5 - c.1);
                if dx * dx + dy * dy <= r * r {
                    self.blend(x, y, color, 1.0);
                }
            }
        }
    }
}

impl Canvas for Png {
    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Color, width: f64) {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let n = (len * 2.0).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            self.disc(p, (width / 2.0).max(0.5), color);
        }
    }

    fn dot(&mut self, c: (f64, f64), r: f64, color: Color) {
        self.disc(c, r, color);
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: Color, alpha: f64) {
        for py in y.round() as i64..(y + h).round() as i64 {
            for px in x.round() as i64..(x + w).round() as i64 {
                self.blend(px, py, color, alpha);
            }
        }
    }

    fn text(&mut self, _: (f64, f64), _: &str, _: Anchor, _: f64, _: bool) {}
}

/// Data-to-pixel mapping for one plot area.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub log_x: bool,
}

impl Frame {
    fn tx(&self, v: f64) -> f64 {
        if self.log_x {
            v.log10()
        } else {
            v
        }
    }

    pub fn px(&self, v: f64) -> f64 {
        let (a, b) = (self.tx(self.x.0), self.tx(self.x.1));
        self.left + (self.tx(v) - a) / (b - a) * self.width
    }

    pub fn py(&self, v: f64) -> f64 {
        self.top + self.height - (v - self.y.0) / (self.y.1 - self.y.0) * self.height
    }
}

/// Roughly `n` round tick positions covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / n.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn pad(lo: f64, hi: f64, frac: f64) -> (f64, f64) {
    if hi > lo {
        let p = (hi - lo) * frac;
        (lo - p, hi + p)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn axes(
    c: &mut dyn Canvas,
    f: &Frame,
    xticks: &[f64],
    yticks: &[f64],
    title: &str,
    xl: &str,
    yl: &str,
) {
    for &t in yticks {
        let y = f.py(t);
        c.line((f.left, y), (f.left + f.width, y), GRID, 1.0);
        c.text(
            (f.left - 6.0, y + 4.0),
            &fmt_tick(t),
            Anchor::End,
            11.0,
            false,
        );
    }
    for &t in xticks {
        let x = f.px(t);
        c.line(
            (x, f.top + f.height),
            (x, f.top + f.height + 4.0),
            AXIS,
            1.0,
        );
        c.text(
            (x, f.top + f.height + 18.0),
            &fmt_tick(t),
            Anchor::Middle,
            11.0,
            false,
        );
    }
    let (l, r, t, b) = (f.left, f.left + f.width, f.top, f.top + f.height);
    c.line((l, b), (r, b), AXIS, 1.0);
    c.line((l, t), (l, b), AXIS, 1.0);
    c.text(
        ((l + r) / 2.0, t - 12.0),
        title,
        Anchor::Middle,
        14.0,
        false,
    );
    c.text(((l + r) / 2.0, b + 38.0), xl, Anchor::Middle, 12.0, false);
    c.text((l - 46.0, (t + b) / 2.0), yl, Anchor::Middle, 12.0, true);
}

pub struct Series {
    pub name: String,
    pub color: Color,
    /// `(x, y, error)`; the error bar is drawn as `y ± error`.
    pub points: Vec<(f64, f64, f64)>,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Ticks at the data x values rather than round numbers.
    pub data_ticks: bool,
    pub log_x: bool,
}

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 440;

impl LineChart {
    pub fn draw(&self, c: &mut dyn Canvas) {
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let finite: Vec<_> = pts.filter(|p| p.1.is_finite()).collect();
        let xs = finite.iter().map(|p| p.0);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
        let lo = finite
            .iter()
            .map(|p| p.1 - p.2.max(0.0))
            .fold(f64::INFINITY, f64::min);
        let hi = finite
            .iter()
            .map(|p| p.1 + p.2.max(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let (y0, y1) = if lo.is_finite() {
            pad(lo, hi, 0.08)
        } else {
            (0.0, 1.0)
        };
        let (x0, x1) = match (x0.is_finite(), self.log_x) {
            (false, _) => (0.0, 1.0),
            (true, true) => (x0 / 1.5, x1 * 1.5),
            (true, false) => pad(x0, x1, 0.05),
        };
        let f = Frame {
            left: 70.0,
            top: 40.0,
            width: WIDTH as f64 - 190.0,
            height: HEIGHT as f64 - 100.0,
            x: (x0, x1),
            y: (y0, y1),
            log_x: self.log_x,
        };
        let xticks: Vec<f64> = if self.data_ticks {
            let mut v: Vec<f64> = finite.iter().map(|p| p.0).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        } else {
            nice_ticks(x0, x1, 6)
        };
        axes(
            c,
            &f,
            &xticks,
            &nice_ticks(y0, y1, 5),
            &self.title,
            &self.x_label,
            &self.y_label,
        );
        for (k, s) in self.series.iter().enumerate() {
            let p: Vec<_> = s.points.iter().filter(|p| p.1.is_finite()).collect();
            for w in p.windows(2) {
                c.line(
                    (f.px(w[0].0), f.py(w[0].1)),
                    (f.px(w[1].0), f.py(w[1].1)),
                    s.color,
                    2.0,
                );
            }
            for q in &p {
                let x = f.px(q.0);
                if q.2 > 0.0 {
                    let (a, b) = (f.py(q.1 - q.2), f.py(q.1 + q.2));
                    c.line((x, a), (x, b), s.color, 1.0);
                    c.line((x - 4.0, a), (x + 4.0, a), s.color, 1.0);
                    c.line((x - 4.0, b), (x + 4.0, b), s.color, 1.0);
                }
                c.dot((x, f.py(q.1)), 3.5, s.color);
            }
            let ly = f.top + 10.0 + 18.0 * k as f64;
            let lx = f.left + f.width + 15.0;
            c.line((lx, ly), (lx + 20.0, ly), s.color, 2.0);
            c.text((lx + 26.0, ly + 4.0), &s.name, Anchor::Start, 12.0, false);
        }
    }
}

/// Points with a boolean flag: `false` draws a blue dot, `true` a red cross.
pub struct Scatter {
    pub title: String,
    pub points: Vec<(f64, f64, bool)>,
    /// Row-major `n × n` density grid spanning the plot area, in `[0, 1]`.
    pub density: Option<(usize, Vec<f64>)>,
    pub labels: [String; 2],
}

impl Scatter {
    pub fn bounds(points: &[(f64, f64, bool)]) -> ((f64, f64), (f64, f64)) {
        let fold = |sel: fn(&(f64, f64, bool)) -> f64| {
            points
                .iter()
                .map(sel)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                    (a.min(v), b.max(v))
                })
        };
        let (x0, x1) = fold(|p| p.0);
        let (y0, y1) = fold(|p| p.1);
        (pad(x0, x1, 0.05), pad(y0, y1, 0.05))
    }

    pub fn draw(&self, c: &mut dyn Canvas) {
        let (x, y) = Self::bounds(&self.points);
        let f = Frame {
            left: 70.0,
            top: 40.0,
            width: WIDTH as f64 - 190.0,
            height: HEIGHT as f64 - 100.0,
            x,
            y,
            log_x: false,
        };
        if let Some((n, grid)) = &self.density {
            let (cw, ch) = (f.width / *n as f64, f.height / *n as f64);
            for (k, &v) in grid.iter().enumerate() {
                let (i, j) = (k / n, k % n);
                if v > 0.01 {
                    c.rect(
                        f.left + j as f64 * cw,
                        f.top + f.height - (i + 1) as f64 * ch,
                        cw + 0.5,
                        ch + 0.5,
                        [90, 90, 90],
                        0.45 * v,
                    );
                }
            }
        }
        axes(
            c,
            &f,
            &nice_ticks(x.0, x.1, 6),
            &nice_ticks(y.0, y.1, 5),
            &self.title,
            "component 1",
            "component 2",
        );
        for p in self.points.iter().filter(|p| !p.2) {
            c.dot((f.px(p.0), f.py(p.1)), 2.5, BLUE);
        }
        for p in self.points.iter().filter(|p| p.2) {
            c.cross((f.px(p.0), f.py(p.1)), 3.5, RED);
        }
        let lx = f.left + f.width + 15.0;
        c.dot((lx + 10.0, f.top + 10.0), 3.0, BLUE);
        c.text(
            (lx + 26.0, f.top + 14.0),
            &self.labels[0],
            Anchor::Start,
            12.0,
            false,
        );
        c.cross((lx + 10.0, f.top + 28.0), 3.5, RED);
        c.text(
            (lx + 26.0, f.top + 32.0),
            &self.labels[1],
            Anchor::Start,
            12.0,
            false,
        );
    }
}

/// Gaussian KDE of the points on an `n × n` grid over `bounds`, scaled to a
/// maximum of 1. Bandwidths follow Scott's rule per axis.
pub fn kde_grid(
    points: &[(f64, f64, bool)],
    bounds: ((f64, f64), (f64, f64)),
    n: usize,
) -> Vec<f64> {
    let m = points.len() as f64;
    let sd = |sel: fn(&(f64, f64, bool)) -> f64| {
        let mean = points.iter().map(sel).sum::<f64>() / m;
        (points.iter().map(|p| (sel(p) - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt()
    };
    let scott = m.powf(-1.0 / 6.0);
    let hx = (sd(|p| p.0) * scott).max(1e-9);
    let hy = (sd(|p| p.1) * scott).max(1e-9);
    let ((x0, x1), (y0, y1)) = bounds;
    let mut grid = vec![0.0; n * n];
    for i in 0..n {
        let gy = y0 + (i as f64 + 0.5) / n as f64 * (y1 - y0);
        for j in 0..n {
            let gx = x0 + (j as f64 + 0.5) / n as f64 * (x1 - x0);
            grid[i * n + j] = points
                .iter()
                .map(|p| (-0.5 * (((gx - p.0) / hx).powi(2) + ((gy - p.1) / hy).powi(2))).exp())
                .sum();
        }
    }
    let max = grid.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        grid.iter_mut().for_each(|v| *v /= max);
    }
    grid
}

/// Renders `draw` to `<stem>.svg` and/or `<stem>.png`; returns the paths written.
pub fn render(
    stem: &Path,
    formats: &[PlotFormat],
    draw: impl Fn(&mut dyn Canvas),
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for fmt in formats {
        match fmt {
            PlotFormat::Svg => {
                let mut svg = Svg::new(WIDTH, HEIGHT);
                draw(&mut svg);
                let path = stem.with_extension("svg");
                fs::write(&path, svg.finish())?;
                written.push(path);
            }
            PlotFormat::Png => {
                let mut png = Png::new(WIDTH, HEIGHT);
                draw(&mut png);
                let path = stem.with_extension("png");
                png.finish()
                    .save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| std::io::Error::other(e.to_string()))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        assert_eq!(
            nice_ticks(0.0, 1.0, 5),
            vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]
        );
        let t = nice_ticks(0.53, 0.91, 5);
        assert!(t.iter().all(|v| (0.53..=0.91).contains(v)));
        assert!(t.len() >= 3);
    }

    #[test]
    fn frame_maps_corners() {
        let f = Frame {
            left: 10.0,
            top: 20.0,
            width: 100.0,
            height: 50.0,
            x: (0.01, 1.0),
            y: (0.0, 1.0),
            log_x: true,
        };
        assert!((f.px(0.01) - 10.0).abs() < 1e-12);
        assert!((f.px(0.1) - 60.0).abs() < 1e-9);
        assert!((f.py(0.0) - 70.0).abs() < 1e-12);
        assert!((f.py(1.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn kde_peaks_at_the_cluster() {
        let pts: Vec<_> = (0..20)
            .map(|i| {
                (
                    0.5 + 0.01 * (i % 5) as f64,
                    0.5 + 0.01 * (i / 5) as f64,
                    false,
                )
            })
            .collect();
        let g = kde_grid(&pts, ((0.0, 1.0), (0.0, 1.0)), 10);
        let argmax = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!((argmax / 10, argmax % 10), (5, 5));
        assert!((g[argmax] - 1.0).abs() < 1e-12);
        assert!(g[0] < 0.01);
    }
}
