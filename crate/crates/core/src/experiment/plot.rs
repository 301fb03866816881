//! PNG output: precision-recall curves and detection overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::boxes::{BBox, Detection};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::eval::{precision_envelope, precision_recall, RECALL_POINTS};

pub const GT_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const DET_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
const RAW_COLOR: Rgb<u8> = Rgb([40, 90, 220]);
const AXIS_COLOR: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Interpolated precision: max precision at any recall ≥ this point's.
    pub envelope: Vec<f64>,
}

pub fn pr_curve(flags: &[bool], num_gt: usize) -> PrCurve {
    let (precision, recall) = precision_recall(flags, num_gt);
    let envelope = precision_envelope(&precision);
    PrCurve {
        recall,
        precision,
        envelope,
    }
}

impl PrCurve {
    /// Interpolated precision at recall `r` read off the envelope step curve.
    pub fn envelope_at(&self, r: f64) -> f64 {
        self.recall
            .iter()
            .zip(&self.envelope)
            .find(|(rec, _)| **rec >= r)
            .map_or(0.0, |(_, p)| *p)
    }

    /// Mean of the envelope over the 101 recall points.
    pub fn envelope_area(&self) -> f64 {
        (0..RECALL_POINTS)
            .map(|k| self.envelope_at(k as f64 / (RECALL_POINTS - 1) as f64))
            .sum::<f64>()
            / RECALL_POINTS as f64
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

fn rect(img: &mut RgbImage, b: &BBox, scale: f64, c: Rgb<u8>) {
    let [x0, y0, x1, y1] = b.map(|v| (v * scale).round() as i64);
    let (x1, y1) = (x1 - 1, y1 - 1);
    line(img, (x0, y0), (x1, y0), c);
    line(img, (x1, y0), (x1, y1), c);
    line(img, (x1, y1), (x0, y1), c);
    line(img, (x0, y1), (x0, y0), c);
}

/// 3×5 glyphs, one row per entry, most significant bit on the left.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, c: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3 {
                if row >> (2 - dx) & 1 == 1 {
                    put(img, x + 4 * i as i64 + dx, y + dy as i64, c);
                }
            }
        }
    }
}

/// Raw precision (blue points) and interpolated envelope (red steps) of a
/// ranked TP/FP list; returns the plotted curve.
pub fn plot_pr(flags: &[bool], num_gt: usize, path: &Path) -> Result<PrCurve> {
    const SIZE: u32 = 240;
    const M: i64 = 24;
    let curve = pr_curve(flags, num_gt);
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let span = SIZE as i64 - 2 * M;
    let px = |r: f64, p: f64| (M + (r * span as f64).round() as i64, SIZE as i64 - M - (p * span as f64).round() as i64);
    line(&mut img, px(0.0, 0.0), px(1.0, 0.0), AXIS_COLOR);
    line(&mut img, px(0.0, 0.0), px(0.0, 1.0), AXIS_COLOR);
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let (x, y) = px(v, 0.0);
        line(&mut img, (x, y), (x, y + 3), AXIS_COLOR);
        let (x, y) = px(0.0, v);
        line(&mut img, (x - 3, y), (x, y), AXIS_COLOR);
    }
    text(&mut img, "1.0", px(1.0, 0.0).0 - 6, px(0.0, 0.0).1 + 6, AXIS_COLOR);
    text(&mut img, "1.0", 4, px(0.0, 1.0).1 - 2, AXIS_COLOR);

    let mut prev_r = 0.0;
    for (i, (&r, &e)) in curve.recall.iter().zip(&curve.envelope).enumerate() {
        line(&mut img, px(prev_r, e), px(r, e), DET_COLOR);
        let next = curve.envelope.get(i + 1).copied().unwrap_or(0.0);
        if r > prev_r || i + 1 == curve.recall.len() {
            line(&mut img, px(r, e), px(r, next), DET_COLOR);
        }
        prev_r = r;
    }
    for (&r, &p) in curve.recall.iter().zip(&curve.precision) {
        let (x, y) = px(r, p);
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            put(&mut img, x + dx, y + dy, RAW_COLOR);
        }
    }
    save(&img, path)?;
    Ok(curve)
}

/// Ground truth in yellow, detections in red with their scores.
pub fn overlay_detections(image: &Image, dets: &[Detection], gts: &[BBox], path: &Path) -> Result<()> {
    const SCALE: u32 = 3;
    let (h, w) = (image.height() as u32, image.width() as u32);
    let mut img = RgbImage::new(w * SCALE, h * SCALE);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (sx, sy) = ((x / SCALE) as usize, (y / SCALE) as usize);
        *p = Rgb([0, 1, 2].map(|c| (image.pixels.at3(c, sy, sx).clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let s = SCALE as f64;
    for g in gts {
        rect(&mut img, g, s, GT_COLOR);
    }
    for d in dets {
        rect(&mut img, &d.bbox, s, DET_COLOR);
        let (x, y) = ((d.bbox[0] * s).round() as i64 + 2, (d.bbox[1] * s).round() as i64 + 2);
        text(&mut img, &format!("{:.2}", d.score), x, y, DET_COLOR);
    }
    save(&img, path)
}
