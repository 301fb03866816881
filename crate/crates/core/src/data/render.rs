//! Per-modality rasterization of a [`SceneSpec`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    PseudoIr,
    PseudoDepth,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::PseudoIr, Modality::PseudoDepth];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::PseudoIr => "pseudo_ir",
            Modality::PseudoDepth => "pseudo_depth",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Modality::Rgb => 0x5247_4200,
            Modality::PseudoIr => 0x4952_0000,
            Modality::PseudoDepth => 0x4445_5054,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "modality",
                name: s.to_string(),
            })
    }
}

/// A `[3, H, W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Tensor<f32>,
    pub modality: Modality,
}

impl Image {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn blank(h: usize, w: usize, modality: Modality) -> Self {
        Image {
            pixels: Tensor::zeros(&[3, h, w]),
            modality,
        }
    }
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Fractional pixel coverage of every object, via 3×3 supersampling.
fn coverage(spec: &SceneSpec) -> Vec<Vec<f64>> {
    let (h, w) = spec.canvas;
    spec.objects
        .iter()
        .map(|o| {
            let b = o.bbox();
            let mut m = vec![0.0; h * w];
            let (y0, y1) = (b[1].floor().max(0.0) as usize, (b[3].ceil() as usize).min(h));
            let (x0, x1) = (b[0].floor().max(0.0) as usize, (b[2].ceil() as usize).min(w));
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut hits = 0;
                    for sy in 0..3 {
                        for sx in 0..3 {
                            let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                            let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                            if o.shape.contains(b, py, px) {
                                hits += 1;
                            }
                        }
                    }
                    m[y * w + x] = hits as f64 / 9.0;
                }
            }
            m
        })
        .collect()
}

fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(r), (x + r + 1).min(w));
            tmp[y * w + x] = src[y * w + a..y * w + b].iter().sum::<f64>() / (b - a) as f64;
        }
    }
    for y in 0..h {
        let (a, b) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            out[y * w + x] = (a..b).map(|yy| tmp[yy * w + x]).sum::<f64>() / (b - a) as f64;
        }
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gray_image(vals: &[f64], h: usize, w: usize, modality: Modality) -> Image {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend(vals.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
    }
    Image {
        pixels: Tensor::from_vec(&[3, h, w], data).unwrap(),
        modality,
    }
}

/// Rasterizes `spec` in the requested modality. Deterministic in
/// `(spec, modality)`: all noise is seeded from the scene seed.
pub fn render_modality(spec: &SceneSpec, modality: Modality) -> Image {
    let (h, w) = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ modality.salt().rotate_left(17));
    let cover = coverage(spec);
    match modality {
        Modality::Rgb => {
            let noise = value_noise(&mut rng, h, w, 8);
            let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
            let mut planes: Vec<Vec<f64>> = (0..3)
                .map(|c| noise.iter().map(|&n| 0.42 + tint[c] + 0.16 * n).collect())
                .collect();
            for (o, m) in spec.objects.iter().zip(&cover) {
                let color = hsv_to_rgb(o.hue, 0.8, 0.3 + 0.7 * o.intensity);
                for (c, plane) in planes.iter_mut().enumerate() {
                    for (p, &a) in plane.iter_mut().zip(m) {
                        *p = *p * (1.0 - a) + color[c] * a;
                    }
                }
            }
            let mut data = Vec::with_capacity(3 * h * w);
            for plane in planes {
                data.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
            }
            Image {
                pixels: Tensor::from_vec(&[3, h, w], data).unwrap(),
                modality,
            }
        }
        Modality::PseudoIr => {
            let level: f64 = rng.gen_range(0.03..0.25);
            let gain: f64 = rng.gen_range(0.6..1.0);
            let noise = value_noise(&mut rng, h, w, 12);
            let mut vals: Vec<f64> = noise.iter().map(|&n| level + 0.1 * n).collect();
            for (o, m) in spec.objects.iter().zip(&cover) {
                // warm objects glow; contrast runs opposite to the RGB intensity
                let heat = level + gain * (0.3 + 0.5 * (1.0 - o.intensity));
                let blob = box_blur(m, h, w, 2);
                for (p, &a) in vals.iter_mut().zip(&blob) {
                    *p = *p * (1.0 - a) + heat * a;
                }
            }
            let normal = Normal::new(0.0, 0.05).unwrap();
            for p in &mut vals {
                *p += normal.sample(&mut rng);
            }
            gray_image(&vals, h, w, modality)
        }
        Modality::PseudoDepth => {
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = phi.sin_cos();
            let (hy, hx) = (h as f64 / 2.0, w as f64 / 2.0);
            let mut vals = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 + 0.5 - hx) * c + (y as f64 + 0.5 - hy) * s) / hx.max(hy);
                    vals[y * w + x] = 0.6 + 0.3 * t / std::f64::consts::SQRT_2;
                }
            }
            let noise = value_noise(&mut rng, h, w, 6);
            for (o, m) in spec.objects.iter().zip(&cover) {
                // objects stand slightly in front of the surface behind them
                let lift = 0.12 + 0.2 * o.intensity;
                for ((p, &a), &n) in vals.iter_mut().zip(m).zip(&noise) {
                    *p -= a * (lift + 0.03 * (n - 0.5));
                }
            }
            let mut vals = box_blur(&vals, h, w, 1);
            // invalid returns along depth discontinuities
            let edge: Vec<f64> = cover.iter().fold(vec![0.0; h * w], |mut acc, m| {
                for (e, &a) in acc.iter_mut().zip(m) {
                    *e += a * (1.0 - a) * 4.0;
                }
                acc
            });
            for (p, &e) in vals.iter_mut().zip(&edge) {
                if e > 0.0 && rng.gen_bool(0.5 * e.min(1.0)) {
                    *p = 0.0;
                }
            }
            let normal = Normal::new(0.0, 0.01).unwrap();
            for p in &mut vals {
                *p += normal.sample(&mut rng);
            }
            gray_image(&vals, h, w, modality)
        }
    }
}
