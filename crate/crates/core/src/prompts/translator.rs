//! Input-conditioned encoder-decoder prompt.
//!
//! Three stride-2 encoder stages, three nearest-upsampling decoder stages
//! with skip connections, and a zero-initialised output convolution so the
//! residual is exactly zero before training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{he_normal, rng_for, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TranslatorVariant {
    /// Depthwise-separable blocks.
    #[serde(rename = "mb")]
    Mb,
    /// Residual blocks.
    #[serde(rename = "res")]
    Res,
}

impl TranslatorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TranslatorVariant::Mb => "mb",
            TranslatorVariant::Res => "res",
        }
    }

    pub fn widths(self) -> [usize; 3] {
        match self {
            TranslatorVariant::Mb => [8, 16, 32],
            TranslatorVariant::Res => [16, 32, 64],
        }
    }
}

impl fmt::Display for TranslatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TranslatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mb" => Ok(TranslatorVariant::Mb),
            "res" => Ok(TranslatorVariant::Res),
            _ => Err(Error::Unknown {
                what: "translator variant",
                name: s.to_string(),
            }),
        }
    }
}

const NORM_GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translator {
    pub variant: TranslatorVariant,
}

fn conv(p: &mut ParamStore<impl Scalar>, key: &str, shape: [usize; 4], rng: &mut rand_chacha::ChaCha8Rng) {
    p.insert(format!("{key}.weight"), he_normal(&shape, rng));
    p.insert(format!("{key}.bias"), Tensor::zeros(&[shape[0]]));
}

fn norm<T: Scalar>(p: &mut ParamStore<T>, key: &str, c: usize) {
    p.insert(format!("{key}.weight"), Tensor::full(&[c], T::one()));
    p.insert(format!("{key}.bias"), Tensor::zeros(&[c]));
}

/// Translator parameters under the `translator.` prefix.
pub fn init_translator<T: Scalar>(variant: TranslatorVariant, seed: u64) -> Result<(Translator, ParamStore<T>)> {
    let mut rng = rng_for(seed, variant.as_str());
    let mut p = ParamStore::new();
    let [w1, w2, w3] = variant.widths();
    let enc_in = [3, w1, w2];
    let enc_out = [w1, w2, w3];
    // decoder stage i fuses upsampled deeper features with the skip at that level
    let dec_in = [w3 + w2, w2 + w1];
    let dec_out = [w2, w1];
    match variant {
        TranslatorVariant::Res => {
            for i in 0..3 {
                let pre = format!("translator.enc{i}");
                conv(&mut p, &format!("{pre}.down.conv"), [enc_out[i], enc_in[i], 3, 3], &mut rng);
                norm(&mut p, &format!("{pre}.down.norm"), enc_out[i]);
                conv(&mut p, &format!("{pre}.res.conv"), [enc_out[i], enc_out[i], 3, 3], &mut rng);
                norm(&mut p, &format!("{pre}.res.norm"), enc_out[i]);
            }
            for i in 0..2 {
                let pre = format!("translator.dec{i}");
                conv(&mut p, &format!("{pre}.fuse.conv"), [dec_out[i], dec_in[i], 3, 3], &mut rng);
                norm(&mut p, &format!("{pre}.fuse.norm"), dec_out[i]);
            }
        }
        TranslatorVariant::Mb => {
            for i in 0..3 {
                let pre = format!("translator.enc{i}");
                conv(&mut p, &format!("{pre}.dw"), [enc_in[i], 1, 3, 3], &mut rng);
                conv(&mut p, &format!("{pre}.pw"), [enc_out[i], enc_in[i], 1, 1], &mut rng);
                norm(&mut p, &format!("{pre}.norm"), enc_out[i]);
            }
            for i in 0..2 {
                let pre = format!("translator.dec{i}");
                conv(&mut p, &format!("{pre}.dw"), [dec_in[i], 1, 3, 3], &mut rng);
                conv(&mut p, &format!("{pre}.pw"), [dec_out[i], dec_in[i], 1, 1], &mut rng);
                norm(&mut p, &format!("{pre}.norm"), dec_out[i]);
            }
        }
    }
    // final stage sees the upsampled first-level features and the raw image
    p.insert("translator.out.weight", Tensor::zeros(&[3, w1 + 3, 3, 3]));
    p.insert("translator.out.bias", Tensor::zeros(&[3]));
    Ok((Translator { variant }, p))
}

fn conv_norm_act<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    x: Var,
    pre: &str,
    stride: usize,
) -> Result<Var> {
    let w = b.var(g, &format!("{pre}.conv.weight"))?;
    let bias = b.var(g, &format!("{pre}.conv.bias"))?;
    let gamma = b.var(g, &format!("{pre}.norm.weight"))?;
    let beta = b.var(g, &format!("{pre}.norm.bias"))?;
    let y = g.conv2d(x, w, Some(bias), stride, 1);
    let y = g.group_norm(y, gamma, beta, NORM_GROUPS);
    Ok(g.silu(y))
}

fn separable<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<T>, x: Var, pre: &str, stride: usize) -> Result<Var> {
    let dw = b.var(g, &format!("{pre}.dw.weight"))?;
    let dwb = b.var(g, &format!("{pre}.dw.bias"))?;
    let pw = b.var(g, &format!("{pre}.pw.weight"))?;
    let pwb = b.var(g, &format!("{pre}.pw.bias"))?;
    let gamma = b.var(g, &format!("{pre}.norm.weight"))?;
    let beta = b.var(g, &format!("{pre}.norm.bias"))?;
    let y = g.depthwise_conv2d(x, dw, Some(dwb), stride, 1);
    let y = g.conv2d(y, pw, Some(pwb), 1, 0);
    let y = g.group_norm(y, gamma, beta, NORM_GROUPS);
    Ok(g.silu(y))
}

/// Records the residual `h(x)` for an image `[3, H, W]` with `H`, `W`
/// divisible by 8.
pub fn translate<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<T>, t: &Translator, image: Var) -> Result<Var> {
    let (c, h, w) = g.value(image).dims3();
    if c != 3 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!(
            "translator needs [3, H, W] with H, W divisible by 8, got [{c}, {h}, {w}]"
        )));
    }
    let mut skips = Vec::with_capacity(3);
    let mut x = image;
    for i in 0..3 {
        let pre = format!("translator.enc{i}");
        x = match t.variant {
            TranslatorVariant::Res => {
                let d = conv_norm_act(g, b, x, &format!("{pre}.down"), 2)?;
                let r = conv_norm_act(g, b, d, &format!("{pre}.res"), 1)?;
                g.add(d, r)
            }
            TranslatorVariant::Mb => separable(g, b, x, &pre, 2)?,
        };
        skips.push(x);
    }
    for i in 0..2 {
        let up = g.upsample2(x);
        let cat = g.concat(up, skips[1 - i]);
        let pre = format!("translator.dec{i}");
        x = match t.variant {
            TranslatorVariant::Res => conv_norm_act(g, b, cat, &format!("{pre}.fuse"), 1)?,
            TranslatorVariant::Mb => separable(g, b, cat, &pre, 1)?,
        };
    }
    let up = g.upsample2(x);
    let cat = g.concat(up, image);
    let ow = b.var(g, "translator.out.weight")?;
    let ob = b.var(g, "translator.out.bias")?;
    Ok(g.conv2d(cat, ow, Some(ob), 1, 1))
}
