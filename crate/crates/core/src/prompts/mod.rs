//! Pixel-space adaptation: static prompts and the encoder-decoder translator.

mod static_prompt;
mod translator;

pub use static_prompt::{
    apply_static, init_prompt, Mode, PromptKind, StaticPrompt, FRAME_KEY, MAP_KEY, PATCH_KEY, SCALE_KEY, SHIFT_KEY,
};
pub use translator::{init_translator, translate, Translator, TranslatorVariant};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `clamp(image + residual, 0, 1)`.
pub fn compose<T: Scalar>(g: &mut Graph<T>, image: Var, residual: Var) -> Result<Var> {
    if g.value(image).shape() != g.value(residual).shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs residual {:?}",
            g.value(image).shape(),
            g.value(residual).shape()
        )));
    }
    let sum = g.add(image, residual);
    Ok(g.clamp01(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(img: Tensor<f64>, res: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(img);
        let r = g.constant(res);
        let out = compose(&mut g, x, r)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn zero_residual_is_identity() {
        let img = Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        assert!(run(img.clone(), Tensor::zeros(&[3, 2, 2])).unwrap().bitwise_eq(&img));
    }

    #[test]
    fn large_residual_saturates() {
        let out = run(Tensor::full(&[3, 4, 4], 0.3), Tensor::full(&[3, 4, 4], 10.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_residual() {
        let res = Tensor::from_vec(
            &[3, 4, 4],
            (0..48).map(|i| if (i / 4 + i % 4) % 2 == 0 { 0.25 } else { -0.25 }).collect(),
        )
        .unwrap();
        let out = run(Tensor::full(&[3, 4, 4], 0.5), res).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let want = if (i / 4 + i % 4) % 2 == 0 { 0.75 } else { 0.25 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(
            run(Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[3, 4, 2])),
            Err(Error::Shape(_))
        ));
    }
}
