//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are created
//! with an explicit `requires_grad` flag; gradients are propagated only into
//! nodes that (transitively) depend on such a leaf, so frozen sub-networks cost
//! a single backward pass for their input gradient and nothing for weights.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        c: Tensor<T>,
    },
    ScaleConst {
        x: Var,
        c: T,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    AddScalar {
        x: Var,
        s: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Clamp01 {
        x: Var,
    },
    AddPatch {
        x: Var,
        patch: Var,
        y0: usize,
        x0: usize,
    },
    Reshape {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    ExpClamped {
        x: Var,
        lo: T,
        hi: T,
    },
    /// Scalar loss with precomputed local gradients for each input.
    FusedLoss {
        inputs: Vec<(Var, Tensor<T>)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn matmul_into<T: Scalar>(
    a: &[T],
    (m, k): (usize, usize),
    a_t: bool,
    b: &[T],
    (k2, n): (usize, usize),
    b_t: bool,
    c: &mut [T],
    beta: T,
) {
    // a is stored m×k (or k×m when transposed)
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k2), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k2, n), b).unwrap()
    };
    debug_assert_eq!(k, k2);
    let mut cv = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = *g;
    let npix = h_out * w_out;
    let mut cols = vec![T::zero(); c_in * k * k * npix];
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * w_out..(oy + 1) * w_out];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = *g;
    let npix = h_out * w_out;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * w_out..(oy + 1) * w_out];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c_in, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c_in, "conv input channels {} vs weight {:?}", c_in, ws);
        let (c_out, k) = (ws[0], ws[2]);
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let npix = geom.h_out * geom.w_out;
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![T::zero(); c_out * npix];
        {
            let cdata: &[T] = match &cols {
                Some(c) => c,
                None => self.value(x).data(),
            };
            matmul_into(
                self.value(w).data(),
                (c_out, c_in * k * k),
                false,
                cdata,
                (c_in * k * k, npix),
                false,
                &mut out,
                T::zero(),
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in out.chunks_mut(npix).enumerate() {
                for v in row {
                    *v += bias[o];
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::from_vec(&[c_out, geom.h_out, geom.w_out], out).unwrap();
        self.push(value, Op::Conv { x, w, b, geom, cols }, rg)
    }

    /// Per-channel (depthwise) convolution with `[C, 1, k, k]` weights.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws, vec![c, 1, ws[2], ws[2]], "depthwise weight shape");
        let k = ws[2];
        let geom = ConvGeom {
            c_in: c,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (ho, wo) = (geom.h_out, geom.w_out);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let bias = b.map(|b| self.value(b).data()[ch]).unwrap_or_else(T::zero);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wv[(ch * k + ky) * k + kx]
                                * xv[(ch * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::from_vec(&[c, ho, wo], out).unwrap();
        self.push(value, Op::DepthwiseConv { x, w, b, geom }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let per = (c / groups) * h * w;
        let eps = T::lit(1e-5);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); xv.len()];
        let n = T::from_usize(per).unwrap();
        for g in 0..groups {
            let s = &xv[g * per..(g + 1) * per];
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[g] = r;
            for (i, &v) in s.iter().enumerate() {
                xhat[g * per + i] = (v - mean) * r;
            }
        }
        let hw = h * w;
        for ch in 0..c {
            for i in 0..hw {
                let idx = ch * hw + i;
                out[idx] = gv[ch] * xhat[idx] + bv[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::from_vec(&[c, h, w], out).unwrap();
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg)
    }

    /// Elementwise product with a constant (non-differentiable) tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const shapes");
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::from_vec(c.shape(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::MulConst { x, c }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::ScaleConst { x, c }, rg)
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::MulScalar { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v + sv);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::AddScalar { x, s }, rg)
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::from_vec(&[c, h2, w2], out).unwrap();
        self.push(value, Op::Upsample2 { x }, rg)
    }

    /// Channel concatenation of two `[C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).dims3();
        let (cb, hb, wb) = self.value(b).dims3();
        assert_eq!((h, w), (hb, wb), "concat spatial dims");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(&[ca + cb, h, w], data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Concat { a, b }, rg)
    }

    /// Clamps into `[0, 1]`. The backward pass lets gradients through unless
    /// a descent step would push an already out-of-range value further out.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Clamp01 { x }, rg)
    }

    /// Adds a `[C, p, p]` patch into `x` at offset `(y0, x0)`.
    pub fn add_patch(&mut self, x: Var, patch: Var, y0: usize, x0: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (pc, ph, pw) = self.value(patch).dims3();
        assert_eq!(pc, c, "patch channels");
        assert!(y0 + ph <= h && x0 + pw <= w, "patch out of bounds");
        let mut value = self.value(x).clone();
        let pv = self.value(patch).data();
        {
            let out = value.data_mut();
            for ch in 0..c {
                for py in 0..ph {
                    for px in 0..pw {
                        out[(ch * h + y0 + py) * w + x0 + px] += pv[(ch * ph + py) * pw + px];
                    }
                }
            }
        }
        let rg = self.rg(&[x, patch]);
        self.push(value, Op::AddPatch { x, patch, y0, x0 }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// `[m, k] × [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} × {sb:?}");
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        matmul_into(
            self.value(a).data(),
            (sa[0], sa[1]),
            false,
            self.value(b).data(),
            (sb[0], sb[1]),
            false,
            &mut out,
            T::zero(),
        );
        let value = Tensor::from_vec(&[sa[0], sb[1]], out).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul { a, b }, rg)
    }

    /// Unit-normalizes a 2-D tensor along `axis` (1: rows, 0: columns).
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert!(s.len() == 2 && axis < 2);
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let eps = T::lit(1e-12);
        let nvec = if axis == 1 { r } else { c };
        let mut norms = vec![T::zero(); nvec];
        for i in 0..r {
            for j in 0..c {
                let v = xv[i * c + j];
                norms[if axis == 1 { i } else { j }] += v * v;
            }
        }
        let snap = T::epsilon() * T::lit(4.0);
        for n in &mut norms {
            *n = n.sqrt().max(eps);
            // already-unit vectors pass through unchanged
            if (*n - T::one()).abs() <= snap {
                *n = T::one();
            }
        }
        let mut out = xv.to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / norms[if axis == 1 { i } else { j }];
            }
        }
        let value = Tensor::from_vec(&s, out).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize { x, axis, norms }, rg)
    }

    /// `exp(clamp(x, lo, hi))`; zero gradient outside the clamp range.
    pub fn exp_clamped(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi).exp());
        let rg = self.rg(&[x]);
        self.push(value, Op::ExpClamped { x, lo, hi }, rg)
    }

    /// Records a scalar loss whose local gradients were computed by the caller.
    pub fn fused_loss(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "fused loss grad shape");
        }
        let rg = inputs.iter().any(|(v, _)| self.nodes[v.0].requires_grad);
        self.push(Tensor::scalar(value), Op::FusedLoss { inputs }, rg)
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ws = self.value(*w).shape().to_vec();
                let (c_out, kk) = (ws[0], ws[1] * ws[2] * ws[3]);
                let npix = geom.h_out * geom.w_out;
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db: Vec<T> = gd.chunks(npix).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[c_out], db).unwrap());
                    }
                }
                if self.wants(*w) {
                    let cdata: &[T] = match cols {
                        Some(c) => c,
                        None => self.value(*x).data(),
                    };
                    let mut dw = vec![T::zero(); c_out * kk];
                    matmul_into(gd, (c_out, npix), false, cdata, (npix, kk), true, &mut dw, T::zero());
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw).unwrap());
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); kk * npix];
                    matmul_into(
                        self.value(*w).data(),
                        (kk, c_out),
                        true,
                        gd,
                        (c_out, npix),
                        false,
                        &mut dcols,
                        T::zero(),
                    );
                    let xs = self.value(*x).shape().to_vec();
                    let dx = if cols.is_none() {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); xs.iter().product()];
                        col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
                }
            }
            Op::DepthwiseConv { x, w, b, geom } => {
                let ConvGeom {
                    c_in: c,
                    h,
                    w: wd,
                    k,
                    stride,
                    pad,
                    h_out: ho,
                    w_out: wo,
                } = *geom;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = gd[(ch * ho + oy) * wo + ox];
                            db[ch] += go;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + iy as usize) * wd + ix as usize;
                                    let wi = (ch * k + ky) * k + kx;
                                    dw[wi] += go * xv[xi];
                                    dx[xi] += go * wv[wi];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(&[c], db).unwrap());
                }
                let ws = self.value(*w).shape().to_vec();
                self.accumulate(grads, *w, Tensor::from_vec(&ws, dw).unwrap());
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (c, h, w) = self.value(*x).dims3();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let idx = ch * hw + p;
                        dgamma[ch] += gd[idx] * xhat[idx];
                        dbeta[ch] += gd[idx];
                        dxhat[idx] = gd[idx] * gv[ch];
                    }
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
                if self.wants(*x) {
                    let per = (c / groups) * hw;
                    let n = T::from_usize(per).unwrap();
                    let mut dx = vec![T::zero(); c * hw];
                    for gi in 0..*groups {
                        let r = gi * per..(gi + 1) * per;
                        let sum_d: T = dxhat[r.clone()].iter().copied().sum();
                        let sum_dx: T = dxhat[r.clone()]
                            .iter()
                            .zip(&xhat[r.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for j in r {
                            dx[j] = rstd[gi] / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], dx).unwrap());
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &go)| {
                        let s = sigmoid(v);
                        go * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&go, &y)| go * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(av.shape(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&go, &y)| go * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), d).unwrap());
                }
            }
            Op::MulConst { x, c } => {
                let d = gd.iter().zip(c.data()).map(|(&go, &y)| go * y).collect();
                self.accumulate(grads, *x, Tensor::from_vec(c.shape(), d).unwrap());
            }
            Op::ScaleConst { x, c } => {
                self.accumulate(grads, *x, g.map(|v| v * *c));
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.wants(*s) {
                    let ds: T = gd.iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
                self.accumulate(grads, *x, g.map(|v| v * sv));
            }
            Op::AddScalar { x, s } => {
                if self.wants(*s) {
                    self.accumulate(grads, *s, Tensor::scalar(gd.iter().copied().sum()));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = self.value(*x).dims3();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let na = self.value(*a).len();
                self.accumulate(grads, *a, Tensor::from_vec(&sa, gd[..na].to_vec()).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(&sb, gd[na..].to_vec()).unwrap());
            }
            Op::Clamp01 { x } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &go)| {
                        if (v < T::zero() && go > T::zero()) || (v > T::one() && go < T::zero()) {
                            T::zero()
                        } else {
                            go
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::AddPatch { x, patch, y0, x0 } => {
                let (c, h, w) = self.value(*x).dims3();
                let (_, ph, pw) = self.value(*patch).dims3();
                if self.wants(*patch) {
                    let mut dp = vec![T::zero(); c * ph * pw];
                    for ch in 0..c {
                        for py in 0..ph {
                            for px in 0..pw {
                                dp[(ch * ph + py) * pw + px] = gd[(ch * h + y0 + py) * w + x0 + px];
                            }
                        }
                    }
                    self.accumulate(grads, *patch, Tensor::from_vec(&[c, ph, pw], dp).unwrap());
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Reshape { x } => {
                let s = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&s).unwrap());
            }
            Op::MatMul { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gd, (m, n), false, self.value(*b).data(), (n, k), true, &mut da, T::zero());
                    self.accumulate(grads, *a, Tensor::from_vec(&sa, da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(self.value(*a).data(), (k, m), true, gd, (m, n), false, &mut db, T::zero());
                    self.accumulate(grads, *b, Tensor::from_vec(&sb, db).unwrap());
                }
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = node.value.data();
                let s = node.value.shape().to_vec();
                let (r, c) = (s[0], s[1]);
                let idx = |i: usize, j: usize| if *axis == 1 { i } else { j };
                let mut dots = vec![T::zero(); norms.len()];
                for i in 0..r {
                    for j in 0..c {
                        dots[idx(i, j)] += y[i * c + j] * gd[i * c + j];
                    }
                }
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        let k = idx(i, j);
                        dx[i * c + j] = (gd[i * c + j] - y[i * c + j] * dots[k]) / norms[k];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, dx).unwrap());
            }
            Op::ExpClamped { x, lo, hi } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&v, &e), &go)| if v < *lo || v > *hi { T::zero() } else { go * e })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::FusedLoss { inputs } => {
                let s = gd[0];
                for (v, local) in inputs {
                    self.accumulate(grads, *v, local.map(|l| l * s));
                }
            }
        }
    }
}
