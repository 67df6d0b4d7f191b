//! 2-D convolution via im2col and GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatLayout, Real, Shape, Tensor};

/// Upper bound on im2col buffer elements per tile.
const TILE_ELEMS: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `k x k` kernel, stride 1, no padding, no dilation, no bias.
    pub fn new(out_channels: usize, k: usize) -> Self {
        ConvSpec { out_channels, kernel: (k, k), stride: 1, padding: 0, dilation: 1, has_bias: false }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_shape(&self, in_channels: usize) -> Shape {
        Shape::new(self.out_channels, in_channels, self.kernel.0, self.kernel.1)
    }

    fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::invalid("conv2d", "out_channels and kernel dims must be positive"));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
        }
        Ok(())
    }

    /// `floor((len + 2·padding − dilation·(k−1) − 1) / stride) + 1`, or `None` when the
    /// dilated kernel does not fit.
    pub fn output_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        let (kh, kw) = self.kernel;
        match (self.output_len(input.h, kh), self.output_len(input.w, kw)) {
            (Some(h), Some(w)) => Ok(Shape::new(input.n, self.out_channels, h, w)),
            _ => Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} dilation {} does not fit input {input}", self.dilation),
            )),
        }
    }
}

struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn tile(&self) -> usize {
        if self.is_pointwise() {
            self.pixels()
        } else {
            (TILE_ELEMS / self.k().max(1)).clamp(1, self.pixels().max(1))
        }
    }

    /// Visits `(column offset, input offset)` for every in-bounds tap of column row `r`
    /// over output pixels `[p0, p1)`.
    #[inline]
    fn for_each_tap(&self, r: usize, p0: usize, p1: usize, mut f: impl FnMut(usize, usize)) {
        let kx = r % self.kw;
        let ky = (r / self.kw) % self.kh;
        let ci = r / (self.kw * self.kh);
        let plane = ci * self.in_h * self.in_w;
        let (mut oy, mut ox) = (p0 / self.out_w, p0 % self.out_w);
        let mut j = 0;
        let pt = p1 - p0;
        while j < pt {
            let run = (self.out_w - ox).min(pt - j);
            let iy = (oy * self.stride + ky * self.dil) as isize - self.pad as isize;
            if iy >= 0 && (iy as usize) < self.in_h {
                let row = plane + iy as usize * self.in_w;
                for t in 0..run {
                    let ix = ((ox + t) * self.stride + kx * self.dil) as isize - self.pad as isize;
                    if ix >= 0 && (ix as usize) < self.in_w {
                        f(j + t, row + ix as usize);
                    }
                }
            }
            j += run;
            ox = 0;
            oy += 1;
        }
    }

    fn im2col<T: Real>(&self, x: &[T], p0: usize, p1: usize, col: &mut [T]) {
        let pt = p1 - p0;
        for r in 0..self.k() {
            let row = &mut col[r * pt..(r + 1) * pt];
            row.iter_mut().for_each(|v| *v = T::zero());
            self.for_each_tap(r, p0, p1, |j, i| row[j] = x[i]);
        }
    }

    fn col2im_add<T: Real>(&self, col: &[T], p0: usize, p1: usize, dx: &mut [T]) {
        let pt = p1 - p0;
        for r in 0..self.k() {
            let row = &col[r * pt..(r + 1) * pt];
            self.for_each_tap(r, p0, p1, |j, i| dx[i] = dx[i] + row[j]);
        }
    }
}

fn geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(Geometry, Shape)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.c != ws.c {
        return Err(Error::DimMismatch {
            op: "conv2d",
            lhs_name: "input channels",
            lhs: xs.c,
            rhs_name: "weight in_channels",
            rhs: ws.c,
        });
    }
    if ws.n != spec.out_channels {
        return Err(Error::DimMismatch {
            op: "conv2d",
            lhs_name: "weight out_channels",
            lhs: ws.n,
            rhs_name: "spec out_channels",
            rhs: spec.out_channels,
        });
    }
    if ws.h != spec.kernel.0 {
        return Err(Error::DimMismatch {
            op: "conv2d",
            lhs_name: "weight kh",
            lhs: ws.h,
            rhs_name: "spec kh",
            rhs: spec.kernel.0,
        });
    }
    if ws.w != spec.kernel.1 {
        return Err(Error::DimMismatch {
            op: "conv2d",
            lhs_name: "weight kw",
            lhs: ws.w,
            rhs_name: "spec kw",
            rhs: spec.kernel.1,
        });
    }
    match (bias, spec.has_bias) {
        (Some(b), _) if b.numel() != spec.out_channels => {
            return Err(Error::DimMismatch {
                op: "conv2d",
                lhs_name: "bias length",
                lhs: b.numel(),
                rhs_name: "out_channels",
                rhs: spec.out_channels,
            })
        }
        (None, true) => return Err(Error::invalid("conv2d", "spec expects a bias tensor")),
        (Some(_), false) => return Err(Error::invalid("conv2d", "bias given but spec has_bias = false")),
        _ => {}
    }
    let out = spec.output_shape(xs)?;
    Ok((
        Geometry {
            in_c: xs.c,
            in_h: xs.h,
            in_w: xs.w,
            out_h: out.h,
            out_w: out.w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            stride: spec.stride,
            pad: spec.padding,
            dil: spec.dilation,
        },
        out,
    ))
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (g, out_shape) = geometry(x, w, bias, spec)?;
    let (k, pix, oc) = (g.k(), g.pixels(), spec.out_channels);
    let in_len = x.shape().c * x.shape().plane();
    let mut out = vec![T::zero(); out_shape.numel()];
    if pix > 0 {
        out.par_chunks_mut(oc * pix).enumerate().for_each(|(n, y)| {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            if let Some(b) = bias {
                for (o, &bv) in b.data().iter().enumerate() {
                    y[o * pix..(o + 1) * pix].iter_mut().for_each(|v| *v = bv);
                }
            }
            let lw = MatLayout::row_major(oc, k);
            if g.is_pointwise() {
                let lc = MatLayout::row_major(oc, pix);
                gemm(w.data(), lw, xn, MatLayout::row_major(k, pix), T::one(), y, lc);
                return;
            }
            let tile = g.tile();
            let mut col = vec![T::zero(); k * tile];
            let mut p0 = 0;
            while p0 < pix {
                let p1 = (p0 + tile).min(pix);
                let pt = p1 - p0;
                g.im2col(xn, p0, p1, &mut col[..k * pt]);
                let lc = MatLayout { rows: oc, cols: pt, row_stride: pix, col_stride: 1 };
                gemm(w.data(), lw, &col[..k * pt], MatLayout::row_major(k, pt), T::one(), &mut y[p0..], lc);
                p0 = p1;
            }
        });
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of a convolution. Entries are `None` when not requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (g, out_shape) = geometry(x, w, bias, spec)?;
    if dy.shape() != out_shape {
        return Err(Error::ShapeMismatch { op: "conv2d backward", lhs: dy.shape(), rhs: out_shape });
    }
    let (need_x, need_w, need_b) = need;
    let (k, pix, oc) = (g.k(), g.pixels(), spec.out_channels);
    let xs = x.shape();
    let in_len = xs.c * xs.plane();
    let lw = MatLayout::row_major(oc, k);

    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
    let db = (need_b && bias.is_some()).then(|| {
        let mut acc = vec![T::zero(); oc];
        for n in 0..xs.n {
            for (o, a) in acc.iter_mut().enumerate() {
                *a = dy.plane(n, o).iter().fold(*a, |s, &v| s + v);
            }
        }
        Tensor::from_parts(Shape::new(1, oc, 1, 1), acc)
    });

    if pix > 0 && (need_x || need_w) {
        let tile = g.tile();
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * tile }];
        let mut dcol = vec![T::zero(); k * tile];
        for n in 0..xs.n {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let dyn_ = &dy.data()[n * oc * pix..(n + 1) * oc * pix];
            let mut p0 = 0;
            while p0 < pix {
                let p1 = (p0 + tile).min(pix);
                let pt = p1 - p0;
                let ldy = MatLayout { rows: oc, cols: pt, row_stride: pix, col_stride: 1 };
                let dy_tile = &dyn_[p0..];
                if let Some(dw) = dw.as_mut() {
                    // dW += dY · colᵀ
                    if g.is_pointwise() {
                        gemm(dy_tile, ldy, xn, MatLayout::row_major(k, pix).t(), T::one(), dw, lw);
                    } else {
                        g.im2col(xn, p0, p1, &mut col[..k * pt]);
                        let lcol_t = MatLayout::row_major(k, pt).t();
                        gemm(dy_tile, ldy, &col[..k * pt], lcol_t, T::one(), dw, lw);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                    if g.is_pointwise() {
                        // dX = Wᵀ · dY
                        gemm(w.data(), lw.t(), dy_tile, ldy, T::one(), dxn, MatLayout::row_major(k, pix));
                    } else {
                        gemm(w.data(), lw.t(), dy_tile, ldy, T::zero(), &mut dcol[..k * pt], MatLayout::row_major(k, pt));
                        g.col2im_add(&dcol[..k * pt], p0, p1, dxn);
                    }
                }
                p0 = p1;
            }
        }
    }

    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(xs, d)),
        weight: dw.map(|d| Tensor::from_parts(w.shape(), d)),
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_shape() {
        let spec = ConvSpec::new(64, 3).stride(2).padding(1);
        assert_eq!(spec.output_shape(Shape::new(1, 3, 384, 384)).unwrap(), Shape::new(1, 64, 192, 192));
    }

    #[test]
    fn dilated_padding_preserves_size() {
        let spec = ConvSpec::new(5, 3).padding(2).dilation(2);
        assert_eq!(spec.output_shape(Shape::new(1, 8, 48, 48)).unwrap(), Shape::new(1, 5, 48, 48));
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 4], |[n, _, h, w]| (n * 12 + h * 4 + w) as f64 - 5.5);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::zeros([1, 1, 1, 1]);
        let spec = ConvSpec::new(1, 1).bias(true);
        let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_names_both_dims() {
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros([4, 2, 3, 3]);
        let err = conv2d_forward(&x, &w, None, &ConvSpec::new(4, 3)).unwrap_err();
        match err {
            Error::DimMismatch { lhs, rhs, .. } => assert_eq!((lhs, rhs), (3, 2)),
            other => panic!("unexpected error {other}"),
        }
        assert!(err_text(&x, &w).contains("input channels = 3"));
    }

    fn err_text(x: &Tensor<f32>, w: &Tensor<f32>) -> String {
        conv2d_forward(x, w, None, &ConvSpec::new(4, 3)).unwrap_err().to_string()
    }

    #[test]
    fn kernel_larger_than_input_errors() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, &ConvSpec::new(1, 3).dilation(2)).is_err());
    }

    #[test]
    fn tiled_path_matches_untiled() {
        // 64x64 output with K = 576 needs more than one tile.
        let in_c = 64;
        let x = Tensor::<f32>::from_fn([1, in_c, 64, 64], |[_, c, h, w]| ((c * 7 + h * 3 + w) % 11) as f32 * 0.1);
        let w = Tensor::<f32>::from_fn([2, in_c, 3, 3], |[o, c, i, j]| ((o + c + i * 3 + j) % 5) as f32 * 0.01);
        let spec = ConvSpec::new(2, 3).padding(1);
        let g = geometry(&x, &w, None, &spec).unwrap().0;
        assert!(g.tile() < g.pixels());
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        let y64 = conv2d_forward(&x.cast::<f64>(), &w.cast::<f64>(), None, &spec).unwrap();
        for (a, b) in y.data().iter().zip(y64.data()) {
            assert!((*a as f64 - b).abs() < 1e-3 * b.abs().max(1.0));
        }
    }
}
