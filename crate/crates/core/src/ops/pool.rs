use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    /// The encoder stem pooling: 3x3, stride 2, padding 1.
    pub const STEM: PoolSpec = PoolSpec { kernel: 3, stride: 2, padding: 1 };

    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if len == 0 || self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        if s.h == 0 || s.w == 0 {
            return Err(Error::invalid("maxpool2d", format!("non-positive spatial dims in {s}")));
        }
        if self.padding >= self.kernel {
            return Err(Error::invalid("maxpool2d", "padding must be smaller than the kernel"));
        }
        match (self.output_len(s.h), self.output_len(s.w)) {
            (Some(h), Some(w)) => Ok(Shape::new(s.n, s.c, h, w)),
            _ => Err(Error::invalid("maxpool2d", format!("window does not fit input {s}"))),
        }
    }
}

/// Max pooling. Returns the output and, per output element, the flat input index of
/// the selected maximum (lowest linear index among ties).
pub fn maxpool2d_forward<T: Real>(x: &Tensor<T>, spec: PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let os = spec.output_shape(s)?;
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let plane = x.plane(n, c);
            for oy in 0..os.h {
                let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                for ox in 0..os.w {
                    let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..spec.kernel as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy as usize >= s.h {
                            continue;
                        }
                        for kx in 0..spec.kernel as isize {
                            let ix = x0 + kx;
                            if ix < 0 || ix as usize >= s.w {
                                continue;
                            }
                            let i = iy as usize * s.w + ix as usize;
                            let v = plane[i];
                            // row-major window scan; strict > keeps the lowest index on ties
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, i));
                            }
                        }
                    }
                    let (v, i) = best.expect("window overlaps the input");
                    out.push(v);
                    arg.push(base + i);
                }
            }
        }
    }
    Ok((Tensor::from_parts(os, out), arg))
}

pub fn maxpool2d_backward<T: Real>(input_shape: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx[i] = dx[i] + g;
    }
    Tensor::from_parts(input_shape, dx)
}

/// `[floor(i·len/out), ceil((i+1)·len/out))` for each output cell.
pub(crate) fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| (i * len / out, ((i + 1) * len).div_ceil(out))).collect()
}

/// Average pooling onto a fixed `out_h x out_w` grid.
pub fn adaptive_avg_pool2d_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("adaptive_avg_pool2d", "output size must be positive"));
    }
    if out_h > s.h || out_w > s.w {
        return Err(Error::invalid(
            "adaptive_avg_pool2d",
            format!("output grid {out_h}x{out_w} larger than input {}x{}", s.h, s.w),
        ));
    }
    let (by, bx) = (adaptive_bins(s.h, out_h), adaptive_bins(s.w, out_w));
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for &(y0, y1) in &by {
                for &(x0, x1) in &bx {
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + plane[yy * s.w + xx];
                        }
                    }
                    out.push(acc / T::from_usize(((y1 - y0) * (x1 - x0)).max(1)).unwrap());
                }
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}

pub fn adaptive_avg_pool2d_backward<T: Real>(input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let os = dy.shape();
    let (by, bx) = (adaptive_bins(s.h, os.h), adaptive_bins(s.w, os.w));
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let g = dy.plane(n, c);
            for (i, &(y0, y1)) in by.iter().enumerate() {
                for (j, &(x0, x1)) in bx.iter().enumerate() {
                    let share = g[i * os.w + j] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let k = base + yy * s.w + xx;
                            dx[k] = dx[k] + share;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(s, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_pool_shape() {
        assert_eq!(PoolSpec::STEM.output_shape(Shape::new(1, 64, 192, 192)).unwrap(), Shape::new(1, 64, 96, 96));
    }

    #[test]
    fn constant_input() {
        let x = Tensor::<f32>::full([1, 2, 5, 7], 3.25);
        let (y, _) = maxpool2d_forward(&x, PoolSpec::STEM).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let x = Tensor::<f64>::full([1, 1, 2, 2], 1.0);
        let (_, arg) = maxpool2d_forward(&x, PoolSpec::STEM).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn zero_size_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 0, 3]);
        assert!(maxpool2d_forward(&x, PoolSpec::STEM).is_err());
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bins(8, 3), vec![(0, 3), (2, 6), (5, 8)]);
        assert_eq!(adaptive_bins(12, 6), vec![(0, 2), (2, 4), (4, 6), (6, 8), (8, 10), (10, 12)]);
    }

    #[test]
    fn global_average() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |[_, _, h, w]| (h * 3 + w) as f64);
        let y = adaptive_avg_pool2d_forward(&x, 1, 1).unwrap();
        assert_eq!(y.item(), 4.0);
    }
}
