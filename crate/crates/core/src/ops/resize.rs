//! Bilinear and nearest-neighbour resampling with half-pixel centres.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Interpolation taps along one axis: `(i0, i1, w0, w1)` per output index.
fn bilinear_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = src - i0 as f64;
            let l = if i1 == i0 { 0.0 } else { l };
            (i0, i1, T::from_f64_lossy(1.0 - l), T::from_f64_lossy(l))
        })
        .collect()
}

/// Source index for nearest-neighbour sampling.
pub(crate) fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

fn check_sizes(op: &'static str, s: Shape, out_h: usize, out_w: usize) -> Result<()> {
    if s.h == 0 || s.w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(op, format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    Ok(())
}

pub fn bilinear_resize_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_sizes("bilinear_resize", s, out_h, out_w)?;
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps::<T>(s.h, out_h);
    let tx = bilinear_taps::<T>(s.w, out_w);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            for &(y0, y1, wy0, wy1) in &ty {
                let (r0, r1) = (&p[y0 * s.w..(y0 + 1) * s.w], &p[y1 * s.w..(y1 + 1) * s.w]);
                for &(x0, x1, wx0, wx1) in &tx {
                    let top = r0[x0] * wx0 + r0[x1] * wx1;
                    let bot = r1[x0] * wx0 + r1[x1] * wx1;
                    out.push(top * wy0 + bot * wy1);
                }
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}

pub fn bilinear_resize_backward<T: Real>(input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let os = dy.shape();
    if (os.h, os.w) == (s.h, s.w) {
        return dy.clone();
    }
    let ty = bilinear_taps::<T>(s.h, os.h);
    let tx = bilinear_taps::<T>(s.w, os.w);
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let g = dy.plane(n, c);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = g[oy * os.w + ox];
                    let (top, bot) = (v * wy0, v * wy1);
                    for (row, rv) in [(y0, top), (y1, bot)] {
                        let r = base + row * s.w;
                        dx[r + x0] = dx[r + x0] + rv * wx0;
                        dx[r + x1] = dx[r + x1] + rv * wx1;
                    }
                }
            }
        }
    }
    Tensor::from_parts(s, dx)
}

/// Nearest-neighbour resize; preserves the value set exactly (binary masks stay binary).
pub fn nearest_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_sizes("nearest_resize", s, out_h, out_w)?;
    let ys: Vec<usize> = (0..out_h).map(|o| nearest_index(o, s.h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|o| nearest_index(o, s.w, out_w)).collect();
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            for &y in &ys {
                out.extend(xs.iter().map(|&xx| p[y * s.w + xx]));
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full([1, 1, 2, 2], 0.7);
        let y = bilinear_resize_forward(&x, 4, 4).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn half_pixel_weights() {
        // Upsampling [0, 1] by 2: centres map to -0.25, 0.25, 0.75, 1.25 (clamped).
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize_forward(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn one_by_one_broadcasts() {
        let x = Tensor::<f32>::full([1, 3, 1, 1], 2.0);
        let y = bilinear_resize_forward(&x, 48, 48).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 48, 48));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn nearest_keeps_values() {
        let x = Tensor::<f32>::from_fn([1, 1, 3, 5], |[_, _, h, w]| ((h + w) % 2) as f32);
        let y = nearest_resize(&x, 7, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let back = nearest_resize(&x, 3, 5).unwrap();
        assert_eq!(back, x);
    }
}
