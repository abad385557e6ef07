use rayon::prelude::*;

use super::graph::Var;
use super::{Real, Result, Tensor, TensorError};

/// Two-tap interpolation table for doubling one axis with half-pixel
/// (align-corners = false) sampling.
fn taps<T: Real>(n: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, T::of(1.0 - l), T::of(l))
        })
        .collect()
}

/// `[outer][n][inner]` -> `[outer][2n][inner]`.
fn axis_forward<T: Real>(src: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let t = taps::<T>(n);
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    out.par_chunks_mut(2 * n * inner)
        .zip(src.par_chunks(n * inner))
        .for_each(|(dst, s)| {
            for (o, &(i0, i1, w0, w1)) in t.iter().enumerate() {
                let d = &mut dst[o * inner..(o + 1) * inner];
                let a = &s[i0 * inner..(i0 + 1) * inner];
                let b = &s[i1 * inner..(i1 + 1) * inner];
                for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                    *d = w0 * a + w1 * b;
                }
            }
        });
    out
}

/// Adjoint of [`axis_forward`].
fn axis_backward<T: Real>(grad: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let t = taps::<T>(n);
    let mut out = vec![T::zero(); outer * n * inner];
    out.par_chunks_mut(n * inner)
        .zip(grad.par_chunks(2 * n * inner))
        .for_each(|(dst, g)| {
            for (o, &(i0, i1, w0, w1)) in t.iter().enumerate() {
                let gs = &g[o * inner..(o + 1) * inner];
                for (k, &gv) in gs.iter().enumerate() {
                    dst[i0 * inner + k] = dst[i0 * inner + k] + w0 * gv;
                    dst[i1 * inner + k] = dst[i1 * inner + k] + w1 * gv;
                }
            }
        });
    out
}

impl<'g, T: Real> Var<'g, T> {
    /// Trilinear upsampling by a factor of two on each spatial axis of
    /// `[N, C, D, H, W]`, sampling at half-voxel offsets with edge clamping.
    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, d, h, w] = x.dims5("upsample2x")?;
        if d == 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample2x",
                reason: "spatial extents must be >= 1".into(),
            });
        }
        let nc = n * c;
        let a = axis_forward(x.data(), nc * d * h, w, 1);
        let b = axis_forward(&a, nc * d, h, 2 * w);
        let out = axis_forward(&b, nc, d, 4 * h * w);
        let out = Tensor::new([n, c, 2 * d, 2 * h, 2 * w], out)?;
        Ok(self.graph().record(
            "upsample2x",
            out,
            &[self],
            Box::new(move |g, _| {
                let b = axis_backward(g.data(), nc, d, 4 * h * w);
                let a = axis_backward(&b, nc * d, h, 2 * w);
                let dx = axis_backward(&a, nc * d * h, w, 1);
                vec![Some(Tensor::new([n, c, d, h, w], dx).expect("shape"))]
            }),
        ))
    }
}
