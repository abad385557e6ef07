use rayon::prelude::*;

use super::graph::Var;
use super::{Real, Result, Tensor, TensorError};

const LANES: usize = 8;
const BLOCK: usize = 512;

/// `sum f(a[i], b[i])` in `f64`. Partial sums run in `T` lanes over short
/// blocks, which lets the inner loop vectorize for `f32`.
fn pair_sum<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> f64 {
    let mut total = 0.0;
    for (ca, cb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let mut acc = [T::zero(); LANES];
        let (mut ia, mut ib) = (ca.chunks_exact(LANES), cb.chunks_exact(LANES));
        for (xa, xb) in (&mut ia).zip(&mut ib) {
            for l in 0..LANES {
                acc[l] = acc[l] + f(xa[l], xb[l]);
            }
        }
        total += acc.iter().map(|v| v.as_f64()).sum::<f64>();
        for (&x, &y) in ia.remainder().iter().zip(ib.remainder()) {
            total += f(x, y).as_f64();
        }
    }
    total
}

impl<'g, T: Real> Var<'g, T> {
    /// Instance normalization of `[N, C, D, H, W]`: every `(n, c)` slice is
    /// shifted to zero mean and scaled to unit population variance, then
    /// mapped through `gamma[c] * x + beta[c]`.
    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, d, h, w] = x.dims5("instance_norm")?;
        let vol = d * h * w;
        let (gv, bv) = (gamma.value(), beta.value());
        for (name, t) in [("instance_norm gamma", &gv), ("instance_norm beta", &bv)] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    axis: 0,
                    expected: c,
                    found: t.shape().first().copied().unwrap_or(0),
                });
            }
        }
        if vol == 0 {
            return Err(TensorError::InvalidArgument {
                op: "instance_norm",
                reason: "empty spatial volume".into(),
            });
        }

        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); n * c];
        xhat.par_chunks_mut(vol)
            .zip(out.par_chunks_mut(vol))
            .zip(inv_std.par_iter_mut())
            .zip(x.data().par_chunks(vol))
            .enumerate()
            .for_each(|(s, (((xh, o), is), src))| {
                let mean = T::of(pair_sum(src, src, |v, _| v) / vol as f64);
                let var = pair_sum(src, src, |v, _| (v - mean) * (v - mean)) / vol as f64;
                let inv = T::of(1.0 / (var + eps.as_f64()).sqrt());
                *is = inv;
                let (ga, be) = (gv.data()[s % c], bv.data()[s % c]);
                for ((h, o), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                    *h = (v - mean) * inv;
                    *o = ga * *h + be;
                }
            });
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        Ok(self.graph().record(
            "instance_norm",
            out,
            &[self, gamma, beta],
            Box::new(move |dy, needs| {
                let dyd = dy.data();
                let mut dx = needs[0].then(|| vec![T::zero(); dyd.len()]);
                // per-slice (sum dy, sum dy * xhat)
                let sums: Vec<(f64, f64)> = dyd
                    .par_chunks(vol)
                    .zip(xhat.par_chunks(vol))
                    .map(|(g, xh)| (pair_sum(g, g, |a, _| a), pair_sum(g, xh, |a, b| a * b)))
                    .collect();
                if let Some(dx) = dx.as_mut() {
                    dx.par_chunks_mut(vol).enumerate().for_each(|(s, dxs)| {
                        let scale = gv.data()[s % c] * inv_std[s];
                        let (sg, sgx) =
                            (T::of(sums[s].0 / vol as f64), T::of(sums[s].1 / vol as f64));
                        let g = &dyd[s * vol..(s + 1) * vol];
                        let xh = &xhat[s * vol..(s + 1) * vol];
                        for ((o, &gv), &xv) in dxs.iter_mut().zip(g).zip(xh) {
                            *o = scale * (gv - sg - xv * sgx);
                        }
                    });
                }
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (s, (sg, sgx)) in sums.iter().enumerate() {
                    dgamma[s % c] += sgx;
                    dbeta[s % c] += sg;
                }
                let to_t = |v: Vec<f64>| {
                    Tensor::new([c], v.into_iter().map(T::of).collect()).expect("shape")
                };
                vec![
                    dx.map(|d| Tensor::new(shape, d).expect("dx shape")),
                    needs[1].then(|| to_t(dgamma)),
                    needs[2].then(|| to_t(dbeta)),
                ]
            }),
        ))
    }
}
