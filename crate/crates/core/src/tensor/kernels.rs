//! SIMD inner loops for stride-1 3x3x3 convolution.
//!
//! Both kernels work on a zero-padded input laid out `[cin][dp][hp][wp]` and
//! on output rows padded to a multiple of [`ROW_BLOCK`] lanes, so the hot loops
//! have no bounds tests. Output channels are processed in blocks of
//! [`CHANNEL_BLOCK`].

/// Output channels per kernel invocation.
pub const CHANNEL_BLOCK: usize = 4;
/// Output row lengths are padded to a multiple of this.
pub const ROW_BLOCK: usize = 16;
/// Taps of a 3x3x3 kernel.
pub const TAPS: usize = 27;

/// Geometry shared by the direct kernels.
#[derive(Clone, Copy, Debug)]
pub struct PadGeom {
    pub cin: usize,
    /// Padded input extents.
    pub dp: usize,
    pub hp: usize,
    pub wp: usize,
    /// Output extents; `owr` is the padded row length.
    pub od: usize,
    pub oh: usize,
    pub owr: usize,
}

impl PadGeom {
    pub fn input_len(&self) -> usize {
        self.cin * self.dp * self.hp * self.wp
    }

    pub fn out_block_len(&self) -> usize {
        CHANNEL_BLOCK * self.od * self.oh * self.owr
    }

    fn valid(&self) -> bool {
        self.owr % ROW_BLOCK == 0
            && self.dp >= self.od + 2
            && self.hp >= self.oh + 2
            && self.wp >= self.owr + 2
    }
}

/// Function table for one element type.
pub struct DirectConv<T> {
    /// Writes `CHANNEL_BLOCK` output channels of one sample.
    /// Weights are packed `[cin][27][CHANNEL_BLOCK]`.
    pub forward_block: fn(&[T], &PadGeom, &[T], &mut [T]),
    /// Accumulates weight gradients `[CHANNEL_BLOCK][cin][27]` for one sample
    /// from output-gradient rows laid out like the forward output block. Row
    /// padding lanes must be zero.
    pub weight_grad_block: fn(&[T], &PadGeom, &[T], &mut [T]),
}

impl<T> Clone for DirectConv<T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for DirectConv<T> {}

#[cfg(target_arch = "x86_64")]
pub(crate) fn f32_direct_conv() -> Option<DirectConv<f32>> {
    avx512_table().or_else(avx2_table)
}

#[cfg(target_arch = "x86_64")]
fn avx2_table() -> Option<DirectConv<f32>> {
    (is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")).then_some(DirectConv {
        forward_block: avx2::forward_block,
        weight_grad_block: avx2::weight_grad_block,
    })
}

#[cfg(target_arch = "x86_64")]
fn avx512_table() -> Option<DirectConv<f32>> {
    is_x86_feature_detected!("avx512f").then_some(DirectConv {
        forward_block: avx512::forward_block,
        weight_grad_block: avx512::weight_grad_block,
    })
}

#[cfg(not(target_arch = "x86_64"))]
pub(crate) fn f32_direct_conv() -> Option<DirectConv<f32>> {
    None
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::{PadGeom, CHANNEL_BLOCK, TAPS};
    use std::arch::x86_64::*;

    pub fn forward_block(inp: &[f32], g: &PadGeom, weights: &[f32], out: &mut [f32]) {
        assert!(g.valid());
        assert!(inp.len() >= g.input_len());
        assert_eq!(weights.len(), g.cin * TAPS * CHANNEL_BLOCK);
        assert_eq!(out.len(), g.out_block_len());
        // SAFETY: the caller-side dispatch checked avx2+fma; extents checked above.
        unsafe { forward_impl(inp, g, weights, out) }
    }

    pub fn weight_grad_block(inp: &[f32], g: &PadGeom, dout: &[f32], acc: &mut [f32]) {
        assert!(g.valid());
        assert!(inp.len() >= g.input_len());
        assert_eq!(dout.len(), g.out_block_len());
        assert_eq!(acc.len(), CHANNEL_BLOCK * g.cin * TAPS);
        // SAFETY: as above.
        unsafe { weight_grad_impl(inp, g, dout, acc) }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn forward_impl(inp: &[f32], g: &PadGeom, weights: &[f32], out: &mut [f32]) {
        let plane = g.hp * g.wp;
        let cvol = g.dp * plane;
        let ovol = g.od * g.oh * g.owr;
        let ip = inp.as_ptr();
        let op = out.as_mut_ptr();
        for od in 0..g.od {
            for oh in 0..g.oh {
                let mut j0 = 0;
                while j0 < g.owr {
                    let mut a0 = _mm256_setzero_ps();
                    let mut a1 = _mm256_setzero_ps();
                    let mut b0 = _mm256_setzero_ps();
                    let mut b1 = _mm256_setzero_ps();
                    let mut c0 = _mm256_setzero_ps();
                    let mut c1 = _mm256_setzero_ps();
                    let mut e0 = _mm256_setzero_ps();
                    let mut e1 = _mm256_setzero_ps();
                    let mut wt = weights.as_ptr();
                    for ci in 0..g.cin {
                        for kd in 0..3 {
                            for kh in 0..3 {
                                let row =
                                    ip.add(ci * cvol + (od + kd) * plane + (oh + kh) * g.wp + j0);
                                for kw in 0..3 {
                                    let r0 = _mm256_loadu_ps(row.add(kw));
                                    let r1 = _mm256_loadu_ps(row.add(kw + 8));
                                    let w0 = _mm256_broadcast_ss(&*wt);
                                    a0 = _mm256_fmadd_ps(w0, r0, a0);
                                    a1 = _mm256_fmadd_ps(w0, r1, a1);
                                    let w1 = _mm256_broadcast_ss(&*wt.add(1));
                                    b0 = _mm256_fmadd_ps(w1, r0, b0);
                                    b1 = _mm256_fmadd_ps(w1, r1, b1);
                                    let w2 = _mm256_broadcast_ss(&*wt.add(2));
                                    c0 = _mm256_fmadd_ps(w2, r0, c0);
                                    c1 = _mm256_fmadd_ps(w2, r1, c1);
                                    let w3 = _mm256_broadcast_ss(&*wt.add(3));
                                    e0 = _mm256_fmadd_ps(w3, r0, e0);
                                    e1 = _mm256_fmadd_ps(w3, r1, e1);
                                    wt = wt.add(CHANNEL_BLOCK);
                                }
                            }
                        }
                    }
                    let o = op.add((od * g.oh + oh) * g.owr + j0);
                    _mm256_storeu_ps(o, a0);
                    _mm256_storeu_ps(o.add(8), a1);
                    _mm256_storeu_ps(o.add(ovol), b0);
                    _mm256_storeu_ps(o.add(ovol + 8), b1);
                    _mm256_storeu_ps(o.add(2 * ovol), c0);
                    _mm256_storeu_ps(o.add(2 * ovol + 8), c1);
                    _mm256_storeu_ps(o.add(3 * ovol), e0);
                    _mm256_storeu_ps(o.add(3 * ovol + 8), e1);
                    j0 += 16;
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn weight_grad_impl(inp: &[f32], g: &PadGeom, dout: &[f32], acc: &mut [f32]) {
        let plane = g.hp * g.wp;
        let cvol = g.dp * plane;
        let ovol = g.od * g.oh * g.owr;
        let ip = inp.as_ptr();
        let dp = dout.as_ptr();
        for od in 0..g.od {
            for ci in 0..g.cin {
                for kd in 0..3 {
                    for kh in 0..3 {
                        // s[c][kw]
                        let mut s = [_mm256_setzero_ps(); 12];
                        for oh in 0..g.oh {
                            let drow = dp.add((od * g.oh + oh) * g.owr);
                            let irow = ip.add(ci * cvol + (od + kd) * plane + (oh + kh) * g.wp);
                            let mut j = 0;
                            while j < g.owr {
                                let d0 = _mm256_loadu_ps(drow.add(j));
                                let d1 = _mm256_loadu_ps(drow.add(ovol + j));
                                let d2 = _mm256_loadu_ps(drow.add(2 * ovol + j));
                                let d3 = _mm256_loadu_ps(drow.add(3 * ovol + j));
                                let x0 = _mm256_loadu_ps(irow.add(j));
                                let x1 = _mm256_loadu_ps(irow.add(j + 1));
                                let x2 = _mm256_loadu_ps(irow.add(j + 2));
                                s[0] = _mm256_fmadd_ps(d0, x0, s[0]);
                                s[1] = _mm256_fmadd_ps(d0, x1, s[1]);
                                s[2] = _mm256_fmadd_ps(d0, x2, s[2]);
                                s[3] = _mm256_fmadd_ps(d1, x0, s[3]);
                                s[4] = _mm256_fmadd_ps(d1, x1, s[4]);
                                s[5] = _mm256_fmadd_ps(d1, x2, s[5]);
                                s[6] = _mm256_fmadd_ps(d2, x0, s[6]);
                                s[7] = _mm256_fmadd_ps(d2, x1, s[7]);
                                s[8] = _mm256_fmadd_ps(d2, x2, s[8]);
                                s[9] = _mm256_fmadd_ps(d3, x0, s[9]);
                                s[10] = _mm256_fmadd_ps(d3, x1, s[10]);
                                s[11] = _mm256_fmadd_ps(d3, x2, s[11]);
                                j += 8;
                            }
                        }
                        for c in 0..CHANNEL_BLOCK {
                            let base = (c * g.cin + ci) * TAPS + kd * 9 + kh * 3;
                            for kw in 0..3 {
                                acc[base + kw] += hsum(s[c * 3 + kw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 16-lane variants. The forward kernel covers two output rows per pass so
/// eight accumulators stay in flight.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{PadGeom, CHANNEL_BLOCK, TAPS};
    use std::arch::x86_64::*;

    pub fn forward_block(inp: &[f32], g: &PadGeom, weights: &[f32], out: &mut [f32]) {
        assert!(g.valid());
        assert!(inp.len() >= g.input_len());
        assert_eq!(weights.len(), g.cin * TAPS * CHANNEL_BLOCK);
        assert_eq!(out.len(), g.out_block_len());
        // SAFETY: the caller-side dispatch checked avx512f; extents checked above.
        unsafe {
            for od in 0..g.od {
                let mut oh = 0;
                while oh + 2 <= g.oh {
                    rows::<2>(inp, g, weights, out, od, oh);
                    oh += 2;
                }
                if oh < g.oh {
                    rows::<1>(inp, g, weights, out, od, oh);
                }
            }
        }
    }

    pub fn weight_grad_block(inp: &[f32], g: &PadGeom, dout: &[f32], acc: &mut [f32]) {
        assert!(g.valid());
        assert!(inp.len() >= g.input_len());
        assert_eq!(dout.len(), g.out_block_len());
        assert_eq!(acc.len(), CHANNEL_BLOCK * g.cin * TAPS);
        // SAFETY: as above.
        unsafe { weight_grad_impl(inp, g, dout, acc) }
    }

    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn rows<const R: usize>(
        inp: &[f32],
        g: &PadGeom,
        weights: &[f32],
        out: &mut [f32],
        od: usize,
        oh: usize,
    ) {
        let plane = g.hp * g.wp;
        let cvol = g.dp * plane;
        let ovol = g.od * g.oh * g.owr;
        let ip = inp.as_ptr();
        let op = out.as_mut_ptr();
        let mut j0 = 0;
        while j0 < g.owr {
            let mut acc = [[_mm512_setzero_ps(); R]; CHANNEL_BLOCK];
            let mut wt = weights.as_ptr();
            for ci in 0..g.cin {
                for kd in 0..3 {
                    for kh in 0..3 {
                        let row = ip.add(ci * cvol + (od + kd) * plane + (oh + kh) * g.wp + j0);
                        for kw in 0..3 {
                            let mut x = [_mm512_setzero_ps(); R];
                            for (r, xr) in x.iter_mut().enumerate() {
                                *xr = _mm512_loadu_ps(row.add(r * g.wp + kw));
                            }
                            for (c, ac) in acc.iter_mut().enumerate() {
                                let w = _mm512_set1_ps(*wt.add(c));
                                for r in 0..R {
                                    ac[r] = _mm512_fmadd_ps(w, x[r], ac[r]);
                                }
                            }
                            wt = wt.add(CHANNEL_BLOCK);
                        }
                    }
                }
            }
            for (c, ac) in acc.iter().enumerate() {
                for (r, a) in ac.iter().enumerate() {
                    _mm512_storeu_ps(op.add(c * ovol + (od * g.oh + oh + r) * g.owr + j0), *a);
                }
            }
            j0 += 16;
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn weight_grad_impl(inp: &[f32], g: &PadGeom, dout: &[f32], acc: &mut [f32]) {
        let plane = g.hp * g.wp;
        let cvol = g.dp * plane;
        let ovol = g.od * g.oh * g.owr;
        let ip = inp.as_ptr();
        let dp = dout.as_ptr();
        for od in 0..g.od {
            for ci in 0..g.cin {
                for kd in 0..3 {
                    for kh in 0..3 {
                        // s[c][kw]
                        let mut s = [[_mm512_setzero_ps(); 3]; CHANNEL_BLOCK];
                        for oh in 0..g.oh {
                            let drow = dp.add((od * g.oh + oh) * g.owr);
                            let irow = ip.add(ci * cvol + (od + kd) * plane + (oh + kh) * g.wp);
                            let mut j = 0;
                            while j < g.owr {
                                let x = [0, 1, 2].map(|kw| _mm512_loadu_ps(irow.add(j + kw)));
                                for (c, sc) in s.iter_mut().enumerate() {
                                    let d = _mm512_loadu_ps(drow.add(c * ovol + j));
                                    for kw in 0..3 {
                                        sc[kw] = _mm512_fmadd_ps(d, x[kw], sc[kw]);
                                    }
                                }
                                j += 16;
                            }
                        }
                        for (c, sc) in s.iter().enumerate() {
                            let base = (c * g.cin + ci) * TAPS + kd * 9 + kh * 3;
                            for kw in 0..3 {
                                acc[base + kw] += _mm512_reduce_add_ps(sc[kw]);
                            }
                        }
                    }
                }
            }
        }
    }
}
