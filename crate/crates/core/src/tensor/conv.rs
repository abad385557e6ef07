//! 3D cross-correlation with zero padding.
//!
//! Two execution paths share one contract: a general im2col + GEMM path for
//! any element type, kernel, stride and padding, and a direct SIMD path for
//! stride-1 3x3x3 kernels when [`Real::direct_conv`] provides one.

use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::{gemm, MatMut, MatRef};
use super::graph::Var;
use super::kernels::{DirectConv, PadGeom, CHANNEL_BLOCK, ROW_BLOCK, TAPS};
use super::{Real, Result, Tensor, TensorError};

/// Stride and zero padding per spatial axis `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dParams {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dParams {
    fn default() -> Self {
        Self::new([1; 3], [0; 3])
    }
}

impl Conv3dParams {
    pub const fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Stride `s` with padding 1 on every axis, as used by 3x3x3 layers.
    pub const fn padded(s: usize) -> Self {
        Self::new([s; 3], [1; 3])
    }
}

/// `floor((input + 2 pad - kernel) / stride) + 1`, or `None` when the padded
/// input is smaller than the kernel or the stride is zero.
pub fn conv3d_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Elements of one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, p: Conv3dParams) -> Result<Self> {
        let [n, cin, d, h, wd] = match *x {
            [a, b, c, d, e] => [a, b, c, d, e],
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "conv3d input",
                    expected: 5,
                    found: x.len(),
                })
            }
        };
        let [cout, wcin, kd, kh, kw] = match *w {
            [a, b, c, d, e] => [a, b, c, d, e],
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "conv3d weight",
                    expected: 5,
                    found: w.len(),
                })
            }
        };
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                axis: 1,
                expected: cin,
                found: wcin,
            });
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d bias",
                    axis: 0,
                    expected: cout,
                    found: b.first().copied().unwrap_or(0),
                });
            }
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut out = [0; 3];
        for axis in 0..3 {
            if p.stride[axis] == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "conv3d",
                    reason: format!("stride on axis {} must be >= 1", axis + 2),
                });
            }
            out[axis] =
                conv3d_output_extent(input[axis], kernel[axis], p.stride[axis], p.padding[axis])
                    .ok_or(TensorError::ShapeMismatch {
                        op: "conv3d kernel larger than padded input",
                        axis: axis + 2,
                        expected: input[axis] + 2 * p.padding[axis],
                        found: kernel[axis],
                    })?;
        }
        Ok(Self {
            n,
            cin,
            cout,
            input,
            kernel,
            stride: p.stride,
            pad: p.padding,
            out,
        })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn k_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    fn direct_eligible(&self) -> bool {
        self.kernel == [3; 3] && self.stride == [1; 3] && self.pad.iter().all(|&p| p <= 2)
    }

    fn chunk_planes(&self) -> usize {
        (CHUNK_ELEMS / (self.k_len() * self.out_plane()).max(1)).clamp(1, self.out[0])
    }

    fn output_shape(&self) -> [usize; 5] {
        [self.n, self.cout, self.out[0], self.out[1], self.out[2]]
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

// ---------------------------------------------------------------------------
// im2col + GEMM path

/// Visits the column-matrix rows of output depths `od0..od1` one output row
/// at a time. For each row `f` receives the column offset `p` of its first
/// entry, and when the input row exists, the input index of output column 0
/// (possibly out of range) together with the half-open range of output
/// columns whose input column lies inside the volume.
fn for_each_col_row(
    g: &Geom,
    od0: usize,
    od1: usize,
    mut f: impl FnMut(usize, Option<(isize, usize, usize)>),
) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.out;
    let pc = (od1 - od0) * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let s = g.stride[2];
    let mut k = 0;
    for ci in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let shift = c as isize - g.pad[2] as isize;
                    let x_lo = if shift < 0 {
                        (-shift as usize).div_ceil(s)
                    } else {
                        0
                    };
                    let x_hi = if (w as isize) - shift <= 0 {
                        0
                    } else {
                        (((w as isize - 1 - shift) as usize) / s + 1).min(ow)
                    };
                    let x_lo = x_lo.min(x_hi);
                    let mut p = k * pc;
                    for od in od0..od1 {
                        let id = (od * g.stride[0] + a) as isize - g.pad[0] as isize;
                        for y in 0..oh {
                            let ih = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            let row_ok =
                                id >= 0 && (id as usize) < d && ih >= 0 && (ih as usize) < h;
                            let src = row_ok.then(|| {
                                let base = ((ci * d + id as usize) * h + ih as usize) * w;
                                (base as isize + shift, x_lo, x_hi)
                            });
                            f(p, src);
                            p += ow;
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, od0: usize, od1: usize, col: &mut [T]) {
    let (ow, s) = (g.out[2], g.stride[2]);
    for_each_col_row(g, od0, od1, |p, src| {
        let row = &mut col[p..p + ow];
        match src {
            None => row.fill(T::zero()),
            Some((start, lo, hi)) => {
                row[..lo].fill(T::zero());
                row[hi..].fill(T::zero());
                let first = (start + (lo * s) as isize) as usize;
                if s == 1 {
                    row[lo..hi].copy_from_slice(&x[first..first + hi - lo]);
                } else {
                    for (j, v) in row[lo..hi].iter_mut().enumerate() {
                        *v = x[first + j * s];
                    }
                }
            }
        }
    });
}

fn col2im_add<T: Real>(col: &[T], g: &Geom, od0: usize, od1: usize, dx: &mut [T]) {
    let s = g.stride[2];
    for_each_col_row(g, od0, od1, |p, src| {
        if let Some((start, lo, hi)) = src {
            let first = (start + (lo * s) as isize) as usize;
            for (j, &v) in col[p + lo..p + hi].iter().enumerate() {
                let t = first + j * s;
                dx[t] = dx[t] + v;
            }
        }
    });
}

fn forward_gemm<T: Real>(x: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (iv, ov, kl) = (g.in_vol(), g.out_vol(), g.k_len());
    let mut out = vec![T::zero(); g.n * g.cout * ov];
    let wm = MatRef::row_major(w, g.cout, kl);
    out.par_chunks_mut(g.cout * ov)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let xn = &x[ni * g.cin * iv..(ni + 1) * g.cin * iv];
            if g.pointwise() {
                gemm(
                    T::one(),
                    wm,
                    MatRef::row_major(xn, g.cin, iv),
                    T::zero(),
                    MatMut::row_major(out_n, g.cout, ov),
                );
                return;
            }
            let planes = g.chunk_planes();
            let plane = g.out_plane();
            let mut col = vec![T::zero(); kl * planes * plane];
            for od0 in (0..g.out[0]).step_by(planes) {
                let od1 = (od0 + planes).min(g.out[0]);
                let pc = (od1 - od0) * plane;
                im2col(xn, g, od0, od1, &mut col[..kl * pc]);
                gemm(
                    T::one(),
                    wm,
                    MatRef::row_major(&col[..kl * pc], kl, pc),
                    T::zero(),
                    MatMut::strided(&mut out_n[od0 * plane..], g.cout, pc, ov, 1),
                );
            }
        });
    out
}

/// Per-sample input gradients and summed weight gradients.
fn backward_gemm<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Geom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (iv, ov, kl) = (g.in_vol(), g.out_vol(), g.k_len());
    let wm = MatRef::row_major(w, g.cout, kl);
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let xn = &x[ni * g.cin * iv..(ni + 1) * g.cin * iv];
            let dyn_ = &dy[ni * g.cout * ov..(ni + 1) * g.cout * ov];
            let mut dx = if need_x {
                vec![T::zero(); g.cin * iv]
            } else {
                Vec::new()
            };
            let mut dw = if need_w {
                vec![T::zero(); g.cout * kl]
            } else {
                Vec::new()
            };
            if g.pointwise() {
                let dym = MatRef::row_major(dyn_, g.cout, ov);
                if need_w {
                    let xm = MatRef::row_major(xn, g.cin, iv);
                    gemm(
                        T::one(),
                        dym,
                        xm.t(),
                        T::zero(),
                        MatMut::row_major(&mut dw, g.cout, kl),
                    );
                }
                if need_x {
                    gemm(
                        T::one(),
                        wm.t(),
                        dym,
                        T::zero(),
                        MatMut::row_major(&mut dx, g.cin, iv),
                    );
                }
                return (dx, dw);
            }
            let planes = g.chunk_planes();
            let plane = g.out_plane();
            let mut col = vec![T::zero(); kl * planes * plane];
            for od0 in (0..g.out[0]).step_by(planes) {
                let od1 = (od0 + planes).min(g.out[0]);
                let pc = (od1 - od0) * plane;
                let dym = MatRef::strided(&dyn_[od0 * plane..], g.cout, pc, ov, 1);
                let col = &mut col[..kl * pc];
                if need_w {
                    im2col(xn, g, od0, od1, col);
                    let cm = MatRef::row_major(&*col, kl, pc);
                    gemm(
                        T::one(),
                        dym,
                        cm.t(),
                        T::one(),
                        MatMut::row_major(&mut dw, g.cout, kl),
                    );
                }
                if need_x {
                    gemm(
                        T::one(),
                        wm.t(),
                        dym,
                        T::zero(),
                        MatMut::row_major(col, kl, pc),
                    );
                    col2im_add(col, g, od0, od1, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();
    reduce_samples(per_sample, need_x, need_w, g.cout * kl)
}

fn reduce_samples<T: Real>(
    parts: Vec<(Vec<T>, Vec<T>)>,
    need_x: bool,
    need_w: bool,
    w_len: usize,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_x.then(Vec::new);
    let mut dw = need_w.then(|| vec![T::zero(); w_len]);
    for (px, pw) in parts {
        if let Some(dx) = dx.as_mut() {
            dx.extend(px);
        }
        if let Some(dw) = dw.as_mut() {
            for (a, b) in dw.iter_mut().zip(pw) {
                *a = *a + b;
            }
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// direct path

/// Zero-pads one sample `[c][d][h][w]` into `[c][dp][hp][wp]` with leading
/// offsets `pad`.
fn pad_sample<T: Real>(
    src: &[T],
    c: usize,
    dims: [usize; 3],
    pad: [usize; 3],
    padded: [usize; 3],
    dst: &mut [T],
) {
    let [d, h, w] = dims;
    let [dp, hp, wp] = padded;
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ci * d + z) * h + y) * w;
                let t = ((ci * dp + z + pad[0]) * hp + y + pad[1]) * wp + pad[2];
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
}

/// Packs `[cout][cin][27]` weights into blocks `[block][cin][27][CHANNEL_BLOCK]`.
/// `flip` packs the transposed, spatially flipped kernel used for input gradients.
fn pack_weights<T: Real>(w: &[T], cout: usize, cin: usize, flip: bool) -> Vec<T> {
    let (outs, ins) = if flip { (cin, cout) } else { (cout, cin) };
    let blocks = outs.div_ceil(CHANNEL_BLOCK);
    let mut packed = vec![T::zero(); blocks * ins * TAPS * CHANNEL_BLOCK];
    for o in 0..outs {
        let (blk, lane) = (o / CHANNEL_BLOCK, o % CHANNEL_BLOCK);
        for i in 0..ins {
            for t in 0..TAPS {
                let v = if flip {
                    w[(i * cin + o) * TAPS + (TAPS - 1 - t)]
                } else {
                    w[(o * cin + i) * TAPS + t]
                };
                packed[((blk * ins + i) * TAPS + t) * CHANNEL_BLOCK + lane] = v;
            }
        }
    }
    packed
}

/// Runs the direct forward kernel on padded samples and crops the result to
/// `[n][outs][od][oh][ow]`.
fn run_direct_forward<T: Real>(
    kern: DirectConv<T>,
    padded: &[T],
    pg: &PadGeom,
    n: usize,
    outs: usize,
    ow: usize,
    packed: &[T],
) -> Vec<T> {
    let blocks = outs.div_ceil(CHANNEL_BLOCK);
    let in_len = pg.input_len();
    let wblk = pg.cin * TAPS * CHANNEL_BLOCK;
    let ovol = pg.od * pg.oh * ow;
    if pg.owr == ow && outs % CHANNEL_BLOCK == 0 {
        // Kernel blocks already have the output layout; write in place.
        let mut out = vec![T::zero(); n * outs * ovol];
        out.par_chunks_mut(pg.out_block_len())
            .enumerate()
            .for_each(|(task, block)| {
                let (ni, blk) = (task / blocks, task % blocks);
                (kern.forward_block)(
                    &padded[ni * in_len..(ni + 1) * in_len],
                    pg,
                    &packed[blk * wblk..(blk + 1) * wblk],
                    block,
                );
            });
        return out;
    }
    let results: Vec<Vec<T>> = (0..n * blocks)
        .into_par_iter()
        .map(|task| {
            let (ni, blk) = (task / blocks, task % blocks);
            let mut out = vec![T::zero(); pg.out_block_len()];
            (kern.forward_block)(
                &padded[ni * in_len..(ni + 1) * in_len],
                pg,
                &packed[blk * wblk..(blk + 1) * wblk],
                &mut out,
            );
            out
        })
        .collect();
    let mut out = vec![T::zero(); n * outs * ovol];
    for (task, block) in results.iter().enumerate() {
        let (ni, blk) = (task / blocks, task % blocks);
        for lane in 0..CHANNEL_BLOCK {
            let c = blk * CHANNEL_BLOCK + lane;
            if c >= outs {
                break;
            }
            let dst = &mut out[(ni * outs + c) * ovol..(ni * outs + c + 1) * ovol];
            let src = &block[lane * pg.od * pg.oh * pg.owr..];
            for r in 0..pg.od * pg.oh {
                dst[r * ow..(r + 1) * ow].copy_from_slice(&src[r * pg.owr..r * pg.owr + ow]);
            }
        }
    }
    out
}

struct DirectSaved<T> {
    padded: Vec<T>,
    pg: PadGeom,
}

fn forward_direct<T: Real>(
    kern: DirectConv<T>,
    x: &[T],
    w: &[T],
    g: &Geom,
) -> (Vec<T>, DirectSaved<T>) {
    let owr = round_up(g.out[2], ROW_BLOCK);
    let pg = PadGeom {
        cin: g.cin,
        dp: g.input[0] + 2 * g.pad[0],
        hp: g.input[1] + 2 * g.pad[1],
        wp: owr + 2,
        od: g.out[0],
        oh: g.out[1],
        owr,
    };
    let in_len = pg.input_len();
    let mut padded = vec![T::zero(); g.n * in_len];
    let iv = g.in_vol();
    padded
        .par_chunks_mut(in_len)
        .enumerate()
        .for_each(|(ni, dst)| {
            pad_sample(
                &x[ni * g.cin * iv..(ni + 1) * g.cin * iv],
                g.cin,
                g.input,
                g.pad,
                [pg.dp, pg.hp, pg.wp],
                dst,
            );
        });
    let packed = pack_weights(w, g.cout, g.cin, false);
    let out = run_direct_forward(kern, &padded, &pg, g.n, g.cout, g.out[2], &packed);
    (out, DirectSaved { padded, pg })
}

fn backward_direct<T: Real>(
    kern: DirectConv<T>,
    saved: &DirectSaved<T>,
    w: &[T],
    dy: &[T],
    g: &Geom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ov = g.out_vol();
    let dx = need_x.then(|| {
        // Input gradient = correlation of the output gradient, padded by
        // (2 - pad), with the flipped, transposed kernel.
        let q = g.pad.map(|p| 2 - p);
        let owr = round_up(g.input[2], ROW_BLOCK);
        let pg = PadGeom {
            cin: g.cout,
            dp: g.out[0] + 2 * q[0],
            hp: g.out[1] + 2 * q[1],
            wp: owr + 2,
            od: g.input[0],
            oh: g.input[1],
            owr,
        };
        let in_len = pg.input_len();
        let mut padded = vec![T::zero(); g.n * in_len];
        padded
            .par_chunks_mut(in_len)
            .enumerate()
            .for_each(|(ni, dst)| {
                pad_sample(
                    &dy[ni * g.cout * ov..(ni + 1) * g.cout * ov],
                    g.cout,
                    g.out,
                    q,
                    [pg.dp, pg.hp, pg.wp],
                    dst,
                );
            });
        let packed = pack_weights(w, g.cout, g.cin, true);
        run_direct_forward(kern, &padded, &pg, g.n, g.cin, g.input[2], &packed)
    });
    let dw = need_w.then(|| {
        let pg = saved.pg;
        let blocks = g.cout.div_ceil(CHANNEL_BLOCK);
        let row_len = pg.od * pg.oh;
        let blk_len = pg.out_block_len();
        // Output-gradient rows padded with zeros to the kernel row length.
        let mut dyp = vec![T::zero(); g.n * blocks * blk_len];
        for ni in 0..g.n {
            for co in 0..g.cout {
                let src = &dy[(ni * g.cout + co) * ov..(ni * g.cout + co + 1) * ov];
                let dst = &mut dyp[(ni * blocks * CHANNEL_BLOCK + co) * row_len * pg.owr..];
                for r in 0..row_len {
                    dst[r * pg.owr..r * pg.owr + g.out[2]]
                        .copy_from_slice(&src[r * g.out[2]..(r + 1) * g.out[2]]);
                }
            }
        }
        let in_len = pg.input_len();
        let acc_len = CHANNEL_BLOCK * g.cin * TAPS;
        let accs: Vec<Vec<T>> = (0..blocks)
            .into_par_iter()
            .map(|blk| {
                let mut acc = vec![T::zero(); acc_len];
                for ni in 0..g.n {
                    let off = (ni * blocks + blk) * blk_len;
                    (kern.weight_grad_block)(
                        &saved.padded[ni * in_len..(ni + 1) * in_len],
                        &pg,
                        &dyp[off..off + blk_len],
                        &mut acc,
                    );
                }
                acc
            })
            .collect();
        let mut dw = vec![T::zero(); g.cout * g.cin * TAPS];
        for (blk, acc) in accs.iter().enumerate() {
            for lane in 0..CHANNEL_BLOCK {
                let co = blk * CHANNEL_BLOCK + lane;
                if co < g.cout {
                    let n = g.cin * TAPS;
                    dw[co * n..(co + 1) * n].copy_from_slice(&acc[lane * n..(lane + 1) * n]);
                }
            }
        }
        dw
    });
    (dx, dw)
}

// ---------------------------------------------------------------------------

fn add_bias<T: Real>(out: &mut [T], bias: &[T], cout: usize, ov: usize) {
    for (i, chunk) in out.chunks_mut(ov).enumerate() {
        let b = bias[i % cout];
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], cout: usize, ov: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for (i, chunk) in dy.chunks(ov).enumerate() {
        db[i % cout] = db[i % cout] + chunk.iter().copied().sum::<T>();
    }
    db
}

enum Saved<T> {
    Gemm(Arc<Tensor<T>>),
    Direct(DirectSaved<T>),
}

/// Convolution of plain tensors, outside any graph.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv3dParams,
) -> Result<Tensor<T>> {
    conv3d_values(x, w, bias, params, true)
}

/// `allow_direct = false` forces the im2col path.
pub(crate) fn conv3d_values<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv3dParams,
    allow_direct: bool,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), w.shape(), bias.map(|b| b.shape()), params)?;
    let (out, _) = forward_any(x, w, bias, &g, allow_direct);
    Tensor::new(g.output_shape(), out)
}

fn forward_any<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Geom,
    allow_direct: bool,
) -> (Vec<T>, Option<DirectSaved<T>>) {
    let direct = T::direct_conv().filter(|_| allow_direct && g.direct_eligible());
    let (mut out, saved) = match direct {
        Some(kern) => {
            let (out, saved) = forward_direct(kern, x.data(), w.data(), g);
            (out, Some(saved))
        }
        None => (forward_gemm(x.data(), w.data(), g), None),
    };
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.cout, g.out_vol());
    }
    (out, saved)
}

/// Gradients `(dx, dw, db)` of a convolution on plain tensors.
#[cfg(test)]
#[allow(clippy::type_complexity)]
pub(crate) fn conv3d_grads<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    params: Conv3dParams,
    allow_direct: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Geom::new(x.shape(), w.shape(), None, params)?;
    let direct = T::direct_conv().filter(|_| allow_direct && g.direct_eligible());
    let (dx, dw) = match direct {
        Some(kern) => {
            let (_, saved) = forward_direct(kern, x.data(), w.data(), &g);
            backward_direct(kern, &saved, w.data(), dy.data(), &g, true, true)
        }
        None => backward_gemm(x.data(), w.data(), dy.data(), &g, true, true),
    };
    Ok((
        Tensor::new(x.shape().to_vec(), dx.expect("dx"))?,
        Tensor::new(w.shape().to_vec(), dw.expect("dw"))?,
        Tensor::new([g.cout], bias_grad(dy.data(), g.cout, g.out_vol()))?,
    ))
}

impl<'g, T: Real> Var<'g, T> {
    /// 3D cross-correlation of `self` `[N, Cin, D, H, W]` with `weight`
    /// `[Cout, Cin, kd, kh, kw]`, plus an optional per-channel bias.
    pub fn conv3d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        params: Conv3dParams,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let g = Geom::new(
            x.shape(),
            w.shape(),
            b.as_deref().map(|b| b.shape()),
            params,
        )?;
        let (out, direct) = forward_any(&x, &w, b.as_deref(), &g, true);
        let out = Tensor::new(g.output_shape(), out)?;
        let x_shape = x.shape().to_vec();
        let saved = match direct {
            Some(d) => Saved::Direct(d),
            None => Saved::Gemm(x),
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph().record(
            "conv3d",
            out,
            &inputs,
            Box::new(move |dy, needs| {
                let (need_x, need_w) = (needs[0], needs[1]);
                let (dx, dw) = match (&saved, T::direct_conv()) {
                    (Saved::Direct(s), Some(kern)) => {
                        backward_direct(kern, s, w.data(), dy.data(), &g, need_x, need_w)
                    }
                    (Saved::Gemm(x), _) => {
                        backward_gemm(x.data(), w.data(), dy.data(), &g, need_x, need_w)
                    }
                    (Saved::Direct(_), None) => unreachable!("direct kernels disappeared"),
                };
                let mut grads = vec![
                    dx.map(|d| Tensor::new(x_shape, d).expect("dx shape")),
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("dw shape")),
                ];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        Tensor::new([g.cout], bias_grad(dy.data(), g.cout, g.out_vol()))
                            .expect("db shape")
                    }));
                }
                grads
            }),
        ))
    }
}
