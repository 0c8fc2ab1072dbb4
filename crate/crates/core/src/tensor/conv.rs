//! 2-D convolution (cross-correlation, zero padding), its adjoints, and
//! nearest-neighbour 2x upsampling.
//!
//! Convolutions are lowered to GEMM through im2col. Samples are processed in
//! chunks so the column buffer stays bounded; within a chunk all samples
//! share one matrix product.

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Column-buffer budget per chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 20;

/// Output extent of a convolution along one axis.
///
/// With `exact`, extents that leave a partial stride step are rejected;
/// otherwise the trailing positions a step cannot reach are dropped.
pub fn conv_output_extent(extent: usize, k: usize, stride: usize, pad: usize, exact: bool) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("convolution stride must be positive"));
    }
    if k == 0 {
        return Err(Error::dim("kernel extent must be positive"));
    }
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::dim(format!("kernel {k} larger than padded extent {padded}")));
    }
    if exact && !(padded - k).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "non-integral output extent: ({extent} + 2*{pad} - {k}) / {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Sliding-window geometry shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    /// Input row/column read by output position 0 at tap 0 is `-pad_y` / `-pad_x`.
    pad_y: isize,
    pad_x: isize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad_x;
        // ox·s + off ≥ 0 and ox·s + off ≤ w − 1.
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if self.w as isize - 1 - off < 0 {
            0
        } else {
            (self.w as isize - 1 - off) / s + 1
        };
        let lo = (lo as usize).min(self.ow);
        (lo, (hi as usize).clamp(lo, self.ow))
    }

    fn chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.rows() * self.positions()).max(1)).max(1)
    }

    /// cols[(c,ky,kx)][(b-s0, oy, ox)] = input[b, c, oy*stride+ky-pad_y, ox*stride+kx-pad_x].
    fn im2col(&self, input: &[f64], s0: usize, s1: usize, cols: &mut [f64]) {
        let ncols = (s1 - s0) * self.positions();
        let plane = self.h * self.w;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for (bi, b) in (s0..s1).enumerate() {
                        let src = &input[(b * self.c + c) * plane..(b * self.c + c + 1) * plane];
                        let dst = &mut dst[bi * self.positions()..(bi + 1) * self.positions()];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad_y;
                            let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                            if iy < 0 || iy >= self.h as isize {
                                drow.fill(0.0);
                                continue;
                            }
                            let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                            let (lo, hi) = self.valid_columns(kx);
                            drow[..lo].fill(0.0);
                            drow[hi..].fill(0.0);
                            let first = (lo * self.stride + kx) as isize - self.pad_x;
                            if self.stride == 1 {
                                drow[lo..hi].copy_from_slice(&srow[first as usize..first as usize + hi - lo]);
                            } else {
                                for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                    *d = srow[first as usize + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: accumulates columns back into `grad_in`.
    fn col2im(&self, cols: &[f64], s0: usize, s1: usize, grad_in: &mut [f64]) {
        let ncols = (s1 - s0) * self.positions();
        let plane = self.h * self.w;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for (bi, b) in (s0..s1).enumerate() {
                        let dst = &mut grad_in[(b * self.c + c) * plane..(b * self.c + c + 1) * plane];
                        let src = &src[bi * self.positions()..(bi + 1) * self.positions()];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad_y;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                            let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                            let (lo, hi) = self.valid_columns(kx);
                            let first = ((lo * self.stride + kx) as isize - self.pad_x) as usize;
                            if self.stride == 1 {
                                for (d, &g) in drow[first..first + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                    *d += g;
                                }
                            } else {
                                for (j, &g) in srow[lo..hi].iter().enumerate() {
                                    drow[first + j * self.stride] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies a chunk of a B×O×P tensor (P positions of one output grid) into an
/// O×(chunk·P) matrix, optionally through a position map into a larger grid.
fn gather_chunk(grad: &[f64], o: usize, plane: usize, positions: &[usize], s0: usize, s1: usize, dst: &mut [f64]) {
    let p = positions.len();
    let ncols = (s1 - s0) * p;
    for oc in 0..o {
        for (bi, b) in (s0..s1).enumerate() {
            let src = &grad[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            let d = &mut dst[oc * ncols + bi * p..oc * ncols + (bi + 1) * p];
            for (dv, &pos) in d.iter_mut().zip(positions) {
                *dv = src[pos];
            }
        }
    }
}

fn scatter_chunk(src: &[f64], o: usize, plane: usize, positions: &[usize], s0: usize, s1: usize, out: &mut [f64]) {
    let p = positions.len();
    let ncols = (s1 - s0) * p;
    for oc in 0..o {
        for (bi, b) in (s0..s1).enumerate() {
            let dst = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            let s = &src[oc * ncols + bi * p..oc * ncols + (bi + 1) * p];
            for (&v, &pos) in s.iter().zip(positions) {
                dst[pos] = v;
            }
        }
    }
}

struct ConvPlan {
    b: usize,
    o: usize,
    win: Window,
}

fn conv_plan(
    input_dims: &[usize],
    kernel_dims: &[usize],
    stride: usize,
    pad: usize,
    exact: bool,
    op: &str,
) -> Result<ConvPlan> {
    if input_dims.len() != 4 || kernel_dims.len() != 4 {
        return Err(Error::dim(format!(
            "{op}: expected 4-D input and kernels, got {input_dims:?} and {kernel_dims:?}"
        )));
    }
    let [b, c, h, w] = [input_dims[0], input_dims[1], input_dims[2], input_dims[3]];
    let [o, kc, kh, kw] = [kernel_dims[0], kernel_dims[1], kernel_dims[2], kernel_dims[3]];
    if kc != c {
        return Err(Error::dim(format!("{op}: kernels expect {kc} channels, input has {c}")));
    }
    if kh != kw {
        return Err(Error::dim(format!("{op}: kernels must be square")));
    }
    let oh = conv_output_extent(h, kh, stride, pad, exact)?;
    let ow = conv_output_extent(w, kw, stride, pad, exact)?;
    Ok(ConvPlan {
        b,
        o,
        win: Window {
            c,
            h,
            w,
            k: kh,
            stride,
            pad_y: pad as isize,
            pad_x: pad as isize,
            oh,
            ow,
        },
    })
}

fn conv_forward(plan: &ConvPlan, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let win = &plan.win;
    let positions: Vec<usize> = (0..win.positions()).collect();
    let mut out = vec![0.0; plan.b * plan.o * win.positions()];
    let chunk = win.chunk();
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    let mut s0 = 0;
    while s0 < plan.b {
        let s1 = (s0 + chunk).min(plan.b);
        let ncols = (s1 - s0) * win.positions();
        cols.resize(win.rows() * ncols, 0.0);
        tmp.resize(plan.o * ncols, 0.0);
        win.im2col(input, s0, s1, &mut cols);
        gemm(plan.o, win.rows(), ncols, kernels, false, &cols, false, 0.0, &mut tmp);
        scatter_chunk(&tmp, plan.o, win.positions(), &positions, s0, s1, &mut out);
        s0 = s1;
    }
    out
}

fn finish(dims: &[usize], data: Vec<f64>, op: &str) -> Result<Tensor> {
    let t = Tensor::from_parts(dims, data);
    t.ensure_finite(op)?;
    Ok(t)
}

/// Cross-correlation of a B×C×H×W batch with O×C×K×K kernels.
///
/// The output extent `(H + 2·pad − K) / stride + 1` must be integral.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let plan = conv_plan(input.dims(), kernels.dims(), stride, pad, true, "conv2d")?;
    let out = conv_forward(&plan, input.data(), kernels.data());
    finish(&[plan.b, plan.o, plan.win.oh, plan.win.ow], out, "conv2d")
}

/// Like [`conv2d`] but with floor extents: trailing input rows/columns that a
/// full stride step cannot reach are ignored.
pub fn conv2d_trimmed(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let plan = conv_plan(input.dims(), kernels.dims(), stride, pad, false, "conv2d")?;
    let out = conv_forward(&plan, input.data(), kernels.data());
    finish(&[plan.b, plan.o, plan.win.oh, plan.win.ow], out, "conv2d")
}

fn check_grad_out(plan: &ConvPlan, grad_out: &Tensor, op: &str) -> Result<()> {
    let expected = [plan.b, plan.o, plan.win.oh, plan.win.ow];
    if grad_out.dims() != expected {
        return Err(Error::dim(format!(
            "{op}: grad_out is {}, convolution output is {expected:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(
    input_dims: &[usize],
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let op = "conv2d_backward";
    let plan = conv_plan(input_dims, kernels.dims(), stride, pad, false, op)?;
    check_grad_out(&plan, grad_out, op)?;
    let win = &plan.win;
    let positions: Vec<usize> = (0..win.positions()).collect();
    let mut grad_in = vec![0.0; input_dims.iter().product()];
    let chunk = win.chunk();
    let mut g = Vec::new();
    let mut gcols = Vec::new();
    let mut s0 = 0;
    while s0 < plan.b {
        let s1 = (s0 + chunk).min(plan.b);
        let ncols = (s1 - s0) * win.positions();
        g.resize(plan.o * ncols, 0.0);
        gcols.resize(win.rows() * ncols, 0.0);
        gather_chunk(grad_out.data(), plan.o, win.positions(), &positions, s0, s1, &mut g);
        gemm(
            win.rows(),
            plan.o,
            ncols,
            kernels.data(),
            true,
            &g,
            false,
            0.0,
            &mut gcols,
        );
        win.col2im(&gcols, s0, s1, &mut grad_in);
        s0 = s1;
    }
    finish(input_dims, grad_in, op)
}

/// Gradient with respect to the kernels.
pub fn conv2d_backward_kernels(
    input: &Tensor,
    kernel_dims: &[usize],
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let op = "conv2d_backward";
    let plan = conv_plan(input.dims(), kernel_dims, stride, pad, false, op)?;
    check_grad_out(&plan, grad_out, op)?;
    let win = &plan.win;
    let positions: Vec<usize> = (0..win.positions()).collect();
    let mut grad_k = vec![0.0; plan.o * win.rows()];
    let chunk = win.chunk();
    let mut g = Vec::new();
    let mut cols = Vec::new();
    let mut s0 = 0;
    while s0 < plan.b {
        let s1 = (s0 + chunk).min(plan.b);
        let ncols = (s1 - s0) * win.positions();
        g.resize(plan.o * ncols, 0.0);
        cols.resize(win.rows() * ncols, 0.0);
        gather_chunk(grad_out.data(), plan.o, win.positions(), &positions, s0, s1, &mut g);
        win.im2col(input.data(), s0, s1, &mut cols);
        gemm(plan.o, ncols, win.rows(), &g, false, &cols, true, 1.0, &mut grad_k);
        s0 = s1;
    }
    finish(kernel_dims, grad_k, op)
}

/// Both adjoints of [`conv2d`] / [`conv2d_trimmed`].
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let gi = conv2d_backward_input(input.dims(), kernels, grad_out, stride, pad)?;
    let gk = conv2d_backward_kernels(input, kernels.dims(), grad_out, stride, pad)?;
    Ok((gi, gk))
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2×2 block.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(4, "upsample2x")?;
    let d = input.dims();
    let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor::from_parts(&[d[0], d[1], 2 * h, 2 * w], out))
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_adjoint(grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_rank(4, "upsample2x_adjoint")?;
    let d = grad_out.dims();
    if !d[2].is_multiple_of(2) || !d[3].is_multiple_of(2) {
        return Err(Error::dim(format!(
            "upsample2x_adjoint: spatial extents of {} are not even",
            grad_out.shape()
        )));
    }
    let (planes, h, w) = (d[0] * d[1], d[2] / 2, d[3] / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad_out.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let r0 = 2 * y * 2 * w + 2 * x;
                let r1 = r0 + 2 * w;
                dst[y * w + x] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    finish(&[d[0], d[1], h, w], out, "upsample2x_adjoint")
}

/// Whether `upsample2x` followed by a stride-`stride` convolution with this
/// kernel/padding can run as a fused sub-pixel convolution ("same" output).
pub fn upsample_conv_supported(k: usize, stride: usize, pad: usize) -> bool {
    stride == 1 && k == 2 * pad + 1
}

/// Tap structure of one output phase of a fused upsample+conv.
///
/// Output row `2i + phase` reads upsampled rows `2i + phase + k − pad`, i.e.
/// input rows `i + floor((phase + k − pad) / 2)`. Kernel taps landing on the
/// same input row collapse into one effective tap.
#[derive(Clone, Debug)]
struct Phase {
    /// Effective tap index for each original kernel tap.
    tap_of: Vec<usize>,
    /// Number of effective taps.
    taps: usize,
    /// Input offset of effective tap 0 (≤ 0).
    first: isize,
}

impl Phase {
    fn new(phase: usize, k: usize, pad: usize) -> Self {
        let offsets: Vec<isize> = (0..k)
            .map(|t| (phase as isize + t as isize - pad as isize).div_euclid(2))
            .collect();
        let first = offsets[0];
        let last = offsets[k - 1];
        Phase {
            tap_of: offsets.iter().map(|&o| (o - first) as usize).collect(),
            taps: (last - first + 1) as usize,
            first,
        }
    }
}

struct UpConvPlan {
    b: usize,
    o: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    phases: [Phase; 2],
}

impl UpConvPlan {
    fn new(input_dims: &[usize], kernel_dims: &[usize], pad: usize, op: &str) -> Result<Self> {
        if input_dims.len() != 4 || kernel_dims.len() != 4 {
            return Err(Error::dim(format!(
                "{op}: expected 4-D input and kernels, got {input_dims:?} and {kernel_dims:?}"
            )));
        }
        let (o, kc, k) = (kernel_dims[0], kernel_dims[1], kernel_dims[2]);
        if kernel_dims[3] != k {
            return Err(Error::dim(format!("{op}: kernels must be square")));
        }
        if kc != input_dims[1] {
            return Err(Error::dim(format!(
                "{op}: kernels expect {kc} channels, input has {}",
                input_dims[1]
            )));
        }
        if !upsample_conv_supported(k, 1, pad) {
            return Err(Error::dim(format!(
                "{op}: fused path needs k = 2·pad + 1, got k={k} pad={pad}"
            )));
        }
        Ok(UpConvPlan {
            b: input_dims[0],
            o,
            c: kc,
            h: input_dims[2],
            w: input_dims[3],
            k,
            phases: [Phase::new(0, k, pad), Phase::new(1, k, pad)],
        })
    }

    fn window(&self, py: usize, px: usize) -> Window {
        let (fy, fx) = (&self.phases[py], &self.phases[px]);
        debug_assert_eq!(fy.taps, fx.taps);
        Window {
            c: self.c,
            h: self.h,
            w: self.w,
            k: fy.taps,
            stride: 1,
            pad_y: -fy.first,
            pad_x: -fx.first,
            oh: self.h,
            ow: self.w,
        }
    }

    /// Output positions (within the 2H×2W plane) covered by phase (py, px).
    fn positions(&self, py: usize, px: usize) -> Vec<usize> {
        let ow = 2 * self.w;
        (0..self.h)
            .flat_map(|i| (0..self.w).map(move |j| (2 * i + py) * ow + 2 * j + px))
            .collect()
    }

    fn effective_kernel(&self, kernels: &[f64], py: usize, px: usize) -> Vec<f64> {
        let (fy, fx) = (&self.phases[py], &self.phases[px]);
        let t = fy.taps;
        let mut eff = vec![0.0; self.o * self.c * t * t];
        for oc in 0..self.o {
            for c in 0..self.c {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = kernels[((oc * self.c + c) * self.k + ky) * self.k + kx];
                        eff[((oc * self.c + c) * t + fy.tap_of[ky]) * t + fx.tap_of[kx]] += wv;
                    }
                }
            }
        }
        eff
    }

    /// Phases that read the same input window, so one im2col serves them all.
    fn groups(&self) -> Vec<Vec<(usize, usize)>> {
        let all = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let (a, b) = (&self.phases[0], &self.phases[1]);
        if a.first == b.first && a.taps == b.taps {
            vec![all.to_vec()]
        } else {
            all.iter().map(|&p| vec![p]).collect()
        }
    }

    /// Effective kernels of `group`, stacked along the output axis.
    fn stacked_kernel(&self, kernels: &[f64], group: &[(usize, usize)]) -> Vec<f64> {
        group
            .iter()
            .flat_map(|&(py, px)| self.effective_kernel(kernels, py, px))
            .collect()
    }

    /// Adds the effective-kernel gradient of phase `(py, px)` back onto the
    /// original taps.
    fn fold_effective_grad(&self, grad_eff: &[f64], py: usize, px: usize, grad_k: &mut [f64]) {
        let (fy, fx) = (&self.phases[py], &self.phases[px]);
        let t = fy.taps;
        for oc in 0..self.o {
            for c in 0..self.c {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        grad_k[((oc * self.c + c) * self.k + ky) * self.k + kx] +=
                            grad_eff[((oc * self.c + c) * t + fy.tap_of[ky]) * t + fx.tap_of[kx]];
                    }
                }
            }
        }
    }
}

/// Output-channel count up to which the fused path convolves planes
/// directly instead of going through im2col and GEMM.
const DIRECT_MAX_OUT: usize = 4;

/// Dot product with four interleaved partial sums, combined pairwise.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Zero-padded plane layout for the direct path. Phase outputs live at
/// anchor positions `q = i·wp + j`; effective tap `(ty, tx)` of phase
/// `(py, px)` then reads the padded input at `q + tap_offset`, so every tap
/// is one contiguous multiply-add over `span` elements. Anchors with
/// `j ≥ w` are padding and are never read back.
struct PaddedLayout {
    lo: usize,
    hp: usize,
    wp: usize,
    span: usize,
}

impl UpConvPlan {
    fn padded_layout(&self) -> PaddedLayout {
        let lo = self.phases.iter().map(|f| (-f.first).max(0)).max().unwrap_or(0) as usize;
        let hi = self
            .phases
            .iter()
            .map(|f| (f.first + f.taps as isize - 1).max(0))
            .max()
            .unwrap_or(0) as usize;
        let (hp, wp) = (self.h + lo + hi, self.w + lo + hi);
        PaddedLayout {
            lo,
            hp,
            wp,
            span: (self.h - 1) * wp + self.w,
        }
    }

    fn tap_offset(&self, lay: &PaddedLayout, py: usize, px: usize, ty: usize, tx: usize) -> usize {
        let dy = self.phases[py].first + ty as isize + lay.lo as isize;
        let dx = self.phases[px].first + tx as isize + lay.lo as isize;
        dy as usize * lay.wp + dx as usize
    }

    /// Copies the channel planes of sample `b` into zero-padded planes.
    fn pad_sample(&self, lay: &PaddedLayout, input: &[f64], b: usize, dst: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let pp = lay.hp * lay.wp;
        for c in 0..self.c {
            let src = &input[(b * self.c + c) * h * w..(b * self.c + c + 1) * h * w];
            let d = &mut dst[c * pp..(c + 1) * pp];
            for i in 0..h {
                let row = (i + lay.lo) * lay.wp + lay.lo;
                d[row..row + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
    }

    /// Phase `(py, px)` of every output channel of sample `b`, in anchor layout.
    fn gather_anchors(&self, lay: &PaddedLayout, grad_out: &[f64], b: usize, py: usize, px: usize, dst: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        for oc in 0..self.o {
            let src = &grad_out[(b * self.o + oc) * 4 * h * w..(b * self.o + oc + 1) * 4 * h * w];
            let d = &mut dst[oc * lay.span..(oc + 1) * lay.span];
            for i in 0..h {
                for j in 0..w {
                    d[i * lay.wp + j] = src[(2 * i + py) * 2 * w + 2 * j + px];
                }
            }
        }
    }

    fn direct_forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let (h, w, c_n, o_n) = (self.h, self.w, self.c, self.o);
        let lay = self.padded_layout();
        let pp = lay.hp * lay.wp;
        let plane = 4 * h * w;
        let mut out = vec![0.0; self.b * o_n * plane];
        let mut padded = vec![0.0; c_n * pp];
        let mut acc = vec![0.0; lay.span];
        let effs: Vec<Vec<f64>> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(py, px)| self.effective_kernel(kernels, py, px))
            .collect();
        for b in 0..self.b {
            self.pad_sample(&lay, input, b, &mut padded);
            for (p, eff) in effs.iter().enumerate() {
                let (py, px) = (p / 2, p % 2);
                let t = self.phases[py].taps;
                for oc in 0..o_n {
                    acc.fill(0.0);
                    for c in 0..c_n {
                        let src = &padded[c * pp..(c + 1) * pp];
                        for ty in 0..t {
                            for tx in 0..t {
                                let wv = eff[((oc * c_n + c) * t + ty) * t + tx];
                                let off = self.tap_offset(&lay, py, px, ty, tx);
                                for (a, &v) in acc.iter_mut().zip(&src[off..off + lay.span]) {
                                    *a += wv * v;
                                }
                            }
                        }
                    }
                    let dst = &mut out[(b * o_n + oc) * plane..(b * o_n + oc + 1) * plane];
                    for i in 0..h {
                        for j in 0..w {
                            dst[(2 * i + py) * 2 * w + 2 * j + px] = acc[i * lay.wp + j];
                        }
                    }
                }
            }
        }
        out
    }

    fn direct_backward_input(&self, kernels: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let (h, w, c_n, o_n) = (self.h, self.w, self.c, self.o);
        let lay = self.padded_layout();
        let pp = lay.hp * lay.wp;
        let mut grad_in = vec![0.0; self.b * c_n * h * w];
        let mut g = vec![0.0; o_n * lay.span];
        let mut acc = vec![0.0; c_n * pp];
        let effs: Vec<Vec<f64>> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(py, px)| self.effective_kernel(kernels, py, px))
            .collect();
        for b in 0..self.b {
            acc.fill(0.0);
            for (p, eff) in effs.iter().enumerate() {
                let (py, px) = (p / 2, p % 2);
                let t = self.phases[py].taps;
                self.gather_anchors(&lay, grad_out, b, py, px, &mut g);
                for c in 0..c_n {
                    let dst = &mut acc[c * pp..(c + 1) * pp];
                    for oc in 0..o_n {
                        let gp = &g[oc * lay.span..(oc + 1) * lay.span];
                        for ty in 0..t {
                            for tx in 0..t {
                                let wv = eff[((oc * c_n + c) * t + ty) * t + tx];
                                let off = self.tap_offset(&lay, py, px, ty, tx);
                                for (d, &v) in dst[off..off + lay.span].iter_mut().zip(gp) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
            }
            for c in 0..c_n {
                let src = &acc[c * pp..(c + 1) * pp];
                let dst = &mut grad_in[(b * c_n + c) * h * w..(b * c_n + c + 1) * h * w];
                for i in 0..h {
                    let row = (i + lay.lo) * lay.wp + lay.lo;
                    dst[i * w..(i + 1) * w].copy_from_slice(&src[row..row + w]);
                }
            }
        }
        grad_in
    }

    /// Accumulates the effective-kernel gradient of phase `(py, px)`, laid
    /// out `[o][c][t][t]`.
    fn direct_backward_eff(&self, input: &[f64], grad_out: &[f64], py: usize, px: usize, grad_eff: &mut [f64]) {
        let (c_n, o_n) = (self.c, self.o);
        let lay = self.padded_layout();
        let pp = lay.hp * lay.wp;
        let t = self.phases[py].taps;
        let mut padded = vec![0.0; c_n * pp];
        let mut g = vec![0.0; o_n * lay.span];
        for b in 0..self.b {
            self.pad_sample(&lay, input, b, &mut padded);
            self.gather_anchors(&lay, grad_out, b, py, px, &mut g);
            for oc in 0..o_n {
                let gp = &g[oc * lay.span..(oc + 1) * lay.span];
                for c in 0..c_n {
                    let src = &padded[c * pp..(c + 1) * pp];
                    for ty in 0..t {
                        for tx in 0..t {
                            let off = self.tap_offset(&lay, py, px, ty, tx);
                            grad_eff[((oc * c_n + c) * t + ty) * t + tx] += dot(&src[off..off + lay.span], gp);
                        }
                    }
                }
            }
        }
    }
}

/// Upsamples by 2 (nearest neighbour) and convolves with stride 1 and "same"
/// padding in one pass. Equivalent to `conv2d(upsample2x(input), kernels, 1, pad)`.
pub fn upsample_conv2d(input: &Tensor, kernels: &Tensor, pad: usize) -> Result<Tensor> {
    let op = "upsample_conv2d";
    let plan = UpConvPlan::new(input.dims(), kernels.dims(), pad, op)?;
    let out_dims = [plan.b, plan.o, 2 * plan.h, 2 * plan.w];
    if plan.o <= DIRECT_MAX_OUT {
        return finish(&out_dims, plan.direct_forward(input.data(), kernels.data()), op);
    }
    let plane = 4 * plan.h * plan.w;
    let mut out = vec![0.0; plan.b * plan.o * plane];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for group in plan.groups() {
        let win = plan.window(group[0].0, group[0].1);
        let eff = plan.stacked_kernel(kernels.data(), &group);
        let positions: Vec<_> = group.iter().map(|&(py, px)| plan.positions(py, px)).collect();
        let m = group.len() * plan.o;
        let chunk = win.chunk();
        let mut s0 = 0;
        while s0 < plan.b {
            let s1 = (s0 + chunk).min(plan.b);
            let ncols = (s1 - s0) * win.positions();
            cols.resize(win.rows() * ncols, 0.0);
            tmp.resize(m * ncols, 0.0);
            win.im2col(input.data(), s0, s1, &mut cols);
            gemm(m, win.rows(), ncols, &eff, false, &cols, false, 0.0, &mut tmp);
            for (p, pos) in positions.iter().enumerate() {
                let block = &tmp[p * plan.o * ncols..(p + 1) * plan.o * ncols];
                scatter_chunk(block, plan.o, plane, pos, s0, s1, &mut out);
            }
            s0 = s1;
        }
    }
    finish(&out_dims, out, op)
}

fn check_upconv_grad(plan: &UpConvPlan, grad_out: &Tensor, op: &str) -> Result<()> {
    let expected = [plan.b, plan.o, 2 * plan.h, 2 * plan.w];
    if grad_out.dims() != expected {
        return Err(Error::dim(format!(
            "{op}: grad_out is {}, output is {expected:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

/// Gathers the phases of `group` for samples `s0..s1` into a stacked
/// `(phases·o) × (chunk·positions)` matrix.
fn gather_group(plan: &UpConvPlan, grad_out: &[f64], positions: &[Vec<usize>], s0: usize, s1: usize, dst: &mut [f64]) {
    let plane = 4 * plan.h * plan.w;
    let block = plan.o * (s1 - s0) * plan.h * plan.w;
    for (p, pos) in positions.iter().enumerate() {
        gather_chunk(
            grad_out,
            plan.o,
            plane,
            pos,
            s0,
            s1,
            &mut dst[p * block..(p + 1) * block],
        );
    }
}

/// Input gradient of [`upsample_conv2d`] (with respect to the small input).
pub fn upsample_conv2d_backward_input(
    input_dims: &[usize],
    kernels: &Tensor,
    grad_out: &Tensor,
    pad: usize,
) -> Result<Tensor> {
    let op = "upsample_conv2d_backward";
    let plan = UpConvPlan::new(input_dims, kernels.dims(), pad, op)?;
    check_upconv_grad(&plan, grad_out, op)?;
    if plan.o <= DIRECT_MAX_OUT {
        let grad_in = plan.direct_backward_input(kernels.data(), grad_out.data());
        return finish(input_dims, grad_in, op);
    }
    let mut grad_in = vec![0.0; input_dims.iter().product()];
    let mut g = Vec::new();
    let mut gcols = Vec::new();
    for group in plan.groups() {
        let win = plan.window(group[0].0, group[0].1);
        let eff = plan.stacked_kernel(kernels.data(), &group);
        let positions: Vec<_> = group.iter().map(|&(py, px)| plan.positions(py, px)).collect();
        let m = group.len() * plan.o;
        let chunk = win.chunk();
        let mut s0 = 0;
        while s0 < plan.b {
            let s1 = (s0 + chunk).min(plan.b);
            let ncols = (s1 - s0) * win.positions();
            g.resize(m * ncols, 0.0);
            gcols.resize(win.rows() * ncols, 0.0);
            gather_group(&plan, grad_out.data(), &positions, s0, s1, &mut g);
            gemm(win.rows(), m, ncols, &eff, true, &g, false, 0.0, &mut gcols);
            win.col2im(&gcols, s0, s1, &mut grad_in);
            s0 = s1;
        }
    }
    finish(input_dims, grad_in, op)
}

/// Kernel gradient of [`upsample_conv2d`].
pub fn upsample_conv2d_backward_kernels(
    input: &Tensor,
    kernel_dims: &[usize],
    grad_out: &Tensor,
    pad: usize,
) -> Result<Tensor> {
    let op = "upsample_conv2d_backward";
    let plan = UpConvPlan::new(input.dims(), kernel_dims, pad, op)?;
    check_upconv_grad(&plan, grad_out, op)?;
    let mut grad_k = vec![0.0; kernel_dims.iter().product()];
    let mut g = Vec::new();
    let mut cols = Vec::new();
    for group in plan.groups() {
        let win = plan.window(group[0].0, group[0].1);
        let m = group.len() * plan.o;
        let mut grad_eff = vec![0.0; m * win.rows()];
        if plan.o <= DIRECT_MAX_OUT {
            for (p, &(py, px)) in group.iter().enumerate() {
                let block = &mut grad_eff[p * plan.o * win.rows()..(p + 1) * plan.o * win.rows()];
                plan.direct_backward_eff(input.data(), grad_out.data(), py, px, block);
            }
        } else {
            let positions: Vec<_> = group.iter().map(|&(py, px)| plan.positions(py, px)).collect();
            let chunk = win.chunk();
            let mut s0 = 0;
            while s0 < plan.b {
                let s1 = (s0 + chunk).min(plan.b);
                let ncols = (s1 - s0) * win.positions();
                g.resize(m * ncols, 0.0);
                cols.resize(win.rows() * ncols, 0.0);
                gather_group(&plan, grad_out.data(), &positions, s0, s1, &mut g);
                win.im2col(input.data(), s0, s1, &mut cols);
                gemm(m, ncols, win.rows(), &g, false, &cols, true, 1.0, &mut grad_eff);
                s0 = s1;
            }
        }
        for (p, &(py, px)) in group.iter().enumerate() {
            let block = &grad_eff[p * plan.o * win.rows()..(p + 1) * plan.o * win.rows()];
            plan.fold_effective_grad(block, py, px, &mut grad_k);
        }
    }
    finish(kernel_dims, grad_k, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_gradient, max_rel_err, naive_conv2d, random_tensor};
    use proptest::prelude::*;

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.dims(), b.dims());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn scalar_kernel_doubles() {
        let x = random_tensor(&[1, 1, 3, 3], 1);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn zero_kernel_annihilates() {
        let x = random_tensor(&[2, 3, 6, 6], 2);
        let k = Tensor::zeros(&[4, 3, 3, 3]).unwrap();
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let x = random_tensor(&[1, 1, 5, 5], 3);
        let k = random_tensor(&[1, 1, 3, 3], 4);
        assert_close(&conv2d(&x, &k, 1, 1).unwrap(), &naive_conv2d(&x, &k, 1, 1), 1e-12);

        let x = random_tensor(&[3, 2, 7, 7], 5);
        let k = random_tensor(&[4, 2, 3, 3], 6);
        assert_close(&conv2d(&x, &k, 2, 1).unwrap(), &naive_conv2d(&x, &k, 2, 1), 1e-12);
    }

    #[test]
    fn trimmed_matches_floor_oracle() {
        // (28 + 4 - 5) / 2 is not integral: strict conv2d refuses, the trimmed
        // variant drops the unreachable trailing row/column.
        let x = random_tensor(&[2, 1, 28, 28], 7);
        let k = random_tensor(&[3, 1, 5, 5], 8);
        assert!(matches!(conv2d(&x, &k, 2, 2), Err(Error::Dimension(_))));
        let y = conv2d_trimmed(&x, &k, 2, 2).unwrap();
        assert_eq!(y.dims(), &[2, 3, 14, 14]);
        assert_close(&y, &naive_conv2d(&x, &k, 2, 2), 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = random_tensor(&[1, 2, 4, 4], 1);
        let k = random_tensor(&[1, 3, 3, 3], 1);
        assert!(conv2d(&x, &k, 1, 1).is_err());
        let k = random_tensor(&[1, 2, 7, 7], 1);
        assert!(conv2d(&x, &k, 1, 1).is_err());
        let g = random_tensor(&[1, 1, 3, 3], 1);
        let k = random_tensor(&[1, 2, 3, 3], 1);
        assert!(conv2d_backward(&x, &k, &g, 1, 1).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let x = random_tensor(&[2, 2, 5, 5], 9);
        let k = random_tensor(&[3, 2, 3, 3], 10);
        let g = Tensor::zeros(&[2, 3, 5, 5]).unwrap();
        let (gi, gk) = conv2d_backward(&x, &k, &g, 1, 1).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_kernel_chain_rule() {
        let x = random_tensor(&[1, 1, 4, 4], 11);
        let k = Tensor::full(&[1, 1, 1, 1], -1.5).unwrap();
        let g = random_tensor(&[1, 1, 4, 4], 12);
        let (gi, _) = conv2d_backward(&x, &k, &g, 1, 0).unwrap();
        for (a, b) in gi.data().iter().zip(g.data()) {
            assert_eq!(*a, -1.5 * b);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = random_tensor(&[2, 2, 5, 5], 13);
        let k = random_tensor(&[3, 2, 3, 3], 14);
        let w = random_tensor(&[2, 3, 3, 3], 15);
        let (stride, pad) = (2, 1);
        let (gi, gk) = conv2d_backward(&x, &k, &w, stride, pad).unwrap();
        let fi = fd_gradient(&x, 1e-5, |xp| conv2d(xp, &k, stride, pad).unwrap().dot(&w).unwrap());
        let fk = fd_gradient(&k, 1e-5, |kp| conv2d(&x, kp, stride, pad).unwrap().dot(&w).unwrap());
        assert!(max_rel_err(&gi, &fi, 1e-8) < 1e-6);
        assert!(max_rel_err(&gk, &fk, 1e-8) < 1e-6);
    }

    #[test]
    fn upsample_duplicates_pixels() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let c = Tensor::full(&[1, 1, 1, 1], 0.7).unwrap();
        assert_eq!(upsample2x(&c).unwrap().data(), &[0.7; 4]);
        assert!(upsample2x(&Tensor::zeros(&[2, 2]).unwrap()).is_err());
    }

    #[test]
    fn upsample_adjoint_matches_finite_differences() {
        let x = random_tensor(&[1, 1, 3, 3], 16);
        let w = random_tensor(&[1, 1, 6, 6], 17);
        let adj = upsample2x_adjoint(&w).unwrap();
        let fd = fd_gradient(&x, 1e-5, |xp| upsample2x(xp).unwrap().dot(&w).unwrap());
        assert!(max_rel_err(&adj, &fd, 1e-8) < 1e-8);
    }

    #[test]
    fn fused_upsample_conv_equals_composition() {
        let cases = [(5, 2, 2), (3, 1, 2), (1, 0, 2), (7, 3, 2), (5, 2, 6), (3, 1, 6)];
        for &(k, pad, o) in &cases {
            let x = random_tensor(&[3, 4, 5, 6], 18 + k as u64);
            let kern = random_tensor(&[o, 4, k, k], 30 + k as u64);
            let composed = conv2d(&upsample2x(&x).unwrap(), &kern, 1, pad).unwrap();
            let fused = upsample_conv2d(&x, &kern, pad).unwrap();
            assert_close(&fused, &composed, 1e-12);

            let g = random_tensor(composed.dims(), 40 + k as u64);
            let (gu, gk) = conv2d_backward(&upsample2x(&x).unwrap(), &kern, &g, 1, pad).unwrap();
            let gi_composed = upsample2x_adjoint(&gu).unwrap();
            let gi_fused = upsample_conv2d_backward_input(x.dims(), &kern, &g, pad).unwrap();
            let gk_fused = upsample_conv2d_backward_kernels(&x, kern.dims(), &g, pad).unwrap();
            assert_close(&gi_fused, &gi_composed, 1e-12);
            assert_close(&gk_fused, &gk, 1e-11);
        }
    }

    #[test]
    fn fused_path_rejects_unsupported_geometry() {
        let x = random_tensor(&[1, 1, 4, 4], 1);
        let k = random_tensor(&[1, 1, 4, 4], 2);
        assert!(upsample_conv2d(&x, &k, 1).is_err());
        assert!(!upsample_conv_supported(5, 2, 2));
    }

    #[test]
    fn large_batches_chunk_consistently() {
        // Enough samples to force several im2col chunks.
        let x = random_tensor(&[40, 8, 14, 14], 50);
        let k = random_tensor(&[4, 8, 5, 5], 51);
        let all = conv2d(&x, &k, 1, 2).unwrap();
        let one = conv2d(&x.slice_batch(37, 38).unwrap(), &k, 1, 2).unwrap();
        let per = 4 * 14 * 14;
        assert_eq!(one.data(), &all.data()[37 * per..38 * per]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn adjoint_consistency(seed in 0u64..10_000, stride in 1usize..3, pad in 0usize..3) {
            let u = random_tensor(&[2, 3, 6, 6], seed);
            let k = random_tensor(&[2, 3, 3, 3], seed + 1);
            let y = conv2d_trimmed(&u, &k, stride, pad).unwrap();
            let v = random_tensor(y.dims(), seed + 2);
            let gi = conv2d_backward_input(u.dims(), &k, &v, stride, pad).unwrap();
            let lhs = y.dot(&v).unwrap();
            let rhs = u.dot(&gi).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }

        #[test]
        fn linear_in_input(seed in 0u64..10_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let x = random_tensor(&[1, 2, 5, 5], seed);
            let y = random_tensor(&[1, 2, 5, 5], seed + 1);
            let k = random_tensor(&[3, 2, 3, 3], seed + 2);
            let mix = x.axpby(alpha, &y, beta).unwrap();
            let lhs = conv2d(&mix, &k, 1, 1).unwrap();
            let rhs = conv2d(&x, &k, 1, 1).unwrap().axpby(alpha, &conv2d(&y, &k, 1, 1).unwrap(), beta).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let lhs = upsample2x(&mix).unwrap();
            let rhs = upsample2x(&x).unwrap().axpby(alpha, &upsample2x(&y).unwrap(), beta).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
