//! Forward and backward kernels for the volumetric primitives.
//!
//! These are plain functions over [`Tensor`] values; [`super::Tape`] records
//! them for differentiation and the inference path calls them directly, so both
//! paths share the exact same arithmetic.

use super::{dims5, pairwise_sum, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    inp: [usize; 3],
    cout: usize,
    kernel: [usize; 3],
    pad: usize,
    out: [usize; 3],
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], bias: &[usize], pad: usize) -> Result<Self> {
        let [batch, cin, z, y, x] = dims5(input)?;
        let [cout, wcin, kz, ky, kx] = dims5(weight)?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv3d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if bias != [cout] {
            return Err(Error::Shape(format!(
                "conv3d: bias shape {bias:?} does not match {cout} output channels"
            )));
        }
        let mut out = [0; 3];
        for (axis, (&n, &k)) in [z, y, x].iter().zip(&[kz, ky, kx]).enumerate() {
            if n + 2 * pad < k || k == 0 {
                return Err(Error::Shape(format!(
                    "conv3d: kernel {k} does not fit axis of size {n} with padding {pad}"
                )));
            }
            out[axis] = n + 2 * pad - k + 1;
        }
        Ok(Self {
            batch,
            cin,
            inp: [z, y, x],
            cout,
            kernel: [kz, ky, kx],
            pad,
            out,
        })
    }

    fn in_voxels(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.out.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `d`.
    #[inline]
    fn valid_range(&self, axis: usize, d: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(d);
        let hi = (self.inp[axis] + self.pad).saturating_sub(d).min(self.out[axis]);
        (lo, hi.max(lo))
    }

    /// Output rows `(z, y)` per column chunk, sized so the chunk's column
    /// matrix stays cache resident.
    fn rows_per_chunk(&self) -> usize {
        const TARGET: usize = 1 << 16;
        (TARGET / (self.col_rows() * self.out[2]).max(1)).max(1)
    }

    /// Visits every contiguous x-run shared between the column matrix of
    /// output rows `[r0, r1)` and the input volume of one sample:
    /// `f(col_offset, input_offset, len)`. Positions of the column matrix not
    /// visited correspond to zero padding.
    fn for_each_run(&self, r0: usize, r1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [kz, ky, kx] = self.kernel;
        let [iz, iy, ix] = self.inp;
        let [_, oy, ox] = self.out;
        let pc = (r1 - r0) * ox;
        let pad = self.pad;
        for c in 0..self.cin {
            for dz in 0..kz {
                let (z0, z1) = self.valid_range(0, dz);
                for dy in 0..ky {
                    let (y0, y1) = self.valid_range(1, dy);
                    for dx in 0..kx {
                        let (x0, x1) = self.valid_range(2, dx);
                        if x1 <= x0 {
                            continue;
                        }
                        let row = ((c * kz + dz) * ky + dy) * kx + dx;
                        for r in r0..r1 {
                            let (z, y) = (r / oy, r % oy);
                            if z < z0 || z >= z1 || y < y0 || y >= y1 {
                                continue;
                            }
                            let (sz, sy) = (z + dz - pad, y + dy - pad);
                            let col = row * pc + (r - r0) * ox + x0;
                            let src = ((c * iz + sz) * iy + sy) * ix + x0 + dx - pad;
                            f(col, src, x1 - x0);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, input: &[T], r0: usize, r1: usize, col: &mut [T]) {
        col.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_run(r0, r1, |c, s, n| col[c..c + n].copy_from_slice(&input[s..s + n]));
    }

    fn col2im_add<T: Element>(&self, col: &[T], r0: usize, r1: usize, input: &mut [T]) {
        self.for_each_run(r0, r1, |c, s, n| {
            for (dst, &v) in input[s..s + n].iter_mut().zip(&col[c..c + n]) {
                *dst += v;
            }
        });
    }

    /// Chunks `[r0, r1)` covering all output rows.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.out[0] * self.out[1];
        let step = self.rows_per_chunk();
        (0..rows).step_by(step).map(move |r0| (r0, (r0 + step).min(rows)))
    }
}

/// Stride-1 3-D cross-correlation with symmetric zero padding.
pub fn conv3d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), pad)?;
    let (k, p, vin, ox) = (g.col_rows(), g.out_voxels(), g.in_voxels(), g.out[2]);
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut col = vec![T::zero(); k * g.rows_per_chunk() * ox];
    for b in 0..g.batch {
        let x = &input.data()[b * g.cin * vin..(b + 1) * g.cin * vin];
        let o = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        for (r0, r1) in g.chunks() {
            let pc = (r1 - r0) * ox;
            g.im2col(x, r0, r1, &mut col[..k * pc]);
            T::gemm_ld(false, false, g.cout, k, pc, weight.data(), k, &col, pc, T::one(), &mut o[r0 * ox..], p);
        }
    }
    let [oz, oy, ox] = g.out;
    Tensor::new(vec![g.batch, g.cout, oz, oy, ox], out)
}

/// Gradients of [`conv3d_forward`]: `(d_input, d_weight, d_bias)`.
/// `d_input` is skipped (returned as `None`) unless requested.
pub fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let cout = weight.shape()[0];
    let g = ConvGeom::new(input.shape(), weight.shape(), &[cout], pad)?;
    let (k, p, vin, ox) = (g.col_rows(), g.out_voxels(), g.in_voxels(), g.out[2]);
    let mut d_weight = vec![T::zero(); cout * k];
    let mut d_bias = vec![T::zero(); cout];
    let mut d_input = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut col = vec![T::zero(); k * g.rows_per_chunk() * ox];
    for b in 0..g.batch {
        let go = &grad_out.data()[b * cout * p..(b + 1) * cout * p];
        for (co, chunk) in go.chunks(p).enumerate() {
            d_bias[co] += pairwise_sum(chunk);
        }
        let x = &input.data()[b * g.cin * vin..(b + 1) * g.cin * vin];
        for (r0, r1) in g.chunks() {
            let pc = (r1 - r0) * ox;
            let col = &mut col[..k * pc];
            let go = &go[r0 * ox..];
            g.im2col(x, r0, r1, col);
            T::gemm_ld(false, true, cout, pc, k, go, p, col, pc, T::one(), &mut d_weight, k);
            if let Some(di) = d_input.as_mut() {
                T::gemm_ld(true, false, k, cout, pc, weight.data(), k, go, p, T::zero(), col, pc);
                g.col2im_add(col, r0, r1, &mut di[b * g.cin * vin..(b + 1) * g.cin * vin]);
            }
        }
    }
    let d_input = d_input
        .map(|d| Tensor::new(input.shape().to_vec(), d))
        .transpose()?;
    Ok((
        d_input,
        Tensor::new(weight.shape().to_vec(), d_weight)?,
        Tensor::new(vec![cout], d_bias)?,
    ))
}

/// 2×2×2 max pooling. Returns the pooled tensor and, per output voxel, the
/// flat input index that won (first in scan order on ties).
pub fn maxpool2_forward<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, z, y, x] = input.dims5()?;
    if z % 2 != 0 || y % 2 != 0 || x % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool3d: spatial dims {:?} are not divisible by 2",
            [z, y, x]
        )));
    }
    let (oz, oy, ox) = (z / 2, y / 2, x / 2);
    let n_out = b * c * oz * oy * ox;
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    let data = input.data();
    for bc in 0..b * c {
        let base = bc * z * y * x;
        for iz in 0..oz {
            for iy in 0..oy {
                for ix in 0..ox {
                    let mut best = base + ((2 * iz) * y + 2 * iy) * x + 2 * ix;
                    let mut best_v = data[best];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + ((2 * iz + dz) * y + 2 * iy + dy) * x + 2 * ix + dx;
                                if data[idx] > best_v {
                                    best_v = data[idx];
                                    best = idx;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oz, oy, ox], out)?, arg))
}

pub fn maxpool2_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dd[i as usize] += g;
    }
    d
}

/// Linear interpolation taps `(i0, i1, frac)` mapping `n_out` samples onto
/// `n_in` with half-pixel centers (align-corners off), clamped at the borders.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Resizes one axis of a contiguous `[outer, n_in, inner]` buffer to `n_out`
/// by linear interpolation.
pub fn interp_axis<T: Element>(
    data: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    n_out: usize,
) -> Vec<T> {
    let taps: Vec<_> = linear_taps(n_in, n_out)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::from_f64(1.0 - f), T::from_f64(f)))
        .collect();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for ((d, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = w0 * va + w1 * vb;
            }
        }
    }
    out
}

/// Adjoint of [`interp_axis`].
fn interp_axis_adjoint<T: Element>(
    grad: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    n_out: usize,
) -> Vec<T> {
    let taps: Vec<_> = linear_taps(n_in, n_out)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::from_f64(1.0 - f), T::from_f64(f)))
        .collect();
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let g = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut out[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let gj = &g[j * inner..(j + 1) * inner];
            for (t, &v) in gj.iter().enumerate() {
                dst[i0 * inner + t] += w0 * v;
                dst[i1 * inner + t] += w1 * v;
            }
        }
    }
    out
}

/// Trilinear 2× upsampling of the three spatial axes.
pub fn upsample2_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, z, y, x] = input.dims5()?;
    let bc = b * c;
    let d = interp_axis(input.data(), bc * z * y, x, 1, 2 * x);
    let d = interp_axis(&d, bc * z, y, 2 * x, 2 * y);
    let d = interp_axis(&d, bc, z, 4 * y * x, 2 * z);
    Tensor::new(vec![b, c, 2 * z, 2 * y, 2 * x], d)
}

pub fn upsample2_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, z, y, x] = dims5(input_shape)?;
    let bc = b * c;
    let g = interp_axis_adjoint(grad_out.data(), bc, z, 4 * y * x, 2 * z);
    let g = interp_axis_adjoint(&g, bc * z, y, 2 * x, 2 * y);
    let g = interp_axis_adjoint(&g, bc * z * y, x, 1, 2 * x);
    Tensor::new(input_shape.to_vec(), g)
}

/// Softmax over the channel axis (axis 1) of a `[B, C, ...]` tensor.
pub fn softmax_channels_forward<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() < 2 || shape[1] < 2 {
        return Err(Error::Shape(format!(
            "softmax over channels needs at least 2 channels, got shape {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    let mut max = vec![T::zero(); v];
    let mut sum = vec![T::zero(); v];
    for bi in 0..b {
        let base = bi * c * v;
        max.copy_from_slice(&src[base..base + v]);
        for ci in 1..c {
            for (m, &s) in max.iter_mut().zip(&src[base + ci * v..base + (ci + 1) * v]) {
                if s > *m {
                    *m = s;
                }
            }
        }
        sum.fill(T::zero());
        for ci in 0..c {
            let range = base + ci * v..base + (ci + 1) * v;
            for (((o, &s), &m), acc) in out[range.clone()]
                .iter_mut()
                .zip(&src[range])
                .zip(&max)
                .zip(sum.iter_mut())
            {
                *o = (s - m).exp();
                *acc += *o;
            }
        }
        for ci in 0..c {
            for (o, &s) in out[base + ci * v..base + (ci + 1) * v].iter_mut().zip(&sum) {
                *o = *o / s;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub fn softmax_channels_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let shape = output.shape();
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let y = output.data();
    let g = grad_out.data();
    let mut dot = vec![T::zero(); v];
    let mut d = vec![T::zero(); y.len()];
    for bi in 0..b {
        let base = bi * c * v;
        dot.fill(T::zero());
        for ci in 0..c {
            let r = base + ci * v..base + (ci + 1) * v;
            for ((acc, &yy), &gg) in dot.iter_mut().zip(&y[r.clone()]).zip(&g[r]) {
                *acc += yy * gg;
            }
        }
        for ci in 0..c {
            let r = base + ci * v..base + (ci + 1) * v;
            for (((o, &yy), &gg), &dd) in d[r.clone()].iter_mut().zip(&y[r.clone()]).zip(&g[r]).zip(&dot) {
                *o = yy * (gg - dd);
            }
        }
    }
    Tensor::new(shape.to_vec(), d).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5(shape: [usize; 5], f: impl FnMut(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&shape, f)
    }

    /// Direct 7-loop convolution used as a reference.
    fn conv_naive(input: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let [b, cin, z, y, x] = input.dims5().unwrap();
        let [cout, _, kz, ky, kx] = w.dims5().unwrap();
        let (oz, oy, ox) = (z + 2 * pad + 1 - kz, y + 2 * pad + 1 - ky, x + 2 * pad + 1 - kx);
        let dims_o = [b, cout, oz, oy, ox];
        let mut out = Tensor::zeros(&dims_o);
        for bi in 0..b {
            for co in 0..cout {
                for iz in 0..oz {
                    for iy in 0..oy {
                        for ix in 0..ox {
                            let mut acc = bias.data()[co];
                            for ci in 0..cin {
                                for dz in 0..kz {
                                    for dy in 0..ky {
                                        for dx in 0..kx {
                                            let (sz, sy, sx) = (
                                                (iz + dz) as isize - pad as isize,
                                                (iy + dy) as isize - pad as isize,
                                                (ix + dx) as isize - pad as isize,
                                            );
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= z as isize || sy >= y as isize || sx >= x as isize {
                                                continue;
                                            }
                                            let xi = crate::tensor::offset5(input.dims5().unwrap(), bi, ci, sz as usize, sy as usize, sx as usize);
                                            let wi = crate::tensor::offset5(w.dims5().unwrap(), co, ci, dz, dy, dx);
                                            acc += input.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = crate::tensor::offset5(dims_o, bi, co, iz, iy, ix);
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let input = t5([2, 3, 4, 5, 3], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let w = t5([2, 3, 3, 3, 3], |i| ((i * 104729) % 37) as f64 / 18.0 - 1.0);
        let bias = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        for pad in [0, 1, 2] {
            let got = conv3d_forward(&input, &w, &bias, pad).unwrap();
            let want = conv_naive(&input, &w, &bias, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn chunked_conv_matches_direct_loops_and_gradients() {
        // 108 column rows x 20 columns per output row -> several chunks
        let input = t5([1, 4, 6, 20, 20], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let w = t5([2, 4, 3, 3, 3], |i| ((i * 104729) % 37) as f64 / 18.0 - 1.0);
        let bias = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let geom = ConvGeom::new(input.shape(), w.shape(), bias.shape(), 1).unwrap();
        assert!(geom.chunks().count() > 1);
        let got = conv3d_forward(&input, &w, &bias, 1).unwrap();
        let want = conv_naive(&input, &w, &bias, 1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let opts = crate::tensor::GradCheckOptions {
            samples_per_input: Some(40),
            ..Default::default()
        };
        let report = crate::tensor::grad_check(
            |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], 1)?;
                let sq = t.square(y);
                Ok(t.sum(sq))
            },
            &[input, w, bias],
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = t5([1, 1, 3, 4, 5], |i| i as f64);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let out = conv3d_forward(&input, &w, &Tensor::zeros(&[1]), 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_on_constant_input_sums_27_in_interior() {
        let v = 0.75;
        let input = Tensor::full(&[1, 1, 5, 5, 5], v);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let out = conv3d_forward(&input, &w, &Tensor::zeros(&[1]), 1).unwrap();
        let d = out.dims5().unwrap();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    assert_eq!(out.data()[crate::tensor::offset5(d, 0, 0, z, y, x)], 27.0 * v);
                }
            }
        }
        // corners only see 8 in-bounds taps
        assert_eq!(out.data()[0], 8.0 * v);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]);
        let err = conv3d_forward(&input, &w, &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn maxpool_picks_window_max_and_halves_dims() {
        let input = t5([1, 1, 2, 2, 2], |i| (i + 1) as f64);
        let (out, arg) = maxpool2_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(out.data(), &[8.0]);
        assert_eq!(arg, vec![7]);

        let c = Tensor::full(&[1, 2, 4, 6, 2], 3.0f32);
        let (out, _) = maxpool2_forward(&c).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let input = Tensor::full(&[1, 1, 2, 2, 2], 1.0f64);
        let (_, arg) = maxpool2_forward(&input).unwrap();
        assert_eq!(arg, vec![0]);
        let g = maxpool2_backward(input.shape(), &arg, &Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        assert_eq!(g.data()[0], 1.0);
        assert!(g.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let input = Tensor::<f32>::zeros(&[1, 1, 3, 2, 2]);
        assert!(maxpool2_forward(&input).is_err());
    }

    #[test]
    fn upsample_shape_and_constant() {
        let input = Tensor::full(&[1, 1, 2, 2, 2], 0.3f64);
        let out = upsample2_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4, 4]);
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_forms() {
        let logits = Tensor::new(vec![1, 2, 1], vec![0.0f64, 3f64.ln()]).unwrap();
        let p = softmax_channels_forward(&logits).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);

        let uniform = Tensor::full(&[1, 4, 2, 2, 2], 1.7f64);
        let p = softmax_channels_forward(&uniform).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_needs_two_channels() {
        let logits = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        assert!(softmax_channels_forward(&logits).is_err());
    }
}
