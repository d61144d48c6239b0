//! 2-d convolution and max-pooling.
//!
//! Stride-1 "same" convolutions (dilation*(k-1) == 2*pad per axis) take a
//! lowering-free path: the input is zero-padded once per image and each of
//! the kh*kw kernel taps becomes one accumulating GEMM on the flattened
//! padded planes. Row wrap-around from the flattening only ever lands in the
//! padding columns, which are discarded when the output is re-packed, so the
//! result is exact. Everything else (strided encoders, odd geometries) goes
//! through im2col + GEMM.
//!
//! The batch dimension is processed in parallel with rayon; every worker
//! writes a disjoint output slab and weight-gradient partials are summed in
//! batch order, so results are bit-identical regardless of thread count.
//! Scratch buffers are recycled across the images a worker processes.

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

use super::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    /// Zero padding per axis: `(pad_h, pad_w)`.
    pub pad: (usize, usize),
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec { stride: 1, pad: (0, 0), dilation: 1 }
    }

    /// Stride-1 "same" convolution for an odd square kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        debug_assert_eq!(kernel % 2, 1);
        let p = dilation * (kernel / 2);
        Conv2dSpec { stride: 1, pad: (p, p), dilation }
    }

    pub fn strided(stride: usize, pad: usize) -> Self {
        Conv2dSpec { stride, pad: (pad, pad), dilation: 1 }
    }

    pub fn out_size(&self, input: usize, kernel: usize, pad: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * pad >= span,
            "conv input {input} too small for kernel span {span}"
        );
        (input + 2 * pad - span) / self.stride + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_dims<F: Scalar>(input: &ArrayD<F>, weight: &ArrayD<F>, spec: &Conv2dSpec) -> ConvDims {
    let (si, sw) = (input.shape(), weight.shape());
    assert_eq!(si.len(), 4, "conv input must be [N, C, H, W]");
    assert_eq!(sw.len(), 4, "conv weight must be [Cout, Cin, kh, kw]");
    assert_eq!(si[1], sw[1], "conv channel mismatch: input {} weight {}", si[1], sw[1]);
    ConvDims {
        n: si[0],
        cin: si[1],
        h: si[2],
        w: si[3],
        cout: sw[0],
        kh: sw[2],
        kw: sw[3],
        ho: spec.out_size(si[2], sw[2], spec.pad.0),
        wo: spec.out_size(si[3], sw[3], spec.pad.1),
    }
}

/// The lowering-free path applies when output positions step one input pixel
/// at a time and the padded width fully contains every tap offset.
fn is_same_conv(d: &ConvDims, spec: &Conv2dSpec) -> bool {
    spec.stride == 1
        && spec.dilation * (d.kh - 1) == 2 * spec.pad.0
        && spec.dilation * (d.kw - 1) == 2 * spec.pad.1
}

/// Grow-on-demand scratch, recycled across a worker's images.
fn scratch<F: Scalar>(buf: &mut Vec<F>, need: usize) -> &mut [F] {
    if buf.len() < need {
        buf.resize(need, F::zero());
    }
    &mut buf[..need]
}

/// Fill `cols` ([K, L] row-major) from one image ([Cin, H, W] contiguous).
fn im2col<F: Scalar>(src: &[F], d: &ConvDims, spec: &Conv2dSpec, cols: &mut [F]) {
    let (k_total, l) = (d.k(), d.l());
    debug_assert_eq!(cols.len(), k_total * l);
    debug_assert_eq!(src.len(), d.cin * d.h * d.w);
    let (s, dil) = (spec.stride, spec.dilation);
    let (ph, pw) = spec.pad;
    for k in 0..k_total {
        let c = k / (d.kh * d.kw);
        let rem = k % (d.kh * d.kw);
        let (i, j) = (rem / d.kw, rem % d.kw);
        let row = &mut cols[k * l..(k + 1) * l];
        let plane = &src[c * d.h * d.w..(c + 1) * d.h * d.w];
        for yo in 0..d.ho {
            let sy = (yo * s + i * dil) as isize - ph as isize;
            let dst = &mut row[yo * d.wo..(yo + 1) * d.wo];
            if sy < 0 || sy >= d.h as isize {
                dst.fill(F::zero());
                continue;
            }
            let src_row = &plane[sy as usize * d.w..(sy as usize + 1) * d.w];
            let off = j as isize * dil as isize - pw as isize;
            if s == 1 {
                let x0 = (-off).max(0) as usize;
                let x1 = ((d.w as isize - off).max(0) as usize).min(d.wo);
                dst[..x0.min(d.wo)].fill(F::zero());
                if x0 < x1 {
                    dst[x0..x1].copy_from_slice(
                        &src_row[(x0 as isize + off) as usize..(x1 as isize + off) as usize],
                    );
                }
                if x1 < d.wo {
                    dst[x1..].fill(F::zero());
                }
            } else {
                for (xo, out) in dst.iter_mut().enumerate() {
                    let sx = (xo * s) as isize + off;
                    *out = if sx >= 0 && (sx as usize) < d.w {
                        src_row[sx as usize]
                    } else {
                        F::zero()
                    };
                }
            }
        }
    }
}

/// Scatter-add the column matrix back into one image (reverse of [`im2col`]).
fn col2im<F: Scalar>(cols: &[F], d: &ConvDims, spec: &Conv2dSpec, dst: &mut [F]) {
    let (k_total, l) = (d.k(), d.l());
    let (s, dil) = (spec.stride, spec.dilation);
    let (ph, pw) = spec.pad;
    for k in 0..k_total {
        let c = k / (d.kh * d.kw);
        let rem = k % (d.kh * d.kw);
        let (i, j) = (rem / d.kw, rem % d.kw);
        let row = &cols[k * l..(k + 1) * l];
        let plane = &mut dst[c * d.h * d.w..(c + 1) * d.h * d.w];
        for yo in 0..d.ho {
            let sy = (yo * s + i * dil) as isize - ph as isize;
            if sy < 0 || sy >= d.h as isize {
                continue;
            }
            let src_row = &row[yo * d.wo..(yo + 1) * d.wo];
            let dst_row = &mut plane[sy as usize * d.w..(sy as usize + 1) * d.w];
            let off = j as isize * dil as isize - pw as isize;
            if s == 1 {
                let x0 = (-off).max(0) as usize;
                let x1 = ((d.w as isize - off).max(0) as usize).min(d.wo);
                if x0 < x1 {
                    let dst_s =
                        &mut dst_row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                    for (o, &v) in dst_s.iter_mut().zip(&src_row[x0..x1]) {
                        *o += v;
                    }
                }
            } else {
                for (xo, &v) in src_row.iter().enumerate() {
                    let sx = (xo * s) as isize + off;
                    if sx >= 0 && (sx as usize) < d.w {
                        dst_row[sx as usize] += v;
                    }
                }
            }
        }
    }
}

/// Copy one image into a zero-padded buffer `[C, H+2ph, W+2pw]`.
fn pad_image<F: Scalar>(src: &[F], c: usize, h: usize, w: usize, ph: usize, pw: usize, dst: &mut [F]) {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    dst[..c * hp * wp].fill(F::zero());
    for ci in 0..c {
        let sp = &src[ci * h * w..(ci + 1) * h * w];
        let dp = &mut dst[ci * hp * wp..(ci + 1) * hp * wp];
        for y in 0..h {
            dp[(y + ph) * wp + pw..(y + ph) * wp + pw + w].copy_from_slice(&sp[y * w..(y + 1) * w]);
        }
    }
}

/// Copy one image into `[C, H, W+extra]` with zeros on the right edge only.
fn pad_right<F: Scalar>(src: &[F], c: usize, h: usize, w: usize, extra: usize, dst: &mut [F]) {
    let wp = w + extra;
    dst[..c * h * wp].fill(F::zero());
    for ci in 0..c {
        let sp = &src[ci * h * w..(ci + 1) * h * w];
        let dp = &mut dst[ci * h * wp..(ci + 1) * h * wp];
        for y in 0..h {
            dp[y * wp..y * wp + w].copy_from_slice(&sp[y * w..(y + 1) * w]);
        }
    }
}

/// Forward same-conv for one image: `out[Cout, H, W]` from padded planes.
fn same_conv_fwd<F: Scalar>(
    padded: &[F],
    weight: &ArrayD<F>,
    d: &ConvDims,
    dil: usize,
    flat: &mut [F],
    out: &mut [F],
) {
    let (hp, wp) = (d.h + 2 * (dil * (d.kh - 1) / 2), d.w + 2 * (dil * (d.kw - 1) / 2));
    let nflat = d.h * wp;
    debug_assert!(flat.len() >= d.cout * nflat);
    for i in 0..d.kh {
        for j in 0..d.kw {
            let w_ij = weight.slice(ndarray::s![.., .., i, j]);
            let offset = i * dil * wp + j * dil;
            let p_view =
                strided_view(&padded[offset..], d.cin, nflat, hp * wp);
            let mut o_view = ArrayViewMut2::from_shape((d.cout, nflat), &mut flat[..d.cout * nflat])
                .unwrap();
            let beta = if i == 0 && j == 0 { F::zero() } else { F::one() };
            gemm(F::one(), &w_ij, &p_view, beta, &mut o_view);
        }
    }
    // Re-pack valid columns: flat rows have width wp, output rows width w.
    for co in 0..d.cout {
        let src = &flat[co * nflat..];
        let dst = &mut out[co * d.h * d.w..(co + 1) * d.h * d.w];
        for y in 0..d.h {
            dst[y * d.w..(y + 1) * d.w].copy_from_slice(&src[y * wp..y * wp + d.w]);
        }
    }
}

/// `[rows, len]` view over a flat slice with a custom row stride.
fn strided_view<F: Scalar>(data: &[F], rows: usize, len: usize, row_stride: usize) -> ArrayView2<'_, F> {
    use ndarray::ShapeBuilder;
    debug_assert!((rows - 1) * row_stride + len <= data.len());
    unsafe { ArrayView2::from_shape_ptr((rows, len).strides((row_stride, 1)), data.as_ptr()) }
}

fn contiguous<F: Scalar>(a: &ArrayD<F>) -> ndarray::CowArray<'_, F, IxDyn> {
    a.as_standard_layout()
}

impl<F: Scalar> Tensor<F> {
    /// `input [N, Cin, H, W] * weight [Cout, Cin, kh, kw] (+ bias [Cout])`.
    pub fn conv2d(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>, spec: Conv2dSpec) -> Tensor<F> {
        let d = conv_dims(self.value(), weight.value(), &spec);
        let (k_total, l) = (d.k(), d.l());
        let input_c = contiguous(self.value());
        let input_s = input_c.as_slice().unwrap();
        let fast = is_same_conv(&d, &spec);
        let w_arr = weight.value();
        let w2 = w_arr
            .view()
            .into_shape_with_order((d.cout, k_total))
            .expect("weight reshape");

        let mut out = vec![F::zero(); d.n * d.cout * l];
        out.par_chunks_mut(d.cout * l)
            .zip(input_s.par_chunks(d.cin * d.h * d.w))
            .for_each_init(
                || (Vec::new(), Vec::new()),
                |(buf_a, buf_b), (out_n, img)| {
                    if fast {
                        let (ph, pw) = spec.pad;
                        let (hp, wp) = (d.h + 2 * ph, d.w + 2 * pw);
                        // 2*pw slack: shifted views may read past the last
                        // plane; those lanes pair with zero-padding columns.
                        let padded = scratch(buf_a, d.cin * hp * wp + 2 * pw);
                        pad_image(img, d.cin, d.h, d.w, ph, pw, padded);
                        let flat = scratch(buf_b, d.cout * d.h * wp);
                        same_conv_fwd(padded, w_arr, &d, spec.dilation, flat, out_n);
                    } else {
                        let cols = scratch(buf_a, k_total * l);
                        im2col(img, &d, &spec, cols);
                        let cols_v = ArrayView2::from_shape((k_total, l), &*cols).unwrap();
                        let mut out_v = ArrayViewMut2::from_shape((d.cout, l), out_n).unwrap();
                        gemm(F::one(), &w2.view(), &cols_v, F::zero(), &mut out_v);
                    }
                },
            );

        let mut value = ArrayD::from_shape_vec(IxDyn(&[d.n, d.cout, d.ho, d.wo]), out).unwrap();
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[d.cout]);
            let bs = b.value().as_slice().unwrap().to_vec();
            let vs = value.as_slice_mut().unwrap();
            for n in 0..d.n {
                for c in 0..d.cout {
                    let base = (n * d.cout + c) * l;
                    let bv = bs[c];
                    for v in &mut vs[base..base + l] {
                        *v += bv;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            value,
            parents,
            Box::new(move |node, g| {
                let d = conv_dims(node.parent_value(0), node.parent_value(1), &spec);
                let (k_total, l) = (d.k(), d.l());
                let fast = is_same_conv(&d, &spec);
                let g_c = contiguous(g);
                let g_s = g_c.as_slice().unwrap();
                let w_arr = node.parent_value(1);
                let w2 = w_arr
                    .view()
                    .into_shape_with_order((d.cout, k_total))
                    .unwrap();

                let grad_input = node.parent_requires_grad(0).then(|| {
                    let mut gi = vec![F::zero(); d.n * d.cin * d.h * d.w];
                    gi.par_chunks_mut(d.cin * d.h * d.w)
                        .zip(g_s.par_chunks(d.cout * l))
                        .for_each_init(
                            || (Vec::new(), Vec::new()),
                            |(buf_a, buf_b), (gi_n, g_n)| {
                                if fast {
                                    // dL/dx is the same-conv of g with the
                                    // tap-transposed kernel.
                                    let (ph, pw) = spec.pad;
                                    let (hp, wp) = (d.h + 2 * ph, d.w + 2 * pw);
                                    let padded = scratch(buf_a, d.cout * hp * wp + 2 * pw);
                                    pad_image(g_n, d.cout, d.h, d.w, ph, pw, padded);
                                    let flat = scratch(buf_b, d.cin * d.h * wp);
                                    same_conv_bwd_input(
                                        padded, w_arr, &d, spec.dilation, flat, gi_n,
                                    );
                                } else {
                                    let g_v = ArrayView2::from_shape((d.cout, l), g_n).unwrap();
                                    let cols_g = scratch(buf_a, k_total * l);
                                    let mut cols_v =
                                        ArrayViewMut2::from_shape((k_total, l), &mut *cols_g)
                                            .unwrap();
                                    gemm(F::one(), &w2.t(), &g_v, F::zero(), &mut cols_v);
                                    col2im(cols_g, &d, &spec, gi_n);
                                }
                            },
                        );
                    ArrayD::from_shape_vec(IxDyn(&[d.n, d.cin, d.h, d.w]), gi).unwrap()
                });

                let grad_weight = node.parent_requires_grad(1).then(|| {
                    let input_c = contiguous(node.parent_value(0));
                    let input_s = input_c.as_slice().unwrap();
                    let partials: Vec<Vec<F>> = input_s
                        .par_chunks(d.cin * d.h * d.w)
                        .zip(g_s.par_chunks(d.cout * l))
                        .map_init(
                            || (Vec::new(), Vec::new()),
                            |(buf_a, buf_b), (img, g_n)| {
                                let mut gw = vec![F::zero(); d.cout * k_total];
                                if fast {
                                    let (ph, pw) = spec.pad;
                                    let (hp, wp) = (d.h + 2 * ph, d.w + 2 * pw);
                                    let padded = scratch(buf_a, d.cin * hp * wp + 2 * pw);
                                    pad_image(img, d.cin, d.h, d.w, ph, pw, padded);
                                    // g padded on the right only: tap (i, j)
                                    // then pairs g(y, x) with padded input at
                                    // (y + i*dil, x + j*dil) exactly.
                                    let gpad = scratch(buf_b, d.cout * d.h * wp);
                                    pad_right(g_n, d.cout, d.h, d.w, 2 * pw, gpad);
                                    same_conv_grad_weight(
                                        padded, gpad, &d, spec.dilation, (hp, wp), &mut gw,
                                    );
                                } else {
                                    let cols = scratch(buf_a, k_total * l);
                                    im2col(img, &d, &spec, cols);
                                    let cols_v =
                                        ArrayView2::from_shape((k_total, l), &*cols).unwrap();
                                    let g_v = ArrayView2::from_shape((d.cout, l), g_n).unwrap();
                                    let mut gw_v =
                                        ArrayViewMut2::from_shape((d.cout, k_total), &mut gw)
                                            .unwrap();
                                    gemm(F::one(), &g_v, &cols_v.t(), F::zero(), &mut gw_v);
                                }
                                gw
                            },
                        )
                        .collect();
                    let mut acc = vec![F::zero(); d.cout * k_total];
                    for part in &partials {
                        for (a, &p) in acc.iter_mut().zip(part) {
                            *a += p;
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[d.cout, d.cin, d.kh, d.kw]), acc).unwrap()
                });

                let mut grads = vec![grad_input, grad_weight];
                if node.parents_len() == 3 {
                    let grad_bias = node.parent_requires_grad(2).then(|| {
                        let mut gb = vec![F::zero(); d.cout];
                        for n in 0..d.n {
                            for c in 0..d.cout {
                                let base = (n * d.cout + c) * l;
                                gb[c] += g_s[base..base + l].iter().copied().sum();
                            }
                        }
                        ArrayD::from_shape_vec(IxDyn(&[d.cout]), gb).unwrap()
                    });
                    grads.push(grad_bias);
                }
                grads
            }),
        )
    }

    pub fn max_pool2d(&self, spec: MaxPool2dSpec) -> Tensor<F> {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        let wo = (w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        let input_c = contiguous(self.value());
        let input_s = input_c.as_slice().unwrap();
        let planes = n * c;
        let mut out = vec![F::zero(); planes * ho * wo];
        let mut argmax = vec![0u32; planes * ho * wo];
        out.chunks_mut(ho * wo)
            .zip(argmax.chunks_mut(ho * wo))
            .zip(input_s.chunks(h * w))
            .for_each(|((out_p, arg_p), img)| {
                for yo in 0..ho {
                    for xo in 0..wo {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for i in 0..spec.kernel {
                            let sy = (yo * spec.stride + i) as isize - spec.pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for j in 0..spec.kernel {
                                let sx = (xo * spec.stride + j) as isize - spec.pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let idx = sy as usize * w + sx as usize;
                                if img[idx] > best {
                                    best = img[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        out_p[yo * wo + xo] = best;
                        arg_p[yo * wo + xo] = best_idx;
                    }
                }
            });
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |node, g| {
                let g_c = contiguous(g);
                let g_s = g_c.as_slice().unwrap();
                let mut gi = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    let g_p = &g_s[p * ho * wo..(p + 1) * ho * wo];
                    let arg_p = &argmax[p * ho * wo..(p + 1) * ho * wo];
                    let gi_p = &mut gi[p * h * w..(p + 1) * h * w];
                    for (&gv, &idx) in g_p.iter().zip(arg_p) {
                        gi_p[idx as usize] += gv;
                    }
                }
                vec![Some(
                    ArrayD::from_shape_vec(node.parent_value(0).raw_dim(), gi).unwrap(),
                )]
            }),
        )
    }
}

/// Input gradient for the same-conv path. With `a = y - i*dil + ph` the
/// contributing taps transpose, so this is a same-conv of the padded output
/// gradient with kernel taps visited in reverse.
fn same_conv_bwd_input<F: Scalar>(
    gpad: &[F],
    weight: &ArrayD<F>,
    d: &ConvDims,
    dil: usize,
    flat: &mut [F],
    gi: &mut [F],
) {
    let (ph, pw) = (dil * (d.kh - 1) / 2, dil * (d.kw - 1) / 2);
    let (hp, wp) = (d.h + 2 * ph, d.w + 2 * pw);
    let _ = ph;
    let nflat = d.h * wp;
    for i in 0..d.kh {
        for j in 0..d.kw {
            // tap (i, j) of the forward kernel contributes at offset (kh-1-i, kw-1-j)
            let w_ij = weight.slice(ndarray::s![.., .., i, j]);
            let offset = (d.kh - 1 - i) * dil * wp + (d.kw - 1 - j) * dil;
            let g_view = strided_view(&gpad[offset..], d.cout, nflat, hp * wp);
            let mut o_view =
                ArrayViewMut2::from_shape((d.cin, nflat), &mut flat[..d.cin * nflat]).unwrap();
            let beta = if i == 0 && j == 0 { F::zero() } else { F::one() };
            gemm(F::one(), &w_ij.t(), &g_view, beta, &mut o_view);
        }
    }
    for ci in 0..d.cin {
        let src = &flat[ci * nflat..];
        let dst = &mut gi[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for y in 0..d.h {
            dst[y * d.w..(y + 1) * d.w].copy_from_slice(&src[y * wp..y * wp + d.w]);
        }
    }
}

/// Weight gradient for the same-conv path: one GEMM per kernel tap between
/// the horizontally padded output gradient and a shifted padded-input view.
fn same_conv_grad_weight<F: Scalar>(
    padded: &[F],
    gpad: &[F],
    d: &ConvDims,
    dil: usize,
    (hp, wp): (usize, usize),
    gw: &mut [F],
) {
    let nflat = d.h * wp;
    let mut gw_arr =
        ndarray::ArrayViewMut4::from_shape((d.cout, d.cin, d.kh, d.kw), gw).unwrap();
    for i in 0..d.kh {
        for j in 0..d.kw {
            let offset = i * dil * wp + j * dil;
            let p_view = strided_view(&padded[offset..], d.cin, nflat, hp * wp);
            let g_view = strided_view(gpad, d.cout, nflat, d.h * wp);
            let mut out = gw_arr.slice_mut(ndarray::s![.., .., i, j]);
            gemm(F::one(), &g_view, &p_view.t(), F::zero(), &mut out);
        }
    }
}
