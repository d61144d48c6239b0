//! Bilinear resampling.
//!
//! One convention is used everywhere (dataset resize, decoder upsampling,
//! metric preparation): source coordinates are corner-aligned,
//! `src = dst * (in - 1) / (out - 1)`, with a degenerate output axis of
//! length 1 sampling the source midpoint `(in - 1) / 2`. Resizing to the
//! input size is exactly the identity.

use ndarray::{Array2, ArrayD, IxDyn};
use rayon::prelude::*;

use super::{Scalar, Tensor};

/// Per-output-index sampling: low index, high index, and the high-side weight.
fn axis_coeffs(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    assert!(in_len >= 1 && out_len >= 1);
    (0..out_len)
        .map(|o| {
            let pos = if out_len == 1 {
                (in_len as f64 - 1.0) / 2.0
            } else {
                o as f64 * (in_len as f64 - 1.0) / (out_len as f64 - 1.0)
            };
            let i0 = pos.floor() as usize;
            let i0 = i0.min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Resize one plane; the shared convention, usable outside the graph.
pub fn resize_plane<F: Scalar>(src: &Array2<F>, out_h: usize, out_w: usize) -> Array2<F> {
    assert!(out_h >= 1 && out_w >= 1, "non-positive resize target");
    let (h, w) = src.dim();
    let ys = axis_coeffs(h, out_h);
    let xs = axis_coeffs(w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (yo, &(y0, y1, fy)) in ys.iter().enumerate() {
        let fy = F::cast(fy);
        for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
            let fx = F::cast(fx);
            let one = F::one();
            out[[yo, xo]] = src[[y0, x0]] * (one - fy) * (one - fx)
                + src[[y0, x1]] * (one - fy) * fx
                + src[[y1, x0]] * fy * (one - fx)
                + src[[y1, x1]] * fy * fx;
        }
    }
    out
}

impl<F: Scalar> Tensor<F> {
    /// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor<F> {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        assert!(out_h >= 1 && out_w >= 1, "non-positive resize target");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ys = axis_coeffs(h, out_h);
        let xs = axis_coeffs(w, out_w);
        let src_c = self.value().as_standard_layout();
        let src = src_c.as_slice().unwrap();
        let mut out = vec![F::zero(); n * c * out_h * out_w];
        out.par_chunks_mut(out_h * out_w)
            .zip(src.par_chunks(h * w))
            .for_each(|(dst_p, src_p)| {
                for (yo, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let fy = F::cast(fy);
                    let r0 = &src_p[y0 * w..y0 * w + w];
                    let r1 = &src_p[y1 * w..y1 * w + w];
                    for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let fx = F::cast(fx);
                        let one = F::one();
                        let top = r0[x0] * (one - fx) + r0[x1] * fx;
                        let bot = r1[x0] * (one - fx) + r1[x1] * fx;
                        dst_p[yo * out_w + xo] = top * (one - fy) + bot * fy;
                    }
                }
            });
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, out_h, out_w]), out).unwrap();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |node, g| {
                let g_c = g.as_standard_layout();
                let g_s = g_c.as_slice().unwrap();
                let mut gi = vec![F::zero(); n * c * h * w];
                gi.par_chunks_mut(h * w)
                    .zip(g_s.par_chunks(out_h * out_w))
                    .for_each(|(gi_p, g_p)| {
                        for (yo, &(y0, y1, fy)) in ys.iter().enumerate() {
                            let fy = F::cast(fy);
                            for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let fx = F::cast(fx);
                                let one = F::one();
                                let gv = g_p[yo * out_w + xo];
                                gi_p[y0 * w + x0] += gv * (one - fy) * (one - fx);
                                gi_p[y0 * w + x1] += gv * (one - fy) * fx;
                                gi_p[y1 * w + x0] += gv * fy * (one - fx);
                                gi_p[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    });
                vec![Some(
                    ArrayD::from_shape_vec(node.parent_value(0).raw_dim(), gi).unwrap(),
                )]
            }),
        )
    }
}
