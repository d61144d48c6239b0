//! Elementwise, reduction, broadcast, and shape ops.

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{Scalar, Tensor};

/// How the shapes of a binary op's operands relate.
enum BinKind {
    Same,
    LhsScalar,
    RhsScalar,
}

fn bin_kind<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> BinKind {
    if a.shape() == b.shape() {
        BinKind::Same
    } else if a.value().len() == 1 {
        BinKind::LhsScalar
    } else if b.value().len() == 1 {
        BinKind::RhsScalar
    } else {
        panic!(
            "incompatible shapes for elementwise op: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
}

fn splat<F: Scalar>(t: &ArrayD<F>) -> F {
    *t.iter().next().unwrap()
}

/// Elementwise map through the contiguous fast path (all graph arrays are
/// freshly allocated in standard layout; `mapv` on IxDyn won't vectorize).
fn emap<F: Scalar>(a: &ArrayD<F>, f: impl Fn(F) -> F) -> ArrayD<F> {
    match a.as_slice() {
        Some(s) => {
            let out: Vec<F> = s.iter().map(|&v| f(v)).collect();
            ArrayD::from_shape_vec(a.raw_dim(), out).unwrap()
        }
        None => a.mapv(f),
    }
}

fn ezip<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, f: impl Fn(F, F) -> F) -> ArrayD<F> {
    debug_assert_eq!(a.shape(), b.shape());
    match (a.as_slice(), b.as_slice()) {
        (Some(sa), Some(sb)) => {
            let out: Vec<F> = sa.iter().zip(sb).map(|(&x, &y)| f(x, y)).collect();
            ArrayD::from_shape_vec(a.raw_dim(), out).unwrap()
        }
        _ => Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)),
    }
}

fn ezip3<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    c: &ArrayD<F>,
    f: impl Fn(F, F, F) -> F,
) -> ArrayD<F> {
    debug_assert_eq!(a.shape(), b.shape());
    debug_assert_eq!(a.shape(), c.shape());
    match (a.as_slice(), b.as_slice(), c.as_slice()) {
        (Some(sa), Some(sb), Some(sc)) => {
            let out: Vec<F> = sa
                .iter()
                .zip(sb)
                .zip(sc)
                .map(|((&x, &y), &z)| f(x, y, z))
                .collect();
            ArrayD::from_shape_vec(a.raw_dim(), out).unwrap()
        }
        _ => Zip::from(a).and(b).and(c).map_collect(|&x, &y, &z| f(x, y, z)),
    }
}

/// Reduce a full-shape gradient onto a single-element operand.
fn reduce_to_scalar_shape<F: Scalar>(g: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), g.iter().copied().sum())
}

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let value = match bin_kind(self, rhs) {
            BinKind::Same => ezip(self.value(), rhs.value(), |a, b| a + b),
            BinKind::LhsScalar => emap(rhs.value(), |v| v + splat(self.value())),
            BinKind::RhsScalar => emap(self.value(), |v| v + splat(rhs.value())),
        };
        Tensor::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                let ga = node
                    .parent_requires_grad(0)
                    .then(|| fit_grad(g, node.parent_value(0).shape()));
                let gb = node
                    .parent_requires_grad(1)
                    .then(|| fit_grad(g, node.parent_value(1).shape()));
                vec![ga, gb]
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let value = match bin_kind(self, rhs) {
            BinKind::Same => ezip(self.value(), rhs.value(), |a, b| a - b),
            BinKind::LhsScalar => emap(rhs.value(), |v| splat(self.value()) - v),
            BinKind::RhsScalar => emap(self.value(), |v| v - splat(rhs.value())),
        };
        Tensor::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                let ga = node
                    .parent_requires_grad(0)
                    .then(|| fit_grad(g, node.parent_value(0).shape()));
                let gb = node
                    .parent_requires_grad(1)
                    .then(|| fit_grad(&emap(g, |v| -v), node.parent_value(1).shape()));
                vec![ga, gb]
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let value = match bin_kind(self, rhs) {
            BinKind::Same => ezip(self.value(), rhs.value(), |a, b| a * b),
            BinKind::LhsScalar => emap(rhs.value(), |v| v * splat(self.value())),
            BinKind::RhsScalar => emap(self.value(), |v| v * splat(rhs.value())),
        };
        Tensor::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                let (a, b) = (node.parent_value(0), node.parent_value(1));
                let ga = node.parent_requires_grad(0).then(|| {
                    let full = if b.len() == 1 {
                        emap(g, |v| v * splat(b))
                    } else {
                        ezip(g, b, |x, y| x * y)
                    };
                    fit_grad(&full, a.shape())
                });
                let gb = node.parent_requires_grad(1).then(|| {
                    let full = if a.len() == 1 {
                        emap(g, |v| v * splat(a))
                    } else {
                        ezip(g, a, |x, y| x * y)
                    };
                    fit_grad(&full, b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let value = match bin_kind(self, rhs) {
            BinKind::Same => ezip(self.value(), rhs.value(), |a, b| a / b),
            BinKind::LhsScalar => emap(rhs.value(), |v| splat(self.value()) / v),
            BinKind::RhsScalar => emap(self.value(), |v| v / splat(rhs.value())),
        };
        Tensor::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                let (a, b) = (node.parent_value(0), node.parent_value(1));
                let ga = node.parent_requires_grad(0).then(|| {
                    let full = if b.len() == 1 {
                        emap(g, |v| v / splat(b))
                    } else {
                        ezip(g, b, |x, y| x / y)
                    };
                    fit_grad(&full, a.shape())
                });
                let gb = node.parent_requires_grad(1).then(|| {
                    // d(a/b)/db = -a / b^2
                    let full = if a.len() == 1 && b.len() > 1 {
                        let av = splat(a);
                        ezip(g, b, |gv, bv| -gv * av / (bv * bv))
                    } else if b.len() == 1 {
                        let bv = splat(b);
                        ezip(g, a, |gv, av| -gv * av / (bv * bv))
                    } else {
                        ezip3(g, a, b, |gv, av, bv| -gv * av / (bv * bv))
                    };
                    fit_grad(&full, b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.mul_scalar(-F::one())
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v + c),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: F) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v * c),
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(emap(g, |v| v * c))]),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), stable_sigmoid),
            vec![self.clone()],
            Box::new(|node, g| {
                vec![Some(ezip(g, node.value(), |gv, yv| {
                    gv * yv * (F::one() - yv)
                }))]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v.exp()),
            vec![self.clone()],
            Box::new(|node, g| vec![Some(ezip(g, node.value(), |x, y| x * y))]),
        )
    }

    pub fn ln(&self) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v.ln()),
            vec![self.clone()],
            Box::new(|node, g| vec![Some(ezip(g, node.parent_value(0), |x, y| x / y))]),
        )
    }

    pub fn sqrt(&self) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v.sqrt()),
            vec![self.clone()],
            Box::new(|node, g| {
                let two = F::cast(2.0);
                vec![Some(ezip(g, node.value(), |gv, yv| gv / (two * yv)))]
            }),
        )
    }

    pub fn abs(&self) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v.abs()),
            vec![self.clone()],
            Box::new(|node, g| {
                vec![Some(ezip(g, node.parent_value(0), |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else if xv < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                }))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| v.max(F::zero())),
            vec![self.clone()],
            Box::new(|node, g| {
                vec![Some(ezip(g, node.parent_value(0), |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else {
                        F::zero()
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: F) -> Tensor<F> {
        Tensor::from_op(
            emap(self.value(), |v| if v > F::zero() { v } else { v * slope }),
            vec![self.clone()],
            Box::new(move |node, g| {
                vec![Some(ezip(g, node.parent_value(0), |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else {
                        gv * slope
                    }
                }))]
            }),
        )
    }

    /// Elementwise maximum; gradient routes to the larger operand (ties go to
    /// `self`).
    pub fn max_with(&self, rhs: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), rhs.shape());
        let value = ezip(self.value(), rhs.value(), |a, b| a.max(b));
        Tensor::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                let (a, b) = (node.parent_value(0), node.parent_value(1));
                let ga = node
                    .parent_requires_grad(0)
                    .then(|| ezip3(g, a, b, |gv, av, bv| if av >= bv { gv } else { F::zero() }));
                let gb = node
                    .parent_requires_grad(1)
                    .then(|| ezip3(g, a, b, |gv, av, bv| if av < bv { gv } else { F::zero() }));
                vec![ga, gb]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s: F = self.value().iter().copied().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(|node, g| {
                let gv = splat(g);
                vec![Some(ArrayD::from_elem(
                    node.parent_value(0).raw_dim(),
                    gv,
                ))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::cast(self.value().len() as f64);
        self.sum_all().div(&Tensor::scalar(n))
    }

    /// Sum over the two trailing spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn sum_spatial(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 4);
        let value = self
            .value()
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .into_dyn();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(|node, g| {
                let shape = node.parent_value(0).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let mut out = ArrayD::zeros(IxDyn(shape));
                for i in 0..n {
                    for j in 0..c {
                        let gv = g[[i, j]];
                        out.slice_mut(ndarray::s![i, j, .., ..]).fill(gv);
                    }
                }
                let _ = (h, w);
                vec![Some(out)]
            }),
        )
    }

    /// Broadcast-multiply a one-channel map over all channels:
    /// `[N, C, H, W] * [N, 1, H, W]`.
    pub fn mul_bcast_c(&self, m: &Tensor<F>) -> Tensor<F> {
        let (sa, sm) = (self.shape(), m.shape());
        assert_eq!(sa.len(), 4);
        assert_eq!(sm, &[sa[0], 1, sa[2], sa[3]], "broadcast map shape");
        let mut value = self.value().clone();
        for i in 0..sa[0] {
            let plane = m.value().slice(ndarray::s![i, 0, .., ..]).to_owned();
            for j in 0..sa[1] {
                let mut ch = value.slice_mut(ndarray::s![i, j, .., ..]);
                ch *= &plane;
            }
        }
        Tensor::from_op(
            value,
            vec![self.clone(), m.clone()],
            Box::new(|node, g| {
                let a = node.parent_value(0);
                let m = node.parent_value(1);
                let s = a.shape();
                let ga = node.parent_requires_grad(0).then(|| {
                    let mut out = g.clone();
                    for i in 0..s[0] {
                        let plane = m.slice(ndarray::s![i, 0, .., ..]).to_owned();
                        for j in 0..s[1] {
                            let mut ch = out.slice_mut(ndarray::s![i, j, .., ..]);
                            ch *= &plane;
                        }
                    }
                    out
                });
                let gm = node.parent_requires_grad(1).then(|| {
                    let mut out = ArrayD::zeros(m.raw_dim());
                    for i in 0..s[0] {
                        let mut acc = ndarray::Array2::<F>::zeros((s[2], s[3]));
                        for j in 0..s[1] {
                            let gj = g.slice(ndarray::s![i, j, .., ..]);
                            let aj = a.slice(ndarray::s![i, j, .., ..]);
                            Zip::from(&mut acc).and(&gj).and(&aj).for_each(|o, &gv, &av| {
                                *o += gv * av;
                            });
                        }
                        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&acc);
                    }
                    out
                });
                vec![ga, gm]
            }),
        )
    }

    /// Numerically stable elementwise binary cross-entropy against a constant
    /// target, taking `self` as logits:
    /// `max(x, 0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&self, target: &ArrayD<F>) -> Tensor<F> {
        assert_eq!(self.shape(), target.shape());
        let value = ezip(self.value(), target, |x, t| {
            x.max(F::zero()) - x * t + (F::one() + (-x.abs()).exp()).ln()
        });
        let target = target.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |node, g| {
                vec![Some(ezip3(g, node.parent_value(0), &target, |gv, xv, tv| {
                    gv * (stable_sigmoid(xv) - tv)
                }))]
            }),
        )
    }

    /// Concatenate along an axis (all operands must agree elsewhere).
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            value,
            parts.to_vec(),
            Box::new(move |node, g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0isize;
                for (i, &len) in sizes.iter().enumerate() {
                    let grad = node.parent_requires_grad(i).then(|| {
                        g.slice_axis(Axis(axis), Slice::new(offset, Some(offset + len as isize), 1))
                            .to_owned()
                    });
                    offset += len as isize;
                    out.push(grad);
                }
                out
            }),
        )
    }

    /// Slice along axis 0 (batch).
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor<F> {
        let value = self
            .value()
            .slice_axis(Axis(0), Slice::new(start as isize, Some(end as isize), 1))
            .to_owned();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |node, g| {
                let mut out = ArrayD::zeros(node.parent_value(0).raw_dim());
                out.slice_axis_mut(Axis(0), Slice::new(start as isize, Some(end as isize), 1))
                    .assign(g);
                vec![Some(out)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let value = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(|node, g| {
                let back = g
                    .clone()
                    .into_shape_with_order(node.parent_value(0).raw_dim())
                    .expect("reshape grad");
                vec![Some(back)]
            }),
        )
    }
}

fn fit_grad<F: Scalar>(g: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        g.clone()
    } else {
        reduce_to_scalar_shape(g, shape)
    }
}

pub fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
