//! Batch normalization over `[N, C, H, W]` with running statistics.

use ndarray::{ArrayD, IxDyn};

use super::{Scalar, SharedArray, Tensor};

impl<F: Scalar> Tensor<F> {
    /// `use_batch_stats` normalizes with batch statistics (population
    /// variance); otherwise the running buffers are used. The running
    /// buffers move only when `update_running` is set, so a module can be
    /// evaluated inside another module's loss without its state drifting.
    /// Running variance is stored unbiased, following common framework
    /// convention.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        running_mean: &SharedArray<F>,
        running_var: &SharedArray<F>,
        use_batch_stats: bool,
        update_running: bool,
        momentum: F,
        eps: F,
    ) -> Tensor<F> {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let m = n * h * w;
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);

        let x_c = self.value().as_standard_layout();
        let x = x_c.as_slice().unwrap();
        let (mean, var) = if use_batch_stats {
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for ci in 0..c {
                let mut acc = F::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    acc += x[base..base + h * w].iter().copied().sum();
                }
                mean[ci] = acc / F::cast(m as f64);
            }
            for ci in 0..c {
                let mu = mean[ci];
                let mut acc = F::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for &v in &x[base..base + h * w] {
                        let d = v - mu;
                        acc += d * d;
                    }
                }
                var[ci] = acc / F::cast(m as f64);
            }
            if update_running {
                let mut rm = running_mean.borrow_mut();
                let mut rv = running_var.borrow_mut();
                let unbias = if m > 1 {
                    F::cast(m as f64 / (m as f64 - 1.0))
                } else {
                    F::one()
                };
                for ci in 0..c {
                    rm[[ci]] = (F::one() - momentum) * rm[[ci]] + momentum * mean[ci];
                    rv[[ci]] = (F::one() - momentum) * rv[[ci]] + momentum * var[ci] * unbias;
                }
            }
            (mean, var)
        } else {
            let rm = running_mean.borrow();
            let rv = running_var.borrow();
            (
                (0..c).map(|ci| rm[[ci]]).collect(),
                (0..c).map(|ci| rv[[ci]]).collect(),
            )
        };

        let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gs = gamma.value().as_slice().unwrap().to_vec();
        let bs = beta.value().as_slice().unwrap().to_vec();

        let mut xhat = vec![F::zero(); n * c * h * w];
        let mut out = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (mu, is, ga, be) = (mean[ci], invstd[ci], gs[ci], bs[ci]);
                for idx in base..base + h * w {
                    let xh = (x[idx] - mu) * is;
                    xhat[idx] = xh;
                    out[idx] = ga * xh + be;
                }
            }
        }

        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        Tensor::from_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let g_c = g.as_standard_layout();
                let g_s = g_c.as_slice().unwrap();
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for idx in base..base + h * w {
                            sum_g[ci] += g_s[idx];
                            sum_gx[ci] += g_s[idx] * xhat[idx];
                        }
                    }
                }
                let grad_x = node.parent_requires_grad(0).then(|| {
                    let mut gx = vec![F::zero(); n * c * h * w];
                    let mf = F::cast(m as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            let scale = gs[ci] * invstd[ci];
                            if use_batch_stats {
                                for idx in base..base + h * w {
                                    gx[idx] = scale
                                        * (g_s[idx]
                                            - sum_g[ci] / mf
                                            - xhat[idx] * sum_gx[ci] / mf);
                                }
                            } else {
                                for idx in base..base + h * w {
                                    gx[idx] = scale * g_s[idx];
                                }
                            }
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap()
                });
                let grad_gamma = node
                    .parent_requires_grad(1)
                    .then(|| ArrayD::from_shape_vec(IxDyn(&[c]), sum_gx.clone()).unwrap());
                let grad_beta = node
                    .parent_requires_grad(2)
                    .then(|| ArrayD::from_shape_vec(IxDyn(&[c]), sum_g.clone()).unwrap());
                vec![grad_x, grad_gamma, grad_beta]
            }),
        )
    }
}
