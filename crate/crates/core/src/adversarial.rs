//! Fully convolutional discriminators with residual targets, the generator
//! and discriminator adversarial losses, and uncertainty-map extraction.
//!
//! The discriminator is trained to output `|pred - gt|` for predictions and
//! an all-zero map for ground truth; at test time its sigmoid output on
//! `(image, pred)` reads as a per-pixel uncertainty map.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::Result;
use crate::nn::{BatchNorm2d, ParamSet, Pass, SpectralConv2d};
use crate::tensor::{Conv2dSpec, Scalar, Tensor};
use crate::types::{MaskKind, MaskTensor};

/// Five spectrally normalized 3x3 convs, stride 1, widths `[64,64,64,64,1]`,
/// batch-norm + leaky-relu (0.2) after the first four. Input is the channel
/// concatenation `[image(3), map(1)]`; output is one logit plane at full
/// resolution (sigmoid applied where a confidence map is required).
pub struct Discriminator<F: Scalar> {
    convs: Vec<SpectralConv2d<F>>,
    bns: Vec<BatchNorm2d<F>>,
}

pub const DISC_WIDTHS: [usize; 5] = [64, 64, 64, 64, 1];
pub const DISC_IN_CHANNELS: usize = 4;

impl<F: Scalar> Discriminator<F> {
    pub fn new(ps: &mut ParamSet<F>, seed: u64, prefix: &str) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = DISC_IN_CHANNELS;
        for (i, &cout) in DISC_WIDTHS.iter().enumerate() {
            let last = i == DISC_WIDTHS.len() - 1;
            convs.push(SpectralConv2d::new(
                ps,
                seed,
                &format!("{prefix}.conv{i}"),
                cin,
                cout,
                3,
                Conv2dSpec::same(3, 1),
                last, // bias only on the final layer; BN absorbs it elsewhere
            ));
            if !last {
                bns.push(BatchNorm2d::new(ps, &format!("{prefix}.bn{i}"), cout));
            }
            cin = cout;
        }
        Discriminator { convs, bns }
    }

    /// Raw logits for a pre-concatenated `[N, 4, H, W]` input.
    pub fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let mut h = x.clone();
        for i in 0..4 {
            h = self.convs[i].forward(pass, &h);
            h = self.bns[i].forward(pass, &h);
            h = h.leaky_relu(F::cast(0.2));
        }
        self.convs[4].forward(pass, &h)
    }

    /// Confidence map in `(0, 1)` for an image/map pair.
    pub fn discriminate(&self, pass: &Pass<F>, image: &Tensor<F>, map: &Tensor<F>) -> Result<Tensor<F>> {
        let (si, sm) = (image.shape().to_vec(), map.shape().to_vec());
        if si[2] != sm[2] || si[3] != sm[3] {
            return Err(crate::error::Error::SizeMismatch {
                context: "discriminator image vs map".into(),
                h_a: si[2],
                w_a: si[3],
                h_b: sm[2],
                w_b: sm[3],
            });
        }
        let input = Tensor::concat(&[image.clone(), map.clone()], 1);
        Ok(self.forward(pass, &input).sigmoid())
    }
}

/// Consistency loss pushing `D(x, pred)` toward the (stop-gradient) response
/// `D(x, y)`: pixel-averaged BCE. The pass must leave the discriminator
/// untrainable and non-updating; gradients reach the generator only through
/// `pred`.
pub fn generator_adv_loss<F: Scalar>(
    disc: &Discriminator<F>,
    pass: &Pass<F>,
    image: &Tensor<F>,
    pred: &Tensor<F>,
    y: &ArrayD<F>,
) -> Tensor<F> {
    let d_pred = disc.forward(pass, &Tensor::concat(&[image.clone(), pred.clone()], 1));
    let d_y = disc.forward(
        pass,
        &Tensor::concat(&[image.detach(), Tensor::constant(y.clone())], 1),
    );
    // target = sigmoid(D(x, y)), treated as a constant
    let target = d_y.value().mapv(crate::tensor::sigmoid_scalar);
    d_pred.bce_with_logits(&target).mean_all()
}

/// Residual-target discriminator loss:
/// `BCE(D(x, pred), |pred - y|) + BCE(D(x, y), 0)`, pixel-averaged per
/// branch and summed. `pred` must already be detached from the generator.
pub fn discriminator_loss<F: Scalar>(
    disc: &Discriminator<F>,
    pass: &Pass<F>,
    image: &ArrayD<F>,
    pred_detached: &ArrayD<F>,
    y: &ArrayD<F>,
) -> Tensor<F> {
    let n = image.shape()[0];
    let image_t = Tensor::constant(image.clone());
    let pred_t = Tensor::constant(pred_detached.clone());
    let y_t = Tensor::constant(y.clone());
    let branch_pred = Tensor::concat(&[image_t.clone(), pred_t], 1);
    let branch_gt = Tensor::concat(&[image_t, y_t], 1);
    // one forward over both branches: shared batch statistics, one
    // power-iteration advance
    let logits = disc.forward(pass, &Tensor::concat(&[branch_pred, branch_gt], 0));
    let l_pred = logits.slice_batch(0, n);
    let l_gt = logits.slice_batch(n, 2 * n);
    let residual = ndarray::Zip::from(pred_detached)
        .and(y)
        .map_collect(|&p, &t| (p - t).abs());
    let zeros = ArrayD::zeros(y.raw_dim());
    l_pred
        .bce_with_logits(&residual)
        .mean_all()
        .add(&l_gt.bce_with_logits(&zeros).mean_all())
}

/// Test-time uncertainty: the sigmoid response of the trained discriminator
/// on `(image, prediction)`. Brighter means less confident.
pub fn uncertainty_map<F: Scalar>(
    disc: &Discriminator<F>,
    image: &ArrayD<F>,
    pred: &ArrayD<F>,
) -> Result<MaskTensor> {
    let pass = Pass::eval();
    let conf = disc.discriminate(
        &pass,
        &Tensor::constant(image.clone()),
        &Tensor::constant(pred.clone()),
    )?;
    let v = conf.value();
    let (h, w) = (v.shape()[2], v.shape()[3]);
    let plane = v
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .mapv(|x| x.to64() as f32);
    let _ = (h, w);
    MaskTensor::new(plane.into_dimensionality().unwrap(), MaskKind::Uncertainty)
}

/// Build an `[N, 3, H, W]` zero image batch (test helper and CLI fallback).
pub fn zero_image_batch<F: Scalar>(n: usize, h: usize, w: usize) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(&[n, 3, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.0..1.0))
    }

    fn bce_oracle(q_logit: f64, t: f64) -> f64 {
        let q = 1.0 / (1.0 + (-q_logit).exp());
        -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
    }

    #[test]
    fn output_shape_and_range() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 3, "gamma_s");
        let pass = Pass::eval();
        let image = Tensor::constant(rand_arr(&[1, 3, 32, 32], 1));
        let map = Tensor::constant(rand_arr(&[1, 1, 32, 32], 2));
        let conf = d.discriminate(&pass, &image, &map).unwrap();
        assert_eq!(conf.shape(), &[1, 1, 32, 32]);
        assert!(conf.value().iter().all(|&v| v > 0.0 && v < 1.0));
        // determinism
        let conf2 = d.discriminate(&pass, &image, &map).unwrap();
        assert_eq!(conf.value(), conf2.value());
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 3, "gamma_s");
        let pass = Pass::eval();
        let image = Tensor::constant(rand_arr(&[1, 3, 32, 32], 1));
        let map = Tensor::constant(rand_arr(&[1, 1, 16, 16], 2));
        assert!(d.discriminate(&pass, &image, &map).is_err());
    }

    #[test]
    fn gen_loss_identical_arguments_equals_target_entropy() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 7, "gamma_s");
        let pass = Pass::eval();
        let image = Tensor::constant(rand_arr(&[2, 3, 16, 16], 3));
        let y = rand_arr(&[2, 1, 16, 16], 4).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let pred = Tensor::constant(y.clone());
        let loss = generator_adv_loss(&d, &pass, &image, &pred, &y).item();
        // entropy of q where q = D(x, y)
        let q = d
            .discriminate(&pass, &image, &Tensor::constant(y.clone()))
            .unwrap();
        let entropy: f64 = q
            .value()
            .iter()
            .map(|&qv| -(qv * qv.ln() + (1.0 - qv) * (1.0 - qv).ln()))
            .sum::<f64>()
            / q.value().len() as f64;
        assert!((loss - entropy).abs() < 1e-6, "{loss} vs {entropy}");
    }

    #[test]
    fn gen_loss_is_ln2_for_zeroed_final_layer() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 11, "gamma_s");
        // zero the final conv -> logits identically 0 -> q = 0.5
        ps.get("gamma_s.conv4.weight")
            .unwrap()
            .update(|w| w.fill(0.0));
        ps.get("gamma_s.conv4.bias").unwrap().update(|b| b.fill(0.0));
        let pass = Pass::eval();
        let image = Tensor::constant(rand_arr(&[1, 3, 16, 16], 5));
        let pred = Tensor::constant(rand_arr(&[1, 1, 16, 16], 6));
        let y = rand_arr(&[1, 1, 16, 16], 7);
        let loss = generator_adv_loss(&d, &pass, &image, &pred, &y).item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn losses_match_elementwise_bce_oracle() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 13, "gamma_s");
        let image = rand_arr(&[1, 3, 8, 8], 8);
        let pred = rand_arr(&[1, 1, 8, 8], 9);
        let y = rand_arr(&[1, 1, 8, 8], 10).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let pass = Pass::eval();

        // generator side
        let loss = generator_adv_loss(
            &d,
            &pass,
            &Tensor::constant(image.clone()),
            &Tensor::constant(pred.clone()),
            &y,
        )
        .item();
        let dp = d
            .forward(&pass, &Tensor::concat(&[
                Tensor::constant(image.clone()),
                Tensor::constant(pred.clone()),
            ], 1))
            .value()
            .clone();
        let dy = d
            .forward(&pass, &Tensor::concat(&[
                Tensor::constant(image.clone()),
                Tensor::constant(y.clone()),
            ], 1))
            .value()
            .clone();
        let mut acc = 0.0;
        for (lp, ly) in dp.iter().zip(dy.iter()) {
            let t = 1.0 / (1.0 + (-ly).exp());
            acc += bce_oracle(*lp, t);
        }
        acc /= dp.len() as f64;
        assert!((loss - acc).abs() < 1e-9, "{loss} vs oracle {acc}");

        // discriminator side: batch-of-two forward changes batch-norm
        // statistics, so evaluate the oracle on the same concatenated pass
        let dl = discriminator_loss(&d, &pass, &image, &pred, &y).item();
        let both = d
            .forward(&pass, &Tensor::concat(&[
                Tensor::concat(&[Tensor::constant(image.clone()), Tensor::constant(pred.clone())], 1),
                Tensor::concat(&[Tensor::constant(image.clone()), Tensor::constant(y.clone())], 1),
            ], 0))
            .value()
            .clone();
        let n = 64usize;
        let mut acc = 0.0;
        for idx in 0..n {
            let lp = both.as_slice().unwrap()[idx];
            let t = (pred.as_slice().unwrap()[idx] - y.as_slice().unwrap()[idx]).abs();
            acc += bce_oracle(lp, t) / n as f64;
        }
        for idx in 0..n {
            let lg = both.as_slice().unwrap()[n + idx];
            acc += bce_oracle(lg, 0.0) / n as f64;
        }
        assert!((dl - acc).abs() < 1e-9, "{dl} vs oracle {acc}");
    }

    #[test]
    fn gradient_isolation_between_generator_and_discriminator() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 17, "gamma_s");
        let image = rand_arr(&[1, 3, 8, 8], 11);
        let y = rand_arr(&[1, 1, 8, 8], 12).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });

        // generator pass: gradient reaches pred, no discriminator parameter
        // is trainable
        let gen_pass = Pass::train(&["alpha_s.", "beta."], &[]);
        let pred_leaf = Tensor::leaf(rand_arr(&[1, 1, 8, 8], 13), true);
        let loss = generator_adv_loss(&d, &gen_pass, &Tensor::constant(image.clone()), &pred_leaf, &y);
        let grads = loss.backward();
        assert!(grads.grad(&pred_leaf).is_some());
        for v in ps.iter() {
            assert!(gen_pass.grad(&grads, v).is_none(), "{} leaked a gradient", v.name());
        }

        // discriminator pass: pred detached, gamma gets gradients
        let dis_pass = Pass::train(&["gamma_s."], &["gamma_s."]);
        let pred = rand_arr(&[1, 1, 8, 8], 14);
        let dl = discriminator_loss(&d, &dis_pass, &image, &pred, &y);
        let dgrads = dl.backward();
        let got: usize = ps
            .iter()
            .filter(|v| v.is_trainable() && dis_pass.grad(&dgrads, v).is_some())
            .count();
        assert!(got > 0, "discriminator received no gradients");
    }

    #[test]
    fn map_channel_matters_after_one_update() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 19, "gamma_s");
        let mut adam = Adam::new();
        let image = rand_arr(&[2, 3, 16, 16], 15);
        let y = rand_arr(&[2, 1, 16, 16], 16).mapv(|v| if v > 0.3 { 1.0 } else { 0.0 });
        let pred = rand_arr(&[2, 1, 16, 16], 17);
        let pass = Pass::train(&["gamma_s."], &["gamma_s."]);
        let loss = discriminator_loss(&d, &pass, &image, &pred, &y);
        let grads = loss.backward();
        adam.step(&ps, &pass, &grads, |_| 1e-3);

        let eval = Pass::eval();
        let a = d
            .discriminate(&eval, &Tensor::constant(image.clone()), &Tensor::constant(pred.clone()))
            .unwrap();
        let b = d
            .discriminate(&eval, &Tensor::constant(image.clone()), &Tensor::constant(y.clone()))
            .unwrap();
        assert_ne!(a.value(), b.value(), "discriminator ignores the map channel");
    }

    #[test]
    fn discriminators_never_share_parameters() {
        let mut ps = ParamSet::<f64>::new();
        let _ds = Discriminator::new(&mut ps, 23, "gamma_s");
        let _dc = Discriminator::new(&mut ps, 23, "gamma_c");
        let s: Vec<_> = ps.iter().filter(|v| v.name().starts_with("gamma_s.")).collect();
        let c: Vec<_> = ps.iter().filter(|v| v.name().starts_with("gamma_c.")).collect();
        assert_eq!(s.len(), c.len());
        assert!(!s.is_empty());
        for (a, b) in s.iter().zip(&c) {
            assert!(!std::rc::Rc::ptr_eq(
                &a.shared().clone(),
                &b.shared().clone()
            ));
        }
    }

    #[test]
    fn uncertainty_map_values_in_unit_interval() {
        let mut ps = ParamSet::<f64>::new();
        let d = Discriminator::new(&mut ps, 29, "gamma_c");
        let m = uncertainty_map(&d, &rand_arr(&[1, 3, 16, 16], 18), &rand_arr(&[1, 1, 16, 16], 19))
            .unwrap();
        assert_eq!(m.kind, MaskKind::Uncertainty);
        assert!(m.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
