//! Contrastive task-bridging: feature projection, mask-weighted region
//! pooling, and the cross-task contrastive loss.
//!
//! Positive pairs: (cod_fg, cod_bg), (sod_bg, cod_bg), (sod_bg, cod_fg) —
//! regions expected to share contrast statistics. The single negative pair is
//! (sod_fg, sod_bg).

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Pass, SpectralConv2d};
use crate::tensor::{Conv2dSpec, Scalar, Tensor};

/// Mask weight sums at or below this are degenerate; the caller skips the
/// contrastive term for such samples.
pub const DEGENERATE_MASK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionRole {
    SodFg,
    SodBg,
    CodFg,
    CodBg,
}

/// Mask-weighted pooled embedding of one region, `[1, C]`.
pub struct RegionFeature<F: Scalar> {
    pub vec: Tensor<F>,
    pub role: RegionRole,
}

/// Four spectrally normalized 3x3 convolutions projecting the deepest
/// encoder group into the embedding space. All layers are bias-free (zero in
/// maps to zero out); leaky-relu between layers, linear final layer.
pub struct ContrastModule<F: Scalar> {
    convs: Vec<SpectralConv2d<F>>,
}

pub const EMBED_DIM: usize = 128;

impl<F: Scalar> ContrastModule<F> {
    pub fn new(ps: &mut ParamSet<F>, seed: u64, prefix: &str, in_channels: usize, embed: usize) -> Self {
        let dims = [in_channels, embed, embed, embed, embed];
        let convs = (0..4)
            .map(|i| {
                SpectralConv2d::new(
                    ps,
                    seed,
                    &format!("{prefix}.proj{i}"),
                    dims[i],
                    dims[i + 1],
                    3,
                    Conv2dSpec::same(3, 1),
                    false,
                )
            })
            .collect();
        ContrastModule { convs }
    }

    /// Project the deepest pyramid group to `[N, C_e, h, w]`.
    pub fn project(&self, pass: &Pass<F>, group4: &Tensor<F>) -> Tensor<F> {
        let mut h = group4.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(pass, &h);
            if i < 3 {
                h = h.leaky_relu(F::cast(0.2));
            }
        }
        h
    }
}

/// Mask-weighted mean over space: `vec = sum(mask * emb) / sum(mask)`.
///
/// `emb` is `[1, C, h, w]`, `mask` is `[1, 1, h, w]` already resized to the
/// embedding size. Foreground pooling passes the prediction, background
/// pooling passes `1 - prediction`.
pub fn region_pool<F: Scalar>(
    mask: &Tensor<F>,
    emb: &Tensor<F>,
    role: RegionRole,
) -> Result<RegionFeature<F>> {
    let (sm, se) = (mask.shape().to_vec(), emb.shape().to_vec());
    assert_eq!(sm.len(), 4);
    assert_eq!(se.len(), 4);
    assert_eq!(sm[0], 1, "region_pool works per image");
    assert_eq!((sm[2], sm[3]), (se[2], se[3]), "mask must be resized to the embedding size");
    let total: f64 = mask.value().iter().map(|v| v.to64()).sum();
    if total <= DEGENERATE_MASK_EPS {
        return Err(Error::DegenerateRegion { sum: total, threshold: DEGENERATE_MASK_EPS });
    }
    let weighted = emb.mul_bcast_c(mask); // [1, C, h, w]
    let sums = weighted.sum_spatial(); // [1, C]
    let denom = mask.sum_all();
    let vec = sums.div(&denom);
    Ok(RegionFeature { vec, role })
}

fn l2_norm<F: Scalar>(v: &Tensor<F>) -> Tensor<F> {
    v.mul(v).sum_all().sqrt()
}

/// Cosine similarity of two `[1, C]` features.
pub fn cosine<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let dot = a.mul(b).sum_all();
    dot.div(&l2_norm(a).mul(&l2_norm(b)))
}

/// `-log( sum_pos / (sum_pos + exp(c(sf, sb))) )` with
/// `sum_pos = exp(c(cf,cb)) + exp(c(sb,cb)) + exp(c(sb,cf))`.
pub fn contrastive_loss<F: Scalar>(
    sf: &RegionFeature<F>,
    sb: &RegionFeature<F>,
    cf: &RegionFeature<F>,
    cb: &RegionFeature<F>,
) -> Result<Tensor<F>> {
    debug_assert_eq!(sf.role, RegionRole::SodFg);
    debug_assert_eq!(sb.role, RegionRole::SodBg);
    debug_assert_eq!(cf.role, RegionRole::CodFg);
    debug_assert_eq!(cb.role, RegionRole::CodBg);
    for (name, f) in [("sod_fg", sf), ("sod_bg", sb), ("cod_fg", cf), ("cod_bg", cb)] {
        let norm: f64 = f.vec.value().iter().map(|v| v.to64() * v.to64()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "zero or non-finite norm region feature {name} ({norm})"
            )));
        }
    }
    let pos = cosine(&cf.vec, &cb.vec)
        .exp()
        .add(&cosine(&sb.vec, &cb.vec).exp())
        .add(&cosine(&sb.vec, &cf.vec).exp());
    let neg = cosine(&sf.vec, &sb.vec).exp();
    // -ln(pos / (pos + neg)) in a form with one log per term
    Ok(pos.add(&neg).ln().sub(&pos.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{fd_grad_full, max_rel_err, FD_EPS};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feat(v: &[f64], role: RegionRole) -> RegionFeature<f64> {
        let n = v.len();
        RegionFeature {
            vec: Tensor::leaf(
                ArrayD::from_shape_vec(IxDyn(&[1, n]), v.to_vec()).unwrap(),
                true,
            ),
            role,
        }
    }

    /// Scalar oracle for the loss given the four cosines.
    fn loss_from_cosines(pos: [f64; 3], neg: f64) -> f64 {
        let spos: f64 = pos.iter().map(|c| c.exp()).sum();
        -(spos / (spos + neg.exp())).ln()
    }

    #[test]
    fn symmetric_point_is_log_four_thirds() {
        let v = [0.3, -1.2, 0.8, 2.0];
        let (sf, sb) = (feat(&v, RegionRole::SodFg), feat(&v, RegionRole::SodBg));
        let (cf, cb) = (feat(&v, RegionRole::CodFg), feat(&v, RegionRole::CodBg));
        let loss = contrastive_loss(&sf, &sb, &cf, &cb).unwrap();
        assert!((loss.item() - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_positives_unit_negative() {
        // c(cf,cb) = c(sb,cb) = c(sb,cf) = 0, c(sf,sb) = 1
        let sf = feat(&[1.0, 0.0, 0.0, 0.0], RegionRole::SodFg);
        let sb = feat(&[1.0, 0.0, 0.0, 0.0], RegionRole::SodBg);
        let cf = feat(&[0.0, 1.0, 0.0, 0.0], RegionRole::CodFg);
        let cb = feat(&[0.0, 0.0, 1.0, 0.0], RegionRole::CodBg);
        let loss = contrastive_loss(&sf, &sb, &cf, &cb).unwrap();
        let expect = loss_from_cosines([0.0, 0.0, 0.0], 1.0);
        assert!((loss.item() - expect).abs() < 1e-12);
        // frozen from the scalar oracle: -ln(3/(3+e)) = 0.6450555...
        assert!((expect - 0.645_055_5).abs() < 1e-6);
    }

    #[test]
    fn aligned_positives_opposed_negative() {
        let sf = feat(&[-1.0, 0.0], RegionRole::SodFg);
        let sb = feat(&[1.0, 0.0], RegionRole::SodBg);
        let cf = feat(&[2.0, 0.0], RegionRole::CodFg);
        let cb = feat(&[0.5, 0.0], RegionRole::CodBg);
        let loss = contrastive_loss(&sf, &sb, &cf, &cb).unwrap();
        let expect = loss_from_cosines([1.0, 1.0, 1.0], -1.0);
        assert!((loss.item() - expect).abs() < 1e-12);
        // frozen from the scalar oracle
        assert!((expect - 0.044123_8).abs() < 1e-6);
    }

    #[test]
    fn monotone_in_negative_and_positive_cosines() {
        // Sweep the negative cosine with positives held fixed.
        let mut last = f64::NEG_INFINITY;
        for t in -10..=10 {
            let c = t as f64 / 10.0;
            let loss = loss_from_cosines([0.5, 0.2, -0.1], c);
            assert!(loss > last);
            last = loss;
        }
        // Sweep one positive cosine with the rest fixed.
        let mut last = f64::INFINITY;
        for t in -10..=10 {
            let c = t as f64 / 10.0;
            let loss = loss_from_cosines([c, 0.2, -0.1], 0.3);
            assert!(loss < last);
            last = loss;
        }
        // And the graph implementation agrees with the oracle on a sweep point.
        let sb = feat(&[1.0, 0.0, 0.0], RegionRole::SodBg);
        let cf = feat(&[0.6, 0.8, 0.0], RegionRole::CodFg);
        let cb = feat(&[0.0, 1.0, 0.0], RegionRole::CodBg);
        let sf = feat(&[0.8, -0.6, 0.0], RegionRole::SodFg);
        let loss = contrastive_loss(&sf, &sb, &cf, &cb).unwrap().item();
        let expect = loss_from_cosines([0.8, 0.0, 0.6], 0.8 * 1.0 + (-0.6) * 0.0);
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let mk = |scale: f64| {
            let sf = feat(&[0.2, -0.5, 1.0], RegionRole::SodFg);
            let sb = feat(&[-0.3, 0.8, 0.1], RegionRole::SodBg);
            let cf = feat(&[(0.9) * scale, 0.1 * scale, 0.4 * scale], RegionRole::CodFg);
            let cb = feat(&[0.5, 0.5, -0.2], RegionRole::CodBg);
            contrastive_loss(&sf, &sb, &cf, &cb).unwrap().item()
        };
        assert!((mk(1.0) - mk(737.5)).abs() < 1e-6);
        assert!((mk(1.0) - mk(1e-3)).abs() < 1e-6);
    }

    #[test]
    fn zero_norm_vector_is_an_error() {
        let sf = feat(&[0.0, 0.0], RegionRole::SodFg);
        let sb = feat(&[1.0, 0.0], RegionRole::SodBg);
        let cf = feat(&[0.0, 1.0], RegionRole::CodFg);
        let cb = feat(&[1.0, 1.0], RegionRole::CodBg);
        assert!(contrastive_loss(&sf, &sb, &cf, &cb).is_err());
    }

    #[test]
    fn gradient_check_on_all_four_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = 16;
        let base: Vec<ArrayD<f64>> = (0..4)
            .map(|_| {
                ArrayD::from_shape_simple_fn(IxDyn(&[1, c]), || rng.gen_range(-1.0..1.0))
            })
            .collect();
        let build = |vals: &[ArrayD<f64>]| {
            let roles = [RegionRole::SodFg, RegionRole::SodBg, RegionRole::CodFg, RegionRole::CodBg];
            let feats: Vec<RegionFeature<f64>> = vals
                .iter()
                .zip(roles)
                .map(|(v, role)| RegionFeature { vec: Tensor::leaf(v.clone(), true), role })
                .collect();
            (
                contrastive_loss(&feats[0], &feats[1], &feats[2], &feats[3]).unwrap(),
                feats,
            )
        };
        let (loss, feats) = build(&base);
        let grads = loss.backward();
        for i in 0..4 {
            let auto = grads.grad(&feats[i].vec).unwrap().clone();
            let mut f = |x: &ArrayD<f64>| {
                let mut vals = base.clone();
                vals[i] = x.clone();
                build(&vals).0.item()
            };
            let fd = fd_grad_full(&mut f, &base[i], FD_EPS);
            let err = max_rel_err(auto.as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < 1e-4, "input {i} grad rel err {err:.3e}");
        }
    }

    #[test]
    fn region_pool_one_hot_and_uniform() {
        let emb = Tensor::constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 2, 2, 2]),
                vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
            )
            .unwrap(),
        );
        // one-hot at (0, 1)
        let onehot = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let rf = region_pool(&onehot, &emb, RegionRole::SodFg).unwrap();
        assert_eq!(rf.vec.value().as_slice().unwrap(), &[2.0, 20.0]);
        // uniform -> spatial mean
        let ones = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let rf = region_pool(&ones, &emb, RegionRole::SodBg).unwrap();
        assert_eq!(rf.vec.value().as_slice().unwrap(), &[2.5, 25.0]);
    }

    #[test]
    fn region_pool_diagonal_matches_bruteforce() {
        let emb_vals = vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0];
        let emb = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2, 2]), emb_vals.clone()).unwrap(),
        );
        let mask_vals = [1.0, 0.0, 0.0, 1.0];
        let mask = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), mask_vals.to_vec()).unwrap(),
        );
        let rf = region_pool(&mask, &emb, RegionRole::CodFg).unwrap();
        // brute-force weighted mean
        for c in 0..2 {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for p in 0..4 {
                num += mask_vals[p] * emb_vals[c * 4 + p];
                den += mask_vals[p];
            }
            assert!((rf.vec.value()[[0, c]] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn region_pool_rejects_degenerate_mask() {
        let emb = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 2, 2, 2])));
        let mask = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1e-9));
        assert!(matches!(
            region_pool(&mask, &emb, RegionRole::SodFg),
            Err(Error::DegenerateRegion { .. })
        ));
    }

    #[test]
    fn projection_zero_in_zero_out_and_shape() {
        let mut ps = ParamSet::<f64>::new();
        let module = ContrastModule::new(&mut ps, 5, "theta", 8, EMBED_DIM);
        let pass = Pass::eval();
        let zero = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 8, 4, 4])));
        let out = module.project(&pass, &zero);
        assert_eq!(out.shape(), &[1, EMBED_DIM, 4, 4]);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }
}
