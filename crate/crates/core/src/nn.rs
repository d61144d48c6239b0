//! Parameters, layers, and the optimizer.
//!
//! [`Var`] is a named, shared parameter slot. Layers hold `Var` handles and
//! bind them into a graph through a [`Pass`], which controls three things per
//! forward: which parameter groups receive gradients, which modules may
//! advance their internal buffers (spectral-norm power iteration, batch-norm
//! running statistics), and whether normalization uses batch or running
//! statistics. This is what lets one training step evaluate the frozen
//! discriminator inside a generator loss without the discriminator's state
//! moving.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Conv2dSpec, GradMap, Scalar, SharedArray, Tensor};

/// Named, shared parameter or buffer.
pub struct Var<F: Scalar> {
    name: String,
    data: SharedArray<F>,
    trainable: bool,
}

impl<F: Scalar> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            name: self.name.clone(),
            data: Rc::clone(&self.data),
            trainable: self.trainable,
        }
    }
}

impl<F: Scalar> Var<F> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> ArrayD<F> {
        self.data.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set(&self, value: ArrayD<F>) {
        assert_eq!(self.data.borrow().shape(), value.shape(), "set() shape mismatch");
        *self.data.borrow_mut() = value;
    }

    pub fn shared(&self) -> &SharedArray<F> {
        &self.data
    }

    pub fn update(&self, f: impl FnOnce(&mut ArrayD<F>)) {
        f(&mut self.data.borrow_mut());
    }
}

/// Registry of every parameter and buffer of a model, in registration order.
#[derive(Default)]
pub struct ParamSet<F: Scalar> {
    vars: Vec<Var<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { vars: Vec::new(), by_name: HashMap::new() }
    }

    fn register(&mut self, name: &str, init: ArrayD<F>, trainable: bool) -> Var<F> {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let var = Var {
            name: name.to_string(),
            data: Rc::new(RefCell::new(init)),
            trainable,
        };
        self.by_name.insert(name.to_string(), self.vars.len());
        self.vars.push(var.clone());
        var
    }

    pub fn var(&mut self, name: &str, init: ArrayD<F>) -> Var<F> {
        self.register(name, init, true)
    }

    pub fn buffer(&mut self, name: &str, init: ArrayD<F>) -> Var<F> {
        self.register(name, init, false)
    }

    pub fn get(&self, name: &str) -> Option<&Var<F>> {
        self.by_name.get(name).map(|&i| &self.vars[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Var<F>> {
        self.vars.iter()
    }

    /// Trainable parameter count under a name prefix.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|v| v.trainable && v.name.starts_with(prefix))
            .map(|v| v.len())
            .sum()
    }

    /// Digest of all parameters and buffers under a prefix (optimizer state
    /// excluded). Element bytes are canonicalized through `f64`.
    pub fn group_hash(&self, prefix: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.vars.iter().filter(|v| v.name.starts_with(prefix)) {
            hasher.update(v.name.as_bytes());
            for &x in v.data.borrow().iter() {
                hasher.update(x.to64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// One graph-building context: binds `Var`s to leaves and scopes gradient
/// and buffer-update permissions by name prefix.
pub struct Pass<F: Scalar> {
    train: bool,
    trainable: Vec<String>,
    updating: Vec<String>,
    leaves: RefCell<HashMap<String, Tensor<F>>>,
}

impl<F: Scalar> Pass<F> {
    /// Inference: no gradients, no buffer updates, running statistics.
    pub fn eval() -> Self {
        Pass {
            train: false,
            trainable: Vec::new(),
            updating: Vec::new(),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Training pass: gradients flow into `trainable` prefixes; modules whose
    /// parameters match `updating` may advance buffers and use batch
    /// statistics.
    pub fn train(trainable: &[&str], updating: &[&str]) -> Self {
        Pass {
            train: true,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            updating: updating.iter().map(|s| s.to_string()).collect(),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn updates(&self, name: &str) -> bool {
        self.train && self.updating.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn wants_grad(&self, var: &Var<F>) -> bool {
        self.train
            && var.trainable
            && self.trainable.iter().any(|p| var.name.starts_with(p.as_str()))
    }

    /// Graph leaf for a parameter; one leaf per name per pass, so gradients
    /// from shared modules accumulate.
    pub fn leaf(&self, var: &Var<F>) -> Tensor<F> {
        if let Some(t) = self.leaves.borrow().get(&var.name) {
            return t.clone();
        }
        let t = Tensor::leaf(var.value(), self.wants_grad(var));
        self.leaves.borrow_mut().insert(var.name.clone(), t.clone());
        t
    }

    /// Gradient of a bound parameter from a backward sweep, if any.
    pub fn grad<'g>(&self, grads: &'g GradMap<F>, var: &Var<F>) -> Option<&'g ArrayD<F>> {
        let leaves = self.leaves.borrow();
        let leaf = leaves.get(&var.name)?;
        grads.grad(leaf)
    }
}

/// Deterministic per-parameter RNG: independent of registration order.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// He-normal initialization for a conv weight `[cout, cin, kh, kw]`.
pub fn he_init<F: Scalar>(seed: u64, name: &str, shape: &[usize]) -> ArrayD<F> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = param_rng(seed, name);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        // Box-Muller keeps us independent of distribution crates.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        F::cast((-2.0 * u1.ln()).sqrt() * u2.cos() * std)
    })
}

fn unit_vector<F: Scalar>(seed: u64, name: &str, n: usize) -> ArrayD<F> {
    let mut rng = param_rng(seed, name);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    ArrayD::from_shape_vec(IxDyn(&[n]), v.into_iter().map(F::cast).collect()).unwrap()
}

/// Plain convolution layer.
pub struct Conv2d<F: Scalar> {
    pub weight: Var<F>,
    pub bias: Option<Var<F>>,
    pub spec: Conv2dSpec,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        ps: &mut ParamSet<F>,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = ps.var(&wname, he_init(seed, &wname, &[cout, cin, kernel, kernel]));
        let bias = bias.then(|| ps.var(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let w = pass.leaf(&self.weight);
        let b = self.bias.as_ref().map(|b| pass.leaf(b));
        x.conv2d(&w, b.as_ref(), self.spec)
    }
}

/// Spectrally normalized convolution: the effective weight is `W / sigma`,
/// with `sigma = u^T W v` estimated by power iteration. `u` and `v` persist
/// as buffers and advance one iteration per forward, but only in passes that
/// update this module; elsewhere the stored vectors are used, which makes the
/// normalized weight an exact smooth function of `W` for gradient checks.
pub struct SpectralConv2d<F: Scalar> {
    pub weight: Var<F>,
    pub bias: Option<Var<F>>,
    pub u: Var<F>,
    pub v: Var<F>,
    pub spec: Conv2dSpec,
}

impl<F: Scalar> SpectralConv2d<F> {
    pub fn new(
        ps: &mut ParamSet<F>,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = ps.var(&wname, he_init(seed, &wname, &[cout, cin, kernel, kernel]));
        let bias = bias.then(|| ps.var(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        let k = cin * kernel * kernel;
        let uname = format!("{name}.sn_u");
        let vname = format!("{name}.sn_v");
        let u = ps.buffer(&uname, unit_vector(seed, &uname, cout));
        let v = ps.buffer(&vname, unit_vector(seed, &vname, k));
        let layer = SpectralConv2d { weight, bias, u, v, spec };
        // Settle the estimate so sigma is a sane positive value from the
        // first (possibly frozen) forward.
        for _ in 0..5 {
            layer.power_iterate();
        }
        layer
    }

    /// One power-iteration step on the stored vectors.
    pub fn power_iterate(&self) {
        let w = self.weight.value();
        let shape = w.shape().to_vec();
        let (cout, k) = (shape[0], shape[1] * shape[2] * shape[3]);
        let w2 = w.view().into_shape_with_order((cout, k)).unwrap();
        let u = self.u.value();
        // v = normalize(W^T u); u' = normalize(W v)
        let mut v_new = vec![F::zero(); k];
        for i in 0..cout {
            let ui = u[[i]];
            for (j, vv) in v_new.iter_mut().enumerate() {
                *vv += w2[[i, j]] * ui;
            }
        }
        normalize_in_place(&mut v_new);
        let mut u_new = vec![F::zero(); cout];
        for (i, uu) in u_new.iter_mut().enumerate() {
            let mut acc = F::zero();
            for (j, vv) in v_new.iter().enumerate() {
                acc += w2[[i, j]] * *vv;
            }
            *uu = acc;
        }
        normalize_in_place(&mut u_new);
        self.u.set(ArrayD::from_shape_vec(IxDyn(&[cout]), u_new).unwrap());
        self.v.set(ArrayD::from_shape_vec(IxDyn(&[k]), v_new).unwrap());
    }

    /// The normalized weight as a graph tensor.
    pub fn effective_weight(&self, pass: &Pass<F>) -> Tensor<F> {
        if pass.updates(&self.weight.name) {
            self.power_iterate();
        }
        let w = pass.leaf(&self.weight);
        let shape = self.weight.shape();
        let (cout, k) = (shape[0], shape[1] * shape[2] * shape[3]);
        let u = self.u.value();
        let v = self.v.value();
        // sigma = u^T W v = sum(W * outer(u, v)); u, v are constants here.
        let mut m = vec![F::zero(); cout * k];
        for i in 0..cout {
            let ui = u[[i]];
            for j in 0..k {
                m[i * k + j] = ui * v[[j]];
            }
        }
        let m = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&shape), m).unwrap());
        // tiny floor keeps the all-zero weight case finite (0 / eps = 0)
        let sigma = w.mul(&m).sum_all().add_scalar(F::cast(1e-12));
        w.div(&sigma)
    }

    pub fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let w = self.effective_weight(pass);
        let b = self.bias.as_ref().map(|b| pass.leaf(b));
        x.conv2d(&w, b.as_ref(), self.spec)
    }
}

fn normalize_in_place<F: Scalar>(v: &mut [F]) {
    let norm = v
        .iter()
        .map(|&x| x * x)
        .sum::<F>()
        .sqrt()
        .max(F::cast(1e-12));
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Batch normalization layer.
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Var<F>,
    pub beta: Var<F>,
    pub running_mean: Var<F>,
    pub running_var: Var<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(ps: &mut ParamSet<F>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: ps.var(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), F::one())),
            beta: ps.var(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ps.buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: ps.buffer(
                &format!("{name}.running_var"),
                ArrayD::from_elem(IxDyn(&[channels]), F::one()),
            ),
            momentum: F::cast(0.1),
            eps: F::cast(1e-5),
        }
    }

    pub fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let updating = pass.updates(&self.gamma.name);
        x.batch_norm(
            &pass.leaf(&self.gamma),
            &pass.leaf(&self.beta),
            self.running_mean.shared(),
            self.running_var.shared(),
            updating,
            updating,
            self.momentum,
            self.eps,
        )
    }
}

/// Two 3x3 convolutions with a skip connection.
pub struct ResBlock<F: Scalar> {
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
}

impl<F: Scalar> ResBlock<F> {
    pub fn new(ps: &mut ParamSet<F>, seed: u64, name: &str, channels: usize) -> Self {
        let block = ResBlock {
            conv1: Conv2d::new(ps, seed, &format!("{name}.conv1"), channels, channels, 3, Conv2dSpec::same(3, 1), true),
            conv2: Conv2d::new(ps, seed, &format!("{name}.conv2"), channels, channels, 3, Conv2dSpec::same(3, 1), true),
        };
        // identity at initialization: residual branches otherwise compound
        // activation variance across the decoder's block chain
        block.conv2.weight.update(|w| w.fill(F::zero()));
        block
    }

    pub fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let h = self.conv1.forward(pass, x).relu();
        let h = self.conv2.forward(pass, &h);
        x.add(&h)
    }
}

/// Adaptive moment estimation with default coefficients, no weight decay.
pub struct Adam<F: Scalar> {
    states: HashMap<String, AdamState<F>>,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

pub struct AdamState<F: Scalar> {
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
    pub t: u64,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Adam {
            states: HashMap::new(),
            beta1: F::cast(0.9),
            beta2: F::cast(0.999),
            eps: F::cast(1e-8),
        }
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one update to every parameter that received a gradient in this
    /// pass. Learning rate is resolved per parameter name.
    pub fn step(
        &mut self,
        params: &ParamSet<F>,
        pass: &Pass<F>,
        grads: &GradMap<F>,
        lr_of: impl Fn(&str) -> F,
    ) {
        for var in params.iter().filter(|v| v.is_trainable()) {
            let Some(grad) = pass.grad(grads, var) else {
                continue;
            };
            let state = self.states.entry(var.name().to_string()).or_insert_with(|| AdamState {
                m: ArrayD::zeros(IxDyn(&var.shape())),
                v: ArrayD::zeros(IxDyn(&var.shape())),
                t: 0,
            });
            state.t += 1;
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let bc1 = F::one() - b1.powi(state.t as i32);
            let bc2 = F::one() - b2.powi(state.t as i32);
            let lr = lr_of(var.name());
            var.update(|data| {
                let (ds, ms, vs, gs) = (
                    data.as_slice_mut().unwrap(),
                    state.m.as_slice_mut().unwrap(),
                    state.v.as_slice_mut().unwrap(),
                    grad.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| grad.iter().copied().collect()),
                );
                for i in 0..ds.len() {
                    let g = gs[i];
                    ms[i] = b1 * ms[i] + (F::one() - b1) * g;
                    vs[i] = b2 * vs[i] + (F::one() - b2) * g * g;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    ds[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<F>> {
        self.states.get(name)
    }

    pub fn insert_state(&mut self, name: String, state: AdamState<F>) {
        self.states.insert(name, state);
    }

    pub fn states(&self) -> impl Iterator<Item = (&String, &AdamState<F>)> {
        self.states.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{fd_grad_full, max_rel_err, FD_EPS};

    #[test]
    fn pass_scopes_gradients_by_prefix() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.var("alpha.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let b = ps.var("beta.w", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let pass = Pass::train(&["alpha."], &[]);
        let loss = pass.leaf(&a).mul(&pass.leaf(&b)).sum_all();
        let grads = loss.backward();
        assert!(pass.grad(&grads, &a).is_some());
        assert!(pass.grad(&grads, &b).is_none());
    }

    #[test]
    fn spectral_norm_converges_to_unit_top_singular_value() {
        // Dense SVD oracle (Jacobi via nalgebra) on a 16x16 random matrix.
        let mut ps = ParamSet::<f64>::new();
        let layer = SpectralConv2d::new(
            &mut ps,
            7,
            "sn",
            16,
            16,
            1,
            Conv2dSpec::unit(),
            false,
        );
        for _ in 0..50 {
            layer.power_iterate();
        }
        let pass = Pass::train(&["sn."], &[]);
        let w_eff = layer.effective_weight(&pass).value().clone();
        let flat: Vec<f64> = w_eff.iter().copied().collect();
        let m = nalgebra::DMatrix::from_row_slice(16, 16, &flat);
        let svd = m.svd(false, false);
        let top = svd.singular_values.max();
        assert!(
            (top - 1.0).abs() < 1e-3,
            "top singular value of normalized weight = {top}"
        );
    }

    #[test]
    fn spectral_conv_gradient_exact_when_frozen() {
        let mut ps = ParamSet::<f64>::new();
        let layer = SpectralConv2d::new(&mut ps, 3, "sn", 2, 3, 3, Conv2dSpec::same(3, 1), false);
        // settle u, v, then freeze
        for _ in 0..20 {
            layer.power_iterate();
        }
        let x0 = ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 5, 5]), {
            let mut rng = super::param_rng(11, "x");
            move || rng.gen_range(-1.0..1.0)
        });
        let w0 = layer.weight.value();
        let build = |ps_layer: &SpectralConv2d<f64>| {
            let pass = Pass::train(&["sn."], &[]); // no updating prefix: frozen
            ps_layer
                .forward(&pass, &Tensor::constant(x0.clone()))
                .sigmoid()
                .mean_all()
        };
        let pass = Pass::train(&["sn."], &[]);
        let loss = layer
            .forward(&pass, &Tensor::constant(x0.clone()))
            .sigmoid()
            .mean_all();
        let grads = loss.backward();
        let auto = pass.grad(&grads, &layer.weight).unwrap().clone();
        let mut f = |w: &ArrayD<f64>| {
            layer.weight.set(w.clone());
            build(&layer).item()
        };
        let fd = fd_grad_full(&mut f, &w0, FD_EPS);
        layer.weight.set(w0);
        let err = max_rel_err(auto.as_slice().unwrap(), fd.as_slice().unwrap());
        assert!(err < 1e-6, "frozen spectral conv weight grad rel err {err:.3e}");
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.var("w", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut adam = Adam::new();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let pass = Pass::train(&[""], &[]);
            let leaf = pass.leaf(&w);
            let loss = leaf.mul(&leaf).sum_all();
            let grads = loss.backward();
            adam.step(&ps, &pass, &grads, |_| 0.1);
            last = loss.item();
        }
        assert!(last < 1e-2, "loss after 200 Adam steps: {last}");
    }
}
