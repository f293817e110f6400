//! Feed-forward network substrate.
//!
//! Every learnable model in the crate (student generator, fake score model,
//! teacher, discriminator heads) is a plain multilayer perceptron stored as a
//! [`ParamSet`]. The forward pass records a [`ForwardTrace`] holding every
//! pre-activation and activation, which is enough to replay exact reverse-mode
//! gradients and to tap hidden features for the discriminator.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named, shaped block of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors.
///
/// Iteration follows insertion order, so any reduction over a `ParamSet`
/// (norms, fingerprints, serialization) is reproducible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        self.entries.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|t| t.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    /// True when both sets hold the same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.entries {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("add_scaled between parameter sets of different layout".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    /// FNV-1a hash over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for t in &self.entries {
            feed(t.name.as_bytes());
            for d in &t.shape {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copy of the set with every name prefixed, used when several models
    /// share one checkpoint namespace.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|t| Tensor {
                    name: format!("{prefix}{}", t.name),
                    ..t.clone()
                })
                .collect(),
        }
    }

    /// Sub-set of tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|rest| Tensor {
                        name: rest.to_string(),
                        ..t.clone()
                    })
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Self) -> Result<()> {
        for t in other.entries {
            self.insert(t.name, t.shape, t.data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`, given the activation value `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths and hidden activation of an MLP. The output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "network needs at least one hidden layer, got dims {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {layer_dims:?}")));
        }
        Ok(Self { layer_dims, activation })
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Width of the activation produced by layer `i`.
    pub fn width(&self, layer: usize) -> usize {
        self.layer_dims[layer + 1]
    }

    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.depth() {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

fn weight_name(layer: usize) -> String {
    format!("l{layer}.w")
}

fn bias_name(layer: usize) -> String {
    format!("l{layer}.b")
}

/// Uniform fan-in initialization. With `zero_final` the output layer starts at
/// zero, so the network initially outputs 0 for every input.
pub fn init_params<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R, zero_final: bool) -> ParamSet {
    let mut params = ParamSet::new();
    for layer in 0..spec.depth() {
        let (fan_in, fan_out) = (spec.layer_dims[layer], spec.layer_dims[layer + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let zero = zero_final && layer + 1 == spec.depth();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if zero { 0.0 } else { rng.random_range(-bound..bound) })
                .collect()
        };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        params
            .insert(weight_name(layer), vec![fan_out, fan_in], w)
            .expect("fresh names");
        params.insert(bias_name(layer), vec![fan_out], b).expect("fresh names");
    }
    params
}

fn layer_params<'a>(
    spec: &NetSpec,
    params: &'a ParamSet,
    layer: usize,
) -> Result<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
    let (fan_in, fan_out) = (spec.layer_dims[layer], spec.layer_dims[layer + 1]);
    let w = params
        .get(&weight_name(layer))
        .ok_or_else(|| Error::Shape(format!("missing tensor {}", weight_name(layer))))?;
    let b = params
        .get(&bias_name(layer))
        .ok_or_else(|| Error::Shape(format!("missing tensor {}", bias_name(layer))))?;
    if w.shape != [fan_out, fan_in] || b.shape != [fan_out] {
        return Err(Error::Shape(format!(
            "layer {layer}: expected weight [{fan_out}, {fan_in}] and bias [{fan_out}], got {:?} and {:?}",
            w.shape, b.shape
        )));
    }
    let w = ArrayView2::from_shape((fan_out, fan_in), &w.data).expect("shape checked");
    let b = ArrayView1::from(&b.data[..]);
    Ok((w, b))
}

fn check_input(spec: &NetSpec, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} does not match network input dimension {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
    fingerprint: u64,
}

impl ForwardTrace {
    /// Number of recorded layers; equals the network depth.
    pub fn depth(&self) -> usize {
        self.act.len()
    }

    /// Activation produced by layer `layer` (post-nonlinearity).
    pub fn activation(&self, layer: usize) -> Option<&Array2<f64>> {
        self.act.get(layer)
    }

    pub fn pre_activation(&self, layer: usize) -> Option<&Array2<f64>> {
        self.pre.get(layer)
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }

    pub fn output(&self) -> &Array2<f64> {
        self.act.last().expect("depth >= 2")
    }
}

/// Forward pass without recording a trace.
pub fn predict(spec: &NetSpec, params: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(spec, &x)?;
    let mut h: Option<Array2<f64>> = None;
    for layer in 0..spec.depth() {
        let (w, b) = layer_params(spec, params, layer)?;
        let input = h.as_ref().map(|a| a.view()).unwrap_or(x);
        let mut z = input.dot(&w.t());
        z += &b;
        let act = spec.layer_activation(layer);
        if act != Activation::Identity {
            z.mapv_inplace(|v| act.apply(v));
        }
        h = Some(z);
    }
    Ok(h.expect("depth >= 2"))
}

/// Forward pass recording every pre-activation and activation.
pub fn forward(spec: &NetSpec, params: &ParamSet, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTrace)> {
    check_input(spec, &x)?;
    let mut pre = Vec::with_capacity(spec.depth());
    let mut act: Vec<Array2<f64>> = Vec::with_capacity(spec.depth());
    for layer in 0..spec.depth() {
        let (w, b) = layer_params(spec, params, layer)?;
        let input = act.last().map(|a| a.view()).unwrap_or(x);
        let mut z = input.dot(&w.t());
        z += &b;
        let f = spec.layer_activation(layer);
        let a = if f == Activation::Identity { z.clone() } else { z.mapv(|v| f.apply(v)) };
        pre.push(z);
        act.push(a);
    }
    let out = act.last().expect("depth >= 2").clone();
    Ok((
        out,
        ForwardTrace {
            input: x.to_owned(),
            pre,
            act,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// Exact reverse-mode gradients of `<out_cotangent, outputs>`.
///
/// Returns the cotangent on the network input and the parameter gradients,
/// laid out like `params`.
pub fn backward(
    spec: &NetSpec,
    params: &ParamSet,
    trace: &ForwardTrace,
    out_cotangent: ArrayView2<f64>,
) -> Result<(Array2<f64>, ParamSet)> {
    backward_with_taps(spec, params, trace, Some(out_cotangent), &[])
}

/// Backward pass with cotangents injected at hidden activations as well as
/// (optionally) at the output. `taps` pairs a layer index with the cotangent
/// on that layer's activation.
pub fn backward_with_taps(
    spec: &NetSpec,
    params: &ParamSet,
    trace: &ForwardTrace,
    out_cotangent: Option<ArrayView2<f64>>,
    taps: &[(usize, ArrayView2<f64>)],
) -> Result<(Array2<f64>, ParamSet)> {
    if trace.depth() != spec.depth() || trace.input.ncols() != spec.input_dim() {
        return Err(Error::StaleTrace);
    }
    if trace.fingerprint != params.fingerprint() {
        return Err(Error::StaleTrace);
    }
    let n = trace.input.nrows();
    let mut grads = params.zeros_like();
    let mut carried: Option<Array2<f64>> = None;

    for layer in (0..spec.depth()).rev() {
        let width = spec.width(layer);
        let mut g = carried.take().unwrap_or_else(|| Array2::zeros((n, width)));
        if layer + 1 == spec.depth() {
            if let Some(oc) = &out_cotangent {
                if oc.dim() != (n, width) {
                    return Err(Error::Shape(format!(
                        "output cotangent {:?} does not match output {:?}",
                        oc.dim(),
                        (n, width)
                    )));
                }
                g += oc;
            }
        }
        for (tap, cot) in taps.iter().filter(|(l, _)| *l == layer) {
            if cot.dim() != (n, width) {
                return Err(Error::Shape(format!(
                    "tap cotangent at layer {tap} has shape {:?}, activation is {:?}",
                    cot.dim(),
                    (n, width)
                )));
            }
            g += cot;
        }
        if let Some((tap, _)) = taps.iter().find(|(l, _)| *l >= spec.depth()) {
            return Err(Error::InvalidArgument(format!("tap layer {tap} out of range")));
        }

        let f = spec.layer_activation(layer);
        if f != Activation::Identity {
            let (z, a) = (&trace.pre[layer], &trace.act[layer]);
            ndarray::Zip::from(&mut g)
                .and(z)
                .and(a)
                .for_each(|gv, &zv, &av| *gv *= f.derivative(zv, av));
        }
        let input = if layer == 0 { &trace.input } else { &trace.act[layer - 1] };
        let (w, _) = layer_params(spec, params, layer)?;

        let gw = g.t().dot(input);
        let gb = g.sum_axis(Axis(0));
        grads
            .get_mut(&weight_name(layer))
            .expect("zeros_like keeps names")
            .data
            .copy_from_slice(gw.as_standard_layout().as_slice().expect("standard layout"));
        grads
            .get_mut(&bias_name(layer))
            .expect("zeros_like keeps names")
            .data
            .copy_from_slice(gb.as_slice().expect("contiguous"));

        carried = Some(g.dot(&w));
    }
    Ok((carried.expect("depth >= 2"), grads))
}

/// Adam moment decay rates and stabilizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam first/second moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update. Parameters are left untouched if any gradient is
/// non-finite.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptState,
    lr: f64,
    hyper: AdamConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Shape("optimizer: parameter, gradient and moment layouts differ".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = hyper.beta1 * m.data[i] + (1.0 - hyper.beta1) * gi;
            v.data[i] = hyper.beta2 * v.data[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn probe_cotangent(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 1.37 + 0.3).cos())
}

/// Maximum relative error between the backward pass and central differences,
/// over every parameter, for the scalar `<c, net(x)>` with a fixed probe
/// cotangent `c`.
pub fn grad_check(spec: &NetSpec, params: &ParamSet, x: ArrayView2<f64>, h: f64) -> Result<f64> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let (out, trace) = forward(spec, params, x)?;
    let cot = probe_cotangent(out.nrows(), out.ncols());
    let (_, grads) = backward(spec, params, &trace, cot.view())?;
    let objective = |p: &ParamSet| -> Result<f64> {
        let y = predict(spec, p, x)?;
        Ok((&y * &cot).sum())
    };

    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for (ti, tensor) in params.iter().enumerate() {
        for k in 0..tensor.data.len() {
            let orig = tensor.data[k];
            probe.entries[ti].data[k] = orig + h;
            let up = objective(&probe)?;
            probe.entries[ti].data[k] = orig - h;
            let down = objective(&probe)?;
            probe.entries[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grads.entries[ti].data[k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_identity(dim: usize) -> (NetSpec, ParamSet) {
        // Two identity layers so the hidden-layer requirement holds.
        let spec = NetSpec::new(vec![dim, dim, dim], Activation::Identity).unwrap();
        let mut p = ParamSet::new();
        let eye: Vec<f64> = (0..dim * dim).map(|i| if i / dim == i % dim { 1.0 } else { 0.0 }).collect();
        for l in 0..2 {
            p.insert(weight_name(l), vec![dim, dim], eye.clone()).unwrap();
            p.insert(bias_name(l), vec![dim], vec![0.0; dim]).unwrap();
        }
        (spec, p)
    }

    #[test]
    fn identity_network_is_identity() {
        let (spec, p) = linear_identity(3);
        let x = array![[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]];
        let (y, trace) = forward(&spec, &p, x.view()).unwrap();
        assert_eq!(y, x);
        assert_eq!(trace.depth(), 2);
    }

    #[test]
    fn zero_weights_tanh_give_zero() {
        let spec = NetSpec::new(vec![2, 4, 3], Activation::Tanh).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(1), false).zeros_like();
        let y = predict(&spec, &p, array![[3.0, -7.0]].view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_hand_computed_matrix_chain() {
        let spec = NetSpec::new(vec![2, 16, 2], Activation::Tanh).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(7), false);
        let x = [0.3, -1.1];
        let w0 = &p.get("l0.w").unwrap().data;
        let b0 = &p.get("l0.b").unwrap().data;
        let w1 = &p.get("l1.w").unwrap().data;
        let b1 = &p.get("l1.b").unwrap().data;
        let hidden: Vec<f64> = (0..16)
            .map(|j| (w0[j * 2] * x[0] + w0[j * 2 + 1] * x[1] + b0[j]).tanh())
            .collect();
        let expect: Vec<f64> = (0..2)
            .map(|o| (0..16).map(|j| w1[o * 16 + j] * hidden[j]).sum::<f64>() + b1[o])
            .collect();
        let y = predict(&spec, &p, array![[x[0], x[1]]].view()).unwrap();
        for o in 0..2 {
            assert!((y[[0, o]] - expect[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn input_width_mismatch_is_rejected() {
        let spec = NetSpec::new(vec![2, 4, 1], Activation::Silu).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0), false);
        let err = forward(&spec, &p, array![[1.0, 2.0, 3.0]].view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn spec_requires_hidden_layer() {
        assert!(NetSpec::new(vec![2, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn linear_layer_gradients_are_outer_products() {
        let (spec, p) = linear_identity(2);
        let x = array![[1.0, 2.0]];
        let g = array![[0.5, -1.0]];
        let (_, trace) = forward(&spec, &p, x.view()).unwrap();
        let (gin, grads) = backward(&spec, &p, &trace, g.view()).unwrap();
        // Last layer sees the identity of x as input: grad_W = g x^T, grad_b = g.
        assert_eq!(grads.get("l1.w").unwrap().data, vec![0.5, 1.0, -1.0, -2.0]);
        assert_eq!(grads.get("l1.b").unwrap().data, vec![0.5, -1.0]);
        assert_eq!(gin, g);
    }

    #[test]
    fn zero_final_layer_blocks_earlier_gradients() {
        let spec = NetSpec::new(vec![3, 8, 8, 1], Activation::Silu).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(3), true);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let (_, trace) = forward(&spec, &p, x.view()).unwrap();
        let (gin, grads) = backward(&spec, &p, &trace, array![[1.0], [1.0]].view()).unwrap();
        for name in ["l0.w", "l0.b", "l1.w", "l1.b"] {
            assert!(grads.get(name).unwrap().data.iter().all(|v| *v == 0.0), "{name}");
        }
        assert!(gin.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn finite_difference_agreement_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Tanh, Activation::Silu, Activation::Identity] {
            let spec = NetSpec::new(vec![4, 16, 16, 2], act).unwrap();
            let p = init_params(&spec, &mut rng, false);
            let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64 * 0.37).sin());
            let err = grad_check(&spec, &p, x.view(), 1e-4).unwrap();
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let spec = NetSpec::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        let mut p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0), false);
        let (_, trace) = forward(&spec, &p, array![[1.0, 0.0]].view()).unwrap();
        p.get_mut("l0.b").unwrap().data[0] += 1.0;
        let err = backward(&spec, &p, &trace, array![[1.0]].view()).unwrap_err();
        assert!(matches!(err, Error::StaleTrace));
    }

    #[test]
    fn taps_expose_the_forward_activations() {
        let spec = NetSpec::new(vec![2, 5, 3, 1], Activation::Silu).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(5), false);
        let x = array![[0.4, -0.2]];
        let (_, trace) = forward(&spec, &p, x.view()).unwrap();
        let (w, b) = layer_params(&spec, &p, 0).unwrap();
        let mut h0 = x.dot(&w.t()) + b;
        h0.mapv_inplace(|v| Activation::Silu.apply(v));
        assert_eq!(trace.activation(0).unwrap(), &h0);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let spec = NetSpec::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let mut p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(2), false);
        let before = p.clone();
        let mut st = OptState::new(&p);
        optimizer_step(&mut p, &before.zeros_like(), &mut st, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    fn scalar_param(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", vec![1], vec![w]).unwrap();
        p
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = scalar_param(1.0);
        let mut st = OptState::new(&p);
        let g = scalar_param(2.0);
        optimizer_step(&mut p, &g, &mut st, 0.1, AdamConfig::default()).unwrap();
        assert!(p.get("w").unwrap().data[0] < 1.0);

        let mut p = scalar_param(1.0);
        let mut st = OptState::new(&p);
        for _ in 0..200 {
            let w = p.get("w").unwrap().data[0];
            optimizer_step(&mut p, &scalar_param(2.0 * w), &mut st, 0.1, AdamConfig::default()).unwrap();
        }
        assert!(p.get("w").unwrap().data[0].abs() < 1e-3, "{:?}", p.get("w"));
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut p = scalar_param(1.0);
        let mut st = OptState::new(&p);
        let err = optimizer_step(&mut p, &scalar_param(f64::NAN), &mut st, 0.1, AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.get("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let spec = NetSpec::new(vec![3, 32, 32, 2], Activation::Silu).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9), false);
        let x = Array2::from_shape_fn((17, 3), |(i, j)| (i as f64 - j as f64) * 0.1);
        let a = predict(&spec, &p, x.view()).unwrap();
        let (b, _) = forward(&spec, &p, x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paramset_rejects_bad_shapes_and_duplicates() {
        let mut p = ParamSet::new();
        assert!(p.insert("a", vec![2, 2], vec![0.0; 3]).is_err());
        p.insert("a", vec![1], vec![0.0]).unwrap();
        assert!(p.insert("a", vec![1], vec![0.0]).is_err());
    }
}
