//! Rectified-flow parameterization: `x_t = (1 - t) x0 + t eps`, target
//! velocity `eps - x0`, and the conversions to data prediction and score.
//!
//! Models are conditioned by concatenating `[x, t, one_hot(c)]`; the one-hot
//! has an extra trailing slot for the null condition used by classifier-free
//! guidance.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::netcore::{self, Activation, AdamConfig, ForwardTrace, NetSpec, OptState, ParamSet};
use crate::rngs::normal;

/// Lower clamp for score and sigma evaluations.
pub const T_MIN: f64 = 1e-3;
/// Upper clamp for score and sigma evaluations.
pub const T_MAX: f64 = 1.0 - 1e-3;

/// Anything that predicts a flow velocity for a batch of states.
///
/// `cond[i] == n_conditions()` selects the unconditional (null) prediction.
pub trait VelocityField {
    fn data_dim(&self) -> usize;
    fn n_conditions(&self) -> usize;
    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<Array2<f64>>;

    fn null_condition(&self) -> usize {
        self.n_conditions()
    }
}

/// Classifier-free guided view of a field.
pub struct Guided<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub scale: f64,
}

impl<F: VelocityField + ?Sized> VelocityField for Guided<'_, F> {
    fn data_dim(&self) -> usize {
        self.field.data_dim()
    }

    fn n_conditions(&self) -> usize {
        self.field.n_conditions()
    }

    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<Array2<f64>> {
        let v_cond = self.field.velocity(x, t, cond)?;
        if self.scale == 1.0 {
            return Ok(v_cond);
        }
        let null = vec![self.field.null_condition(); cond.len()];
        let v_uncond = self.field.velocity(x, t, &null)?;
        Ok(cfg_batch(&v_cond, &v_uncond, self.scale))
    }
}

/// `v_uncond + w (v_cond - v_uncond)`.
pub fn cfg_velocity(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Vec<f64> {
    v_cond
        .iter()
        .zip(v_uncond)
        .map(|(c, u)| u + w * (c - u))
        .collect()
}

fn cfg_batch(v_cond: &Array2<f64>, v_uncond: &Array2<f64>, w: f64) -> Array2<f64> {
    let mut out = v_uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(v_cond)
        .for_each(|u, &c| *u += w * (c - *u));
    out
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")))
    }
}

/// `(1 - t) x0 + t eps`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} dims, eps has {}", x0.len(), eps.len())));
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect())
}

/// Data prediction `x_t - t v`.
pub fn velocity_to_x0(x_t: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    x_t.iter().zip(v).map(|(x, v)| x - t * v).collect()
}

/// Score `-(x_t + (1 - t) v) / t`. Singular at `t = 0`, so `t < T_MIN` is rejected.
pub fn velocity_to_score(x_t: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    if !(T_MIN..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("score requested at t = {t} < t_min = {T_MIN}")));
    }
    Ok(x_t.iter().zip(v).map(|(x, v)| -(x + (1.0 - t) * v) / t).collect())
}

pub(crate) fn scores_from_velocity(x_t: ArrayView2<f64>, t: &[f64], v: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x_t.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        let row = velocity_to_score(
            x_t.row(i).as_slice().expect("standard layout"),
            ti,
            v.row(i).as_slice().expect("standard layout"),
        )?;
        out.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

/// Strictly decreasing integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("time grid needs at least two points".into()));
        }
        if points.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument(format!("time grid {points:?} is not strictly decreasing")));
        }
        if points.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument(format!("time grid {points:?} leaves [0, 1]")));
        }
        Ok(Self(points))
    }

    /// `n_steps` equal steps from `start` down to `end`.
    pub fn uniform(start: f64, end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        let pts = (0..=n_steps)
            .map(|k| {
                if k == n_steps {
                    end
                } else {
                    start + (end - start) * k as f64 / n_steps as f64
                }
            })
            .collect();
        Self::new(pts)
    }

    /// Uniform grid over the clamped interval `[T_MIN, T_MAX]`.
    pub fn clamped(n_steps: usize) -> Result<Self> {
        Self::uniform(T_MAX, T_MIN, n_steps)
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn n_steps(&self) -> usize {
        self.0.len() - 1
    }
}

/// Result of Euler integration: every visited state, starting with `z`.
#[derive(Debug, Clone)]
pub struct OdePath {
    pub states: Vec<Array2<f64>>,
}

impl OdePath {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("at least the initial state")
    }
}

/// Euler integration of `dx = v dt` backward along `grid`, with guidance scale `w_cfg`.
pub fn ode_sample<F: VelocityField + ?Sized>(
    field: &F,
    z: ArrayView2<f64>,
    cond: &[usize],
    grid: &TimeGrid,
    w_cfg: f64,
) -> Result<OdePath> {
    let guided = Guided { field, scale: w_cfg };
    let n = z.nrows();
    let mut states = vec![z.to_owned()];
    for w in grid.points().windows(2) {
        let (t_from, t_to) = (w[0], w[1]);
        let x = states.last().expect("non-empty");
        let v = guided.velocity(x.view(), &vec![t_from; n], cond)?;
        let next = x - &(v * (t_from - t_to));
        ensure_finite("ode state", next.iter().copied())?;
        states.push(next);
    }
    Ok(OdePath { states })
}

/// Conditional velocity network over `[x, t, one_hot(c)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub spec: NetSpec,
    pub params: ParamSet,
    pub data_dim: usize,
    pub n_conditions: usize,
}

impl VelocityModel {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        n_conditions: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![Self::input_width(data_dim, n_conditions)];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let spec = NetSpec::new(dims, activation)?;
        let params = netcore::init_params(&spec, rng, false);
        Ok(Self {
            spec,
            params,
            data_dim,
            n_conditions,
        })
    }

    /// Rebuild from stored parameters; the architecture is read off the config.
    pub fn from_params(
        data_dim: usize,
        n_conditions: usize,
        hidden: &[usize],
        activation: Activation,
        params: ParamSet,
    ) -> Result<Self> {
        let mut dims = vec![Self::input_width(data_dim, n_conditions)];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let spec = NetSpec::new(dims, activation)?;
        let probe = netcore::init_params(&spec, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0), false);
        if !probe.same_layout(&params) {
            return Err(Error::Shape("stored parameters do not match the configured architecture".into()));
        }
        Ok(Self {
            spec,
            params,
            data_dim,
            n_conditions,
        })
    }

    pub fn input_width(data_dim: usize, n_conditions: usize) -> usize {
        data_dim + 1 + n_conditions + 1
    }

    /// Network input rows `[x, t, one_hot(c)]`.
    pub fn encode(&self, x: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<Array2<f64>> {
        let n = x.nrows();
        if x.ncols() != self.data_dim || t.len() != n || cond.len() != n {
            return Err(Error::Shape(format!(
                "velocity input: x {:?}, {} times, {} conditions for data dim {}",
                x.dim(),
                t.len(),
                cond.len(),
                self.data_dim
            )));
        }
        if let Some(c) = cond.iter().find(|c| **c > self.n_conditions) {
            return Err(Error::InvalidArgument(format!(
                "condition {c} out of range (n_conditions = {})",
                self.n_conditions
            )));
        }
        let d = self.data_dim;
        let mut input = Array2::zeros((n, Self::input_width(d, self.n_conditions)));
        input.slice_mut(s![.., ..d]).assign(&x);
        for i in 0..n {
            input[[i, d]] = t[i];
            input[[i, d + 1 + cond[i]]] = 1.0;
        }
        Ok(input)
    }

    pub fn velocity_traced(&self, x: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<(Array2<f64>, ForwardTrace)> {
        let input = self.encode(x, t, cond)?;
        netcore::forward(&self.spec, &self.params, input.view())
    }

    /// Pull a velocity cotangent back to the state `x` and to the parameters.
    pub fn backward_velocity(&self, trace: &ForwardTrace, cot_v: ArrayView2<f64>) -> Result<(Array2<f64>, ParamSet)> {
        let (cot_in, grads) = netcore::backward(&self.spec, &self.params, trace, cot_v)?;
        Ok((cot_in.slice(s![.., ..self.data_dim]).to_owned(), grads))
    }
}

impl VelocityField for VelocityModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<Array2<f64>> {
        let input = self.encode(x, t, cond)?;
        netcore::predict(&self.spec, &self.params, input.view())
    }
}

/// Exact velocity field for Gaussian data `N(mean, cov)`.
///
/// Under the interpolation the marginal at time `t` is
/// `N((1-t) m, (1-t)^2 cov + t^2 I)`, so velocity and score are closed-form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub cov: Vec<f64>,
}

impl GaussianField {
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let cov = (0..d * d).map(|k| if k / d == k % d { var } else { 0.0 }).collect();
        Self { mean, cov }
    }

    /// Moment fit (population covariance) to a sample batch.
    pub fn fit(samples: ArrayView2<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n == 0 {
            return Err(Error::Empty("cannot fit a Gaussian to zero samples".into()));
        }
        let d = samples.ncols();
        let mean: Vec<f64> = (0..d).map(|j| samples.column(j).sum() / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        for row in samples.rows() {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]) / n as f64;
                }
            }
        }
        Ok(Self { mean, cov })
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal covariance `(1-t)^2 cov + t^2 I`.
    fn marginal_cov(&self, t: f64) -> Vec<f64> {
        let d = self.dim();
        let a = 1.0 - t;
        (0..d * d)
            .map(|k| a * a * self.cov[k] + if k / d == k % d { t * t } else { 0.0 })
            .collect()
    }

    /// Closed-form score of the time-`t` marginal.
    pub fn marginal_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let a = 1.0 - t;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, m)| xi - a * m).collect();
        let sol = cholesky_solve(&self.marginal_cov(t), &centered)?;
        Ok(sol.into_iter().map(|v| -v).collect())
    }

    fn velocity_row(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        // v = (t I - (1-t) cov) V^{-1} (x - (1-t) m) - m
        let d = self.dim();
        let a = 1.0 - t;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, m)| xi - a * m).collect();
        let sol = cholesky_solve(&self.marginal_cov(t), &centered)?;
        Ok((0..d)
            .map(|i| {
                let cov_term: f64 = (0..d).map(|j| self.cov[i * d + j] * sol[j]).sum();
                t * sol[i] - a * cov_term - self.mean[i]
            })
            .collect())
    }
}

impl VelocityField for GaussianField {
    fn data_dim(&self) -> usize {
        self.dim()
    }

    fn n_conditions(&self) -> usize {
        0
    }

    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], _cond: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let v = self.velocity_row(&row.to_vec(), t[i])?;
            out.row_mut(i).assign(&ndarray::Array1::from(v));
        }
        Ok(out)
    }
}

/// Solve `A x = b` for symmetric positive definite row-major `A`.
fn cholesky_solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = b.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::InvalidArgument("covariance is not positive definite".into()));
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|k| l[k * d + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * d + i];
    }
    Ok(x)
}

/// Isotropic Gaussian mixture whose components double as condition classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTarget {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl MixtureTarget {
    pub fn new(means: Vec<Vec<f64>>, std: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::InvalidArgument("mixture needs one weight per component".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::Shape("mixture means must share a positive dimension".into()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || std <= 0.0 {
            return Err(Error::InvalidArgument("weights must be non-negative and std positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("mixture weights sum to zero".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { means, std, weights })
    }

    /// `n_modes` equally weighted components evenly spaced on a circle.
    pub fn ring(n_modes: usize, radius: f64, std: f64) -> Result<Self> {
        let means = (0..n_modes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n_modes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, std, vec![1.0; n_modes])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    /// Component labels drawn from the mixture weights.
    pub fn sample_conditions<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return k;
                    }
                }
                self.weights.iter().rposition(|w| *w > 0.0).expect("positive total")
            })
            .collect()
    }

    /// One draw per requested component label.
    pub fn sample_given<R: Rng + ?Sized>(&self, cond: &[usize], rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut x = Array2::zeros((cond.len(), d));
        for (i, &c) in cond.iter().enumerate() {
            for j in 0..d {
                x[[i, j]] = self.means[c][j] + self.std * normal(rng);
            }
        }
        x
    }
}

/// `n` labelled draws from the target.
pub fn sample_target<R: Rng + ?Sized>(target: &MixtureTarget, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
    let cond = target.sample_conditions(n, rng);
    let x = target.sample_given(&cond, rng);
    (x, cond)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    out.iter_mut().for_each(|v| *v = normal(rng));
    out
}

/// Conditional flow-matching loss `mean_i ||v(x_t) - (eps - x0)||^2` and its gradient.
pub fn cfm_loss_and_grads(
    model: &VelocityModel,
    x0: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: &[f64],
    cond: &[usize],
) -> Result<(f64, ParamSet)> {
    let n = x0.nrows();
    if n == 0 {
        return Err(Error::Empty("flow-matching batch".into()));
    }
    let mut x_t = Array2::zeros(x0.raw_dim());
    for i in 0..n {
        let (a, b) = (1.0 - t[i], t[i]);
        for j in 0..x0.ncols() {
            x_t[[i, j]] = a * x0[[i, j]] + b * eps[[i, j]];
        }
    }
    let (v, trace) = model.velocity_traced(x_t.view(), t, cond)?;
    let resid = &v - &(&eps - &x0);
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let cot = resid * (2.0 / n as f64);
    let (_, grads) = model.backward_velocity(&trace, cot.view())?;
    Ok((loss, grads))
}

/// One teacher-training step on fresh target draws; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn cfm_train_step<R: Rng + ?Sized>(
    model: &mut VelocityModel,
    opt: &mut OptState,
    target: &MixtureTarget,
    batch: usize,
    rng: &mut R,
    cond_dropout: f64,
    lr: f64,
    hyper: AdamConfig,
) -> Result<f64> {
    if batch == 0 {
        return Err(Error::Empty("flow-matching batch".into()));
    }
    let (x0, mut cond) = sample_target(target, batch, rng);
    let eps = standard_normal(batch, target.dim(), rng);
    let t: Vec<f64> = (0..batch).map(|_| rng.random_range(T_MIN..T_MAX)).collect();
    for c in cond.iter_mut() {
        if rng.random::<f64>() < cond_dropout {
            *c = model.n_conditions;
        }
    }
    let (loss, grads) = cfm_loss_and_grads(model, x0.view(), eps.view(), &t, &cond)?;
    netcore::optimizer_step(&mut model.params, &grads, opt, lr, hyper)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Constant(Vec<f64>);

    impl VelocityField for Constant {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn n_conditions(&self) -> usize {
            0
        }
        fn velocity(&self, x: ArrayView2<f64>, _t: &[f64], _c: &[usize]) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(x.raw_dim(), |(_, j)| self.0[j]))
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        assert_eq!(interpolate(&[2.0, 0.0], &[0.0, 2.0], 0.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(interpolate(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), vec![0.0, 2.0]);
        assert_eq!(interpolate(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(interpolate(&[0.0], &[0.0], 1.5).is_err());
        assert!(interpolate(&[0.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn data_prediction_inverts_interpolation() {
        let x_t = interpolate(&[1.0, 1.0], &[0.0, 0.0], 0.3).unwrap();
        let x0 = velocity_to_x0(&x_t, 0.3, &[-1.0, -1.0]);
        assert!((x0[0] - 1.0).abs() < 1e-15 && (x0[1] - 1.0).abs() < 1e-15);
        assert_eq!(velocity_to_x0(&[0.4, -0.2], 0.7, &[0.0, 0.0]), vec![0.4, -0.2]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x0: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
            let eps: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
            let t: f64 = rng.random_range(0.001..1.0);
            let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
            let back = velocity_to_x0(&interpolate(&x0, &eps, t).unwrap(), t, &v);
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn score_conversion() {
        assert_eq!(velocity_to_score(&[0.0, 0.0], 0.4, &[0.0, 0.0]).unwrap(), vec![-0.0, -0.0]);
        assert_eq!(velocity_to_score(&[1.0, 0.0], 0.5, &[-2.0, 0.0]).unwrap(), vec![-0.0, -0.0]);
        assert!(velocity_to_score(&[1.0], 1e-4, &[0.0]).is_err());

        // Known x0: score = -(x_t - (1-t) x0) / t^2 with v = eps - x0.
        let (x0, eps, t) = ([0.7, -1.2], [0.3, 0.9], 0.35);
        let x_t = interpolate(&x0, &eps, t).unwrap();
        let v = [eps[0] - x0[0], eps[1] - x0[1]];
        let s = velocity_to_score(&x_t, t, &v).unwrap();
        for j in 0..2 {
            let expect = -(x_t[j] - (1.0 - t) * x0[j]) / (t * t);
            assert!((s[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_interpolates_and_extrapolates() {
        assert_eq!(cfg_velocity(&[2.0, 0.0], &[0.0, 0.0], 3.5), vec![7.0, 0.0]);
        assert_eq!(cfg_velocity(&[2.0, 1.0], &[0.5, -1.0], 1.0), vec![2.0, 1.0]);
        assert_eq!(cfg_velocity(&[2.0, 1.0], &[0.5, -1.0], 0.0), vec![0.5, -1.0]);
    }

    #[test]
    fn euler_on_constant_field_is_exact() {
        let k = Constant(vec![0.5, -1.5]);
        let z = array![[1.0, 2.0], [-3.0, 0.0]];
        let grid = TimeGrid::uniform(1.0, 0.0, 7).unwrap();
        let path = ode_sample(&k, z.view(), &[0, 0], &grid, 1.0).unwrap();
        let expect = &z - &array![[0.5, -1.5], [0.5, -1.5]];
        for (a, b) in path.final_state().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(path.states.len(), 8);
    }

    #[test]
    fn one_step_ode_is_one_data_prediction() {
        let g = GaussianField::isotropic(vec![1.0, -1.0], 0.25);
        let z = array![[0.2, 0.9]];
        let grid = TimeGrid::uniform(1.0, 0.0, 1).unwrap();
        let path = ode_sample(&g, z.view(), &[0], &grid, 1.0).unwrap();
        let v = g.velocity(z.view(), &[1.0], &[0]).unwrap();
        let x0 = velocity_to_x0(&[0.2, 0.9], 1.0, v.row(0).as_slice().unwrap());
        assert_eq!(path.final_state().row(0).to_vec(), x0);
    }

    #[test]
    fn gaussian_field_matches_standard_normal_closed_form() {
        let g = GaussianField::isotropic(vec![0.0, 0.0], 1.0);
        let x = array![[0.3, -1.4]];
        for t in [0.1, 0.5, 0.9] {
            let denom = (1.0 - t) * (1.0 - t) + t * t;
            let v = g.velocity(x.view(), &[t], &[0]).unwrap();
            let s = g.marginal_score(&[0.3, -1.4], t).unwrap();
            for j in 0..2 {
                assert!((v[[0, j]] - (2.0 * t - 1.0) * x[[0, j]] / denom).abs() < 1e-12);
                assert!((s[j] + x[[0, j]] / denom).abs() < 1e-12);
            }
            // Score recovered from the velocity agrees with the closed form.
            let via_v = velocity_to_score(&[0.3, -1.4], t, v.row(0).as_slice().unwrap()).unwrap();
            for j in 0..2 {
                assert!((via_v[j] - s[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ring_sampling_respects_weights() {
        let single = MixtureTarget::new(vec![vec![1.0, 1.0]], 0.1, vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, c) = sample_target(&single, 50, &mut rng);
        assert!(c.iter().all(|c| *c == 0));

        let ring = MixtureTarget::ring(8, 2.0, 0.15).unwrap();
        let skewed = MixtureTarget::new(ring.means.clone(), 0.15, {
            let mut w = vec![0.0; 8];
            w[0] = 1.0;
            w
        })
        .unwrap();
        let (_, c) = sample_target(&skewed, 200, &mut rng);
        assert!(c.iter().all(|c| *c == 0));
    }

    #[test]
    fn ring_mean_is_centered_within_clt_bound() {
        let ring = MixtureTarget::ring(8, 2.0, 0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let (x, _) = sample_target(&ring, n, &mut rng);
        // Per-axis variance of the ring: radius^2 / 2 + std^2.
        let sd = (2.0f64 + 0.15 * 0.15).sqrt();
        for j in 0..2 {
            let m = x.column(j).sum() / n as f64;
            assert!(m.abs() < 3.0 * sd / (n as f64).sqrt(), "axis {j}: {m}");
        }
    }

    #[test]
    fn cfm_loss_of_zero_predictor_matches_direct_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = VelocityModel::new(2, 3, &[8, 8], Activation::Silu, &mut rng).unwrap();
        model.params = model.params.zeros_like();
        let x0 = standard_normal(64, 2, &mut rng) + 1.5;
        let eps = standard_normal(64, 2, &mut rng);
        let t: Vec<f64> = (0..64).map(|_| rng.random_range(T_MIN..T_MAX)).collect();
        let (loss, _) = cfm_loss_and_grads(&model, x0.view(), eps.view(), &t, &vec![0; 64]).unwrap();
        let direct = (&eps - &x0).iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn cfm_loss_of_perfect_predictor_is_zero() {
        // A field that always returns eps - x0 for a fixed pair.
        let x0 = array![[1.0, 2.0]];
        let eps = array![[0.5, -0.5]];
        let t = 0.4;
        let x_t = interpolate(&[1.0, 2.0], &[0.5, -0.5], t).unwrap();
        let v = [eps[[0, 0]] - x0[[0, 0]], eps[[0, 1]] - x0[[0, 1]]];
        assert_eq!(velocity_to_x0(&x_t, t, &v), vec![1.0, 2.0]);
    }

    #[test]
    fn condition_out_of_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = VelocityModel::new(2, 3, &[8, 8], Activation::Silu, &mut rng).unwrap();
        assert!(model.velocity(array![[0.0, 0.0]].view(), &[0.5], &[4]).is_err());
        assert!(model.velocity(array![[0.0, 0.0]].view(), &[0.5], &[3]).is_ok());
    }

    #[test]
    fn moment_fit_recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = standard_normal(20_000, 2, &mut rng) * 0.5 + 1.0;
        let g = GaussianField::fit(x.view()).unwrap();
        assert!((g.mean[0] - 1.0).abs() < 0.02);
        assert!((g.cov[0] - 0.25).abs() < 0.02);
        assert!(g.cov[1].abs() < 0.02);
    }
}
