//! Distribution matching distillation.
//!
//! The generator gradient is the score difference `s_fake - s_real` at a
//! re-noised copy of each generated sample, pushed back through
//! `d x_t / d x_gen = 1 - t`. The fake model tracks the generator's output
//! distribution with a plain denoising loss on data predictions.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::flowmatch::{scores_from_velocity, standard_normal, Guided, VelocityField, VelocityModel, T_MAX, T_MIN};
use crate::netcore::ParamSet;

/// Default re-noising range for both distillation losses.
pub const DMD_T_RANGE: (f64, f64) = (0.02, 0.98);

/// Generator outputs together with their re-noised copies.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdBatch {
    pub x_gen: Array2<f64>,
    pub t_new: Vec<f64>,
    pub eps: Array2<f64>,
    pub x_t: Array2<f64>,
    pub cond: Vec<usize>,
}

impl DmdBatch {
    /// Build from explicit noise and times.
    pub fn from_parts(x_gen: Array2<f64>, t_new: Vec<f64>, eps: Array2<f64>, cond: Vec<usize>) -> Result<Self> {
        let n = x_gen.nrows();
        if n == 0 {
            return Err(Error::Empty("distillation batch".into()));
        }
        if eps.dim() != x_gen.dim() || t_new.len() != n || cond.len() != n {
            return Err(Error::Shape("distillation batch parts disagree in size".into()));
        }
        let mut x_t = x_gen.clone();
        for (i, mut row) in x_t.rows_mut().into_iter().enumerate() {
            let t = t_new[i];
            for (j, v) in row.iter_mut().enumerate() {
                *v = (1.0 - t) * *v + t * eps[[i, j]];
            }
        }
        Ok(Self { x_gen, t_new, eps, x_t, cond })
    }

    pub fn len(&self) -> usize {
        self.t_new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_new.is_empty()
    }
}

/// Re-noise clean samples at independent `t ~ U(t_range)`.
pub fn renoise<R: Rng + ?Sized>(
    x0: ArrayView2<f64>,
    cond: &[usize],
    rng: &mut R,
    t_range: (f64, f64),
) -> Result<DmdBatch> {
    let (lo, hi) = t_range;
    if !(T_MIN..=T_MAX).contains(&lo) || !(T_MIN..=T_MAX).contains(&hi) || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "t range ({lo}, {hi}) not inside [{T_MIN}, {T_MAX}]"
        )));
    }
    let n = x0.nrows();
    if n == 0 {
        return Err(Error::Empty("renoise batch".into()));
    }
    let t_new: Vec<f64> = (0..n)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
        .collect();
    let eps = standard_normal(n, x0.ncols(), rng);
    DmdBatch::from_parts(x0.to_owned(), t_new, eps, cond.to_vec())
}

/// Raw score difference `s_fake - s_real` at the re-noised states. The real
/// score uses classifier-free guidance at `w_cfg`; the fake score is unguided.
pub fn score_difference<R: VelocityField + ?Sized, F: VelocityField + ?Sized>(
    batch: &DmdBatch,
    real: &R,
    fake: &F,
    w_cfg: f64,
) -> Result<Array2<f64>> {
    if real.data_dim() != fake.data_dim() || real.data_dim() != batch.x_t.ncols() {
        return Err(Error::Shape("real and fake models disagree on data dimension".into()));
    }
    let guided = Guided { field: real, scale: w_cfg };
    let v_real = guided.velocity(batch.x_t.view(), &batch.t_new, &batch.cond)?;
    let v_fake = fake.velocity(batch.x_t.view(), &batch.t_new, &batch.cond)?;
    let s_real = scores_from_velocity(batch.x_t.view(), &batch.t_new, &v_real)?;
    let s_fake = scores_from_velocity(batch.x_t.view(), &batch.t_new, &v_fake)?;
    let d = s_fake - s_real;
    ensure_finite("score difference", d.iter().copied())?;
    Ok(d)
}

/// Per-sample cotangent on `x_gen` for the distribution-matching update.
///
/// `d = s_fake - s_real`, optionally divided per sample by `mean|d| + 1e-8`,
/// then scaled by `1 - t_new`. Gradient descent along this cotangent moves
/// generated samples toward higher real density relative to fake density.
pub fn dmd_generator_cotangent<R: VelocityField + ?Sized, F: VelocityField + ?Sized>(
    batch: &DmdBatch,
    real: &R,
    fake: &F,
    w_cfg: f64,
    normalize: bool,
) -> Result<Array2<f64>> {
    let mut d = score_difference(batch, real, fake, w_cfg)?;
    let dim = d.ncols() as f64;
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        let scale = if normalize {
            let mean_abs = row.iter().map(|v| v.abs()).sum::<f64>() / dim;
            (1.0 - batch.t_new[i]) / (mean_abs + 1e-8)
        } else {
            1.0 - batch.t_new[i]
        };
        row.mapv_inplace(|v| v * scale);
    }
    Ok(d)
}

/// Surrogate loss whose gradient w.r.t. `x_gen` is `cotangent / n`:
/// `mean_i 0.5 ||cot_i||^2` evaluated at the stop-gradient target.
pub fn dmd_surrogate_loss(cotangent: &Array2<f64>) -> f64 {
    let n = cotangent.nrows().max(1) as f64;
    0.5 * cotangent.iter().map(|v| v * v).sum::<f64>() / n
}

/// Value of the denoising loss for any velocity field.
pub fn denoising_loss<F: VelocityField + ?Sized>(fake: &F, batch: &DmdBatch) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("fake-model batch".into()));
    }
    let v = fake.velocity(batch.x_t.view(), &batch.t_new, &batch.cond)?;
    let mut total = 0.0;
    for i in 0..n {
        let t = batch.t_new[i];
        for j in 0..batch.x_t.ncols() {
            let r = batch.x_t[[i, j]] - t * v[[i, j]] - batch.x_gen[[i, j]];
            total += r * r;
        }
    }
    Ok(total / n as f64)
}

/// Denoising loss of the fake model on detached generator outputs:
/// `mean_i ||(x_t - t v_fake) - x_gen||^2`, with gradients for the fake model.
pub fn fake_model_loss(fake: &VelocityModel, batch: &DmdBatch) -> Result<(f64, ParamSet)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("fake-model batch".into()));
    }
    let (v, trace) = fake.velocity_traced(batch.x_t.view(), &batch.t_new, &batch.cond)?;
    let mut resid = batch.x_t.clone();
    for (i, mut row) in resid.rows_mut().into_iter().enumerate() {
        let t = batch.t_new[i];
        for (j, r) in row.iter_mut().enumerate() {
            *r = *r - t * v[[i, j]] - batch.x_gen[[i, j]];
        }
    }
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let mut cot_v = resid;
    for (i, mut row) in cot_v.rows_mut().into_iter().enumerate() {
        let k = -2.0 * batch.t_new[i] / n as f64;
        row.mapv_inplace(|r| r * k);
    }
    let (_, grads) = fake.backward_velocity(&trace, cot_v.view())?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::GaussianField;
    use crate::netcore::Activation;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_range_mixes_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = array![[2.0, -2.0]];
        let b = renoise(x0.view(), &[0], &mut rng, (0.5, 0.5)).unwrap();
        for j in 0..2 {
            assert_eq!(b.x_t[[0, j]], 0.5 * x0[[0, j]] + 0.5 * b.eps[[0, j]]);
        }
    }

    #[test]
    fn renoise_is_reproducible_and_rejects_empty() {
        let x0 = array![[1.0, 0.0], [0.0, 1.0]];
        let a = renoise(x0.view(), &[0, 1], &mut ChaCha8Rng::seed_from_u64(3), DMD_T_RANGE).unwrap();
        let b = renoise(x0.view(), &[0, 1], &mut ChaCha8Rng::seed_from_u64(3), DMD_T_RANGE).unwrap();
        assert_eq!(a, b);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(renoise(empty.view(), &[], &mut ChaCha8Rng::seed_from_u64(3), DMD_T_RANGE).is_err());
        assert!(renoise(x0.view(), &[0, 1], &mut ChaCha8Rng::seed_from_u64(3), (0.0, 0.5)).is_err());
    }

    #[test]
    fn renoised_mean_approaches_scaled_data() {
        let n = 40_000;
        let x0 = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 1.5 } else { -0.5 });
        let b = renoise(x0.view(), &vec![0; n], &mut ChaCha8Rng::seed_from_u64(1), (0.3, 0.3)).unwrap();
        for j in 0..2 {
            let m = b.x_t.column(j).sum() / n as f64;
            // x_t = 0.7 x0 + 0.3 eps; the eps average has std 0.3 / sqrt(n).
            assert!((m - 0.7 * x0[[0, j]]).abs() < 4.0 * 0.3 / (n as f64).sqrt());
        }
    }

    #[test]
    fn identical_models_give_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = VelocityModel::new(2, 4, &[16, 16], Activation::Silu, &mut rng).unwrap();
        let x0 = standard_normal(16, 2, &mut rng);
        let cond: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let b = renoise(x0.view(), &cond, &mut rng, DMD_T_RANGE).unwrap();
        let cot = dmd_generator_cotangent(&b, &model, &model.clone(), 1.0, true).unwrap();
        assert!(cot.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gaussian_score_gap_is_constant_and_points_along_mean() {
        let real = GaussianField::isotropic(vec![0.0, 0.0], 1.0);
        let m = [0.8, -0.3];
        let fake = GaussianField::isotropic(m.to_vec(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = standard_normal(10, 2, &mut rng) * 3.0;
        let b = renoise(x0.view(), &[0; 10], &mut rng, (0.4, 0.4)).unwrap();
        let d = score_difference(&b, &real, &fake, 1.0).unwrap();
        // Closed form: (1-t) m / ((1-t)^2 + t^2).
        let k = 0.6 / (0.36 + 0.16);
        for row in d.rows() {
            assert!((row[0] - k * m[0]).abs() < 1e-12);
            assert!((row[1] - k * m[1]).abs() < 1e-12);
        }
        // Descent moves samples against m, i.e. toward the real mean at 0.
        let cot = dmd_generator_cotangent(&b, &real, &fake, 1.0, true).unwrap();
        for row in cot.rows() {
            assert!(row[0] > 0.0 && row[1] < 0.0);
        }
    }

    #[test]
    fn cotangent_ignores_uniform_rescaling_of_gap() {
        // Doubling the fake mean doubles d for Gaussians; the normalized cotangent is unchanged.
        let real = GaussianField::isotropic(vec![0.0, 0.0], 1.0);
        let f1 = GaussianField::isotropic(vec![0.5, 0.25], 1.0);
        let f2 = GaussianField::isotropic(vec![1.0, 0.5], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = standard_normal(8, 2, &mut rng);
        let b = renoise(x0.view(), &[0; 8], &mut rng, DMD_T_RANGE).unwrap();
        let c1 = dmd_generator_cotangent(&b, &real, &f1, 1.0, true).unwrap();
        let c2 = dmd_generator_cotangent(&b, &real, &f2, 1.0, true).unwrap();
        for (a, c) in c1.iter().zip(c2.iter()) {
            assert!((a - c).abs() < 1e-7);
        }
    }

    #[test]
    fn fake_loss_zero_for_exact_and_direct_for_zero_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fake = VelocityModel::new(2, 1, &[8, 8], Activation::Silu, &mut rng).unwrap();
        fake.params = fake.params.zeros_like();
        let x0 = standard_normal(12, 2, &mut rng);
        let b = renoise(x0.view(), &[0; 12], &mut rng, DMD_T_RANGE).unwrap();
        let (loss, _) = fake_model_loss(&fake, &b).unwrap();
        let direct: f64 = (0..12)
            .map(|i| (0..2).map(|j| (b.x_t[[i, j]] - b.x_gen[[i, j]]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 12.0;
        assert!((loss - direct).abs() < 1e-12);
        assert!(loss >= 0.0);
        assert_eq!(loss, denoising_loss(&fake, &b).unwrap());
    }

    /// Returns `eps - x0` for the rows of one fixed batch.
    struct Oracle(Array2<f64>);

    impl VelocityField for Oracle {
        fn data_dim(&self) -> usize {
            self.0.ncols()
        }
        fn n_conditions(&self) -> usize {
            0
        }
        fn velocity(&self, _x: ArrayView2<f64>, _t: &[f64], _c: &[usize]) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn exact_velocity_gives_zero_denoising_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = standard_normal(20, 2, &mut rng);
        let b = renoise(x0.view(), &[0; 20], &mut rng, DMD_T_RANGE).unwrap();
        let oracle = Oracle(&b.eps - &b.x_gen);
        assert!(denoising_loss(&oracle, &b).unwrap() < 1e-28);
    }
}
