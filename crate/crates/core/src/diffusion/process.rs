use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::latent::{LatentSequence, Velocity};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::param(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `ca * a + cb * b`, elementwise.
fn lincomb<T: Scalar>(ca: f64, a: &Matrix<T>, cb: f64, b: &Matrix<T>) -> Matrix<T> {
    let (ca, cb) = (T::of(ca), T::of(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// Closed-form forward process: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample<T: Scalar>(
    x0: &LatentSequence<T>,
    eps: &LatentSequence<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<LatentSequence<T>> {
    s.check_t(t)?;
    same_shape(x0.matrix(), eps.matrix(), "forward_sample")?;
    Ok(LatentSequence::from_matrix_unchecked(lincomb(
        s.sqrt_alpha_bar(t),
        x0.matrix(),
        s.sqrt_one_minus_alpha_bar(t),
        eps.matrix(),
    )))
}

/// Velocity target: `v_t = sqrt(abar_t) eps - sqrt(1 - abar_t) x0`.
pub fn velocity<T: Scalar>(
    x0: &LatentSequence<T>,
    eps: &LatentSequence<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Velocity<T>> {
    s.check_t(t)?;
    same_shape(x0.matrix(), eps.matrix(), "velocity")?;
    Ok(Velocity::new(lincomb(
        s.sqrt_alpha_bar(t),
        eps.matrix(),
        -s.sqrt_one_minus_alpha_bar(t),
        x0.matrix(),
    )))
}

/// Clean-signal estimate from a noisy state and a velocity:
/// `x0 = sqrt(abar_t) x_t - sqrt(1 - abar_t) v`.
pub fn recover_x0<T: Scalar>(
    x_t: &LatentSequence<T>,
    v: &Velocity<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<LatentSequence<T>> {
    s.check_t(t)?;
    same_shape(x_t.matrix(), v.matrix(), "recover_x0")?;
    Ok(LatentSequence::from_matrix_unchecked(lincomb(
        s.sqrt_alpha_bar(t),
        x_t.matrix(),
        -s.sqrt_one_minus_alpha_bar(t),
        v.matrix(),
    )))
}

/// Noise estimate: `eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) v`.
pub fn recover_noise<T: Scalar>(
    x_t: &LatentSequence<T>,
    v: &Velocity<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<LatentSequence<T>> {
    s.check_t(t)?;
    same_shape(x_t.matrix(), v.matrix(), "recover_noise")?;
    Ok(LatentSequence::from_matrix_unchecked(lincomb(
        s.sqrt_one_minus_alpha_bar(t),
        x_t.matrix(),
        s.sqrt_alpha_bar(t),
        v.matrix(),
    )))
}

/// Gaussian forward-process posterior `q(x_{t'} | x_t, x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    pub mean: LatentSequence<T>,
    pub variance: f64,
}

/// Posterior between adjacent timesteps `t -> t - 1`.
pub fn posterior<T: Scalar>(
    x_t: &LatentSequence<T>,
    x0: &LatentSequence<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Posterior<T>> {
    s.check_t(t)?;
    posterior_between(x_t, x0, t, t - 1, s)
}

/// Posterior from `t` back to any earlier `t_prev` (`0` is the clean
/// signal). Uses the effective step `alpha = abar_t / abar_{t_prev}`, which
/// reduces to the per-step `alpha_t`, `beta_t` when `t_prev = t - 1`.
pub fn posterior_between<T: Scalar>(
    x_t: &LatentSequence<T>,
    x0: &LatentSequence<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Posterior<T>> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(Error::param(format!("posterior needs t_prev < t, got {t_prev} >= {t}")));
    }
    same_shape(x_t.matrix(), x0.matrix(), "posterior")?;
    if t_prev == 0 {
        return Ok(Posterior {
            mean: x0.clone(),
            variance: 0.0,
        });
    }
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let one_minus = 1.0 - ab_t;
    if one_minus <= 0.0 {
        return Err(Error::Numeric(format!("1 - abar_{t} = {one_minus} is not positive")));
    }
    let (alpha, beta) = if t_prev + 1 == t {
        (s.alpha(t), s.beta(t))
    } else {
        let a = ab_t / ab_prev;
        (a, 1.0 - a)
    };
    let variance = ((1.0 - ab_prev) / one_minus * beta).max(0.0);
    let c0 = ab_prev.sqrt() * beta / one_minus;
    let ct = alpha.sqrt() * (1.0 - ab_prev) / one_minus;
    Ok(Posterior {
        mean: LatentSequence::from_matrix_unchecked(lincomb(c0, x0.matrix(), ct, x_t.matrix())),
        variance,
    })
}

/// Classifier-free guidance: `v_uncond + gamma (v_cond - v_uncond)`.
/// `gamma = 1` and `gamma = 0` return the respective branch exactly.
pub fn cfg_combine<T: Scalar>(v_cond: &Velocity<T>, v_uncond: &Velocity<T>, gamma: f64) -> Result<Velocity<T>> {
    same_shape(v_cond.matrix(), v_uncond.matrix(), "cfg_combine")?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::param(format!("guidance scale must be finite and >= 0, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(v_cond.clone());
    }
    if gamma == 0.0 {
        return Ok(v_uncond.clone());
    }
    let g = T::of(gamma);
    Ok(Velocity::new(
        v_uncond.matrix().zip_map(v_cond.matrix(), |u, c| u + g * (c - u)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> LatentSequence<f64> {
        LatentSequence::new(Matrix::from_vec(1, 1, vec![v])).unwrap()
    }

    /// Two-step schedule whose second step has `abar = 0.64`.
    fn abar_064() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.2, 0.2]).unwrap()
    }

    #[test]
    fn scalar_forward_velocity_recover() {
        let s = abar_064();
        assert!((s.alpha_bar(2) - 0.64).abs() < 1e-15);
        let xt = forward_sample(&scalar(1.0), &scalar(0.5), 2, &s).unwrap();
        assert!((xt.matrix().get(0, 0) - 1.1).abs() < 1e-12);
        let v = velocity(&scalar(1.0), &scalar(0.5), 2, &s).unwrap();
        assert!((v.matrix().get(0, 0) + 0.2).abs() < 1e-12);
        let x0 = recover_x0(&xt, &v, 2, &s).unwrap();
        assert!((x0.matrix().get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_endpoints() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap().rescale_terminal().unwrap();
        let (x0, eps) = (scalar(0.7), scalar(-1.3));
        assert_eq!(forward_sample(&x0, &eps, 4, &s).unwrap(), eps);
        assert_eq!(velocity(&x0, &eps, 4, &s).unwrap().matrix().get(0, 0), -0.7);
        let v = Velocity::new(Matrix::from_vec(1, 1, vec![0.25]));
        assert_eq!(recover_x0(&scalar(3.0), &v, 4, &s).unwrap().matrix().get(0, 0), -0.25);
    }

    #[test]
    fn zero_noise_endpoint_returns_x0() {
        // abar_0 = 1 is the only exact unit value; emulate it with t_prev = 0.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let p = posterior(&scalar(5.0), &scalar(2.0), 1, &s).unwrap();
        assert_eq!(p.variance, 0.0);
        assert_eq!(p.mean, scalar(2.0));
    }

    #[test]
    fn posterior_worked_example() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let p = posterior(&scalar(1.0), &scalar(1.0), 2, &s).unwrap();
        assert!((p.variance - 0.0714286).abs() < 1e-6);
        assert!((p.mean.matrix().get(0, 0) - 0.997069).abs() < 1e-6);
    }

    #[test]
    fn posterior_rejects_bad_t() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!(posterior(&scalar(1.0), &scalar(1.0), 0, &s).is_err());
        assert!(posterior(&scalar(1.0), &scalar(1.0), 3, &s).is_err());
    }

    #[test]
    fn shape_mismatch_is_parameter_error() {
        let s = abar_064();
        let a = LatentSequence::<f64>::zeros(2, 3);
        let b = LatentSequence::<f64>::zeros(3, 3);
        assert!(matches!(forward_sample(&a, &b, 1, &s), Err(Error::Parameter(_))));
        assert!(matches!(velocity(&a, &b, 1, &s), Err(Error::Parameter(_))));
        let v = Velocity::new(Matrix::zeros(3, 3));
        assert!(matches!(recover_x0(&a, &v, 1, &s), Err(Error::Parameter(_))));
        assert!(matches!(cfg_combine(&v, &Velocity::new(Matrix::zeros(2, 3)), 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn cfg_scalar_and_identities() {
        let c = Velocity::new(Matrix::from_vec(1, 1, vec![1.0]));
        let u = Velocity::new(Matrix::from_vec(1, 1, vec![0.0]));
        assert_eq!(cfg_combine(&c, &u, 2.5).unwrap().matrix().get(0, 0), 2.5);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert!(cfg_combine(&c, &u, -0.5).is_err());
    }

    proptest! {
        #[test]
        fn posterior_coefficients_nonnegative(t in 2usize..200) {
            let s = NoiseSchedule::build(200, 0.00085, 0.012).unwrap().rescale_terminal().unwrap();
            let one = scalar(1.0);
            let zero = scalar(0.0);
            let c0 = posterior(&zero, &one, t, &s).unwrap().mean.matrix().get(0, 0);
            let ct = posterior(&one, &zero, t, &s).unwrap().mean.matrix().get(0, 0);
            prop_assert!(c0 >= 0.0 && ct >= 0.0);
        }
    }
}
