//! Leave-one-out likelihood machinery: the LOO index, the observed LOO
//! log-likelihood, conditional moments of the mixing variables and the
//! leave-one-out sufficient statistics.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::special_fn::{dorder_ratio, ln_gamma, ln_k};
use crate::vg_model::{Dataset, VgParams};

/// Mahalanobis radius below which a retained observation is treated as
/// sitting at `z_FLOOR` instead of exactly on the location parameter.
pub const Z_FLOOR: f64 = 1e-12;
const Z2_FLOOR: f64 = Z_FLOOR * Z_FLOOR;

/// Index of the observation closest to `mu` in Mahalanobis distance. Ties go
/// to the smallest index.
pub fn loo_index(data: &Dataset, params: &VgParams) -> usize {
    let mut scratch = vec![0.0; params.dim()];
    let mut best = (0, f64::INFINITY);
    for (i, y) in data.rows().enumerate() {
        let (z2, _) = params.point_terms(y, &mut scratch);
        if z2 < best.1 {
            best = (i, z2);
        }
    }
    best.0
}

fn check_dims(params: &VgParams, data: &Dataset) -> Result<()> {
    if params.dim() != data.dim() {
        return Err(Error::Input(format!(
            "data has dimension {}, parameters have dimension {}",
            data.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Observed LOO log-likelihood: the sum of log-densities over every
/// observation except the one at [`loo_index`].
///
/// Retained observations closer than [`Z_FLOOR`] to `mu` (duplicates of the
/// excluded point) are evaluated at distance `Z_FLOOR`.
pub fn loo_loglik(params: &VgParams, data: &Dataset) -> Result<f64> {
    check_dims(params, data)?;
    if data.n() < 2 {
        return Err(Error::Input(format!("LOO likelihood needs n >= 2, got {}", data.n())));
    }
    Ok(loo_loglik_unchecked(params, data))
}

pub(crate) fn loo_loglik_unchecked(params: &VgParams, data: &Dataset) -> f64 {
    let mut scratch = vec![0.0; params.dim()];
    // The running nearest point is held out of the sum until a closer one
    // shows up, so the excluded term never enters (it may be infinite).
    let mut held: Option<(f64, f64, f64)> = None;
    let mut total = 0.0;
    for y in data.rows() {
        let (z2, skew) = params.point_terms(y, &mut scratch);
        match held {
            Some((held_z2, held_z2c, held_skew)) if z2 < held_z2 => {
                total += params.log_density_terms(held_z2c, held_skew);
                held = Some((z2, z2.max(Z2_FLOOR), skew));
            }
            Some(_) => total += params.log_density_terms(z2.max(Z2_FLOOR), skew),
            None => held = Some((z2, z2.max(Z2_FLOOR), skew)),
        }
    }
    total
}

/// Full-data log-likelihood (may be `+inf` when an observation sits on `mu`).
pub fn full_loglik(params: &VgParams, data: &Dataset) -> Result<f64> {
    check_dims(params, data)?;
    let mut scratch = vec![0.0; params.dim()];
    Ok(data
        .rows()
        .map(|y| {
            let (z2, skew) = params.point_terms(y, &mut scratch);
            params.log_density_terms(z2, skew)
        })
        .sum())
}

/// Conditional expectations of `lambda`, `1/lambda` and `log lambda` given
/// each observation, under the generalized inverse Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments {
    pub lambda_hat: Vec<f64>,
    pub inv_lambda_hat: Vec<f64>,
    pub log_lambda_hat: Vec<f64>,
    /// Observations whose Mahalanobis radius was raised to [`Z_FLOOR`].
    pub clamped: Vec<usize>,
}

impl LatentMoments {
    pub fn len(&self) -> usize {
        self.lambda_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_hat.is_empty()
    }
}

/// Posterior moments of the mixing variable for a single observation at
/// Mahalanobis radius `z`, with `c = sqrt(2 nu + gamma' Sigma^-1 gamma)` and
/// Bessel order `p = nu - d/2`. Returns `(E[lambda], E[1/lambda], E[log lambda])`.
pub fn gig_moments(z: f64, c: f64, p: f64) -> (f64, f64, f64) {
    let x = c * z;
    let ln_kp = ln_k(p, x);
    let log_scale = z.ln() - c.ln();
    let lambda_hat = (log_scale + ln_k(p + 1.0, x) - ln_kp).exp();
    let inv_lambda_hat = (-log_scale + ln_k(p - 1.0, x) - ln_kp).exp();
    let log_lambda_hat = log_scale + dorder_ratio(p, x);
    (lambda_hat, inv_lambda_hat, log_lambda_hat)
}

/// E-step: posterior moments for all `n` observations (exclusion happens in
/// [`suff_stats`]).
pub fn latent_moments(params: &VgParams, data: &Dataset) -> Result<LatentMoments> {
    check_dims(params, data)?;
    let n = data.n();
    let c = params.shape_c();
    let p = params.bessel_order();
    let mut scratch = vec![0.0; params.dim()];
    let mut out = LatentMoments {
        lambda_hat: Vec::with_capacity(n),
        inv_lambda_hat: Vec::with_capacity(n),
        log_lambda_hat: Vec::with_capacity(n),
        clamped: Vec::new(),
    };
    for (i, y) in data.rows().enumerate() {
        let (z2, _) = params.point_terms(y, &mut scratch);
        let z = if z2 < Z2_FLOOR {
            out.clamped.push(i);
            Z_FLOOR
        } else {
            z2.sqrt()
        };
        let (l, inv, log) = gig_moments(z, c, p);
        out.lambda_hat.push(l);
        out.inv_lambda_hat.push(inv);
        out.log_lambda_hat.push(log);
    }
    Ok(out)
}

/// Leave-one-out sums of the complete-data sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub s_y: DVector<f64>,
    pub s_y_over_lambda: DVector<f64>,
    pub s_lambda: f64,
    pub s_inv_lambda: f64,
    pub s_log_lambda: f64,
    pub excluded: usize,
}

impl SuffStats {
    /// Number of retained observations, `n - 1`.
    pub fn retained(&self, n: usize) -> f64 {
        (n - 1) as f64
    }
}

pub fn suff_stats(data: &Dataset, moments: &LatentMoments, excluded: usize) -> Result<SuffStats> {
    if excluded >= data.n() {
        return Err(Error::Input(format!("excluded index {excluded} out of range")));
    }
    if moments.len() != data.n() {
        return Err(Error::Input("moments and data lengths differ".into()));
    }
    let d = data.dim();
    let mut stats = SuffStats {
        s_y: DVector::zeros(d),
        s_y_over_lambda: DVector::zeros(d),
        s_lambda: 0.0,
        s_inv_lambda: 0.0,
        s_log_lambda: 0.0,
        excluded,
    };
    for (i, y) in data.rows().enumerate() {
        if i == excluded {
            continue;
        }
        let inv = moments.inv_lambda_hat[i];
        for j in 0..d {
            stats.s_y[j] += y[j];
            stats.s_y_over_lambda[j] += inv * y[j];
        }
        stats.s_lambda += moments.lambda_hat[i];
        stats.s_inv_lambda += inv;
        stats.s_log_lambda += moments.log_lambda_hat[i];
    }
    Ok(stats)
}

/// Expected complete-data LOO log-likelihood split into its conditional
/// normal part `ell_N(mu, Sigma, gamma)` and gamma part `ell_G(nu)`, with the
/// latent moments held fixed and `excluded` left out.
pub fn complete_loglik_components(
    params: &VgParams,
    data: &Dataset,
    moments: &LatentMoments,
    excluded: usize,
) -> Result<(f64, f64)> {
    check_dims(params, data)?;
    let stats = suff_stats(data, moments, excluded)?;
    let m = stats.retained(data.n());
    let d = data.dim() as f64;
    let gq = params.gamma_quad();
    let mut scratch = vec![0.0; params.dim()];
    let mut quad = 0.0;
    for (i, y) in data.rows().enumerate() {
        if i == excluded {
            continue;
        }
        let (z2, skew) = params.point_terms(y, &mut scratch);
        quad += moments.inv_lambda_hat[i] * z2 - 2.0 * skew + moments.lambda_hat[i] * gq;
    }
    let ell_n = -0.5 * m * params.log_det_sigma() - 0.5 * quad - 0.5 * m * d * std::f64::consts::PI.ln();
    let nu = params.nu();
    let ell_g = m * (nu * nu.ln() - ln_gamma(nu)) + (nu - 1.0) * stats.s_log_lambda - nu * stats.s_lambda;
    Ok((ell_n, ell_g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn std_params(nu: f64) -> VgParams {
        VgParams::univariate(0.0, 1.0, 0.0, nu).unwrap()
    }

    #[test]
    fn index_examples() {
        let data = Dataset::univariate(&[-1.0, 0.2, 3.0]).unwrap();
        assert_eq!(loo_index(&data, &std_params(1.0)), 1);
        let tie = Dataset::univariate(&[1.0, -1.0]).unwrap();
        assert_eq!(loo_index(&tie, &std_params(1.0)), 0);
        let tie_rev = Dataset::univariate(&[-1.0, 1.0, 1.0]).unwrap();
        assert_eq!(loo_index(&tie_rev, &std_params(1.0)), 0);

        let p2 = VgParams::new(dvector![0.0, 0.0], dmatrix![2.0, 1.0; 1.0, 2.0], dvector![0.0, 0.0], 1.0)
            .unwrap();
        // squared distances: (1.1,-1.1) gives 2.42, (1,1) gives 2/3
        let data2 = Dataset::from_rows(&[vec![1.1, -1.1], vec![1.0, 1.0]]).unwrap();
        assert_eq!(loo_index(&data2, &p2), 1);
    }

    #[test]
    fn two_points_keep_the_farther() {
        let p = VgParams::univariate(0.1, 1.3, 0.2, 0.7).unwrap();
        let data = Dataset::univariate(&[0.3, -2.0]).unwrap();
        let got = loo_loglik(&p, &data).unwrap();
        assert_eq!(got, p.log_pdf(&[-2.0]).unwrap());
        assert!(loo_loglik(&p, &Dataset::univariate(&[1.0]).unwrap()).is_err());
    }

    #[test]
    fn finite_where_full_likelihood_is_not() {
        let data = Dataset::univariate(&[-0.8, -0.1, 0.05, 0.4, 1.9]).unwrap();
        for y in data.rows() {
            let p = VgParams::univariate(y[0], 1.0, 0.0, 0.2).unwrap();
            assert_eq!(full_loglik(&p, &data).unwrap(), f64::INFINITY);
            assert!(loo_loglik(&p, &data).unwrap().is_finite());
        }
    }

    #[test]
    fn duplicate_at_mu_is_clamped() {
        let data = Dataset::univariate(&[0.5, 0.5, 2.0]).unwrap();
        let p = VgParams::univariate(0.5, 1.0, 0.0, 0.3).unwrap();
        assert!(loo_loglik(&p, &data).unwrap().is_finite());
        let m = latent_moments(&p, &data).unwrap();
        assert_eq!(m.clamped, vec![0, 1]);
        assert!(m.lambda_hat.iter().chain(&m.inv_lambda_hat).all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn laplace_moment_closed_form() {
        // nu = 1, d = 1: order 1/2, c = sqrt(2); K_{3/2}/K_{1/2} = 1 + 1/x
        let c = 2f64.sqrt();
        let (l, inv, _) = gig_moments(1.0, c, 0.5);
        let expected = (1.0 / c) * (1.0 + 1.0 / c);
        assert!((l - expected).abs() < 1e-13);
        assert!((l - 1.207_106_781_186_547_5).abs() < 1e-13);
        assert!(l * inv >= 1.0);
    }

    #[test]
    fn degenerate_weights_and_two_point_stats() {
        let data = Dataset::univariate(&[1.0, 2.0, 4.0]).unwrap();
        let ones = LatentMoments {
            lambda_hat: vec![1.0; 3],
            inv_lambda_hat: vec![1.0; 3],
            log_lambda_hat: vec![0.0; 3],
            clamped: vec![],
        };
        let s = suff_stats(&data, &ones, 1).unwrap();
        assert_eq!(s.s_y, s.s_y_over_lambda);
        assert_eq!((s.s_lambda, s.s_inv_lambda), (2.0, 2.0));
        assert_eq!(s.s_y[0], 5.0);
        assert!(suff_stats(&data, &ones, 3).is_err());

        let two = Dataset::univariate(&[3.0, -1.5]).unwrap();
        let m = LatentMoments {
            lambda_hat: vec![0.5, 2.0],
            inv_lambda_hat: vec![3.0, 0.75],
            log_lambda_hat: vec![-1.0, 0.4],
            clamped: vec![],
        };
        let s = suff_stats(&two, &m, 0).unwrap();
        assert_eq!(s.s_y[0], -1.5);
        assert_eq!(s.s_y_over_lambda[0], -1.125);
        assert_eq!((s.s_lambda, s.s_inv_lambda, s.s_log_lambda), (2.0, 0.75, 0.4));
    }

    #[test]
    fn gamma_component_with_constant_moments() {
        let data = Dataset::univariate(&[0.1, 0.5, 1.0, 2.0]).unwrap();
        let ones = LatentMoments {
            lambda_hat: vec![1.0; 4],
            inv_lambda_hat: vec![1.0; 4],
            log_lambda_hat: vec![0.0; 4],
            clamped: vec![],
        };
        let nu = 2.5;
        let p = std_params(nu);
        let (_, ell_g) = complete_loglik_components(&p, &data, &ones, 0).unwrap();
        let expected = 3.0 * (nu * nu.ln() - ln_gamma(nu) - nu);
        assert!((ell_g - expected).abs() < 1e-12);

        // nu = 1: the log-lambda term has coefficient zero.
        let mut shifted = ones.clone();
        shifted.log_lambda_hat = vec![-7.0, 3.0, 0.5, 11.0];
        let p1 = std_params(1.0);
        let a = complete_loglik_components(&p1, &data, &ones, 0).unwrap().1;
        let b = complete_loglik_components(&p1, &data, &shifted, 0).unwrap().1;
        assert_eq!(a, b);
    }
}
