//! ECM algorithm maximizing the leave-one-out likelihood.
//!
//! One iteration runs a local point search over nearby observations, then
//! three E/CM pairs updating `(mu, gamma)`, `Sigma` and `nu` in turn. Every
//! CM-step is followed by a line search on `[0, 1]` that only accepts
//! improvements of the LOO log-likelihood, so the trace is non-decreasing.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::loo::{latent_moments, loo_index, loo_loglik_unchecked, suff_stats, LatentMoments, SuffStats};
use crate::special_fn::{psi, psi1};
use crate::summary::{mad, median};
use crate::vg_model::{Dataset, VgParams};

/// Golden-section ratio `(sqrt(5) - 1) / 2`.
const INV_PHI: f64 = 0.618_033_988_749_894_8;
const NR_STEP_TOL: f64 = 1e-10;
/// Consistency constant turning a MAD into a normal standard deviation.
const MAD_SCALE: f64 = 1.4826;

/// Parameter blocks held at their starting values during a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FixedMask {
    pub mu: bool,
    pub sigma: bool,
    pub gamma: bool,
    pub nu: bool,
}

impl FixedMask {
    /// Parses a comma list such as `"nu,gamma"`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut mask = Self::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "mu" => mask.mu = true,
                "sigma" => mask.sigma = true,
                "gamma" => mask.gamma = true,
                "nu" => mask.nu = true,
                other => return Err(Error::Input(format!("unknown parameter block '{other}'"))),
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmConfig {
    /// Relative-increment tolerance of the stopping rule.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of nearest observations tried by the local point search.
    pub m_search: usize,
    pub nu_min: f64,
    pub nu_max: f64,
    pub nr_max_iter: usize,
    pub line_search_evals: usize,
    pub fixed: FixedMask,
}

impl Default for EcmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            m_search: 20,
            nu_min: 1e-3,
            nu_max: 200.0,
            nr_max_iter: 50,
            line_search_evals: 30,
            fixed: FixedMask::default(),
        }
    }
}

impl EcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Input(format!("tol must be positive, got {}", self.tol)));
        }
        if self.m_search == 0 {
            return Err(Error::Input("m_search must be at least 1".into()));
        }
        if !(self.nu_min > 0.0 && self.nu_min < self.nu_max && self.nu_max.is_finite()) {
            return Err(Error::Input(format!(
                "need 0 < nu_min < nu_max, got [{}, {}]",
                self.nu_min, self.nu_max
            )));
        }
        if self.line_search_evals == 0 {
            return Err(Error::Input("line_search_evals must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIter,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: VgParams,
    /// LOO log-likelihood at the start (entry 0) and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace always holds the starting value")
    }
}

/// Result of [`fit_location_only`].
#[derive(Debug, Clone)]
pub struct LocationFit {
    pub mu: DVector<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub warnings: Vec<String>,
}

impl LocationFit {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace always holds the starting value")
    }
}

#[derive(Debug, Default)]
struct Warnings(Vec<String>);

impl Warnings {
    fn push(&mut self, msg: String) {
        if !self.0.contains(&msg) {
            warn!("{msg}");
            self.0.push(msg);
        }
    }
}

fn check_fit_input(data: &Dataset, cfg: &EcmConfig) -> Result<()> {
    cfg.validate()?;
    let d = data.dim();
    if data.n() < d + 2 {
        return Err(Error::Input(format!(
            "need at least d + 2 = {} observations, got {}",
            d + 2,
            data.n()
        )));
    }
    Ok(())
}

/// Starting values `(mean, covariance, 0, 4d)`, or with `robust` the
/// coordinatewise median and a diagonal scale from the squared scaled MAD.
pub fn initialize(data: &Dataset, robust: bool) -> Result<VgParams> {
    let d = data.dim();
    let n = data.n();
    if n < d + 2 {
        return Err(Error::Init(format!("need at least {} observations, got {n}", d + 2)));
    }
    let (mu, sigma) = if robust {
        let mut mu = DVector::zeros(d);
        let mut sigma = DMatrix::zeros(d, d);
        for j in 0..d {
            let col = data.column(j);
            mu[j] = median(&col)?;
            let scale = MAD_SCALE * mad(&col)?;
            if scale <= 0.0 {
                return Err(Error::Init(format!("coordinate {j} has zero MAD")));
            }
            sigma[(j, j)] = scale * scale;
        }
        (mu, sigma)
    } else {
        (data.mean(), data.covariance())
    };
    VgParams::new(mu, sigma, DVector::zeros(d), 4.0 * d as f64)
        .map_err(|e| Error::Init(format!("degenerate starting scale: {e}")))
}

/// Tries the `m` observations nearest to the current `mu` as new locations
/// and keeps the one with the highest LOO log-likelihood. Ties keep the
/// current `mu`, then the smallest observation index.
pub fn local_point_search(params: &VgParams, data: &Dataset, m: usize) -> VgParams {
    let current = loo_loglik_unchecked(params, data);
    point_search_scored(params, current, data, m).0
}

fn point_search_scored(params: &VgParams, current: f64, data: &Dataset, m: usize) -> (VgParams, f64) {
    let mut scratch = vec![0.0; params.dim()];
    let mut ranked: Vec<(f64, usize)> = data
        .rows()
        .enumerate()
        .map(|(i, y)| (params.point_terms(y, &mut scratch).0, i))
        .collect();
    let m = m.min(ranked.len());
    if m < ranked.len() {
        ranked.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.truncate(m);
    }
    let mut candidates: Vec<usize> = ranked.into_iter().map(|(_, i)| i).collect();
    candidates.sort_unstable();

    let mut best: Option<(VgParams, f64)> = None;
    let mut best_ll = current;
    for i in candidates {
        let row = data.row(i);
        if row.iter().zip(params.mu().iter()).all(|(a, b)| a == b) {
            continue;
        }
        let cand = params
            .with_mu(DVector::from_column_slice(row))
            .expect("data rows are finite and match the dimension");
        let ll = loo_loglik_unchecked(&cand, data);
        if ll > best_ll {
            best_ll = ll;
            best = Some((cand, ll));
        }
    }
    best.unwrap_or_else(|| (params.clone(), current))
}

fn retained(n: usize) -> f64 {
    (n - 1) as f64
}

/// Joint `(mu, gamma)` update: the stationary point of the expected
/// conditional-normal log-likelihood with the excluded index held fixed.
pub fn cm_step_mu_gamma(stats: &SuffStats, n: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = retained(n);
    let scale = stats.s_inv_lambda * stats.s_lambda;
    let den = scale - m * m;
    if !(den.abs() > 1e-12 * scale) {
        return Err(Error::Degenerate(format!(
            "(mu, gamma) update denominator vanishes ({den:e})"
        )));
    }
    let mu = (&stats.s_y_over_lambda * stats.s_lambda - &stats.s_y * m) / den;
    let gamma = (&stats.s_y - &mu * m) / stats.s_lambda;
    Ok((mu, gamma))
}

/// `mu` update with `gamma` frozen: `(S_{y/lambda} - (n-1) gamma) / S_{1/lambda}`.
pub fn cm_step_mu(stats: &SuffStats, n: usize, gamma: &DVector<f64>) -> Result<DVector<f64>> {
    if !(stats.s_inv_lambda > 0.0 && stats.s_inv_lambda.is_finite()) {
        return Err(Error::Degenerate(format!(
            "S_(1/lambda) = {} is not a usable weight total",
            stats.s_inv_lambda
        )));
    }
    Ok((&stats.s_y_over_lambda - gamma * retained(n)) / stats.s_inv_lambda)
}

/// `gamma` update with `mu` frozen: `(S_y - (n-1) mu) / S_lambda`.
pub fn cm_step_gamma(stats: &SuffStats, n: usize, mu: &DVector<f64>) -> Result<DVector<f64>> {
    if !(stats.s_lambda > 0.0 && stats.s_lambda.is_finite()) {
        return Err(Error::Degenerate(format!("S_lambda = {} is not usable", stats.s_lambda)));
    }
    Ok((&stats.s_y - mu * retained(n)) / stats.s_lambda)
}

/// `Sigma` update at fixed `(mu, gamma)`:
/// `(1/(n-1)) sum_{i != k} E[(1/lambda_i) (r_i - lambda_i gamma)(r_i - lambda_i gamma)']`
/// with `r_i = y_i - mu`. The result is symmetrized and must be positive
/// definite.
pub fn cm_step_sigma(
    data: &Dataset,
    mu: &DVector<f64>,
    gamma: &DVector<f64>,
    moments: &LatentMoments,
    excluded: usize,
    n: usize,
) -> Result<DMatrix<f64>> {
    let d = data.dim();
    let mut outer = DMatrix::zeros(d, d);
    let mut resid_sum = DVector::zeros(d);
    let mut s_lambda = 0.0;
    for (i, y) in data.rows().enumerate() {
        if i == excluded {
            continue;
        }
        let r = DVector::from_iterator(d, y.iter().zip(mu.iter()).map(|(a, b)| a - b));
        outer += (&r * r.transpose()) * moments.inv_lambda_hat[i];
        resid_sum += r;
        s_lambda += moments.lambda_hat[i];
    }
    let cross = &resid_sum * gamma.transpose();
    let mut sigma = (outer - &cross - cross.transpose() + gamma * gamma.transpose() * s_lambda) / retained(n);
    sigma = (&sigma + sigma.transpose()) * 0.5;
    if sigma.iter().any(|v| !v.is_finite()) || nalgebra::Cholesky::new(sigma.clone()).is_none() {
        return Err(Error::Degenerate("Sigma update is not positive definite".into()));
    }
    Ok(sigma)
}

/// Outcome of the `nu` Newton-Raphson step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuUpdate {
    pub nu: f64,
    /// True when the root lies outside `[nu_min, nu_max]` and the bound was returned.
    pub clamped: bool,
}

/// Score of the expected gamma log-likelihood in `nu`.
pub fn nu_score(stats: &SuffStats, n: usize, nu: f64) -> f64 {
    retained(n) * (1.0 + nu.ln() - psi(nu)) + stats.s_log_lambda - stats.s_lambda
}

/// Newton-Raphson on `log nu` for the root of [`nu_score`], safeguarded by
/// bisection and clamped to `[nu_min, nu_max]`.
pub fn cm_step_nu(stats: &SuffStats, n: usize, nu_start: f64, cfg: &EcmConfig) -> NuUpdate {
    let m = retained(n);
    if nu_score(stats, n, cfg.nu_max) >= 0.0 {
        return NuUpdate { nu: cfg.nu_max, clamped: true };
    }
    if nu_score(stats, n, cfg.nu_min) <= 0.0 {
        return NuUpdate { nu: cfg.nu_min, clamped: true };
    }
    let (mut lo, mut hi) = (cfg.nu_min.ln(), cfg.nu_max.ln());
    let mut u = nu_start.clamp(cfg.nu_min, cfg.nu_max).ln();
    for _ in 0..cfg.nr_max_iter {
        let nu = u.exp();
        let g = nu_score(stats, n, nu);
        if g > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        // d g / d log(nu); strictly negative since psi'(nu) > 1/nu.
        let slope = m * (1.0 - nu * psi1(nu));
        let mut next = u - g / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - u).abs();
        u = next;
        if step < NR_STEP_TOL {
            break;
        }
    }
    NuUpdate { nu: u.exp(), clamped: false }
}

/// Point on the segment `old + alpha (new - old)`; `None` when infeasible.
fn interpolate(old: &VgParams, new: &VgParams, alpha: f64) -> Option<VgParams> {
    if alpha == 1.0 {
        return Some(new.clone());
    }
    let mu = old.mu() + (new.mu() - old.mu()) * alpha;
    let gamma = old.gamma() + (new.gamma() - old.gamma()) * alpha;
    let nu = old.nu() + (new.nu() - old.nu()) * alpha;
    if old.sigma() == new.sigma() {
        return old.with_mu(mu).ok()?.with_gamma(gamma).ok()?.with_nu(nu).ok();
    }
    let sigma = old.sigma() + (new.sigma() - old.sigma()) * alpha;
    VgParams::new(mu, sigma, gamma, nu).ok()
}

#[derive(Debug, Clone)]
pub struct LineSearch {
    pub params: VgParams,
    pub alpha: f64,
    pub loglik: f64,
}

/// Searches `alpha` in `[0, 1]` for the best LOO log-likelihood along
/// `old + alpha (new - old)`: a probe at `alpha = 1` followed by golden-section
/// probes. Returns `old` (`alpha = 0`) unless some probe strictly improves on it.
/// Infeasible points (non-PD `Sigma`, non-positive `nu`) are skipped.
pub fn line_search(old: &VgParams, new: &VgParams, data: &Dataset, cfg: &EcmConfig) -> LineSearch {
    let base = loo_loglik_unchecked(old, data);
    line_search_scored(old, base, new, data, cfg.line_search_evals)
}

fn line_search_scored(old: &VgParams, base: f64, new: &VgParams, data: &Dataset, evals: usize) -> LineSearch {
    let mut best = LineSearch { params: old.clone(), alpha: 0.0, loglik: base };
    let eval = |alpha: f64, best: &mut LineSearch| -> f64 {
        match interpolate(old, new, alpha) {
            Some(p) => {
                let ll = loo_loglik_unchecked(&p, data);
                if ll.is_nan() {
                    return f64::NEG_INFINITY;
                }
                if ll > best.loglik {
                    *best = LineSearch { params: p, alpha, loglik: ll };
                }
                ll
            }
            None => f64::NEG_INFINITY,
        }
    };
    eval(1.0, &mut best);
    if evals >= 3 {
        let (mut a, mut b) = (0.0_f64, 1.0_f64);
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let mut fc = eval(c, &mut best);
        let mut fd = eval(d, &mut best);
        for _ in 3..evals {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = eval(c, &mut best);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = eval(d, &mut best);
            }
        }
    }
    best
}

fn note_clamped(moments: &LatentMoments, excluded: usize, warnings: &mut Warnings) {
    if moments.clamped.iter().any(|&i| i != excluded) {
        warnings.push(format!(
            "retained observation(s) coincide with mu; Mahalanobis radius clamped to {:e}",
            crate::loo::Z_FLOOR
        ));
    }
}

fn e_step(params: &VgParams, data: &Dataset, warnings: &mut Warnings) -> Result<(LatentMoments, SuffStats)> {
    let k = loo_index(data, params);
    let moments = latent_moments(params, data)?;
    note_clamped(&moments, k, warnings);
    let stats = suff_stats(data, &moments, k)?;
    Ok((moments, stats))
}

fn converged(prev: f64, cur: f64, tol: f64) -> bool {
    (cur - prev).abs() / (prev.abs() + 1.0) < tol
}

/// Tracks the LOO index across iterations to flag a search that keeps
/// alternating between two observations.
#[derive(Default)]
struct OscillationWatch {
    history: Vec<usize>,
    flips: usize,
}

impl OscillationWatch {
    fn observe(&mut self, k: usize, warnings: &mut Warnings) {
        self.history.push(k);
        let h = &self.history;
        if h.len() >= 3 && h[h.len() - 1] == h[h.len() - 3] && h[h.len() - 1] != h[h.len() - 2] {
            self.flips += 1;
            if self.flips == 5 {
                warnings.push("LOO index oscillates between two observations".into());
            }
        } else {
            self.flips = 0;
        }
    }
}

/// Full ECM fit. Without `init`, starts from [`initialize`] (non-robust).
pub fn fit(data: &Dataset, cfg: &EcmConfig, init: Option<VgParams>) -> Result<FitResult> {
    check_fit_input(data, cfg)?;
    let n = data.n();
    let fixed = cfg.fixed;
    let mut params = match init {
        Some(p) => {
            if p.dim() != data.dim() {
                return Err(Error::Input("initial parameters do not match the data dimension".into()));
            }
            p
        }
        None => initialize(data, false)?,
    };
    if !fixed.nu && !(cfg.nu_min..=cfg.nu_max).contains(&params.nu()) {
        params = params.with_nu(params.nu().clamp(cfg.nu_min, cfg.nu_max))?;
    }
    let mut warnings = Warnings::default();
    let mut watch = OscillationWatch::default();
    let mut ll = loo_loglik_unchecked(&params, data);
    if !ll.is_finite() {
        return Err(Error::Init(format!("LOO log-likelihood at the starting values is {ll}")));
    }
    let mut trace = vec![ll];
    let mut termination = Termination::MaxIter;

    for _ in 0..cfg.max_iter {
        let prev = ll;

        if !fixed.mu {
            (params, ll) = point_search_scored(&params, ll, data, cfg.m_search);
        }

        if !(fixed.mu && fixed.gamma) {
            let (_, stats) = e_step(&params, data, &mut warnings)?;
            let proposal = match (fixed.mu, fixed.gamma) {
                (false, false) => cm_step_mu_gamma(&stats, n)
                    .and_then(|(mu, gamma)| params.with_mu(mu)?.with_gamma(gamma)),
                (false, true) => cm_step_mu(&stats, n, params.gamma()).and_then(|mu| params.with_mu(mu)),
                _ => cm_step_gamma(&stats, n, params.mu()).and_then(|g| params.with_gamma(g)),
            };
            match proposal {
                Ok(new) => {
                    let ls = line_search_scored(&params, ll, &new, data, cfg.line_search_evals);
                    (params, ll) = (ls.params, ls.loglik);
                }
                Err(e) => warnings.push(format!("(mu, gamma) step skipped: {e}")),
            }
        }

        if !fixed.sigma {
            let (moments, stats) = e_step(&params, data, &mut warnings)?;
            let proposal = cm_step_sigma(data, params.mu(), params.gamma(), &moments, stats.excluded, n)
                .and_then(|s| params.with_sigma(s));
            match proposal {
                Ok(new) => {
                    let ls = line_search_scored(&params, ll, &new, data, cfg.line_search_evals);
                    (params, ll) = (ls.params, ls.loglik);
                }
                Err(e) => warnings.push(format!("Sigma step skipped: {e}")),
            }
        }

        if !fixed.nu {
            let (_, stats) = e_step(&params, data, &mut warnings)?;
            let update = cm_step_nu(&stats, n, params.nu(), cfg);
            if update.clamped {
                warnings.push(format!("nu update clamped to {}", update.nu));
            }
            let new = params.with_nu(update.nu)?;
            let ls = line_search_scored(&params, ll, &new, data, cfg.line_search_evals);
            (params, ll) = (ls.params, ls.loglik);
        }

        watch.observe(loo_index(data, &params), &mut warnings);
        trace.push(ll);
        if converged(prev, ll, cfg.tol) {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(FitResult {
        params,
        iterations: trace.len() - 1,
        loglik_trace: trace,
        termination,
        warnings: warnings.0,
    })
}

/// Location-only ECM: local point search, E-step and `mu` update with line
/// search, holding `(Sigma, gamma, nu)` of `fixed` constant.
pub fn fit_location_only(
    data: &Dataset,
    fixed: &VgParams,
    cfg: &EcmConfig,
    init_mu: &DVector<f64>,
) -> Result<LocationFit> {
    check_fit_input(data, cfg)?;
    if fixed.dim() != data.dim() {
        return Err(Error::Input("fixed parameters do not match the data dimension".into()));
    }
    let n = data.n();
    let mut params = fixed.with_mu(init_mu.clone())?;
    let mut warnings = Warnings::default();
    let mut watch = OscillationWatch::default();
    let mut ll = loo_loglik_unchecked(&params, data);
    let mut trace = vec![ll];
    let mut termination = Termination::MaxIter;

    for _ in 0..cfg.max_iter {
        let prev = ll;
        (params, ll) = point_search_scored(&params, ll, data, cfg.m_search);
        let (_, stats) = e_step(&params, data, &mut warnings)?;
        match cm_step_mu(&stats, n, params.gamma()).and_then(|mu| params.with_mu(mu)) {
            Ok(new) => {
                let ls = line_search_scored(&params, ll, &new, data, cfg.line_search_evals);
                (params, ll) = (ls.params, ls.loglik);
            }
            Err(e) => warnings.push(format!("mu step skipped: {e}")),
        }
        watch.observe(loo_index(data, &params), &mut warnings);
        trace.push(ll);
        if converged(prev, ll, cfg.tol) {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(LocationFit {
        mu: params.mu().clone(),
        iterations: trace.len() - 1,
        loglik_trace: trace,
        termination,
        warnings: warnings.0,
    })
}
