//! Simulation study of the convergence rate of the LOO location estimator.
//!
//! For every `(nu, n)` pair, replicates of a standardized symmetric VG sample
//! are drawn, the location is estimated with the other parameters held at
//! their true values, and the interquartile range of the estimates is
//! recorded. A power law `IQR = a n^b` fitted per `nu` gives the rate
//! estimate `beta_hat = -b`. The scaled estimates `n^beta_hat * mu_hat` are
//! then fitted with a symmetric VG (location and skewness frozen at 0).

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::ecm::{fit, fit_location_only, EcmConfig, FixedMask};
use crate::error::{Error, Result};
use crate::summary::{iqr, mad, mean_sd, median, quantile_sorted, sorted};
use crate::vg_model::{Dataset, VgParams};

/// Shape cap used when fitting the scaled estimates.
pub const SCALED_FIT_NU_CAP: f64 = 30.0;
/// Monte Carlo size of the fitted-distribution side of the Q-Q data.
pub const DEFAULT_QQ_MC_SIZE: usize = 20_000;

const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySpec {
    pub nu_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub qq_mc_size: usize,
}

impl StudySpec {
    pub fn new(nu_grid: Vec<f64>, n_grid: Vec<usize>, replicates: usize, seed: u64) -> Self {
        Self { nu_grid, n_grid, replicates, seed, qq_mc_size: DEFAULT_QQ_MC_SIZE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu_grid.is_empty() || self.n_grid.is_empty() {
            return Err(Error::Input("nu and n grids must be non-empty".into()));
        }
        if let Some(nu) = self.nu_grid.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Input(format!("nu grid values must be positive, got {nu}")));
        }
        if let Some(n) = self.n_grid.iter().find(|n| **n < 3) {
            return Err(Error::Input(format!("sample sizes must be at least 3, got {n}")));
        }
        if self.replicates < 2 {
            return Err(Error::Input("at least two replicates are needed for an IQR".into()));
        }
        if self.qq_mc_size < 2 {
            return Err(Error::Input("Q-Q Monte Carlo size must be at least 2".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Random stream for one work item, keyed by the study seed, the cell
/// `(nu, n)`, a replicate index and a purpose tag. Depends on values only,
/// never on scheduling or loop order.
pub fn substream(seed: u64, nu: f64, n: usize, replicate: u64, tag: u64) -> ChaCha8Rng {
    let mut key = splitmix64(seed);
    for word in [nu.to_bits(), n as u64, replicate, tag] {
        key = splitmix64(key ^ word);
    }
    ChaCha8Rng::seed_from_u64(key)
}

const TAG_REPLICATE: u64 = 0;
const TAG_QQ: u64 = 1;

/// Result for one `(nu, n)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub nu: f64,
    pub n: usize,
    /// Location estimates of the successful replicates, in replicate order.
    pub mu_hats: Vec<f64>,
    pub failures: Vec<String>,
    pub iqr: f64,
    pub sigma_mu_hat: f64,
    pub nu_mu_hat: f64,
    pub scaled_fit_error: Option<String>,
    /// `(x, density)` of the IQR-standardized scaled estimates.
    pub kde: Vec<(f64, f64)>,
    /// `(theoretical, empirical)` ordered pairs.
    pub qq: Vec<(f64, f64)>,
}

impl CellResult {
    pub fn replicates_ok(&self) -> usize {
        self.mu_hats.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLaw {
    pub log_a: f64,
    pub b: f64,
    pub beta_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub nu: f64,
    pub power_law: Option<PowerLaw>,
    pub beta_proposed: f64,
    /// `(beta_hat - beta_proposed) / beta_proposed`.
    pub rel_error: f64,
}

impl RateFit {
    pub fn beta_hat(&self) -> f64 {
        self.power_law.map_or(f64::NAN, |p| p.beta_hat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateStudyResult {
    pub spec: StudySpec,
    /// Cells ordered by `nu_grid` then `n_grid`.
    pub cells: Vec<CellResult>,
    pub rates: Vec<RateFit>,
}

impl RateStudyResult {
    pub fn cell(&self, nu: f64, n: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.nu == nu && c.n == n)
    }

    pub fn rate(&self, nu: f64) -> Option<&RateFit> {
        self.rates.iter().find(|r| r.nu == nu)
    }

    pub fn total_failures(&self) -> usize {
        self.cells.iter().map(|c| c.failures.len()).sum()
    }
}

/// `1 / (1 + 2 nu - d)`; for `d = 1` this is `1 / (2 nu)`.
pub fn proposed_rate(nu: f64, d: usize) -> Result<f64> {
    let den = 1.0 + 2.0 * nu - d as f64;
    if !(den > 0.0) || !nu.is_finite() {
        return Err(Error::Domain(format!("proposed rate undefined for nu={nu}, d={d}")));
    }
    Ok(1.0 / den)
}

/// Whether the density is unbounded at the location (`nu < d/2`), the regime
/// where the proposed rate applies.
pub fn is_singular_regime(nu: f64, d: usize) -> bool {
    nu < 0.5 * d as f64
}

/// Ordinary least squares of `ln IQR` on `ln n`.
pub fn fit_power_law(n_values: &[usize], iqr_values: &[f64]) -> Result<PowerLaw> {
    if n_values.len() != iqr_values.len() {
        return Err(Error::Input("n and IQR lists differ in length".into()));
    }
    if let Some(v) = iqr_values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Degenerate(format!("IQR must be positive, got {v}")));
    }
    let x: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = iqr_values.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let x_bar = x.iter().sum::<f64>() / k;
    let y_bar = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|xi| (xi - x_bar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Input("power law needs at least two distinct n values".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(xi, yi)| (xi - x_bar) * (yi - y_bar)).sum();
    let b = sxy / sxx;
    Ok(PowerLaw { log_a: y_bar - b * x_bar, b, beta_hat: -b })
}

/// Fits a symmetric VG with location and skewness frozen at 0 to
/// `n^beta_hat * mu_hat`. Returns `(sigma, nu)` where `sigma^2` is the scale.
pub fn fit_scaled_estimates(mu_hats: &[f64], beta_hat: f64, n: usize, cfg: &EcmConfig) -> Result<(f64, f64)> {
    let factor = (n as f64).powf(beta_hat);
    let scaled: Vec<f64> = mu_hats.iter().map(|m| factor * m).collect();
    fit_symmetric_vg(&scaled, cfg)
}

fn fit_symmetric_vg(samples: &[f64], cfg: &EcmConfig) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(Error::Input("need at least three samples".into()));
    }
    let data = Dataset::univariate(samples)?;
    let mut scale = MAD_SCALE * mad(samples)?;
    if !(scale > 0.0) {
        let (_, sd) = mean_sd(samples);
        scale = sd;
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Input("samples have zero spread".into()));
    }
    let cfg = EcmConfig {
        fixed: FixedMask { mu: true, gamma: true, ..cfg.fixed },
        ..cfg.clone()
    };
    let init = VgParams::univariate(0.0, scale * scale, 0.0, 4.0_f64.clamp(cfg.nu_min, cfg.nu_max))?;
    let result = fit(&data, &cfg, Some(init))?;
    Ok((result.params.sigma()[(0, 0)].sqrt(), result.params.nu()))
}

/// Gaussian-kernel density of `samples / IQR(samples)` on `grid`, with
/// Silverman's rule-of-thumb bandwidth.
pub fn kde_curve(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let spread = iqr(samples)?;
    if !(spread > 0.0) {
        return Err(Error::Degenerate("samples have zero IQR".into()));
    }
    let std: Vec<f64> = samples.iter().map(|s| s / spread).collect();
    let n = std.len() as f64;
    let (_, sd) = mean_sd(&std);
    let h = 0.9 * sd.min(1.0 / 1.34) * n.powf(-0.2);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&x| std.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect())
}

/// Ordered pairs `(theoretical, empirical)` against `mc_size` draws from the
/// symmetric VG with scale `sigma^2` and shape `nu`. When the two sets differ
/// in size the larger is interpolated (type-7 rule) at the plotting positions
/// `i / (m - 1)` of the smaller.
pub fn emit_qq<R: Rng + ?Sized>(
    samples: &[f64],
    sigma: f64,
    nu: f64,
    mc_size: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if mc_size < 2 || samples.len() < 2 {
        return Err(Error::Input("Q-Q data needs at least two points on each side".into()));
    }
    let params = VgParams::univariate(0.0, sigma * sigma, 0.0, nu)?;
    let theoretical = sorted(params.sample(mc_size, rng).values());
    let empirical = sorted(samples);
    Ok(pair_quantiles(&theoretical, &empirical))
}

fn pair_quantiles(theoretical: &[f64], empirical: &[f64]) -> Vec<(f64, f64)> {
    let m = theoretical.len().min(empirical.len());
    (0..m)
        .map(|i| {
            let p = i as f64 / (m - 1) as f64;
            let t = if theoretical.len() == m { theoretical[i] } else { quantile_sorted(theoretical, p) };
            let e = if empirical.len() == m { empirical[i] } else { quantile_sorted(empirical, p) };
            (t, e)
        })
        .collect()
}

/// Standardized grid on which the KDE curves are reported.
pub fn kde_grid() -> Vec<f64> {
    (0..=200).map(|i| -5.0 + 0.05 * i as f64).collect()
}

fn replicate_estimate(nu: f64, n: usize, r: usize, seed: u64, cfg: &EcmConfig) -> Result<f64> {
    let truth = VgParams::univariate(0.0, 1.0, 0.0, nu)?;
    let mut rng = substream(seed, nu, n, r as u64, TAG_REPLICATE);
    let data = truth.sample(n, &mut rng);
    let init = DVector::from_element(1, median(data.values())?);
    let fit = fit_location_only(&data, &truth, cfg, &init)?;
    Ok(fit.mu[0])
}

/// Location estimates for all replicates of one cell (in replicate order).
pub fn cell_estimates(nu: f64, n: usize, replicates: usize, seed: u64, cfg: &EcmConfig) -> Vec<Result<f64>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| replicate_estimate(nu, n, r, seed, cfg))
        .collect()
}

/// Runs the whole study on the current rayon pool.
pub fn run_rate_study(spec: &StudySpec) -> Result<RateStudyResult> {
    spec.validate()?;
    let cfg = EcmConfig::default();
    let mut cells = Vec::with_capacity(spec.nu_grid.len() * spec.n_grid.len());
    for &nu in &spec.nu_grid {
        for &n in &spec.n_grid {
            let mut mu_hats = Vec::with_capacity(spec.replicates);
            let mut failures = Vec::new();
            for (r, est) in cell_estimates(nu, n, spec.replicates, spec.seed, &cfg).into_iter().enumerate() {
                match est {
                    Ok(m) => mu_hats.push(m),
                    Err(e) => failures.push(format!("replicate {r}: {e}")),
                }
            }
            let spread = if mu_hats.len() >= 2 { iqr(&mu_hats)? } else { f64::NAN };
            cells.push(CellResult {
                nu,
                n,
                mu_hats,
                failures,
                iqr: spread,
                sigma_mu_hat: f64::NAN,
                nu_mu_hat: f64::NAN,
                scaled_fit_error: None,
                kde: Vec::new(),
                qq: Vec::new(),
            });
        }
    }

    let scaled_cfg = EcmConfig { nu_max: SCALED_FIT_NU_CAP, ..EcmConfig::default() };
    let mut rates = Vec::with_capacity(spec.nu_grid.len());
    for &nu in &spec.nu_grid {
        let row: Vec<&mut CellResult> = cells.iter_mut().filter(|c| c.nu == nu).collect();
        let ns: Vec<usize> = row.iter().map(|c| c.n).collect();
        let iqrs: Vec<f64> = row.iter().map(|c| c.iqr).collect();
        let power_law = if ns.len() >= 2 { fit_power_law(&ns, &iqrs).ok() } else { None };
        let beta_proposed = proposed_rate(nu, 1)?;
        let beta_hat = power_law.map_or(f64::NAN, |p| p.beta_hat);
        rates.push(RateFit { nu, power_law, beta_proposed, rel_error: (beta_hat - beta_proposed) / beta_proposed });

        let Some(pl) = power_law else {
            for cell in row {
                cell.scaled_fit_error = Some("no rate estimate for this nu".into());
            }
            continue;
        };
        let outcomes: Vec<_> = row
            .par_iter()
            .map(|cell| scaled_cell_outputs(cell, pl.beta_hat, &scaled_cfg, spec))
            .collect();
        for (cell, outcome) in row.into_iter().zip(outcomes) {
            match outcome {
                Ok((sigma, shape, kde, qq)) => {
                    cell.sigma_mu_hat = sigma;
                    cell.nu_mu_hat = shape;
                    cell.kde = kde;
                    cell.qq = qq;
                }
                Err(e) => cell.scaled_fit_error = Some(e.to_string()),
            }
        }
    }
    Ok(RateStudyResult { spec: spec.clone(), cells, rates })
}

type ScaledOutputs = (f64, f64, Vec<(f64, f64)>, Vec<(f64, f64)>);

fn scaled_cell_outputs(cell: &CellResult, beta_hat: f64, cfg: &EcmConfig, spec: &StudySpec) -> Result<ScaledOutputs> {
    let factor = (cell.n as f64).powf(beta_hat);
    let scaled: Vec<f64> = cell.mu_hats.iter().map(|m| factor * m).collect();
    let (sigma, shape) = fit_symmetric_vg(&scaled, cfg)?;
    let grid = kde_grid();
    let kde = grid.iter().copied().zip(kde_curve(&scaled, &grid)?).collect();
    let mut rng = substream(spec.seed, cell.nu, cell.n, 0, TAG_QQ);
    let qq = emit_qq(&scaled, sigma, shape, spec.qq_mc_size, &mut rng)?;
    Ok((sigma, shape, kde, qq))
}

/// Runs the study on a dedicated pool of `threads` workers.
pub fn run_rate_study_with_threads(spec: &StudySpec, threads: usize) -> Result<RateStudyResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Input(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_rate_study(spec))
}

/// Summary table: one row per `(nu, n)` with the per-`nu` rate columns repeated.
pub fn write_study_csv<W: Write>(result: &RateStudyResult, mut w: W) -> Result<()> {
    writeln!(w, "nu,n,replicates_ok,iqr,beta_hat,beta_proposed,rel_error,sigma_mu_hat,nu_mu_hat")?;
    for cell in &result.cells {
        let rate = result.rate(cell.nu).expect("every nu has a rate row");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            cell.nu,
            cell.n,
            cell.replicates_ok(),
            cell.iqr,
            rate.beta_hat(),
            rate.beta_proposed,
            rate.rel_error,
            cell.sigma_mu_hat,
            cell.nu_mu_hat
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column CSV with a header.
pub fn write_pairs_csv<W: Write>(header: (&str, &str), pairs: &[(f64, f64)], mut w: W) -> Result<()> {
    writeln!(w, "{},{}", header.0, header.1)?;
    for (a, b) in pairs {
        writeln!(w, "{a},{b}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `study.csv` plus one KDE and one Q-Q file per cell into `dir`,
/// returning the file names written.
pub fn write_study_outputs(result: &RateStudyResult, dir: &std::path::Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = vec!["study.csv".to_string()];
    write_study_csv(result, std::io::BufWriter::new(std::fs::File::create(dir.join("study.csv"))?))?;
    for cell in &result.cells {
        if cell.kde.is_empty() {
            continue;
        }
        let kde_name = format!("kde_nu{}_n{}.csv", cell.nu, cell.n);
        let qq_name = format!("qq_nu{}_n{}.csv", cell.nu, cell.n);
        write_pairs_csv(("x", "density"), &cell.kde, std::io::BufWriter::new(std::fs::File::create(dir.join(&kde_name))?))?;
        write_pairs_csv(
            ("theoretical", "empirical"),
            &cell.qq,
            std::io::BufWriter::new(std::fs::File::create(dir.join(&qq_name))?),
        )?;
        names.push(kde_name);
        names.push(qq_name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_power_law() {
        let ns = [500, 1000, 2000, 4000];
        let iqrs: Vec<f64> = ns.iter().map(|&n| 2.0 * (n as f64).powf(-0.5)).collect();
        let pl = fit_power_law(&ns, &iqrs).unwrap();
        assert!((pl.log_a - 2f64.ln()).abs() < 1e-12);
        assert!((pl.b + 0.5).abs() < 1e-12);
        assert_eq!(pl.beta_hat, -pl.b);

        let flat = fit_power_law(&ns, &[0.3; 4]).unwrap();
        assert!(flat.b.abs() < 1e-15 && flat.beta_hat.abs() < 1e-15);
    }

    #[test]
    fn power_law_errors() {
        assert!(fit_power_law(&[500, 1000], &[0.1, 0.0]).is_err());
        assert!(fit_power_law(&[500, 500], &[0.1, 0.2]).is_err());
        assert!(fit_power_law(&[500], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn proposed_rate_values() {
        assert!((proposed_rate(0.02, 1).unwrap() - 25.0).abs() < 1e-12);
        assert!((proposed_rate(0.5, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((proposed_rate(1.0, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(proposed_rate(0.4, 2).is_err());
        assert!(is_singular_regime(0.2, 1) && !is_singular_regime(0.5, 1));
    }

    #[test]
    fn substreams_depend_on_every_key() {
        let draw = |s: u64, nu: f64, n: usize, r: u64, t: u64| substream(s, nu, n, r, t).random::<u64>();
        let base = draw(1, 0.2, 500, 3, 0);
        assert_eq!(base, draw(1, 0.2, 500, 3, 0));
        for other in [draw(2, 0.2, 500, 3, 0), draw(1, 0.4, 500, 3, 0), draw(1, 0.2, 501, 3, 0), draw(1, 0.2, 500, 4, 0), draw(1, 0.2, 500, 3, 1)] {
            assert_ne!(base, other);
        }
    }

    #[test]
    fn kde_two_point_symmetry() {
        let grid: Vec<f64> = (0..=80).map(|i| -4.0 + 0.1 * i as f64).collect();
        let dens = kde_curve(&[-1.0, 1.0], &grid).unwrap();
        for i in 0..grid.len() {
            assert!((dens[i] - dens[grid.len() - 1 - i]).abs() < 1e-12);
        }
        assert!(kde_curve(&[2.0, 2.0, 2.0], &grid).is_err());
    }

    #[test]
    fn qq_identity_pairing() {
        let mc = VgParams::univariate(0.0, 2.25, 0.0, 0.7).unwrap().sample(50, &mut substream(5, 0.7, 50, 0, 9));
        let pairs = emit_qq(mc.values(), 1.5, 0.7, 50, &mut substream(5, 0.7, 50, 0, 9)).unwrap();
        assert_eq!(pairs.len(), 50);
        assert!(pairs.iter().all(|(t, e)| t == e));
        assert!(pairs.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn spec_validation() {
        assert!(StudySpec::new(vec![0.0, 0.5], vec![500], 10, 1).validate().is_err());
        assert!(StudySpec::new(vec![0.5], vec![], 10, 1).validate().is_err());
        assert!(StudySpec::new(vec![0.5], vec![500], 1, 1).validate().is_err());
        assert!(StudySpec::new(vec![0.5], vec![500], 2, 1).validate().is_ok());
    }
}
