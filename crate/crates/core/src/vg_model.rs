//! The multivariate skewed variance-gamma distribution.
//!
//! `Y | lambda ~ N_d(mu + gamma * lambda, lambda * Sigma)` with
//! `lambda ~ Gamma(shape = nu, rate = nu)`.

use std::f64::consts::{LN_2, PI};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::special_fn::{ln_gamma, ln_k};

/// Parameters `(mu, Sigma, gamma, nu)` with a cached Cholesky factor of `Sigma`.
#[derive(Debug, Clone)]
pub struct VgParams {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    gamma: DVector<f64>,
    nu: f64,
    chol: DMatrix<f64>,
    log_det: f64,
    white_gamma: DVector<f64>,
    gamma_quad: f64,
    shape_c: f64,
    bessel_order: f64,
    log_norm: f64,
}

impl VgParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, gamma: DVector<f64>, nu: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::Param("dimension must be at least 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d || gamma.len() != d {
            return Err(Error::Param(format!(
                "dimension mismatch: mu has {d} entries, sigma is {}x{}, gamma has {}",
                sigma.nrows(),
                sigma.ncols(),
                gamma.len()
            )));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::Param(format!("nu must be positive and finite, got {nu}")));
        }
        if mu.iter().chain(gamma.iter()).chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Param("parameters must be finite".into()));
        }
        let (chol, log_det) = factor(&sigma)?;
        let mut params = Self {
            white_gamma: DVector::zeros(d),
            mu,
            sigma,
            gamma,
            nu,
            chol,
            log_det,
            gamma_quad: 0.0,
            shape_c: 0.0,
            bessel_order: 0.0,
            log_norm: 0.0,
        };
        params.refresh_gamma();
        Ok(params)
    }

    /// One-dimensional parameters; `sigma2` is the scale `Sigma = sigma^2`.
    pub fn univariate(mu: f64, sigma2: f64, gamma: f64, nu: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, sigma2),
            DVector::from_element(1, gamma),
            nu,
        )
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }
    pub fn log_det_sigma(&self) -> f64 {
        self.log_det
    }
    /// `gamma' Sigma^{-1} gamma`.
    pub fn gamma_quad(&self) -> f64 {
        self.gamma_quad
    }
    /// `sqrt(2 nu + gamma' Sigma^{-1} gamma)`.
    pub fn shape_c(&self) -> f64 {
        self.shape_c
    }
    /// Order `nu - d/2` of the Bessel function in the density.
    pub fn bessel_order(&self) -> f64 {
        self.bessel_order
    }

    pub fn with_mu(&self, mu: DVector<f64>) -> Result<Self> {
        if mu.len() != self.dim() || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Param("mu must be finite with matching dimension".into()));
        }
        let mut out = self.clone();
        out.mu = mu;
        Ok(out)
    }

    pub fn with_gamma(&self, gamma: DVector<f64>) -> Result<Self> {
        if gamma.len() != self.dim() || gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Param("gamma must be finite with matching dimension".into()));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        out.refresh_gamma();
        Ok(out)
    }

    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(self.mu.clone(), sigma, self.gamma.clone(), self.nu)
    }

    pub fn with_nu(&self, nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::Param(format!("nu must be positive and finite, got {nu}")));
        }
        let mut out = self.clone();
        out.nu = nu;
        out.refresh_shape();
        Ok(out)
    }

    fn refresh_gamma(&mut self) {
        let mut white = self.gamma.clone();
        forward_substitute(&self.chol, white.as_mut_slice());
        self.gamma_quad = white.norm_squared();
        self.white_gamma = white;
        self.refresh_shape();
    }

    fn refresh_shape(&mut self) {
        let d = self.dim() as f64;
        let nu = self.nu;
        self.shape_c = (2.0 * nu + self.gamma_quad).sqrt();
        self.bessel_order = nu - 0.5 * d;
        self.log_norm = (1.0 - 0.5 * d) * LN_2 + nu * nu.ln()
            - 0.5 * self.log_det
            - 0.5 * d * PI.ln()
            - ln_gamma(nu)
            - self.bessel_order * self.shape_c.ln();
    }

    /// Squared Mahalanobis distance and skew term `(y-mu)' Sigma^{-1} gamma`
    /// for one observation. `scratch` must have length `d`.
    pub(crate) fn point_terms(&self, y: &[f64], scratch: &mut [f64]) -> (f64, f64) {
        for ((s, yi), mi) in scratch.iter_mut().zip(y).zip(self.mu.iter()) {
            *s = yi - mi;
        }
        forward_substitute(&self.chol, scratch);
        let z2 = scratch.iter().map(|w| w * w).sum();
        let skew = scratch.iter().zip(self.white_gamma.iter()).map(|(w, g)| w * g).sum();
        (z2, skew)
    }

    fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::Param(format!(
                "observation has {} entries, parameters have dimension {}",
                y.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `(y - mu)' Sigma^{-1} (y - mu)`.
    pub fn mahalanobis_sq(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        let mut scratch = vec![0.0; self.dim()];
        Ok(self.point_terms(y, &mut scratch).0)
    }

    /// Log-density at `y`. At `y == mu` this is the finite limit when
    /// `nu > d/2` and `+inf` otherwise.
    pub fn log_pdf(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        let mut scratch = vec![0.0; self.dim()];
        let (z2, skew) = self.point_terms(y, &mut scratch);
        Ok(self.log_density_terms(z2, skew))
    }

    pub(crate) fn log_density_terms(&self, z2: f64, skew: f64) -> f64 {
        if z2 == 0.0 {
            return self.log_density_at_mode();
        }
        let z = z2.sqrt();
        self.log_norm + ln_k(self.bessel_order, self.shape_c * z) + skew + self.bessel_order * z.ln()
    }

    /// The density at `mu`: finite for `nu > d/2`, infinite otherwise.
    pub fn log_density_at_mode(&self) -> f64 {
        let d = self.dim() as f64;
        let nu = self.nu;
        if nu <= 0.5 * d {
            return f64::INFINITY;
        }
        (nu - d) * LN_2 - 0.5 * d * PI.ln() - 0.5 * self.log_det + ln_gamma(nu - 0.5 * d)
            - ln_gamma(nu)
            + nu * nu.ln()
            - (nu - 0.5 * d) * (2.0 * nu + self.gamma_quad).ln()
    }

    /// Population mean `mu + gamma` and covariance `Sigma + gamma gamma' / nu`.
    pub fn population_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mean = &self.mu + &self.gamma;
        let cov = &self.sigma + (&self.gamma * self.gamma.transpose()) / self.nu;
        (mean, cov)
    }

    /// Draws `n` observations through the normal mean-variance mixture.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let d = self.dim();
        let mixing = Gamma::new(self.nu, 1.0 / self.nu).expect("nu validated at construction");
        let mut values = Vec::with_capacity(n * d);
        let mut eps = vec![0.0; d];
        for _ in 0..n {
            let lambda: f64 = mixing.sample(rng);
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(rng);
            }
            let root = lambda.sqrt();
            for j in 0..d {
                let mut correlated = 0.0;
                for (k, e) in eps.iter().enumerate().take(j + 1) {
                    correlated += self.chol[(j, k)] * e;
                }
                values.push(self.mu[j] + self.gamma[j] * lambda + root * correlated);
            }
        }
        Dataset { values, n, d }
    }
}

/// Cholesky factor and log-determinant; fails unless `sigma` is symmetric PD.
fn factor(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let d = sigma.nrows();
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
            if (a - b).abs() > 1e-10 * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
                return Err(Error::Param("sigma must be symmetric".into()));
            }
        }
    }
    let chol = nalgebra::Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Param("sigma is not positive definite".into()))?;
    let l = chol.l();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !log_det.is_finite() {
        return Err(Error::Param("sigma is numerically singular".into()));
    }
    Ok((l, log_det))
}

/// Solves `L w = v` in place for lower-triangular `L`.
fn forward_substitute(l: &DMatrix<f64>, v: &mut [f64]) {
    for i in 0..v.len() {
        let mut acc = v[i];
        for (k, vk) in v.iter().enumerate().take(i) {
            acc -= l[(i, k)] * vk;
        }
        v[i] = acc / l[(i, i)];
    }
}

/// `n` observations of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    n: usize,
    d: usize,
}

impl Dataset {
    pub fn new(values: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Input("dimension must be at least 1".into()));
        }
        if values.len() % d != 0 {
            return Err(Error::Input(format!(
                "{} values do not form rows of length {d}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value in row {}", pos / d)));
        }
        Ok(Self { n: values.len() / d, values, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Input(format!("row {i} has a different length")));
        }
        Self::new(rows.concat(), d)
    }

    pub fn univariate(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Adds `shift` to every observation.
    pub fn translated(&self, shift: &[f64]) -> Self {
        let values = self
            .values
            .chunks_exact(self.d)
            .flat_map(|row| row.iter().zip(shift).map(|(y, c)| y + c))
            .collect();
        Self { values, n: self.n, d: self.d }
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.d);
        for row in self.rows() {
            for (m, y) in mean.iter_mut().zip(row) {
                *m += y;
            }
        }
        mean / self.n as f64
    }

    /// Sample covariance with divisor `n - 1`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.d, self.d);
        for row in self.rows() {
            let r = DVector::from_iterator(self.d, row.iter().zip(mean.iter()).map(|(y, m)| y - m));
            cov += &r * r.transpose();
        }
        cov / (self.n as f64 - 1.0)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Reads comma-separated rows. With `skip_header` the first row is ignored.
    pub fn read_csv<R: Read>(reader: R, skip_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(skip_header)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut values = Vec::new();
        let mut d = 0;
        for record in rdr.records() {
            let record = record.map_err(|e| match e.kind() {
                csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Input(format!(
                    "line {}: expected {expected_len} fields, found {len}",
                    pos.as_ref().map_or(0, |p| p.line())
                )),
                _ => Error::Input(e.to_string()),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if d == 0 {
                d = record.len();
            }
            for field in record.iter() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Input(format!("line {line}: cannot parse '{field}'")))?;
                if !v.is_finite() {
                    return Err(Error::Input(format!("line {line}: non-finite value '{field}'")));
                }
                values.push(v);
            }
        }
        if d == 0 {
            return Ok(Self { values, n: 0, d: 1 });
        }
        Self::new(values, d)
    }

    pub fn read_csv_path(path: &Path, skip_header: bool) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file), skip_header)
    }

    /// Writes one observation per line using the shortest round-trip
    /// representation of each value.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(writer, "{}", line.join(","))?;
        }
        writer.flush()?;
        Ok(())
    }
}
