//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Returns `(integral, error estimate, integral of |f|)`.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    let mut abs = WGK[7] * fc.abs();
    for j in 0..7 {
        let x = h * XGK[j];
        let (f1, f2) = (f(c - x), f(c + x));
        kron += WGK[j] * (f1 + f2);
        abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    (kron * h, ((kron - gauss) * h).abs(), abs * h.abs())
}

/// Globally adaptive Gauss-Kronrod (7/15) quadrature on a finite interval.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut parts = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..20_000 {
        let total: f64 = parts.iter().map(|p| p.2 .2).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if err <= rel_tol * total || err < 1e-300 {
            break;
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(&f, lo, mid)));
        parts.push((mid, hi, gk15(&f, mid, hi)));
    }
    parts.iter().map(|p| p.2 .0).sum()
}

/// Expands outward from `center` in unit steps until `h` falls `drop` below
/// `h(center)` on both sides.
fn bracket<H: Fn(f64) -> f64>(h: &H, center: f64, drop: f64) -> (f64, f64) {
    let top = h(center);
    let mut lo = center - 1.0;
    while h(lo) > top - drop {
        lo -= 1.0;
    }
    let mut hi = center + 1.0;
    while h(hi) > top - drop {
        hi += 1.0;
    }
    (lo, hi)
}

/// Maximizes a unimodal `h` by golden section after bracketing.
fn argmax_unimodal<H: Fn(f64) -> f64>(h: &H, mut a: f64, mut b: f64) -> f64 {
    let g = 0.618_033_988_749_894_8;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if h(c) >= h(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// `ln K_p(z)` from `K_p(z) = int_0^inf exp(-z cosh t) cosh(p t) dt`.
pub fn log_bessel_k_quad(p: f64, z: f64) -> f64 {
    let p = p.abs();
    let h = |t: f64| p * t - z * t.cosh();
    let t_star = (p / z).asinh();
    let m = h(t_star);
    let integrand = |t: f64| (h(t) - m).exp() * 0.5 * (1.0 + (-2.0 * p * t).exp());
    let mut upper = t_star + 1.0;
    while h(upper) - m > -60.0 {
        upper += 1.0;
    }
    let val = integrate(integrand, 0.0, t_star.max(1e-3), 1e-14)
        + integrate(integrand, t_star.max(1e-3), upper, 1e-14);
    m + val.ln()
}

/// `(E lambda, E 1/lambda, E ln lambda)` under the density proportional to
/// `lambda^(p-1) exp(-(c^2 lambda + z^2 / lambda) / 2)`, by quadrature in
/// `s = ln lambda`.
pub fn gig_moments_quad(z: f64, c: f64, p: f64) -> (f64, f64, f64) {
    let (a, b) = (c * c, z * z);
    let h = move |s: f64, k: f64| (p + k) * s - 0.5 * (a * s.exp() + b * (-s).exp());
    let log_int = |k: f64, weight: &dyn Fn(f64) -> f64| {
        let hk = |s: f64| h(s, k);
        let u = ((p + k) + ((p + k).powi(2) + a * b).sqrt()) / a;
        let mode = u.ln();
        let (lo, hi) = bracket(&hk, mode, 80.0);
        let m = hk(mode);
        let left = integrate(|s| weight(s) * (hk(s) - m).exp(), lo, mode, 1e-13);
        let right = integrate(|s| weight(s) * (hk(s) - m).exp(), mode, hi, 1e-13);
        (m, left + right)
    };
    let one = |_: f64| 1.0;
    let (m0, i0) = log_int(0.0, &one);
    let (m1, i1) = log_int(1.0, &one);
    let (mm, im) = log_int(-1.0, &one);
    // E ln lambda = int s w / int w; shift s by the mode to limit cancellation
    let u0 = ((p + (p * p + a * b).sqrt()) / a).ln();
    let (ms, is) = log_int(0.0, &|s: f64| s - u0);
    debug_assert_eq!(ms, m0);
    (
        (m1 - m0).exp() * i1 / i0,
        (mm - m0).exp() * im / i0,
        u0 + is / i0,
    )
}

/// Richardson-extrapolated `d ln K_p(z) / dp` from three central differences.
pub fn richardson_dlogk(lnk: impl Fn(f64) -> f64, p: f64, h: f64) -> f64 {
    let d = |h: f64| (lnk(p + h) - lnk(p - h)) / (2.0 * h);
    let (d1, d2, d3) = (d(h), d(h / 2.0), d(h / 4.0));
    let r1 = (4.0 * d2 - d1) / 3.0;
    let r2 = (4.0 * d3 - d2) / 3.0;
    (16.0 * r2 - r1) / 15.0
}

/// `ln Gamma(x)` from the Stirling series after shifting `x` past 15.
pub fn ln_gamma_ref(x: f64) -> f64 {
    let mut shift = 0.0;
    let mut x = x;
    while x < 15.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * 691.0 / 360_360.0)))));
    shift + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}

/// `ln f(y)` of the normal variance-mean mixture with Gamma(nu, rate nu)
/// mixing, by quadrature over `s = ln lambda`.
pub fn mixture_log_density(y: &[f64], mu: &[f64], sigma: &DMatrix<f64>, gamma: &[f64], nu: f64) -> f64 {
    let d = y.len();
    let inv = sigma.clone().try_inverse().expect("invertible");
    let log_det = sigma.determinant().ln();
    let r = DVector::from_iterator(d, y.iter().zip(mu).map(|(a, b)| a - b));
    let g = DVector::from_column_slice(gamma);
    let rr = (r.transpose() * &inv * &r)[(0, 0)];
    let rg = (r.transpose() * &inv * &g)[(0, 0)];
    let gg = (g.transpose() * &inv * &g)[(0, 0)];
    let df = d as f64;
    let const_part = -0.5 * df * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det + nu * nu.ln() - ln_gamma_ref(nu);
    // normal: -d/2 ln lambda - (rr - 2 lambda rg + lambda^2 gg) / (2 lambda)
    // gamma: (nu - 1) ln lambda - nu lambda; jacobian: + s
    let h = |s: f64| {
        let l = s.exp();
        -0.5 * df * s - 0.5 * (rr / l - 2.0 * rg + l * gg) + (nu - 1.0) * s - nu * l + s
    };
    let mode = argmax_unimodal(&h, -60.0, 10.0);
    let (lo, hi) = bracket(&h, mode, 80.0);
    let m = h(mode);
    let val = integrate(|s| (h(s) - m).exp(), lo, mode, 1e-13) + integrate(|s| (h(s) - m).exp(), mode, hi, 1e-13);
    const_part + m + val.ln()
}

/// `int exp(log_pdf(y)) dy` over the real line for a density with location 0,
/// split at 0 and integrated in `s = ln |y|`.
pub fn unit_mass<F: Fn(f64) -> f64>(log_pdf: F) -> f64 {
    let side = |sign: f64| {
        let h = |s: f64| log_pdf(sign * s.exp()) + s;
        let mode = argmax_unimodal(&h, -60.0, 8.0);
        let (lo, hi) = bracket(&h, mode, 80.0);
        let m = h(mode);
        m.exp() * (integrate(|s| (h(s) - m).exp(), lo, mode, 1e-13) + integrate(|s| (h(s) - m).exp(), mode, hi, 1e-13))
    };
    side(-1.0) + side(1.0)
}

/// Relative difference with a floor on the denominator.
pub fn rel_diff(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// `max_j |dQ/dtheta_j| (1 + |theta_j|) / (1 + |Q|)` by central differences.
pub fn scaled_gradient(q: &dyn Fn(&[f64]) -> f64, theta: &[f64]) -> f64 {
    let q0 = q(theta);
    let mut worst: f64 = 0.0;
    for j in 0..theta.len() {
        let h = 1e-5 * (1.0 + theta[j].abs());
        let mut up = theta.to_vec();
        let mut down = theta.to_vec();
        up[j] += h;
        down[j] -= h;
        let g = (q(&up) - q(&down)) / (up[j] - down[j]);
        worst = worst.max(g.abs() * (1.0 + theta[j].abs()) / (1.0 + q0.abs()));
    }
    worst
}

/// Stationarity of every CM-step output against the fixed-index expected
/// complete-data objective for one E-step taken at `params`. Returns the
/// worst scaled gradient over the `(mu, gamma)`, `mu`, `gamma`, `Sigma` and
/// `nu` updates.
pub fn cm_stationarity(params: &vgloo::VgParams, data: &vgloo::Dataset) -> f64 {
    use vgloo::ecm::{cm_step_gamma, cm_step_mu, cm_step_mu_gamma, cm_step_nu, cm_step_sigma, EcmConfig};
    use vgloo::loo::{complete_loglik_components, latent_moments, suff_stats};

    let d = data.dim();
    let n = data.n();
    let k = vgloo::loo_index(data, params);
    let moments = latent_moments(params, data).unwrap();
    let stats = suff_stats(data, &moments, k).unwrap();
    let ell_n = |p: &vgloo::VgParams| complete_loglik_components(p, data, &moments, k).unwrap().0;
    let with_mu_gamma = |t: &[f64]| {
        params
            .with_mu(DVector::from_column_slice(&t[..d]))
            .unwrap()
            .with_gamma(DVector::from_column_slice(&t[d..]))
            .unwrap()
    };
    let mut worst: f64 = 0.0;

    let (mu, gamma) = cm_step_mu_gamma(&stats, n).unwrap();
    let theta: Vec<f64> = mu.iter().chain(gamma.iter()).copied().collect();
    worst = worst.max(scaled_gradient(&|t| ell_n(&with_mu_gamma(t)), &theta));

    let mu_only = cm_step_mu(&stats, n, params.gamma()).unwrap();
    let q_mu = |t: &[f64]| ell_n(&params.with_mu(DVector::from_column_slice(t)).unwrap());
    worst = worst.max(scaled_gradient(&q_mu, mu_only.as_slice()));

    let gamma_only = cm_step_gamma(&stats, n, params.mu()).unwrap();
    let q_gamma = |t: &[f64]| ell_n(&params.with_gamma(DVector::from_column_slice(t)).unwrap());
    worst = worst.max(scaled_gradient(&q_gamma, gamma_only.as_slice()));

    let base = with_mu_gamma(&theta);
    let sigma = cm_step_sigma(data, base.mu(), base.gamma(), &moments, k, n).unwrap();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let packed: Vec<f64> = pairs.iter().map(|&(i, j)| sigma[(i, j)]).collect();
    let q_sigma = |t: &[f64]| {
        let mut s = DMatrix::zeros(d, d);
        for (v, &(i, j)) in t.iter().zip(&pairs) {
            s[(i, j)] = *v;
            s[(j, i)] = *v;
        }
        ell_n(&base.with_sigma(s).unwrap())
    };
    worst = worst.max(scaled_gradient(&q_sigma, &packed));

    let cfg = EcmConfig::default();
    let update = cm_step_nu(&stats, n, params.nu(), &cfg);
    assert!(!update.clamped, "nu update clamped; pick another case");
    let q_nu = |t: &[f64]| complete_loglik_components(&params.with_nu(t[0]).unwrap(), data, &moments, k).unwrap().1;
    worst = worst.max(scaled_gradient(&q_nu, &[update.nu]));
    worst
}

/// True when every step of `trace` is non-decreasing within
/// `1e-12 (1 + |previous|)`.
pub fn is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()))
}
