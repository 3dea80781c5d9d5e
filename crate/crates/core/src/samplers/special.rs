//! Log-space special functions and probability mass functions.
//!
//! Impossible outcomes evaluate to [`LOG_ZERO`] instead of an error so that
//! callers can sum in log space without branching.

use crate::error::{param, Result};

/// Log of zero probability.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// Relative size below which series terms are dropped.
const SERIES_EPS: f64 = 1e-17;

pub fn ln_factorial(n: u64) -> f64 {
    statrs::function::factorial::ln_factorial(n)
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return LOG_ZERO;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Parameters of the Bessel slack law `pi(m) ∝ lambda_prod^m / ((m+nu)! m!)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BesselParams {
    nu: u64,
    lambda_prod: f64,
}

impl BesselParams {
    pub fn new(nu: u64, lambda_prod: f64) -> Result<Self> {
        if !lambda_prod.is_finite() || lambda_prod < 0.0 {
            return Err(param(format!(
                "bessel lambda_prod must be finite and >= 0, got {lambda_prod}"
            )));
        }
        Ok(Self { nu, lambda_prod })
    }

    pub fn nu(&self) -> u64 {
        self.nu
    }

    pub fn lambda_prod(&self) -> f64 {
        self.lambda_prod
    }

    /// Most probable slack value (smallest one if two tie).
    pub fn mode(&self) -> u64 {
        bessel_mode(self.nu, self.lambda_prod)
    }

    /// `pi(m+1) / pi(m)`.
    #[inline]
    pub fn ratio_up(&self, m: u64) -> f64 {
        self.lambda_prod / (((m + 1) * (m + 1 + self.nu)) as f64)
    }
}

/// Mode of the sequence `a_k = lambda^k / (k! (k+nu)!)`.
pub(crate) fn bessel_mode(nu: u64, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let nu_f = nu as f64;
    let q = 0.5 * ((nu_f * nu_f + 4.0 * lambda).sqrt() - nu_f);
    let mut mode = (q.ceil() as u64).saturating_sub(1);
    while mode > 0 && ((mode * (mode + nu)) as f64) > lambda {
        mode -= 1;
    }
    while (((mode + 1) * (mode + 1 + nu)) as f64) <= lambda {
        mode += 1;
    }
    mode
}

/// `log Σ_k lambda^k / (k! (k+nu)!)`, summed outward from the largest term.
pub(crate) fn log_bessel_series(nu: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return -ln_factorial(nu);
    }
    let mode = bessel_mode(nu, lambda);
    let log_head = mode as f64 * lambda.ln() - ln_factorial(mode) - ln_factorial(mode + nu);
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut k = mode;
    loop {
        term *= lambda / (((k + 1) * (k + 1 + nu)) as f64);
        sum += term;
        k += 1;
        if term < SERIES_EPS * sum {
            break;
        }
    }
    term = 1.0;
    k = mode;
    while k > 0 {
        term *= ((k * (k + nu)) as f64) / lambda;
        sum += term;
        k -= 1;
        if term < SERIES_EPS * sum {
            break;
        }
    }
    log_head + sum.ln()
}

/// `log I_order(argument)` for the modified Bessel function of the first kind.
pub fn log_mod_bessel_i(order: u64, argument: f64) -> Result<f64> {
    if !argument.is_finite() || argument < 0.0 {
        return Err(param(format!(
            "bessel argument must be finite and >= 0, got {argument}"
        )));
    }
    if argument == 0.0 {
        return Ok(if order == 0 { 0.0 } else { LOG_ZERO });
    }
    let half = 0.5 * argument;
    Ok(order as f64 * half.ln() + log_bessel_series(order, half * half))
}

/// Log pmf of the Bessel slack law.
pub fn bessel_logpmf(params: BesselParams, m: u64) -> f64 {
    let (nu, lambda) = (params.nu, params.lambda_prod);
    if lambda == 0.0 {
        return if m == 0 { 0.0 } else { LOG_ZERO };
    }
    m as f64 * lambda.ln() - ln_factorial(m + nu) - ln_factorial(m) - log_bessel_series(nu, lambda)
}

/// Log pmf of `B - D` with `B ~ Poi(lambda_plus)`, `D ~ Poi(lambda_minus)` independent.
pub fn skellam_logpmf(lambda_plus: f64, lambda_minus: f64, d: i64) -> Result<f64> {
    for (name, v) in [("lambda_plus", lambda_plus), ("lambda_minus", lambda_minus)] {
        if !v.is_finite() || v < 0.0 {
            return Err(param(format!("skellam {name} must be finite and >= 0, got {v}")));
        }
    }
    let nu = d.unsigned_abs();
    if lambda_minus == 0.0 {
        return Ok(if d < 0 { LOG_ZERO } else { poisson_logpmf(lambda_plus, nu) });
    }
    if lambda_plus == 0.0 {
        return Ok(if d > 0 { LOG_ZERO } else { poisson_logpmf(lambda_minus, nu) });
    }
    let log_ratio = 0.5 * d as f64 * (lambda_plus / lambda_minus).ln();
    let bessel = log_mod_bessel_i(nu, 2.0 * (lambda_plus * lambda_minus).sqrt())?;
    Ok(-lambda_plus - lambda_minus + log_ratio + bessel)
}

pub fn poisson_logpmf(mean: f64, k: u64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 0.0 } else { LOG_ZERO };
    }
    -mean + k as f64 * mean.ln() - ln_factorial(k)
}

pub fn binomial_logpmf(n: u64, p: f64, k: u64) -> f64 {
    if k > n {
        return LOG_ZERO;
    }
    if p == 0.0 {
        return if k == 0 { 0.0 } else { LOG_ZERO };
    }
    if p == 1.0 {
        return if k == n { 0.0 } else { LOG_ZERO };
    }
    ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

/// Successes among `draws` taken without replacement from `population`
/// items of which `successes` are marked.
pub fn hypergeometric_logpmf(population: u64, successes: u64, draws: u64, k: u64) -> f64 {
    if successes > population || draws > population {
        return LOG_ZERO;
    }
    let failures = population - successes;
    if k > successes || k > draws || draws - k > failures {
        return LOG_ZERO;
    }
    ln_choose(successes, k) + ln_choose(failures, draws - k) - ln_choose(population, draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_i(order: u32, x: f64) -> f64 {
        // plain ascending series in linear space
        let mut s = 0.0;
        let mut fact_k = 1.0;
        for k in 0..80u32 {
            if k > 0 {
                fact_k *= k as f64;
            }
            let fact_kn: f64 = (1..=(k + order)).map(|j| j as f64).product();
            s += (x / 2.0).powi((2 * k + order) as i32) / (fact_k * fact_kn);
        }
        s
    }

    #[test]
    fn bessel_i_small_cases() {
        assert_eq!(log_mod_bessel_i(0, 0.0).unwrap(), 0.0);
        assert_eq!(log_mod_bessel_i(3, 0.0).unwrap(), LOG_ZERO);
        let i0_2 = direct_i(0, 2.0);
        assert!((i0_2 - 2.279_585_302_336_067).abs() < 1e-12);
        assert!((log_mod_bessel_i(0, 2.0).unwrap() - i0_2.ln()).abs() < 1e-9);
        for (order, x) in [(1u32, 0.5), (3, 4.0), (7, 12.5), (0, 30.0)] {
            let got = log_mod_bessel_i(order as u64, x).unwrap();
            let want = direct_i(order, x).ln();
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{order} {x}");
        }
        assert!(log_mod_bessel_i(0, -1.0).is_err());
        assert!(log_mod_bessel_i(0, f64::NAN).is_err());
    }

    #[test]
    fn bessel_i_large_argument_matches_asymptotic() {
        // Hankel expansion of I_nu(z) to third order in 1/z
        let z: f64 = 2000.0;
        for nu in [0u64, 5] {
            let mu = 4.0 * (nu * nu) as f64;
            let approx = z - 0.5 * (2.0 * std::f64::consts::PI * z).ln()
                + (1.0 - (mu - 1.0) / (8.0 * z) + (mu - 1.0) * (mu - 9.0) / (2.0 * (8.0 * z).powi(2))
                    - (mu - 1.0) * (mu - 9.0) * (mu - 25.0) / (6.0 * (8.0 * z).powi(3)))
                    .ln();
            let got = log_mod_bessel_i(nu, z).unwrap();
            assert!((got - approx).abs() < 1e-9, "nu={nu}: {got} vs {approx}");
        }
    }

    #[test]
    fn bessel_pmf_examples() {
        let p = BesselParams::new(0, 0.0).unwrap();
        assert_eq!(bessel_logpmf(p, 0), 0.0);
        assert_eq!(bessel_logpmf(p, 1), LOG_ZERO);
        let p = BesselParams::new(0, 1.0).unwrap();
        let want = -direct_i(0, 2.0).ln();
        assert!((bessel_logpmf(p, 0) - want).abs() < 1e-12);
        assert!((bessel_logpmf(p, 0) + 0.8239).abs() < 1e-3);
        assert!(BesselParams::new(1, f64::INFINITY).is_err());
        assert!(BesselParams::new(1, -1.0).is_err());
    }

    #[test]
    fn bessel_pmf_normalizes_and_obeys_ratio() {
        for (nu, lambda) in [(0u64, 1.0), (3, 1024.0), (10, 0.3), (0, 4096.0), (25, 50.0)] {
            let p = BesselParams::new(nu, lambda).unwrap();
            let total: f64 = (0..2000).map(|m| bessel_logpmf(p, m).exp()).sum();
            assert!((total - 1.0).abs() < 1e-10, "nu={nu} lambda={lambda} total={total}");
            for m in [0u64, 1, 5, 17, 40] {
                let r = (bessel_logpmf(p, m + 1) - bessel_logpmf(p, m)).exp();
                let want = p.ratio_up(m);
                assert!((r / want - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bessel_mode_is_argmax() {
        for (nu, lambda) in [(0u64, 0.5), (0, 1.0), (2, 6.0), (3, 1024.0), (50, 10.0), (0, 2.0)] {
            let p = BesselParams::new(nu, lambda).unwrap();
            let best = (0..500)
                .max_by(|a, b| bessel_logpmf(p, *a).partial_cmp(&bessel_logpmf(p, *b)).unwrap())
                .unwrap();
            let mode = p.mode();
            assert!((bessel_logpmf(p, mode) - bessel_logpmf(p, best)).abs() < 1e-12);
        }
    }

    #[test]
    fn skellam_examples() {
        let v = skellam_logpmf(1.0, 1.0, 0).unwrap();
        let brute: f64 = (0..60u64).map(|b| (-2.0 - 2.0 * ln_factorial(b)).exp()).sum();
        assert!((v - brute.ln()).abs() < 1e-12);
        assert!((v.exp() - 0.3085).abs() < 1e-4);
        assert_eq!(skellam_logpmf(1.0, 1.0, 2).unwrap(), skellam_logpmf(1.0, 1.0, -2).unwrap());
        assert_eq!(skellam_logpmf(3.0, 0.0, -1).unwrap(), LOG_ZERO);
        assert!((skellam_logpmf(3.0, 0.0, 2).unwrap() - poisson_logpmf(3.0, 2)).abs() < 1e-14);
        let total: f64 = (-200..=200).map(|d| skellam_logpmf(7.0, 2.5, d).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn skellam_matches_joint_poisson_sum() {
        for (lp, lm, d) in [(2.0, 3.0, -2i64), (7.5, 1.25, 4), (32.0, 32.0, 0), (0.3, 5.0, -7)] {
            let mut acc = 0.0;
            for m in 0..400u64 {
                let (b, dd) = if d >= 0 { (m + d as u64, m) } else { (m, m + d.unsigned_abs()) };
                acc += (poisson_logpmf(lp, b) + poisson_logpmf(lm, dd)).exp();
            }
            let got = skellam_logpmf(lp, lm, d).unwrap();
            assert!((got - acc.ln()).abs() < 1e-9, "{lp} {lm} {d}");
        }
    }

    #[test]
    fn discrete_pmfs_normalize() {
        let s: f64 = (0..=20).map(|k| binomial_logpmf(20, 0.35, k).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let s: f64 = (0..=9).map(|k| hypergeometric_logpmf(30, 12, 9, k).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(hypergeometric_logpmf(10, 4, 10, 4), 0.0);
        let s: f64 = (0..100).map(|k| poisson_logpmf(4.0, k).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
