//! Exact samplers for the discrete laws the bridge kernels need.
//!
//! Every sampler here is exact: no normal approximations, no truncated
//! rejection envelopes. Inversion-type samplers walk outward from the mode of
//! the pmf; Poisson and Binomial switch to Hörmann's transformed rejection
//! (PTRS / BTRS) once the mean is large.

mod rng;
pub mod special;

pub use rng::RngState;
pub use special::{
    bessel_logpmf, binomial_logpmf, hypergeometric_logpmf, ln_choose, ln_factorial,
    log_mod_bessel_i, poisson_logpmf, skellam_logpmf, BesselParams, LOG_ZERO,
};

use crate::error::{param, Result};
use rand::Rng;
use special::log_bessel_series;

/// Above this mean (or `n * min(p, 1-p)`), rejection replaces inversion.
const INVERSION_LIMIT: f64 = 30.0;

pub fn poisson_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> Result<u64> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(param(format!("poisson mean must be finite and >= 0, got {mean}")));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < INVERSION_LIMIT {
        return Ok(poisson_inversion(rng, mean));
    }
    Ok(poisson_ptrs(rng, mean))
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let p0 = (-mean).exp();
    loop {
        let mut u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = p0;
        // the tail beyond ~mean + 40 sd is below double precision
        while u > p {
            u -= p;
            k += 1;
            p *= mean / k as f64;
            if p == 0.0 && k as f64 > mean {
                break;
            }
        }
        if u <= p {
            return k;
        }
    }
}

fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        if lhs <= -mean + k * loglam - ln_factorial(k as u64) {
            return k as u64;
        }
    }
}

pub fn binomial_sample<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(param(format!("binomial p must lie in [0,1], got {p}")));
    }
    if n == 0 || p == 0.0 {
        return Ok(0);
    }
    if p == 1.0 {
        return Ok(n);
    }
    let flipped = p > 0.5;
    let q = if flipped { 1.0 - p } else { p };
    let k = if (n as f64) * q <= INVERSION_LIMIT {
        binomial_inversion(rng, n, q)
    } else {
        binomial_btrs(rng, n, q)
    };
    Ok(if flipped { n - k } else { k })
}

/// Sequential search from zero; `p <= 0.5` and small `n p`.
fn binomial_inversion<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    let q = 1.0 - p;
    let s = p / q;
    let a = (n + 1) as f64 * s;
    let r0 = (n as f64 * q.ln()).exp();
    loop {
        let mut u: f64 = rng.random();
        let mut r = r0;
        let mut k = 0u64;
        while u > r {
            u -= r;
            k += 1;
            if k > n {
                break;
            }
            r *= a / k as f64 - s;
        }
        if k <= n {
            return k;
        }
    }
}

/// Hörmann's BTRS, `p <= 0.5`.
fn binomial_btrs<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    let nf = n as f64;
    let q = 1.0 - p;
    let spq = (nf * p * q).sqrt();
    let b = 1.15 + 2.53 * spq;
    let a = -0.0873 + 0.0248 * b + 0.01 * p;
    let c = nf * p + 0.5;
    let alpha = (2.83 + 5.1 / b) * spq;
    let vr = 0.92 - 4.2 / b;
    let m = ((nf + 1.0) * p).floor();
    let lpq = (p / q).ln();
    let h_m = ln_factorial(m as u64) + ln_factorial(n - m as u64);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + c).floor();
        if k < 0.0 || k > nf {
            continue;
        }
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        let lhs = (v * alpha / (a / (us * us) + b)).ln();
        let ku = k as u64;
        let rhs = h_m - ln_factorial(ku) - ln_factorial(n - ku) + (k - m) * lpq;
        if lhs <= rhs {
            return ku;
        }
    }
}

/// Two-sided chop-down inversion starting at `mode`.
///
/// `p_mode` is the normalized mass at the mode; `up(k)` returns
/// `p(k+1)/p(k)` and `down(k)` returns `p(k-1)/p(k)`. `hi = None` means the
/// support is unbounded above. Each step extends whichever frontier has the
/// larger next mass, so the walk visits outcomes in decreasing probability
/// for unimodal laws.
fn mode_inversion<R, U, D>(rng: &mut R, mode: u64, lo: u64, hi: Option<u64>, p_mode: f64, up: U, down: D) -> u64
where
    R: Rng + ?Sized,
    U: Fn(u64) -> f64,
    D: Fn(u64) -> f64,
{
    loop {
        let mut u: f64 = rng.random();
        u -= p_mode;
        if u <= 0.0 {
            return mode;
        }
        let (mut l, mut h) = (mode, mode);
        let (mut pl, mut ph) = (p_mode, p_mode);
        let mut next_l = if l > lo { pl * down(l) } else { 0.0 };
        let mut next_h = if hi.is_none_or(|hi| h < hi) { ph * up(h) } else { 0.0 };
        loop {
            if next_l <= 0.0 && next_h <= 0.0 {
                // rounding left a sliver of mass unassigned; redraw
                break;
            }
            if next_h >= next_l {
                h += 1;
                ph = next_h;
                u -= ph;
                if u <= 0.0 {
                    return h;
                }
                next_h = if hi.is_none_or(|hi| h < hi) { ph * up(h) } else { 0.0 };
            } else {
                l -= 1;
                pl = next_l;
                u -= pl;
                if u <= 0.0 {
                    return l;
                }
                next_l = if l > lo { pl * down(l) } else { 0.0 };
            }
        }
    }
}

pub fn hypergeometric_sample<R: Rng + ?Sized>(
    rng: &mut R,
    population: u64,
    successes: u64,
    draws: u64,
) -> Result<u64> {
    if successes > population || draws > population {
        return Err(param(format!(
            "hypergeometric requires successes ({successes}) and draws ({draws}) <= population ({population})"
        )));
    }
    let failures = population - successes;
    let lo = draws.saturating_sub(failures);
    let hi = successes.min(draws);
    if lo == hi {
        return Ok(lo);
    }
    let mode = (((draws + 1) as f64 * (successes + 1) as f64 / (population + 2) as f64).floor() as u64)
        .clamp(lo, hi);
    let p_mode = hypergeometric_logpmf(population, successes, draws, mode).exp();
    let (kk, nn, ff) = (successes as f64, draws as f64, failures as f64);
    let up = |k: u64| {
        let k = k as f64;
        (kk - k) * (nn - k) / ((k + 1.0) * (ff - nn + k + 1.0))
    };
    let down = |k: u64| {
        let k = k as f64;
        k * (ff - nn + k) / ((kk - k + 1.0) * (nn - k + 1.0))
    };
    Ok(mode_inversion(rng, mode, lo, Some(hi), p_mode, up, down))
}

/// Draw the slack `M` from the Bessel law.
pub fn bessel_sample<R: Rng + ?Sized>(rng: &mut R, params: BesselParams) -> u64 {
    let lambda = params.lambda_prod();
    if lambda == 0.0 {
        return 0;
    }
    let nu = params.nu();
    let mode = params.mode();
    let log_p_mode = mode as f64 * lambda.ln()
        - ln_factorial(mode)
        - ln_factorial(mode + nu)
        - log_bessel_series(nu, lambda);
    let up = |m: u64| lambda / (((m + 1) * (m + 1 + nu)) as f64);
    let down = |m: u64| ((m * (m + nu)) as f64) / lambda;
    mode_inversion(rng, mode, 0, None, log_p_mode.exp(), up, down)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_cases() {
        let mut rng = RngState::new(1);
        for _ in 0..100 {
            assert_eq!(poisson_sample(&mut rng, 0.0).unwrap(), 0);
            assert_eq!(binomial_sample(&mut rng, 5, 1.0).unwrap(), 5);
            assert_eq!(binomial_sample(&mut rng, 0, 0.3).unwrap(), 0);
            assert_eq!(binomial_sample(&mut rng, 9, 0.0).unwrap(), 0);
            assert_eq!(hypergeometric_sample(&mut rng, 10, 4, 10).unwrap(), 4);
            assert_eq!(hypergeometric_sample(&mut rng, 10, 0, 5).unwrap(), 0);
            assert_eq!(bessel_sample(&mut rng, BesselParams::new(5, 0.0).unwrap()), 0);
        }
    }

    #[test]
    fn parameter_errors() {
        let mut rng = RngState::new(1);
        assert!(poisson_sample(&mut rng, -1.0).is_err());
        assert!(poisson_sample(&mut rng, f64::NAN).is_err());
        assert!(binomial_sample(&mut rng, 3, 1.5).is_err());
        assert!(binomial_sample(&mut rng, 3, -0.1).is_err());
        assert!(hypergeometric_sample(&mut rng, 5, 6, 2).is_err());
        assert!(hypergeometric_sample(&mut rng, 5, 2, 6).is_err());
    }

    #[test]
    fn hypergeometric_support_bounds() {
        let mut rng = RngState::new(2);
        for _ in 0..2000 {
            let k = hypergeometric_sample(&mut rng, 20, 15, 12).unwrap();
            assert!((7..=12).contains(&k));
        }
    }

    #[test]
    fn poisson_mean_lln() {
        let mut rng = RngState::new(3);
        let n = 1_000_000;
        let s: u64 = (0..n).map(|_| poisson_sample(&mut rng, 4.0).unwrap()).sum();
        let mean = s as f64 / n as f64;
        assert!((mean - 4.0).abs() < 3.0 * 2.0 / 1000.0, "mean {mean}");
    }

    #[test]
    fn samplers_are_deterministic() {
        let rng = RngState::new(99);
        let draw = |mut r: RngState| {
            (
                poisson_sample(&mut r, 55.0).unwrap(),
                binomial_sample(&mut r, 400, 0.3).unwrap(),
                hypergeometric_sample(&mut r, 60, 24, 7).unwrap(),
                bessel_sample(&mut r, BesselParams::new(3, 1024.0).unwrap()),
            )
        };
        assert_eq!(draw(rng.clone()), draw(rng.clone()));
    }

    #[test]
    fn bessel_zero_slack_probability() {
        // P(M = 0) = 1 / I_0(2) for nu = 0, lambda = 1
        let mut rng = RngState::new(4);
        let params = BesselParams::new(0, 1.0).unwrap();
        let n = 200_000;
        let zeros = (0..n).filter(|_| bessel_sample(&mut rng, params) == 0).count();
        let p = 1.0 / 2.279_585_302_336_067;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((zeros as f64 / n as f64 - p).abs() < 4.0 * sd);
    }
}
