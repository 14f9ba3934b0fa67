//! Pearson correlation and paired t-tests, with Student-t tail probabilities
//! evaluated in log space so very large t statistics keep a usable p-value.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const ALPHA: f64 = 0.05;

/// Smallest p-value reported as a number.
pub const P_FLOOR: f64 = 1e-300;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// ln I_x(a, b), the log of the regularized incomplete beta function.
pub fn ln_beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x >= 1.0 {
        return 0.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        let other = ln_beta_inc(b, a, 1.0 - x);
        return (-other.exp()).ln_1p();
    }
    a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b) - a.ln() + beta_cf(a, b, x).ln()
}

/// ln P(T > t) for Student's t with `df` degrees of freedom.
pub fn ln_t_sf(t: f64, df: f64) -> f64 {
    if t < 0.0 {
        return (-ln_t_sf(-t, df).exp()).ln_1p();
    }
    let x = df / (df + t * t);
    ln_beta_inc(df / 2.0, 0.5, x) - std::f64::consts::LN_2
}

/// t such that P(T > t) = `tail`, by bisection.
pub fn t_quantile_upper(tail: f64, df: f64) -> f64 {
    debug_assert!(tail > 0.0 && tail < 0.5);
    let target = tail.ln();
    let (mut lo, mut hi) = (0.0, 1.0);
    while ln_t_sf(hi, df) > target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ln_t_sf(mid, df) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// A probability carried by its natural log.
///
/// Serializes as a number, or as `"< 1e-300"` when below [`P_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValue {
    ln: f64,
}

impl PValue {
    pub fn from_ln(ln: f64) -> Self {
        PValue { ln: ln.min(0.0) }
    }

    pub fn ln(self) -> f64 {
        self.ln
    }

    pub fn log10(self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }

    /// Zero only when the value underflows `f64`.
    pub fn value(self) -> f64 {
        self.ln.exp()
    }

    pub fn is_below_floor(self) -> bool {
        self.ln < P_FLOOR.ln()
    }
}

impl fmt::Display for PValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_below_floor() {
            write!(f, "< 1e-300")
        } else {
            write!(f, "{:e}", self.value())
        }
    }
}

impl Serialize for PValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_below_floor() {
            s.serialize_str("< 1e-300")
        } else {
            s.serialize_f64(self.value())
        }
    }
}

impl<'de> Deserialize<'de> for PValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(p) => Ok(PValue::from_ln(p.ln())),
            Raw::Text(t) if t.trim() == "< 1e-300" => Ok(PValue::from_ln(P_FLOOR.ln() - 1.0)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("not a p-value: {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub mean_1: f64,
    pub mean_2: f64,
    pub variance_1: f64,
    pub variance_2: f64,
    pub n: usize,
    /// Absent when one sample is constant.
    pub pearson_r: Option<f64>,
    pub hypothesized_mean_difference: f64,
    pub df: usize,
    pub t_stat: f64,
    pub p_one_tail: PValue,
    pub p_two_tail: PValue,
    pub log10_p_one_tail: f64,
    pub log10_p_two_tail: f64,
    pub alpha: f64,
    pub t_critical_one_tail: f64,
    pub t_critical_two_tail: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("need at least 2 observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("observations must be finite"));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation is undefined for a constant sample"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn report(
    (mean_1, variance_1): (f64, f64),
    (mean_2, variance_2): (f64, f64),
    n: usize,
    pearson_r: Option<f64>,
    t_stat: f64,
) -> TTestReport {
    let df = n - 1;
    let ln_one = ln_t_sf(t_stat.abs(), df as f64);
    let p_one_tail = PValue::from_ln(ln_one);
    let p_two_tail = PValue::from_ln(ln_one + std::f64::consts::LN_2);
    TTestReport {
        mean_1,
        mean_2,
        variance_1,
        variance_2,
        n,
        pearson_r,
        hypothesized_mean_difference: 0.0,
        df,
        t_stat,
        p_one_tail,
        p_two_tail,
        log10_p_one_tail: p_one_tail.log10(),
        log10_p_two_tail: p_two_tail.log10(),
        alpha: ALPHA,
        t_critical_one_tail: t_quantile_upper(ALPHA, df as f64),
        t_critical_two_tail: t_quantile_upper(ALPHA / 2.0, df as f64),
    }
}

/// Paired two-sample t-test of `x - y` against a zero mean difference.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TTestReport> {
    check_pair(x, y)?;
    let n = x.len();
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let sd = sample_variance(&d).sqrt();
    // x = y + c leaves rounding noise of order eps * |x| in the differences
    let scale = x.iter().chain(y).fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 64.0 * f64::EPSILON * scale {
        return Err(Error::invalid("paired differences are all equal; t is undefined"));
    }
    let t = mean(&d) / (sd / (n as f64).sqrt());
    Ok(report(
        (mean(x), sample_variance(x)),
        (mean(y), sample_variance(y)),
        n,
        pearson(x, y).ok(),
        t,
    ))
}

/// Paired t-test from per-sample means, variances, the pair count and the
/// correlation between the samples.
pub fn ttest_from_summary(m1: f64, v1: f64, m2: f64, v2: f64, n: usize, r: f64) -> Result<TTestReport> {
    if [m1, v1, m2, v2, r].iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("summary statistics must be finite"));
    }
    if v1 <= 0.0 || v2 <= 0.0 {
        return Err(Error::invalid("variances must be positive"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least 2 pairs"));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("correlation {r} is outside [-1, 1]")));
    }
    let var_d = v1 + v2 - 2.0 * r * (v1 * v2).sqrt();
    if var_d <= 0.0 {
        return Err(Error::invalid("variance of the differences is not positive"));
    }
    let t = (m1 - m2) / (var_d / n as f64).sqrt();
    Ok(report((m1, v1), (m2, v2), n, Some(r), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_at_integers() {
        let mut fact = 1.0f64;
        for k in 1..20 {
            assert!((ln_gamma(k as f64) - fact.ln()).abs() < 1e-12, "Γ({k})");
            fact *= k as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn t_tail_closed_forms() {
        // df = 1 is Cauchy, df = 2 has sf(t) = (1 - t / sqrt(2 + t²)) / 2
        for t in [0.1f64, 0.5, 1.0, 3.0, 10.0] {
            let cauchy = 0.5 - t.atan() / std::f64::consts::PI;
            assert!((ln_t_sf(t, 1.0).exp() - cauchy).abs() < 1e-13, "t = {t}");
            let two = 0.5 * (1.0 - t / (2.0 + t * t).sqrt());
            assert!((ln_t_sf(t, 2.0).exp() - two).abs() < 1e-13, "t = {t}");
        }
        assert!((ln_t_sf(0.0, 9.0).exp() - 0.5).abs() < 1e-15);
        assert!((ln_t_sf(-1.0, 2.0).exp() + ln_t_sf(1.0, 2.0).exp() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn huge_t_stays_in_log_space() {
        let ln = ln_t_sf(186.5, 99.0);
        assert!(ln.is_finite());
        assert!(ln / std::f64::consts::LN_10 < -100.0);
        let tiny = PValue::from_ln(ln_t_sf(1e8, 99.0));
        assert!(tiny.is_below_floor());
        assert_eq!(serde_json::to_string(&tiny).unwrap(), "\"< 1e-300\"");
    }

    #[test]
    fn critical_values_at_99_df() {
        assert!((t_quantile_upper(0.05, 99.0) - 1.6604).abs() < 1e-4);
        assert!((t_quantile_upper(0.025, 99.0) - 1.9842).abs() < 1e-4);
    }

    #[test]
    fn summary_formula_reductions() {
        let r = ttest_from_summary(3.0, 2.0, 3.0, 2.0, 10, 0.0).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert!((r.p_two_tail.value() - 1.0).abs() < 1e-12);
        let r = ttest_from_summary(4.0, 2.0, 3.0, 2.0, 16, 0.0).unwrap();
        assert!((r.t_stat - 1.0 / (4.0f64 / 16.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 15);
        assert!(ttest_from_summary(1.0, 1.0, 0.0, 1.0, 10, 1.0).is_err());
        assert!(ttest_from_summary(1.0, 0.0, 0.0, 1.0, 10, 0.0).is_err());
    }

    #[test]
    fn degenerate_pairs_are_rejected() {
        let x = [1.0, 2.0, 4.0];
        assert!(paired_ttest(&x, &x).is_err());
        assert!(paired_ttest(&x, &[0.0, 1.0, 3.0]).is_err());
        let y = [0.3, 1.7, 2.9, 12.1];
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
        assert!(paired_ttest(&shifted, &y).is_err());
        assert!(paired_ttest(&x, &[1.0, 2.0]).is_err());
        assert!(pearson(&x, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn p_value_round_trip() {
        let p = PValue::from_ln(0.01f64.ln());
        let s = serde_json::to_string(&p).unwrap();
        let back: PValue = serde_json::from_str(&s).unwrap();
        assert!((back.value() - 0.01).abs() < 1e-15);
    }
}
