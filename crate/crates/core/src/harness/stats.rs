//! Interval estimates and hypothesis tests for the ablation summary.
//!
//! p-values come from the regularized incomplete gamma function, evaluated
//! by series below `a + 1` and by continued fraction above.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error: {0}")]
pub struct DomainError(pub String);

fn domain(msg: impl Into<String>) -> DomainError {
    DomainError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

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

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let s = (std::f64::consts::PI * x).sin();
        return std::f64::consts::PI.ln() - s.abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const MAX_ITER: usize = 10_000;
const EPS: f64 = 1e-15;
const TINY: f64 = 1e-300;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Modified Lentz evaluation of the continued fraction for Q(a, x).
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

/// Survival function of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, df: u32) -> f64 {
    gamma_q(df as f64 / 2.0, statistic / 2.0).clamp(0.0, 1.0)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Result<(f64, f64), DomainError> {
    if n == 0 || k > n || !(z > 0.0 && z.is_finite()) {
        return Err(domain(format!(
            "wilson_interval needs 0 <= k <= n, n >= 1, z > 0 (k={k}, n={n}, z={z})"
        )));
    }
    let (kf, nf) = (k as f64, n as f64);
    let p = kf / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 {
        0.0
    } else {
        (center - half).clamp(0.0, p)
    };
    let hi = if k == n {
        1.0
    } else {
        (center + half).clamp(p, 1.0)
    };
    Ok((lo, hi))
}

/// Pearson chi-square test of independence on an r×c table of counts.
pub fn chi_square_independence(table: &[Vec<f64>]) -> Result<TestResult, DomainError> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(domain(
            "table must be rectangular with at least 2 rows and 2 columns",
        ));
    }
    if table.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(domain("counts must be finite and nonnegative"));
    }
    let rows: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let cols: Vec<f64> = (0..c)
        .map(|j| table.iter().map(|row| row[j]).sum())
        .collect();
    let total: f64 = rows.iter().sum();
    if rows.iter().chain(&cols).any(|m| *m <= 0.0) {
        return Err(domain("every row and column total must be positive"));
    }
    let mut statistic = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, observed) in row.iter().enumerate() {
            let expected = rows[i] * cols[j] / total;
            statistic += (observed - expected).powi(2) / expected;
        }
    }
    let df = ((r - 1) * (c - 1)) as u32;
    Ok(TestResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
    })
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for idx in &order[i..=j] {
            ranks[*idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Kruskal-Wallis H with tie correction; p from chi-square with g-1 df.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, DomainError> {
    if groups.len() < 2 || groups.iter().any(Vec::is_empty) {
        return Err(domain("kruskal_wallis needs at least 2 nonempty groups"));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(domain("samples must be finite"));
    }
    let n = all.len() as f64;
    let ranks = average_ranks(&all);
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = 12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0);

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let correction = 1.0 - ties / (n * n * n - n);
    let df = (groups.len() - 1) as u32;
    if correction <= 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let statistic = (h / correction).max(0.0);
    Ok(TestResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Standardized mean difference (a − b) over the pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, DomainError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(domain("cohens_d needs at least 2 samples per group"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b))
        / (na + nb - 2.0))
        .sqrt();
    if pooled.is_nan() || pooled <= 0.0 {
        return Err(domain("pooled variance is zero"));
    }
    Ok((mean(a) - mean(b)) / pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_at_integers() {
        let mut fact = 1.0f64;
        for n in 1..20u32 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn one_df_tail_is_erfc_like() {
        // P(X > 0) = 1 and the tail shrinks with the statistic.
        assert_eq!(chi_square_sf(0.0, 1), 1.0);
        assert!(chi_square_sf(1.0, 1) > chi_square_sf(2.0, 1));
        // Median of chi-square(2) is 2 ln 2.
        assert!((chi_square_sf(2.0 * 2f64.ln(), 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wilson_bounds() {
        assert_eq!(wilson_interval(0, 1, 1.96).unwrap().0, 0.0);
        assert_eq!(wilson_interval(45, 45, 1.96).unwrap().1, 1.0);
        assert!(wilson_interval(2, 1, 1.96).is_err());
        assert!(wilson_interval(0, 0, 1.96).is_err());
        assert!(wilson_interval(1, 2, 0.0).is_err());
    }

    #[test]
    fn identical_rows_are_independent() {
        let r = chi_square_independence(&[vec![5.0, 5.0], vec![5.0, 5.0]]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(chi_square_independence(&[vec![0.0, 0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn kw_identical_groups() {
        let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let all_tied = kruskal_wallis(&[vec![4.0, 4.0], vec![4.0]]).unwrap();
        assert_eq!(all_tied.p_value, 1.0);
    }

    #[test]
    fn cohens_d_degenerate() {
        assert!(cohens_d(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }
}
