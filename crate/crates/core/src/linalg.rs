//! Dense linear algebra and distribution helpers shared by the models and samplers.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadCovariance(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::BadCovariance(what.to_string()))
}

/// Lower Cholesky factor.
pub fn chol_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(m, what)?.unpack())
}

/// `log |A|` given the lower Cholesky factor of `A`.
pub fn log_det_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn inverse_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("lower factor with positive diagonal is invertible")
}

/// Inverse of an SPD matrix from its lower factor.
pub fn spd_inverse_from_chol(l: &DMatrix<f64>) -> DMatrix<f64> {
    let li = inverse_lower(l);
    li.transpose() * li
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&spd_inverse_from_chol(&chol_lower(m, what)?)))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Adds `ridge * tr(m)/p` to the diagonal.
pub fn ridge(m: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let p = m.nrows();
    let bump = ridge * (m.trace() / p as f64).abs().max(f64::MIN_POSITIVE);
    m + DMatrix::identity(p, p) * bump
}

pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}

/// `tr(A B)` for square matrices of equal size.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Draw from N(mean, L L^T).
pub fn mvn_sample<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    lower: &DMatrix<f64>,
) -> DVector<f64> {
    mean + lower * standard_normal_vec(rng, mean.len())
}

/// Log density of N(mean, L L^T) at `x`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, lower: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let z = lower
        .solve_lower_triangular(&(x - mean))
        .expect("positive diagonal");
    -0.5 * d * LN_2PI - 0.5 * log_det_chol(lower) - 0.5 * z.norm_squared()
}

/// `log Gamma_p(a)`.
pub fn log_multigamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * PI.ln()
        + (1..=p)
            .map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0))
            .sum::<f64>()
}

/// Inverse-Wishart log density with mean `U / (nu - p - 1)`:
/// `p(W) ∝ |W|^{-(nu+p+1)/2} exp(-tr(U W^{-1}) / 2)`.
pub fn iw_log_density(w: &DMatrix<f64>, u: &DMatrix<f64>, nu: f64) -> Result<f64> {
    let p = w.nrows();
    if nu <= p as f64 - 1.0 {
        return Err(Error::BadDof {
            nu,
            min: p as f64 - 1.0,
        });
    }
    let lw = chol_lower(w, "inverse-Wishart argument")?;
    let lu = chol_lower(u, "inverse-Wishart scale")?;
    Ok(iw_log_density_chol(&lw, &lu, nu))
}

/// As [`iw_log_density`] but from lower factors of `W` and `U`.
pub fn iw_log_density_chol(lw: &DMatrix<f64>, lu: &DMatrix<f64>, nu: f64) -> f64 {
    let p = lw.nrows();
    let pf = p as f64;
    // tr(U W^{-1}) = || L_W^{-1} L_U ||_F^2
    let m = lw.solve_lower_triangular(lu).expect("positive diagonal");
    0.5 * nu * log_det_chol(lu)
        - 0.5 * nu * pf * std::f64::consts::LN_2
        - log_multigamma(p, 0.5 * nu)
        - 0.5 * (nu + pf + 1.0) * log_det_chol(lw)
        - 0.5 * m.norm_squared()
}

/// Bartlett draw: returns the lower factor `G` of `X = G G^T ~ Wishart(L L^T, dof)`.
pub fn wishart_lower<R: Rng + ?Sized>(rng: &mut R, scale_lower: &DMatrix<f64>, dof: f64) -> DMatrix<f64> {
    let p = scale_lower.nrows();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(dof - i as f64).expect("dof > p - 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    scale_lower * a
}

/// Draw from IW(U, nu); returns the matrix and its lower Cholesky factor.
/// `inv_scale_lower` is the lower factor of `U^{-1}`.
pub fn inverse_wishart_sample<R: Rng + ?Sized>(
    rng: &mut R,
    inv_scale_lower: &DMatrix<f64>,
    nu: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let g = wishart_lower(rng, inv_scale_lower, nu);
    let w = symmetrize(&spd_inverse_from_chol(&g));
    let lw = chol_lower(&w, "inverse-Wishart draw")?;
    Ok((w, lw))
}

/// Numerically stable `log(sum(exp(x)))`; `-inf` for empty input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// SplitMix64 finalizer, used to derive independent seeds from `(seed, index)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample mean and covariance (n - 1 denominator) of row vectors.
pub fn mean_cov(rows: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = r - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    (mean, cov / (n - 1.0).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::function::gamma::gamma;

    #[test]
    fn multigamma_reduces_to_gamma() {
        assert!((log_multigamma(1, 3.7) - ln_gamma(3.7)).abs() < 1e-12);
        // Gamma_2(a) = sqrt(pi) Gamma(a) Gamma(a - 1/2)
        let a: f64 = 2.3;
        let expect = (PI.sqrt() * gamma(a) * gamma(a - 0.5)).ln();
        assert!((log_multigamma(2, a) - expect).abs() < 1e-12);
    }

    #[test]
    fn scalar_inverse_wishart_is_inverse_gamma() {
        // IW(U, nu) with p = 1 is Inverse-Gamma(nu/2, U/2)
        let (w, u, nu) = (1.0f64, 1.0f64, 3.0f64);
        let alpha = nu / 2.0;
        let beta = u / 2.0;
        let ig = alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * w.ln() - beta / w;
        let got = iw_log_density(
            &DMatrix::from_element(1, 1, w),
            &DMatrix::from_element(1, 1, u),
            nu,
        )
        .unwrap();
        assert!((got - ig).abs() < 1e-12);
    }

    #[test]
    fn scalar_inverse_wishart_integrates_to_one() {
        // substitute w = exp(t) and integrate over t with the trapezoid rule
        let u = DMatrix::from_element(1, 1, 1.7);
        let (lo, hi, n) = (-12.0f64, 12.0f64, 200_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|i| {
                let t = lo + i as f64 * h;
                let w = DMatrix::from_element(1, 1, t.exp());
                let f = (iw_log_density(&w, &u, 4.0).unwrap() + t).exp();
                if i == 0 || i == n {
                    0.5 * f
                } else {
                    f
                }
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn inverse_wishart_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let nu = 8.0;
        let inv_l = chol_lower(&spd_inverse(&u, "u").unwrap(), "u inv").unwrap();
        let n = 40_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            acc += inverse_wishart_sample(&mut rng, &inv_l, nu).unwrap().0;
        }
        let mean = acc / n as f64;
        let expect = &u / (nu - 3.0);
        for (a, b) in mean.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 0.02, "{mean} vs {expect}");
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert!((log_add_exp(-1e4, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn trace_product_matches_dense() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(trace_product(&a, &b), (&a * &b).trace());
    }
}
