//! Mode finding and curvature for smooth log densities.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        let x0 = xp[i];
        xp[i] = x0 + h;
        let a = f(xp.as_slice());
        xp[i] = x0 - h;
        let b = f(xp.as_slice());
        xp[i] = x0;
        (a - b) / (2.0 * h)
    })
}

/// Maximizes `f` by BFGS with central-difference gradients and a
/// backtracking line search. Returns the best point and value seen.
pub fn maximize(f: impl Fn(&[f64]) -> f64, x0: &[f64], max_iter: usize, gtol: f64) -> (DVector<f64>, f64) {
    let d = x0.len();
    let h = 1e-5;
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut g = fd_gradient(&f, &x, h);
    // inverse Hessian approximation of -f
    let mut hinv = DMatrix::identity(d, d) * 1e-2;
    for _ in 0..max_iter {
        if g.amax() < gtol {
            break;
        }
        let dir = &hinv * &g;
        let slope = dir.dot(&g);
        let dir = if slope > 0.0 { dir } else { g.clone() * 1e-2 };
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &dir * step;
            let fnew = f(xn.as_slice());
            if fnew.is_finite() && fnew >= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = fd_gradient(&f, &xn, h);
        let s = &xn - &x;
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let a = &i - &s * y.transpose() * rho;
            hinv = &a * &hinv * a.transpose() + &s * s.transpose() * rho;
        }
        let done = (fnew - fx).abs() < 1e-12 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if done {
            break;
        }
    }
    (x, fx)
}

/// Central-difference Hessian.
pub fn hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut xp = x.to_vec();
    let f0 = f(x);
    let mut eval = |shifts: &[(usize, f64)]| {
        for &(i, s) in shifts {
            xp[i] += s;
        }
        let v = f(&xp);
        for &(i, s) in shifts {
            xp[i] -= s;
        }
        v
    };
    let mut hm = DMatrix::zeros(d, d);
    for i in 0..d {
        hm[(i, i)] = (eval(&[(i, h)]) - 2.0 * f0 + eval(&[(i, -h)])) / (h * h);
        for j in 0..i {
            let v = (eval(&[(i, h), (j, h)]) - eval(&[(i, h), (j, -h)]) - eval(&[(i, -h), (j, h)])
                + eval(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    hm
}

/// Mode and covariance of the Gaussian approximation to `exp(f)`.
/// Curvature eigenvalues are floored so the covariance is always PD.
pub fn laplace(f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let (mode, fx) = maximize(&f, x0, 200, 1e-4);
    if !fx.is_finite() {
        return None;
    }
    let neg_h = -hessian(&f, mode.as_slice(), 1e-4);
    if neg_h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(neg_h);
    let floor = eig.eigenvalues.amax().max(1.0) * 1e-8;
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    Some((mode, crate::linalg::symmetrize(&cov)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_mode_and_covariance() {
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let prec = c.clone().try_inverse().unwrap();
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = |x: &[f64]| {
            let d = DVector::from_column_slice(x) - &mu;
            -0.5 * d.dot(&(&prec * &d))
        };
        let (m, cov) = laplace(f, &[0.0; 3]).unwrap();
        assert!((m - &mu).amax() < 1e-4);
        assert!((cov - c).amax() < 1e-4);
    }

    #[test]
    fn rosenbrock_is_solved() {
        let f = |x: &[f64]| -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let (m, _) = maximize(f, &[-1.2, 1.0], 500, 1e-8);
        assert!((m[0] - 1.0).abs() < 1e-3 && (m[1] - 1.0).abs() < 1e-3, "{m}");
    }
}
