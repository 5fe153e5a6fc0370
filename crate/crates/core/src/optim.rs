//! Finite-difference derivatives and a damped Newton maximizer for small
//! smooth objectives.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

fn step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient.
pub fn fd_gradient<F: FnMut(&DVector<f64>) -> f64>(f: &mut F, x: &DVector<f64>, rel: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut y = x.clone();
    for i in 0..x.len() {
        let h = step(x[i], rel);
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let dn = f(&y);
        y[i] = x[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian from function values.
pub fn fd_hessian<F: FnMut(&DVector<f64>) -> f64>(f: &mut F, x: &DVector<f64>, rel: f64) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let hs: Vec<f64> = x.iter().map(|&v| step(v, rel)).collect();
    let mut h = DMatrix::zeros(n, n);
    let mut y = x.clone();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for i in 0..n {
        y[i] = x[i] + hs[i];
        fp[i] = f(&y);
        y[i] = x[i] - hs[i];
        fm[i] = f(&y);
        y[i] = x[i];
        h[(i, i)] = (fp[i] - 2.0 * f0 + fm[i]) / (hs[i] * hs[i]);
    }
    for i in 0..n {
        for j in 0..i {
            y[i] = x[i] + hs[i];
            y[j] = x[j] + hs[j];
            let pp = f(&y);
            y[i] = x[i] - hs[i];
            y[j] = x[j] - hs[j];
            let mm = f(&y);
            y[i] = x[i];
            y[j] = x[j];
            let v = (pp - fp[i] - fp[j] + 2.0 * f0 - fm[i] - fm[j] + mm) / (2.0 * hs[i] * hs[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Symmetric positive-definite version of `-h`: eigenvalues floored at
/// `floor` times the largest.
pub fn make_pd_neg(h: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let neg = -(h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(neg);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1e-8);
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor * top) } else { top });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Damped Newton ascent with finite-difference derivatives. The Hessian is
/// regularized to negative definiteness and steps are halved until the
/// objective improves.
pub fn newton_maximize<F: FnMut(&DVector<f64>) -> f64>(
    f: &mut F,
    start: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Maximum {
    let mut x = start.clone();
    let mut v = f(&x);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let g = fd_gradient(f, &x, 1e-5);
        let h = fd_hessian(f, &x, 1e-4);
        let a = make_pd_neg(&h, 1e-8);
        let dir = match Cholesky::new(a) {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &x + &dir * t;
            let nv = f(&cand);
            if nv.is_finite() && nv > v {
                let gain = nv - v;
                x = cand;
                v = nv;
                moved = gain > tol;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Maximum {
        x,
        value: v,
        iterations: it,
    }
}

/// BFGS ascent with finite-difference gradients and a backtracking line
/// search.
pub fn bfgs_maximize<F: FnMut(&DVector<f64>) -> f64>(
    f: &mut F,
    start: &DVector<f64>,
    max_iter: usize,
    gtol: f64,
) -> Maximum {
    let n = start.len();
    let mut x = start.clone();
    let mut v = f(&x);
    let mut g = fd_gradient(f, &x, 1e-6);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut it = 0;
    while it < max_iter && g.amax() > gtol {
        it += 1;
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = g.clone();
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = &x + &dir * t;
            let nv = f(&cand);
            if nv.is_finite() && nv >= v + 1e-4 * t * dir.dot(&g) {
                next = Some((cand, nv));
                break;
            }
            t *= 0.5;
        }
        let Some((nx, nv)) = next else { break };
        let ng = fd_gradient(f, &nx, 1e-6);
        let s = &nx - &x;
        let y = &g - &ng;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if it == 1 {
                hinv = DMatrix::identity(n, n) * (sy / y.norm_squared());
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            hinv = &a * &hinv * a.transpose() + &s * s.transpose() * rho;
        }
        let gain = nv - v;
        x = nx;
        v = nv;
        g = ng;
        if gain.abs() < 1e-12 * v.abs().max(1.0) {
            break;
        }
    }
    Maximum {
        x,
        value: v,
        iterations: it,
    }
}
