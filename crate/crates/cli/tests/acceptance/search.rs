//! Local search that pushes the largest pairwise cosine of unit columns
//! down toward its lower bound.

use nalgebra::DMatrix;

use crate::oracle::max_cos;

pub fn unit_columns(v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = v.clone();
    for mut c in w.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    w
}

/// `log(sum exp(t cos)) / t` over pairs, with its gradient projected onto
/// the tangent space of each column's sphere.
fn smooth_max(w: &DMatrix<f64>, t: f64) -> (f64, DMatrix<f64>) {
    let k = w.ncols();
    let g = w.transpose() * w;
    let top = max_cos(w);
    let mut z = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            z += (t * (g[(i, j)] - top)).exp();
        }
    }
    let mut grad = DMatrix::zeros(w.nrows(), k);
    for i in 0..k {
        for j in i + 1..k {
            let p = (t * (g[(i, j)] - top)).exp() / z;
            let (wi, wj) = (w.column(i).into_owned(), w.column(j).into_owned());
            grad.column_mut(i).axpy(p, &wj, 1.0);
            grad.column_mut(j).axpy(p, &wi, 1.0);
        }
    }
    for i in 0..k {
        let wi = w.column(i).into_owned();
        let r = grad.column(i).dot(&wi);
        grad.column_mut(i).axpy(-r, &wi, 1.0);
    }
    (top + z.ln() / t, grad)
}

/// Riemannian descent with Armijo steps and a rising temperature, stopping
/// once the largest cosine is within `gap` of the bound.
pub fn drive_down(start: &DMatrix<f64>, gap: f64) -> DMatrix<f64> {
    let k = start.ncols();
    let bound = -1.0 / (k as f64 - 1.0);
    let mut w = unit_columns(start);
    let mut t = 10.0;
    while t <= 1e9 {
        let mut step = 1.0 / t;
        for _ in 0..4000 {
            if max_cos(&w) - bound <= gap {
                return w;
            }
            let (f, g) = smooth_max(&w, t);
            let gn2 = g.norm_squared();
            if gn2 < 1e-30 {
                break;
            }
            loop {
                let cand = unit_columns(&(&w - &g * step));
                if smooth_max(&cand, t).0 <= f - 0.25 * step * gn2 {
                    w = cand;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
                if step < 1e-18 {
                    break;
                }
            }
            if step < 1e-18 {
                break;
            }
        }
        t *= 10.0;
    }
    w
}
