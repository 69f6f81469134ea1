//! Damped Newton ascent shared by the GLM and random-effect fits.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Objective with an analytic gradient and Hessian.
pub(crate) trait Objective {
    /// Value only; used by the line search. Non-finite means "outside the domain".
    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Value, gradient and Hessian.
    fn eval(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-10,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
}

const MAX_HALVINGS: usize = 60;

/// Maximises `obj` from `x0`.
///
/// Each step solves `(-H + rI) d = g`, with the ridge `r` raised until the
/// system is positive definite, then halves the step until the objective does
/// not decrease. Converged means the change in `f`, actual or predicted by the
/// Newton model, is below `rel_tol (1 + |f|)` and either the gradient max-norm
/// is below `grad_tol (1 + |f|)` or both changes are small on an unridged
/// step. The second case covers maxima where the remaining gain is below the
/// rounding noise of `f` but the gradient is not yet tiny.
pub(crate) fn maximize<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: NewtonOptions) -> Result<NewtonResult> {
    let mut x = x0.to_vec();
    let (mut f, mut g, mut h) = obj.eval(&x)?;
    if !f.is_finite() {
        return Ok(NewtonResult {
            x,
            value: f,
            hessian: h,
            iterations: 0,
            converged: false,
            status: "objective is not finite at the starting point".into(),
        });
    }
    let mut last_change = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let scale = 1.0 + f.abs();
        let grad_ok = g.amax() < opts.grad_tol * scale;
        let (d, ridged) = ascent_direction(&g, &h);
        let predicted = g.dot(&d);
        let tol = opts.rel_tol * scale;
        let small_steps = !ridged && last_change < tol && predicted.abs() < tol;
        if (grad_ok && (last_change < tol || predicted.abs() < tol)) || small_steps {
            // One undamped polishing step: inside the quadratic region it
            // takes the remaining error to rounding level.
            let polished: Vec<f64> = x.iter().zip(d.iter()).map(|(xi, di)| xi + di).collect();
            if let Ok((fp, gp, hp)) = obj.eval(&polished) {
                if fp.is_finite() && fp >= f - 1e-14 * scale && gp.amax() < g.amax() {
                    (x, f, h) = (polished, fp, hp);
                }
            }
            return Ok(NewtonResult {
                x,
                value: f,
                hessian: h,
                iterations: iter,
                converged: true,
                status: "converged".into(),
            });
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(xi, di)| xi + t * di).collect();
            let ft = obj.value(&trial).unwrap_or(f64::NEG_INFINITY);
            if ft.is_finite() && ft >= f {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            return Ok(NewtonResult {
                x,
                value: f,
                hessian: h,
                iterations: iter,
                converged: grad_ok,
                status: if grad_ok {
                    "converged".into()
                } else {
                    "line search could not improve the objective".into()
                },
            });
        };
        last_change = ft - f;
        x = trial;
        (f, g, h) = obj.eval(&x)?;
        if !f.is_finite() {
            return Ok(NewtonResult {
                x,
                value: f,
                hessian: h,
                iterations: iter + 1,
                converged: false,
                status: "objective became non-finite".into(),
            });
        }
    }
    Ok(NewtonResult {
        x,
        value: f,
        hessian: h,
        iterations: opts.max_iter,
        converged: false,
        status: format!("no convergence after {} iterations", opts.max_iter),
    })
}

/// Newton direction with a ridge fallback when `-H` is not positive definite.
/// The flag reports whether the ridge was needed.
fn ascent_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> (DVector<f64>, bool) {
    let neg = -h;
    if let Some(ch) = neg.clone().cholesky() {
        return (ch.solve(g), false);
    }
    let diag_scale = neg.diagonal().amax().max(1.0);
    let mut ridge = 1e-8 * diag_scale;
    let n = g.len();
    loop {
        let m = &neg + DMatrix::identity(n, n) * ridge;
        if let Some(ch) = m.cholesky() {
            return (ch.solve(g), true);
        }
        ridge *= 10.0;
        if !ridge.is_finite() {
            return (g.clone(), true);
        }
    }
}
