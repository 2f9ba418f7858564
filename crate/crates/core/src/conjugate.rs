//! Fenchel-Legendre transforms of smooth convex log-moment functions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::value::RateValue;

/// Value, gradient and Hessian of a log-moment function at one point.
#[derive(Clone, Debug)]
pub struct Moments {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// A convex function `Lambda: R^d -> (-inf, +inf]` of log-MGF type.
pub trait LogMgf: Sync {
    fn dim(&self) -> usize;

    /// `None` when `Lambda(t) = +inf`.
    fn moments(&self, t: &DVector<f64>) -> Option<Moments>;

    fn value(&self, t: &DVector<f64>) -> Option<f64> {
        self.moments(t).map(|m| m.value)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AscentOptions {
    pub max_iter: usize,
    /// Stop once `|grad|_inf <= grad_tol * (1 + |t|_inf)`.
    pub grad_tol: f64,
    /// Objective level beyond which a non-stationary ascent counts as divergent.
    pub divergence_value: f64,
    pub divergence_grad: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            max_iter: 200,
            grad_tol: 1e-10,
            divergence_value: 1e6,
            divergence_grad: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conjugate {
    pub value: RateValue,
    /// Maximizer (last iterate when divergent).
    pub argmax: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub diverged: bool,
}

/// `sup_t { <t, b> - Lambda(t) }` by damped Newton ascent with Armijo
/// backtracking; falls back to a gradient step when the regularized Hessian
/// is not positive definite.
pub fn legendre<M: LogMgf + ?Sized>(
    f: &M,
    b: &DVector<f64>,
    opts: &AscentOptions,
) -> Result<Conjugate> {
    let d = f.dim();
    if b.len() != d {
        return Err(Error::DimensionMismatch {
            what: "conjugate argument",
            expected: d,
            found: b.len(),
        });
    }
    let mut t = DVector::zeros(d);
    let mut m = f.moments(&t).ok_or(Error::NonConvergence {
        what: "Legendre transform (log-MGF infinite at 0)",
        iterations: 0,
        grad_norm: f64::NAN,
    })?;
    let mut obj = -m.value;
    let mut stalls = 0;
    for iter in 0..opts.max_iter {
        let g = b - &m.grad;
        let gn = g.amax();
        if obj > opts.divergence_value && gn > opts.divergence_grad {
            return Ok(Conjugate {
                value: RateValue::INFINITY,
                argmax: t,
                iterations: iter,
                grad_norm: gn,
                diverged: true,
            });
        }
        if gn <= opts.grad_tol * (1.0 + t.amax()) {
            return Ok(done(obj, t, iter, gn));
        }
        let dir = newton_direction(&m.hess, &g);
        let slope = g.dot(&dir);
        if slope <= 1e-32 {
            return Ok(done(obj, t, iter, gn));
        }
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let trial = &t + &dir * step;
            if let Some(mt) = f.moments(&trial) {
                let trial_obj = trial.dot(b) - mt.value;
                if trial_obj >= obj + 1e-4 * step * slope {
                    accepted = Some((trial, mt, trial_obj));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((nt, nm, nobj)) => {
                if nobj - obj <= 1e-15 * (1.0 + obj.abs()) {
                    stalls += 1;
                } else {
                    stalls = 0;
                }
                t = nt;
                m = nm;
                obj = nobj;
                if stalls >= 3 {
                    let gn = (b - &m.grad).amax();
                    return Ok(done(obj, t, iter + 1, gn));
                }
            }
            None => {
                // No ascent possible at double precision: the iterate is
                // stationary up to round-off of the objective.
                if slope <= 1e-13 * (1.0 + obj.abs()) {
                    return Ok(done(obj, t, iter, gn));
                }
                return Err(Error::NonConvergence {
                    what: "Legendre transform (line search)",
                    iterations: iter,
                    grad_norm: gn,
                });
            }
        }
    }
    let gn = (b - &m.grad).amax();
    // The last few iterations may only be polishing a value that no longer moves.
    if stalls > 0 {
        return Ok(done(obj, t, opts.max_iter, gn));
    }
    Err(Error::NonConvergence {
        what: "Legendre transform",
        iterations: opts.max_iter,
        grad_norm: gn,
    })
}

fn done(obj: f64, t: DVector<f64>, iterations: usize, grad_norm: f64) -> Conjugate {
    Conjugate {
        value: RateValue::new(obj.max(0.0)),
        argmax: t,
        iterations,
        grad_norm,
        diverged: false,
    }
}

fn newton_direction(hess: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let scale = hess.diagonal().amax().max(1e-300);
    let mut lambda = 1e-12 * scale;
    for _ in 0..8 {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += lambda;
        }
        if let Some(ch) = h.cholesky() {
            let d = ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        lambda *= 100.0;
    }
    g / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `Lambda(t) = |t|^2 / 2 * s`: conjugate `|b|^2 / (2 s)`.
    struct Gaussian {
        d: usize,
        s: f64,
    }

    impl LogMgf for Gaussian {
        fn dim(&self) -> usize {
            self.d
        }
        fn moments(&self, t: &DVector<f64>) -> Option<Moments> {
            Some(Moments {
                value: 0.5 * self.s * t.norm_squared(),
                grad: t * self.s,
                hess: DMatrix::identity(self.d, self.d) * self.s,
            })
        }
    }

    /// Bernoulli(1/2) log-MGF `log((1 + e^t)/2)`: conjugate is the relative
    /// entropy `p log 2p + (1-p) log 2(1-p)` on [0, 1], +inf outside.
    struct Bernoulli;

    impl LogMgf for Bernoulli {
        fn dim(&self) -> usize {
            1
        }
        fn moments(&self, t: &DVector<f64>) -> Option<Moments> {
            let x = t[0];
            let p = 1.0 / (1.0 + (-x).exp());
            let value = x.max(0.0) + (-x.abs()).exp().ln_1p() - 2f64.ln();
            Some(Moments {
                value,
                grad: DVector::from_element(1, p),
                hess: DMatrix::from_element(1, 1, p * (1.0 - p)),
            })
        }
    }

    #[test]
    fn gaussian_conjugate() {
        let f = Gaussian { d: 3, s: 2.0 };
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let c = legendre(&f, &b, &AscentOptions::default()).unwrap();
        assert!((c.value.value() - b.norm_squared() / 4.0).abs() < 1e-12);
        assert!((c.argmax[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn bernoulli_entropy() {
        for p in [0.05, 0.3, 0.5, 0.9] {
            let c = legendre(
                &Bernoulli,
                &DVector::from_element(1, p),
                &Default::default(),
            )
            .unwrap();
            let exact = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
            assert!((c.value.value() - exact).abs() < 1e-10, "p={p}");
        }
    }

    #[test]
    fn outside_support_is_infinite() {
        let c = legendre(
            &Bernoulli,
            &DVector::from_element(1, 1.5),
            &Default::default(),
        )
        .unwrap();
        assert!(c.diverged);
        assert!(c.value.is_infinite());
    }

    #[test]
    fn dimension_is_checked() {
        let f = Gaussian { d: 2, s: 1.0 };
        assert!(legendre(&f, &DVector::zeros(3), &Default::default()).is_err());
    }
}
