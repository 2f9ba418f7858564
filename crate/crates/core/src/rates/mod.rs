//! Rate functions: the transform `kappa*`, the degenerate rate, the
//! conditional layer rate `J`, and the moderate-deviation output rate.

pub mod chain;
pub mod relu;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::activation::Activation;
use crate::conjugate::{self, AscentOptions};
use crate::error::{Error, Result};
use crate::gauss_expect::{unpack, ExpectSpec, KappaModel};
use crate::model::NetworkConfig;
use crate::psd::{min_norm_preimage, CovMatrix, SymMatrix, TOL_EQ};
use crate::value::RateValue;

pub use chain::{chain_rate_ig, output_rate_iz, ChainResult};
pub use relu::{f_inverse, kappa_star_relu_scalar};

/// Relative distance below which `g_next` is taken to be the center of
/// `J(. | g_prev)`, where the rate is exactly zero.
const CENTER_TOL: f64 = 1e-13;

/// `Delta(r; center)`: 0 within `TOL_EQ` (Frobenius) of the center, else `+inf`.
pub fn delta_rate(r: &DMatrix<f64>, center: &DMatrix<f64>) -> RateValue {
    assert_eq!(r.shape(), center.shape(), "delta_rate shape mismatch");
    if (r - center).norm() <= TOL_EQ {
        RateValue::ZERO
    } else {
        RateValue::INFINITY
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KappaStar {
    pub value: RateValue,
    /// Maximizing `eta` (last iterate when divergent).
    pub eta: SymMatrix,
    pub iterations: usize,
    pub grad_norm: f64,
    pub diverged: bool,
}

/// `kappa*(y; q)` against a prepared model of `kappa(.; q)`.
pub fn legendre_with(model: &KappaModel, y: &SymMatrix) -> Result<KappaStar> {
    let b = model.dual_target(y)?;
    let c = conjugate::legendre(model, &b, &AscentOptions::default())?;
    Ok(KappaStar {
        value: c.value,
        eta: unpack(model.matrix_dim(), &c.argmax),
        iterations: c.iterations,
        grad_norm: c.grad_norm,
        diverged: c.diverged,
    })
}

/// `kappa*(y; q) = sup_eta { <eta, y> - kappa(eta; q) }` over symmetric `eta`.
pub fn legendre(
    y: &SymMatrix,
    q: &CovMatrix,
    act: &Activation,
    spec: &ExpectSpec,
) -> Result<KappaStar> {
    if y.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            what: "y",
            expected: q.dim(),
            found: y.dim(),
        });
    }
    legendre_with(&KappaModel::new(q, act, spec)?, y)
}

/// Evaluates `J(. | g_prev)` for a fixed previous covariance, reusing the
/// quadrature features of `g_prev` across calls.
#[derive(Clone, Debug)]
pub struct ConditionalRate {
    g_prev: CovMatrix,
    cb: f64,
    cw: f64,
    scalar_relu: bool,
    kappa: Option<KappaModel>,
    center: Option<SymMatrix>,
}

impl ConditionalRate {
    pub fn new(g_prev: &CovMatrix, model: &NetworkConfig, spec: &ExpectSpec) -> Result<Self> {
        let scalar_relu = g_prev.dim() == 1 && model.activation == Activation::Relu;
        let kappa = if scalar_relu {
            None
        } else {
            Some(KappaModel::new(g_prev, &model.activation, spec)?)
        };
        Ok(ConditionalRate {
            g_prev: g_prev.clone(),
            cb: model.cb,
            cw: model.cw,
            scalar_relu,
            kappa,
            center: None,
        })
    }

    /// `C_b 1 + C_W y(g_prev)`, the unique zero of `J(. | g_prev)`.
    pub fn center(&mut self) -> SymMatrix {
        if let Some(c) = &self.center {
            return c.clone();
        }
        let y = match &self.kappa {
            Some(k) => k.second_moments(),
            None => SymMatrix::scalar(0.5 * self.g_prev.get(0, 0)),
        };
        let c = y.affine(self.cb, self.cw);
        self.center = Some(c.clone());
        c
    }

    /// `J(g_next | g_prev)` for width ratio `gamma`.
    pub fn eval(&mut self, g_next: &SymMatrix, gamma: f64) -> Result<RateValue> {
        if g_next.dim() != self.g_prev.dim() {
            return Err(Error::DimensionMismatch {
                what: "g_next",
                expected: self.g_prev.dim(),
                found: g_next.dim(),
            });
        }
        if gamma.is_infinite() {
            let c = self.center();
            return Ok(delta_rate(g_next.as_matrix(), c.as_matrix()));
        }
        let c = self.center();
        if g_next.max_abs_diff(&c) <= CENTER_TOL * (1.0 + c.frobenius()) {
            return Ok(RateValue::ZERO);
        }
        let y = g_next.affine(-self.cb / self.cw, 1.0 / self.cw);
        let ks = if self.scalar_relu {
            let h = self.g_prev.get(0, 0);
            if h <= 0.0 {
                // kappa(.; 0) = 0, so kappa*(.; 0) = Delta(.; 0).
                delta_rate(y.as_matrix(), &DMatrix::zeros(1, 1))
            } else {
                kappa_star_relu_scalar(y.get(0, 0), h)
            }
        } else {
            legendre_with(self.kappa.as_ref().expect("model present"), &y)?.value
        };
        Ok(ks.scale(gamma))
    }
}

/// `J(g_next | g_prev)`: `gamma kappa*((g_next - C_b 1)/C_W; g_prev)` for finite
/// `gamma`, `Delta(g_next; C_b 1 + C_W y(g_prev))` otherwise.
pub fn conditional_rate_j(
    g_next: &CovMatrix,
    g_prev: &CovMatrix,
    gamma: f64,
    model: &NetworkConfig,
    spec: &ExpectSpec,
) -> Result<RateValue> {
    if !(gamma >= 1.0) {
        return Err(Error::InvalidConfig(format!("width ratio {gamma} < 1")));
    }
    ConditionalRate::new(g_prev, model, spec)?.eval(g_next.base(), gamma)
}

/// Moderate-deviation rate `inf { |r|^2/2 : ghat^(L)# r = z }`.
pub fn md_rate(z: &DMatrix<f64>, ghat_l: &CovMatrix) -> Result<RateValue> {
    Ok(min_norm_preimage(ghat_l, z)?.0)
}
