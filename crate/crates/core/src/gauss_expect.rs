//! Gaussian expectations: the log-moment function `kappa(eta; q)`, the second
//! moment matrix `y(q)` and the shallow-network function `Upsilon(theta)`.
//!
//! Each expectation is a weighted sum over a [`GaussRule`]. Features are
//! evaluated once per rule; every later evaluation at a new `eta` or `theta`
//! only recombines them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::conjugate::{LogMgf, Moments};
use crate::error::{Error, Result};
use crate::model::{InputSet, NetworkConfig};
use crate::psd::{CovMatrix, SymMatrix};
use crate::quadrature::{self, GaussRule, McSpec, QuadratureSpec};
use crate::rng::domain;

/// Radius of the ray probes of the divergence guard.
pub const PROBE_RADIUS: f64 = 40.0;

/// Weighted node terms `exponent + log weight` above this are treated as
/// divergence.
pub const MAX_EXPONENT: f64 = 700.0;

/// Largest Gaussian dimension integrated by quadrature; above it the Monte
/// Carlo backend is used.
pub const MAX_QUAD_DIM_KAPPA: usize = 3;
pub const MAX_QUAD_DIM_UPSILON: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpectSpec {
    pub quad: QuadratureSpec,
    pub mc: McSpec,
    /// Use Monte Carlo even where quadrature is available.
    #[serde(default)]
    pub force_mc: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Quadrature,
    MonteCarlo,
}

fn build_rule(
    dim: usize,
    max_quad_dim: usize,
    breaks_1d: &[f64],
    spec: &ExpectSpec,
    mc_domain: u64,
) -> Result<(Arc<GaussRule>, Backend)> {
    if spec.force_mc || dim > max_quad_dim {
        let rule = quadrature::monte_carlo(dim, spec.mc, mc_domain);
        return Ok((Arc::new(rule), Backend::MonteCarlo));
    }
    if dim == 1 {
        let rule = quadrature::composite_normal_1d(spec.quad.nodes_1d, breaks_1d);
        return Ok((Arc::new(rule), Backend::Quadrature));
    }
    let rule = quadrature::gauss_hermite(dim, spec.quad.order_for(dim))?;
    Ok((rule, Backend::Quadrature))
}

/// Directions probed by the divergence guard: the coordinate axes in both
/// signs plus the direction of every node.
fn probe_directions(rule: &GaussRule) -> Vec<Vec<f64>> {
    let d = rule.dim();
    let mut dirs = Vec::new();
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = s;
            dirs.push(e);
        }
    }
    if d > 1 {
        for (x, _) in rule.iter() {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                dirs.push(x.iter().map(|v| v / n).collect());
            }
        }
    }
    dirs
}

/// Index pairs `alpha <= beta` of a `d x d` symmetric matrix and the weight
/// of each pair in `<eta, y> = sum_{alpha beta} eta_ab y_ab`.
pub fn symmetric_pairs(d: usize) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut pairs = Vec::new();
    let mut coef = Vec::new();
    for a in 0..d {
        for b in a..d {
            pairs.push((a, b));
            coef.push(if a == b { 1.0 } else { 2.0 });
        }
    }
    (pairs, coef)
}

/// Packs the upper triangle of `m` in pair order.
pub fn pack(m: &SymMatrix) -> DVector<f64> {
    let (pairs, _) = symmetric_pairs(m.dim());
    DVector::from_iterator(pairs.len(), pairs.iter().map(|&(a, b)| m.get(a, b)))
}

pub fn unpack(d: usize, v: &DVector<f64>) -> SymMatrix {
    let (pairs, _) = symmetric_pairs(d);
    let mut m = DMatrix::zeros(d, d);
    for (k, &(a, b)) in pairs.iter().enumerate() {
        m[(a, b)] = v[k];
        m[(b, a)] = v[k];
    }
    SymMatrix::from_matrix(m).expect("unpacked matrix is square and finite")
}

/// Weighted log-sum-exp with tilted mean and covariance of `features`.
///
/// `exps[i]` are node exponents; `features` is node-major with `k` columns.
fn tilted_moments(exps: &[f64], log_w: &[f64], features: &[f64], k: usize) -> Moments {
    let mx = exps
        .iter()
        .zip(log_w)
        .map(|(e, l)| e + l)
        .fold(f64::NEG_INFINITY, f64::max);
    let omega: Vec<f64> = exps
        .iter()
        .zip(log_w)
        .map(|(e, l)| (e + l - mx).exp())
        .collect();
    let total: f64 = omega.iter().sum();
    let mut mean = DVector::zeros(k);
    for (i, w) in omega.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let f = &features[i * k..(i + 1) * k];
        for j in 0..k {
            mean[j] += w * f[j];
        }
    }
    mean /= total;
    let mut cov = DMatrix::zeros(k, k);
    let mut c = vec![0.0; k];
    for (i, w) in omega.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let f = &features[i * k..(i + 1) * k];
        for j in 0..k {
            c[j] = f[j] - mean[j];
        }
        for a in 0..k {
            let wa = w * c[a];
            for b in a..k {
                cov[(a, b)] += wa * c[b];
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = cov[(a, b)] / total;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Moments {
        value: mx + total.ln(),
        grad: mean,
        hess: cov,
    }
}

/// `kappa(.; q)` for one covariance `q`, as a function of the packed upper
/// triangle `t` of a symmetric `eta`.
///
/// With pair weights `c_k` (1 on the diagonal, 2 off it) the exponent is
/// `sum_k t_k c_k p_k` where `p_k = sigma(u_a) sigma(u_b)` and `u = q^# N`.
/// Gradients and Hessians are the tilted mean and covariance of `c_k p_k`.
#[derive(Clone, Debug)]
pub struct KappaModel {
    dim: usize,
    coef: Vec<f64>,
    /// `c_k p_k` per node, node-major.
    scaled: Vec<f64>,
    log_w: Vec<f64>,
    /// `c_k p_k` at the probe points `R u`.
    probes: Vec<f64>,
    guard: bool,
    backend: Backend,
}

impl KappaModel {
    pub fn new(q: &CovMatrix, act: &Activation, spec: &ExpectSpec) -> Result<Self> {
        let d = q.dim();
        let root = q.sqrt().as_matrix();
        let breaks: Vec<f64> = if d == 1 && root[(0, 0)] > 0.0 {
            act.kinks().iter().map(|k| k / root[(0, 0)]).collect()
        } else {
            Vec::new()
        };
        let (rule, backend) = build_rule(d, MAX_QUAD_DIM_KAPPA, &breaks, spec, domain::KAPPA_MC)?;
        let (pairs, coef) = symmetric_pairs(d);
        let k = pairs.len();
        let features_at = |x: &[f64], out: &mut Vec<f64>| {
            let phi: Vec<f64> = (0..d)
                .map(|a| act.eval((0..d).map(|r| root[(a, r)] * x[r]).sum()))
                .collect();
            for (j, &(a, b)) in pairs.iter().enumerate() {
                out.push(coef[j] * phi[a] * phi[b]);
            }
        };
        let mut scaled = Vec::with_capacity(rule.len() * k);
        let mut log_w = Vec::with_capacity(rule.len());
        for (i, (x, _)) in rule.iter().enumerate() {
            let lw = rule.log_weights()[i];
            if lw == f64::NEG_INFINITY {
                continue;
            }
            features_at(x, &mut scaled);
            log_w.push(lw);
        }
        let guard = !act.is_bounded();
        let mut probes = Vec::new();
        if guard {
            for u in probe_directions(&rule) {
                let x: Vec<f64> = u.iter().map(|v| PROBE_RADIUS * v).collect();
                features_at(&x, &mut probes);
            }
        }
        Ok(KappaModel {
            dim: d,
            coef,
            scaled,
            log_w,
            probes,
            guard,
            backend,
        })
    }

    pub fn matrix_dim(&self) -> usize {
        self.dim
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    fn npairs(&self) -> usize {
        self.coef.len()
    }

    fn exponents(&self, t: &DVector<f64>) -> Option<Vec<f64>> {
        let k = self.npairs();
        let dot = |f: &[f64]| f.iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f64>();
        if self.guard {
            let limit = 0.5 * PROBE_RADIUS * PROBE_RADIUS;
            if self.probes.chunks_exact(k).any(|f| dot(f) >= limit) {
                return None;
            }
        }
        let exps: Vec<f64> = self.scaled.chunks_exact(k).map(dot).collect();
        if self.guard
            && exps
                .iter()
                .zip(&self.log_w)
                .any(|(e, lw)| e + lw > MAX_EXPONENT)
        {
            return None;
        }
        Some(exps)
    }

    /// `kappa(eta; q)`; `+inf` when the guard detects divergence.
    pub fn kappa(&self, eta: &SymMatrix) -> Result<f64> {
        self.check_dim(eta.dim())?;
        Ok(self.value(&pack(eta)).unwrap_or(f64::INFINITY))
    }

    /// Converts `y` into the linear coefficient of the packed dual variable.
    pub fn dual_target(&self, y: &SymMatrix) -> Result<DVector<f64>> {
        self.check_dim(y.dim())?;
        let mut b = pack(y);
        for (v, c) in b.iter_mut().zip(&self.coef) {
            *v *= c;
        }
        Ok(b)
    }

    /// `y(q) = E[sigma(u) sigma(u)^T]`, the gradient of `kappa` at 0.
    pub fn second_moments(&self) -> SymMatrix {
        let k = self.npairs();
        let mut mean = DVector::zeros(k);
        let mut total = 0.0;
        for (f, lw) in self.scaled.chunks_exact(k).zip(&self.log_w) {
            let w = lw.exp();
            total += w;
            for j in 0..k {
                mean[j] += w * f[j] / self.coef[j];
            }
        }
        unpack(self.dim, &(mean / total))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::DimensionMismatch {
                what: "kappa argument",
                expected: self.dim,
                found: d,
            });
        }
        Ok(())
    }
}

impl LogMgf for KappaModel {
    fn dim(&self) -> usize {
        self.npairs()
    }

    fn moments(&self, t: &DVector<f64>) -> Option<Moments> {
        let exps = self.exponents(t)?;
        Some(tilted_moments(
            &exps,
            &self.log_w,
            &self.scaled,
            self.npairs(),
        ))
    }

    fn value(&self, t: &DVector<f64>) -> Option<f64> {
        let exps = self.exponents(t)?;
        let mx = exps
            .iter()
            .zip(&self.log_w)
            .map(|(e, l)| e + l)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = exps
            .iter()
            .zip(&self.log_w)
            .map(|(e, l)| (e + l - mx).exp())
            .sum();
        Some(mx + s.ln())
    }
}

/// `kappa(eta; q) = log E[exp(sum_ab eta_ab sigma(u_a) sigma(u_b))]`, `u = q^# N`.
pub fn kappa(eta: &SymMatrix, q: &CovMatrix, act: &Activation, spec: &ExpectSpec) -> Result<f64> {
    if eta.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            what: "eta",
            expected: q.dim(),
            found: eta.dim(),
        });
    }
    KappaModel::new(q, act, spec)?.kappa(eta)
}

/// `kappa` for a general square `eta`, evaluated at its symmetric part.
pub fn kappa_general(
    eta: &DMatrix<f64>,
    q: &CovMatrix,
    act: &Activation,
    spec: &ExpectSpec,
) -> Result<f64> {
    kappa(&SymMatrix::from_matrix(eta.clone())?, q, act, spec)
}

/// `y(q)`.
pub fn y_of_q(q: &CovMatrix, act: &Activation, spec: &ExpectSpec) -> Result<SymMatrix> {
    Ok(KappaModel::new(q, act, spec)?.second_moments())
}

/// Closed-form scalar ReLU `kappa`: `log(((1 - 2 eta q)^(-1/2) + 1) / 2)` for
/// `eta < 1/(2q)`, `+inf` otherwise, and 0 when `q = 0`.
pub fn kappa_relu_scalar(eta: f64, q: f64) -> f64 {
    assert!(q >= 0.0, "variance must be nonnegative");
    if q == 0.0 {
        return 0.0;
    }
    let s = 1.0 - 2.0 * eta * q;
    if s <= 0.0 {
        return f64::INFINITY;
    }
    (0.5 * (s.powf(-0.5) + 1.0)).ln()
}

/// Plain Monte Carlo estimate of `kappa` with the delta-method standard
/// error of the logarithm.
pub fn kappa_mc(
    eta: &SymMatrix,
    q: &CovMatrix,
    act: &Activation,
    mc: McSpec,
) -> Result<(f64, f64)> {
    let spec = ExpectSpec {
        mc,
        force_mc: true,
        ..Default::default()
    };
    let m = KappaModel::new(q, act, &spec)?;
    let t = pack(eta);
    let k = m.npairs();
    let exps: Vec<f64> = m
        .scaled
        .chunks_exact(k)
        .map(|f| f.iter().zip(t.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let mx = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = exps.iter().map(|e| (e - mx).exp()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mx + mean.ln(), (var / n).sqrt() / mean))
}

/// `Upsilon(theta) = log E[exp((C_W/2) sum_h (sum_a theta_ah v_ah)^2)]` with
/// `v_ah = sigma^(s_h)(b + <W, x_a>) W_1^(s_h)`, `b ~ N(0, C_b)` and
/// `W_r ~ N(0, C_W/n0)`.
///
/// `theta` is `|A| x n2`, packed column-major (index `h |A| + a`).
#[derive(Clone, Debug)]
pub struct UpsilonModel {
    na: usize,
    n2: usize,
    cw: f64,
    /// `v_ah` per node, node-major, `|A| n2` columns.
    v: Vec<f64>,
    log_w: Vec<f64>,
    probes: Vec<f64>,
    guard: bool,
    backend: Backend,
}

impl UpsilonModel {
    /// `include_bias = false` integrates over the weights only.
    pub fn new(
        model: &NetworkConfig,
        inputs: &InputSet,
        pattern: &[u8],
        spec: &ExpectSpec,
        include_bias: bool,
    ) -> Result<Self> {
        if pattern.len() != model.n_out {
            return Err(Error::DimensionMismatch {
                what: "derivative pattern",
                expected: model.n_out,
                found: pattern.len(),
            });
        }
        if pattern.iter().any(|&s| s > 1) {
            return Err(Error::InvalidConfig(
                "derivative pattern entries must be 0 or 1".into(),
            ));
        }
        inputs.validate(model.n0)?;
        let act = model.activation;
        let n0 = model.n0;
        let with_b = include_bias && model.cb > 0.0;
        let dim = n0 + usize::from(with_b);
        let sb = model.cb.sqrt();
        let sw = (model.cw / n0 as f64).sqrt();
        let off = usize::from(with_b);
        let breaks: Vec<f64> = if dim == 1 {
            // Only W_1 varies: arguments are sw x_a N.
            inputs
                .points
                .iter()
                .filter(|x| x[0] != 0.0)
                .flat_map(|x| act.kinks().iter().map(move |k| k / (sw * x[0])))
                .collect()
        } else {
            Vec::new()
        };
        let (rule, backend) =
            build_rule(dim, MAX_QUAD_DIM_UPSILON, &breaks, spec, domain::UPSILON_MC)?;
        let na = inputs.len();
        let n2 = pattern.len();
        let features_at = |x: &[f64], out: &mut Vec<f64>| {
            let b = if with_b { sb * x[0] } else { 0.0 };
            let w1 = sw * x[off];
            for &s in pattern {
                for p in &inputs.points {
                    let arg = b + (0..n0).map(|r| sw * x[off + r] * p[r]).sum::<f64>();
                    let v = act.eval_order(s, arg);
                    out.push(if s == 1 { v * w1 } else { v });
                }
            }
        };
        let mut v = Vec::with_capacity(rule.len() * na * n2);
        let mut log_w = Vec::with_capacity(rule.len());
        for (i, (x, _)) in rule.iter().enumerate() {
            let lw = rule.log_weights()[i];
            if lw == f64::NEG_INFINITY {
                continue;
            }
            features_at(x, &mut v);
            log_w.push(lw);
        }
        let guard = !(act.is_bounded() && pattern.iter().all(|&s| s == 0));
        let mut probes = Vec::new();
        if guard {
            for u in probe_directions(&rule) {
                let x: Vec<f64> = u.iter().map(|c| PROBE_RADIUS * c).collect();
                features_at(&x, &mut probes);
            }
        }
        Ok(UpsilonModel {
            na,
            n2,
            cw: model.cw,
            v,
            log_w,
            probes,
            guard,
            backend,
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.na, self.n2)
    }

    fn width(&self) -> usize {
        self.na * self.n2
    }

    fn exponent(&self, v: &[f64], theta: &[f64]) -> f64 {
        let mut e = 0.0;
        for h in 0..self.n2 {
            let r = h * self.na..(h + 1) * self.na;
            let s: f64 = v[r.clone()].iter().zip(&theta[r]).map(|(a, b)| a * b).sum();
            e += s * s;
        }
        0.5 * self.cw * e
    }

    fn exponents(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let k = self.width();
        if self.guard {
            let limit = 0.5 * PROBE_RADIUS * PROBE_RADIUS;
            if self
                .probes
                .chunks_exact(k)
                .any(|f| self.exponent(f, theta) >= limit)
            {
                return None;
            }
        }
        let exps: Vec<f64> = self
            .v
            .chunks_exact(k)
            .map(|f| self.exponent(f, theta))
            .collect();
        if self.guard
            && exps
                .iter()
                .zip(&self.log_w)
                .any(|(e, lw)| e + lw > MAX_EXPONENT)
        {
            return None;
        }
        Some(exps)
    }

    fn check_theta(&self, theta: &DMatrix<f64>) -> Result<()> {
        if theta.nrows() != self.na || theta.ncols() != self.n2 {
            return Err(Error::DimensionMismatch {
                what: "theta entries",
                expected: self.width(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// `Upsilon(theta)`; `+inf` when the guard detects divergence.
    pub fn upsilon(&self, theta: &DMatrix<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        let t = DVector::from_column_slice(theta.as_slice());
        Ok(self.value(&t).unwrap_or(f64::INFINITY))
    }

    /// `Q_h[a, b] = C_W E[v_ah v_bh]`, the Hessian blocks of `Upsilon` at 0.
    pub fn coefficients(&self) -> Vec<SymMatrix> {
        let k = self.width();
        let total: f64 = self.log_w.iter().map(|l| l.exp()).sum();
        (0..self.n2)
            .map(|h| {
                let mut q = DMatrix::zeros(self.na, self.na);
                for (f, lw) in self.v.chunks_exact(k).zip(&self.log_w) {
                    let w = lw.exp();
                    let col = &f[h * self.na..(h + 1) * self.na];
                    for a in 0..self.na {
                        for b in 0..self.na {
                            q[(a, b)] += w * col[a] * col[b];
                        }
                    }
                }
                SymMatrix::from_matrix(q * (self.cw / total)).expect("finite coefficients")
            })
            .collect()
    }
}

impl LogMgf for UpsilonModel {
    fn dim(&self) -> usize {
        self.width()
    }

    fn moments(&self, t: &DVector<f64>) -> Option<Moments> {
        let theta = t.as_slice();
        let exps = self.exponents(theta)?;
        let k = self.width();
        let na = self.na;
        // Per node: gradient of the exponent, C_W s_h v_ah.
        let mut grads = Vec::with_capacity(self.v.len());
        for f in self.v.chunks_exact(k) {
            for h in 0..self.n2 {
                let r = h * na..(h + 1) * na;
                let s: f64 = f[r.clone()]
                    .iter()
                    .zip(&theta[r.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                grads.extend(f[r].iter().map(|v| self.cw * s * v));
            }
        }
        let mut m = tilted_moments(&exps, &self.log_w, &grads, k);
        // Add the tilted mean of the exponent Hessian, block-diagonal in h.
        let mx = exps
            .iter()
            .zip(&self.log_w)
            .map(|(e, l)| e + l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut eh = DMatrix::zeros(k, k);
        for (i, f) in self.v.chunks_exact(k).enumerate() {
            let w = (exps[i] + self.log_w[i] - mx).exp();
            if w == 0.0 {
                continue;
            }
            total += w;
            for h in 0..self.n2 {
                for a in 0..na {
                    for b in 0..na {
                        eh[(h * na + a, h * na + b)] += w * f[h * na + a] * f[h * na + b];
                    }
                }
            }
        }
        m.hess += eh * (self.cw / total);
        Some(m)
    }

    fn value(&self, t: &DVector<f64>) -> Option<f64> {
        let exps = self.exponents(t.as_slice())?;
        let mx = exps
            .iter()
            .zip(&self.log_w)
            .map(|(e, l)| e + l)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = exps
            .iter()
            .zip(&self.log_w)
            .map(|(e, l)| (e + l - mx).exp())
            .sum();
        Some(mx + s.ln())
    }
}

/// `Upsilon(theta)` with the bias integrated.
pub fn upsilon(
    theta: &DMatrix<f64>,
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &[u8],
    spec: &ExpectSpec,
) -> Result<f64> {
    UpsilonModel::new(model, inputs, pattern, spec, true)?.upsilon(theta)
}

/// Coefficient blocks of the quadratic `Upsilon~`. The expectation runs over
/// the weights only unless `include_bias` is set.
pub fn upsilon_tilde_coefficients(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &[u8],
    spec: &ExpectSpec,
    include_bias: bool,
) -> Result<Vec<SymMatrix>> {
    Ok(UpsilonModel::new(model, inputs, pattern, spec, include_bias)?.coefficients())
}

/// `Upsilon~(theta) = 1/2 sum_h theta_h^T Q_h theta_h`.
pub fn upsilon_tilde(theta: &DMatrix<f64>, coefficients: &[SymMatrix]) -> Result<f64> {
    if theta.ncols() != coefficients.len() {
        return Err(Error::DimensionMismatch {
            what: "theta columns",
            expected: coefficients.len(),
            found: theta.ncols(),
        });
    }
    let mut total = 0.0;
    for (h, q) in coefficients.iter().enumerate() {
        if q.dim() != theta.nrows() {
            return Err(Error::DimensionMismatch {
                what: "theta rows",
                expected: q.dim(),
                found: theta.nrows(),
            });
        }
        let col = theta.column(h);
        total += col.dot(&(q.as_matrix() * col));
    }
    Ok(0.5 * total)
}
