//! Discrete approximations of the standard Gaussian law on R^d.
//!
//! A [`GaussRule`] is a weighted point set whose weights sum to one. Rules
//! come from tensorized Gauss-Hermite quadrature (d >= 2), a composite
//! Gauss-Legendre rule against the normal density (d = 1), or plain Monte
//! Carlo sampling.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Upper bound on the number of tensor nodes.
pub const MAX_NODES: usize = 10_000_000;

/// Truncation radius of the one-dimensional composite rule.
pub const RADIUS_1D: f64 = 40.0;

const LEGENDRE_PER_PANEL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Gauss-Hermite nodes per axis for d >= 2. `None` uses [`default_order`].
    pub order: Option<usize>,
    /// Total nodes of the one-dimensional composite rule.
    pub nodes_1d: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            order: None,
            nodes_1d: 4096,
        }
    }
}

impl QuadratureSpec {
    pub fn with_order(order: usize) -> Self {
        QuadratureSpec {
            order: Some(order),
            ..Default::default()
        }
    }

    pub fn order_for(&self, dim: usize) -> usize {
        self.order.unwrap_or_else(|| default_order(dim))
    }
}

/// Per-axis Gauss-Hermite order by dimension.
pub fn default_order(dim: usize) -> usize {
    match dim {
        0 | 1 => 64,
        2 => 40,
        3 => 24,
        _ => 16,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSpec {
    pub samples: usize,
    pub seed: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            samples: 200_000,
            seed: 0,
        }
    }
}

impl McSpec {
    pub fn new(samples: usize, seed: u64) -> Result<Self> {
        if samples < 1000 {
            return Err(Error::InvalidConfig(format!(
                "Monte Carlo backend needs at least 1000 samples, got {samples}"
            )));
        }
        Ok(McSpec { samples, seed })
    }
}

#[derive(Clone, Debug)]
pub struct GaussRule {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Natural logarithms of the weights, exact even where `weights` underflow.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    fn from_weights(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        GaussRule {
            dim,
            points,
            weights,
            log_weights,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .chunks_exact(self.dim.max(1))
            .zip(self.weights.iter().copied())
    }

    /// `sum_i w_i f(x_i)`.
    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }
}

/// Probabilists' Gauss-Hermite nodes and weights (weights sum to one), by the
/// Golub-Welsch eigenvalue method.
pub fn hermite_1d(order: usize) -> (Vec<f64>, Vec<f64>) {
    // Jacobi matrix of He_n: zero diagonal, off-diagonal sqrt(k).
    let jac = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    golub_welsch(jac)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, normalized to sum to one.
pub fn legendre_1d(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    golub_welsch(jac)
}

fn golub_welsch(jac: DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &x)| (x, eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

fn rule_cache() -> &'static Mutex<HashMap<(usize, usize), Arc<GaussRule>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<GaussRule>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Tensor Gauss-Hermite rule for N(0, I_dim), cached per `(dim, order)`.
pub fn gauss_hermite(dim: usize, order: usize) -> Result<Arc<GaussRule>> {
    if order < 2 {
        return Err(Error::InvalidConfig(format!(
            "quadrature order {order} < 2"
        )));
    }
    let total = (order as f64).powi(dim as i32);
    if total > MAX_NODES as f64 {
        return Err(Error::InvalidConfig(format!(
            "{order}^{dim} quadrature nodes exceed the budget of {MAX_NODES}"
        )));
    }
    if let Some(rule) = rule_cache().lock().unwrap().get(&(dim, order)) {
        return Ok(rule.clone());
    }
    let (x, w) = hermite_1d(order);
    let total = total as usize;
    let mut points = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut wt = 1.0;
        for &k in &idx {
            points.push(x[k]);
            wt *= w[k];
        }
        weights.push(wt);
        for slot in idx.iter_mut().rev() {
            *slot += 1;
            if *slot < order {
                break;
            }
            *slot = 0;
        }
    }
    let rule = Arc::new(GaussRule::from_weights(dim, points, weights));
    rule_cache()
        .lock()
        .unwrap()
        .insert((dim, order), rule.clone());
    Ok(rule)
}

/// Composite Gauss-Legendre rule for N(0, 1) on `[-40, 40]` with about
/// `nodes` points. Panel edges are added at each of `breaks`, so integrands
/// with kinks there are integrated piecewise smoothly.
pub fn composite_normal_1d(nodes: usize, breaks: &[f64]) -> GaussRule {
    let (gx, gw) = legendre_nodes_cached();
    let panels = (nodes / LEGENDRE_PER_PANEL).max(1);
    let mut edges: Vec<f64> = (0..=panels)
        .map(|k| -RADIUS_1D + 2.0 * RADIUS_1D * k as f64 / panels as f64)
        .collect();
    for &b in breaks {
        if b.is_finite() && b.abs() < RADIUS_1D {
            edges.push(b);
        }
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut points = Vec::with_capacity((edges.len() - 1) * LEGENDRE_PER_PANEL);
    let mut log_weights = Vec::with_capacity(points.capacity());
    for e in edges.windows(2) {
        let (a, b) = (e[0], e[1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in gx.iter().zip(gw) {
            let t = mid + half * x;
            points.push(t);
            // gw sums to one on [-1, 1], so the panel length is 2 * half.
            log_weights.push((2.0 * half * w).ln() + log_norm - 0.5 * t * t);
        }
    }
    GaussRule {
        dim: 1,
        points,
        weights: log_weights.iter().map(|l| l.exp()).collect(),
        log_weights,
    }
}

fn legendre_nodes_cached() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| legendre_1d(LEGENDRE_PER_PANEL))
}

/// Equal-weight Monte Carlo rule from counter-based normal draws.
pub fn monte_carlo(dim: usize, spec: McSpec, domain: u64) -> GaussRule {
    let blocks = crate::parallel::map_blocks(spec.samples, rng::BLOCK, |b, r| {
        let mut g = rng::stream(spec.seed, domain, b as u64);
        let mut buf = vec![0.0; r.len() * dim];
        rng::fill_normal(&mut g, &mut buf);
        buf
    });
    let points: Vec<f64> = blocks.concat();
    GaussRule::from_weights(dim, points, vec![1.0 / spec.samples as f64; spec.samples])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial(k: u32) -> f64 {
        (1..=k)
            .rev()
            .step_by(2)
            .map(f64::from)
            .product::<f64>()
            .max(1.0)
    }

    #[test]
    fn hermite_moments_exact() {
        let (x, w) = hermite_1d(20);
        for k in 0..=38u32 {
            let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
            let exact = if k % 2 == 1 {
                0.0
            } else {
                double_factorial(k.saturating_sub(1))
            };
            assert!(
                (m - exact).abs() <= 1e-9 * (1.0 + double_factorial(k)),
                "moment {k}: {m} vs {exact}"
            );
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = legendre_1d(8);
        for k in 0..16 {
            let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 {
                0.0
            } else {
                1.0 / (k as f64 + 1.0)
            };
            assert!((m - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn tensor_rule_covariance() {
        let rule = gauss_hermite(3, 6).unwrap();
        assert_eq!(rule.len(), 216);
        assert!((rule.weights().iter().sum::<f64>() - 1.0).abs() < 1e-13);
        let e01 = rule.expect(|x| x[0] * x[1]);
        let e22 = rule.expect(|x| x[2] * x[2]);
        assert!(e01.abs() < 1e-14);
        assert!((e22 - 1.0).abs() < 1e-13);
        assert!(gauss_hermite(8, 16).is_err());
    }

    #[test]
    fn composite_rule_handles_kinks_and_sharp_gaussians() {
        let rule = composite_normal_1d(4096, &[0.0]);
        let half = rule.expect(|x| if x[0] > 0.0 { x[0] * x[0] } else { 0.0 });
        assert!((half - 0.5).abs() < 1e-13);
        // E[exp(-c N^2)] = (1 + 2c)^(-1/2).
        for c in [0.3, 9.6, 100.0] {
            let v = rule.expect(|x| (-c * x[0] * x[0]).exp());
            let exact = (1.0 + 2.0 * c).powf(-0.5);
            assert!((v - exact).abs() < 1e-12, "c={c}: {v} vs {exact}");
        }
        // E[exp(a N^2)] with a close to 1/2: (1 - 2a)^(-1/2).
        let a = 0.45;
        let v: f64 = (0..rule.len())
            .map(|i| (rule.log_weights()[i] + a * rule.point(i)[0].powi(2)).exp())
            .sum();
        assert!((v - (1.0 - 2.0 * a).powf(-0.5)).abs() < 1e-10, "{v}");
    }

    #[test]
    fn monte_carlo_rule_is_reproducible() {
        let spec = McSpec::new(5000, 3).unwrap();
        let a = monte_carlo(2, spec, 1);
        let b = monte_carlo(2, spec, 1);
        assert_eq!(a.points, b.points);
        assert!(McSpec::new(10, 0).is_err());
        let var = a.expect(|x| x[1] * x[1]);
        assert!((var - 1.0).abs() < 0.1);
    }
}
