//! Nested infima over covariance chains: the rate of the last hidden
//! covariance `I_G` and the large-deviation output rate `I_Z`.
//!
//! Each free intermediate covariance is written `C_b 1 + C_W m^T m` with `m`
//! an unconstrained square matrix, so every iterate stays in the family
//! `S_{d, C_b}`. Layers with an infinite width ratio are not free: their rate
//! is degenerate, so the covariance is pinned to `C_b 1 + C_W y(previous)`.

use std::cell::Cell;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::gauss_expect::ExpectSpec;
use crate::model::{InputSet, NetworkConfig};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::parallel;
use crate::psd::{min_norm_preimage, sqrt_psd, CovMatrix, SymMatrix};
use crate::rates::ConditionalRate;
use crate::recursion::{initial_cov, limit_cov_chain};
use crate::rng::{self, domain};
use crate::value::RateValue;

/// Largest depth and input-set size accepted by the chain searches.
pub const MAX_DEPTH: usize = 3;
pub const MAX_INPUTS: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct ChainOptions {
    /// Number of local searches: the limit chain, the constant `g^(0)`
    /// chain, then randomized perturbations of the limit chain.
    pub starts: usize,
    pub seed: u64,
    pub nm: NelderMeadOptions,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            starts: 8,
            seed: 0,
            nm: NelderMeadOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainResult {
    pub value: RateValue,
    /// Minimizing `g^(1), ..., g^(L)`.
    pub chain: Vec<SymMatrix>,
    pub start_values: Vec<RateValue>,
    pub best_start: usize,
    pub converged_starts: usize,
    pub evaluations: usize,
    /// Objective evaluations where an inner transform failed to converge;
    /// they were scored `+inf`.
    pub failed_evaluations: usize,
}

enum Terminal {
    Fixed(SymMatrix),
    Output(DMatrix<f64>),
}

struct Problem<'a> {
    model: &'a NetworkConfig,
    spec: &'a ExpectSpec,
    d: usize,
    g0: CovMatrix,
    ghat: Vec<CovMatrix>,
    /// Layers (1-based) whose covariance is a search variable.
    free: Vec<usize>,
    terminal: Terminal,
    /// Half-width of the box on `(g - C_b 1)/C_W` for bounded activations.
    bounded_sup: Option<f64>,
    /// Upper bound on `g - C_b` for scalar ReLU.
    relu_upper: Option<f64>,
}

impl<'a> Problem<'a> {
    fn new(
        model: &'a NetworkConfig,
        inputs: &InputSet,
        spec: &'a ExpectSpec,
        terminal: Terminal,
    ) -> Result<Self> {
        model.validate()?;
        let d = inputs.len();
        if model.depth > MAX_DEPTH || d > MAX_INPUTS {
            return Err(Error::NotSupported(format!(
                "chain rates are limited to depth <= {MAX_DEPTH} and at most {MAX_INPUTS} inputs"
            )));
        }
        let act = model.activation;
        let scalar_relu = d == 1 && act == Activation::Relu;
        if !act.is_bounded() && !scalar_relu && model.depth > 1 {
            return Err(Error::NotSupported(format!(
                "deep chain rates need a bounded activation or a single ReLU input, got {act} with {d} inputs"
            )));
        }
        let g0 = initial_cov(model, inputs)?;
        let ghat = limit_cov_chain(model, inputs, spec)?;
        let last_free = match terminal {
            Terminal::Fixed(ref g) => {
                if g.dim() != d {
                    return Err(Error::DimensionMismatch {
                        what: "terminal covariance",
                        expected: d,
                        found: g.dim(),
                    });
                }
                model.depth - 1
            }
            Terminal::Output(ref z) => {
                if z.nrows() != d {
                    return Err(Error::DimensionMismatch {
                        what: "rows of z",
                        expected: d,
                        found: z.nrows(),
                    });
                }
                model.depth
            }
        };
        let free = (1..=last_free)
            .filter(|&l| model.ratios.gammas[l - 1].is_finite())
            .collect();
        let relu_upper = scalar_relu.then(|| {
            let g_last = match &terminal {
                Terminal::Fixed(g) => g.get(0, 0).abs(),
                Terminal::Output(z) => ghat[model.depth - 1].get(0, 0) + z.norm(),
            };
            10.0 * (g_last + g0.get(0, 0) + 1.0)
        });
        Ok(Problem {
            model,
            spec,
            d,
            g0,
            ghat,
            free,
            terminal,
            bounded_sup: act.sup_norm().map(|s| s * s),
            relu_upper,
        })
    }

    fn block(&self) -> usize {
        self.d * self.d
    }

    fn cov_from_params(&self, m: &[f64]) -> SymMatrix {
        let m = DMatrix::from_column_slice(self.d, self.d, m);
        let g = (m.transpose() * m) * self.model.cw;
        SymMatrix::from_matrix(g.map(|v| v + self.model.cb)).expect("finite parameters")
    }

    fn params_from_cov(&self, g: &SymMatrix) -> Vec<f64> {
        let y = g.affine(-self.model.cb / self.model.cw, 1.0 / self.model.cw);
        let y = SymMatrix::from_matrix(y.as_matrix().clone()).expect("finite");
        // Clip tiny negative eigenvalues from round-off before the root.
        let root = sqrt_psd(&y).unwrap_or_else(|_| SymMatrix::zeros(self.d));
        root.as_matrix().as_slice().to_vec()
    }

    fn in_box(&self, g: &SymMatrix) -> bool {
        let cb = self.model.cb;
        let cw = self.model.cw;
        if let Some(s) = self.bounded_sup {
            let tol = 1e-12 * (1.0 + s);
            for a in 0..self.d {
                for b in 0..self.d {
                    let y = (g.get(a, b) - cb) / cw;
                    let ok = if a == b {
                        y >= -tol && y <= s + tol
                    } else {
                        y.abs() <= s + tol
                    };
                    if !ok {
                        return false;
                    }
                }
            }
        }
        if let Some(u) = self.relu_upper {
            let v = g.get(0, 0) - cb;
            if !(0.0..=u).contains(&v) {
                return false;
            }
        }
        true
    }

    /// Objective and the chain it visits. `failed` counts inner failures.
    fn evaluate(
        &self,
        x: &[f64],
        first: &mut ConditionalRate,
        failed: &Cell<usize>,
    ) -> (f64, Vec<SymMatrix>) {
        let depth = self.model.depth;
        let mut chain = Vec::with_capacity(depth);
        let mut total = 0.0;
        let mut owned: Option<ConditionalRate> = None;
        for l in 1..=depth {
            let gamma = self.model.ratios.gammas[l - 1];
            let rate = match owned.as_mut() {
                Some(r) => r,
                None => &mut *first,
            };
            let slot = self.free.iter().position(|&f| f == l);
            let g = match (slot, &self.terminal) {
                (Some(k), _) => {
                    let g = self.cov_from_params(&x[k * self.block()..(k + 1) * self.block()]);
                    if !self.in_box(&g) {
                        return (f64::INFINITY, chain);
                    }
                    g
                }
                (None, Terminal::Fixed(g)) if l == depth => g.clone(),
                (None, _) => rate.center(),
            };
            let j = if slot.is_none()
                && gamma.is_infinite()
                && !(l == depth && matches!(self.terminal, Terminal::Fixed(_)))
            {
                0.0
            } else {
                match rate.eval(&g, gamma) {
                    Ok(v) => v.value(),
                    Err(_) => {
                        failed.set(failed.get() + 1);
                        f64::INFINITY
                    }
                }
            };
            if j.is_infinite() {
                return (f64::INFINITY, chain);
            }
            total += j;
            chain.push(g.clone());
            if l < depth {
                let prev = match CovMatrix::new(g, self.model.cb) {
                    Ok(c) => c,
                    Err(_) => return (f64::INFINITY, chain),
                };
                owned = match ConditionalRate::new(&prev, self.model, self.spec) {
                    Ok(r) => Some(r),
                    Err(_) => {
                        failed.set(failed.get() + 1);
                        return (f64::INFINITY, chain);
                    }
                };
            }
        }
        if let Terminal::Output(z) = &self.terminal {
            let last = chain.last().expect("depth >= 1").clone();
            let cost =
                match CovMatrix::new(last, self.model.cb).and_then(|g| min_norm_preimage(&g, z)) {
                    Ok((v, _)) => v.value(),
                    Err(_) => f64::INFINITY,
                };
            total += cost;
        }
        (total, chain)
    }

    fn starts(&self, opts: &ChainOptions) -> Vec<Vec<f64>> {
        let from_chain = |covs: &[SymMatrix]| -> Vec<f64> {
            self.free
                .iter()
                .flat_map(|&l| self.params_from_cov(&covs[l - 1]))
                .collect()
        };
        let ghat: Vec<SymMatrix> = self.ghat.iter().map(|g| g.base().clone()).collect();
        let flat = vec![self.g0.base().clone(); self.model.depth];
        let base = from_chain(&ghat);
        let mut starts = vec![base.clone(), from_chain(&flat)];
        for k in 2..opts.starts.max(2) {
            let mut g = rng::stream(opts.seed, domain::OPTIM_STARTS, k as u64);
            starts.push(
                base.iter()
                    .map(|v| v + 0.3 * (1.0 + v.abs()) * rng::normal(&mut g))
                    .collect(),
            );
        }
        starts.truncate(opts.starts.max(1));
        starts
    }

    fn solve(&self, opts: &ChainOptions) -> Result<ChainResult> {
        let starts = self.starts(opts);
        let runs = parallel::map_indexed(starts.len(), |k| -> Result<_> {
            let mut first = ConditionalRate::new(&self.g0, self.model, self.spec)?;
            let failed = Cell::new(0usize);
            let m = nelder_mead(
                |x| self.evaluate(x, &mut first, &failed).0,
                &starts[k],
                &opts.nm,
            );
            let (value, chain) = self.evaluate(&m.x, &mut first, &failed);
            Ok((value, chain, m.converged, m.evals, failed.get()))
        });
        let mut best: Option<(usize, f64, Vec<SymMatrix>)> = None;
        let mut start_values = Vec::new();
        let mut converged_starts = 0;
        let mut evaluations = 0;
        let mut failed_evaluations = 0;
        for (k, run) in runs.into_iter().enumerate() {
            let (value, chain, converged, evals, failed) = run?;
            start_values.push(RateValue::new(value.max(0.0)));
            converged_starts += usize::from(converged);
            evaluations += evals;
            failed_evaluations += failed;
            if best.as_ref().is_none_or(|b| value < b.1) {
                best = Some((k, value, chain));
            }
        }
        if converged_starts == 0 {
            return Err(Error::NonConvergence {
                what: "chain rate search",
                iterations: evaluations,
                grad_norm: f64::NAN,
            });
        }
        let (best_start, value, chain) = best.expect("at least one start");
        Ok(ChainResult {
            value: RateValue::new(value.max(0.0)),
            chain,
            start_values,
            best_start,
            converged_starts,
            evaluations,
            failed_evaluations,
        })
    }
}

/// `I_G(g_L) = inf sum_l J(g^(l) | g^(l-1))` over intermediate covariances.
pub fn chain_rate_ig(
    g_l: &CovMatrix,
    model: &NetworkConfig,
    inputs: &InputSet,
    spec: &ExpectSpec,
) -> Result<ChainResult> {
    chain_rate_ig_with(g_l, model, inputs, spec, &ChainOptions::default())
}

pub fn chain_rate_ig_with(
    g_l: &CovMatrix,
    model: &NetworkConfig,
    inputs: &InputSet,
    spec: &ExpectSpec,
    opts: &ChainOptions,
) -> Result<ChainResult> {
    if !crate::psd::in_family(g_l.base(), model.cb) {
        return Err(Error::NotInFamily {
            floor: model.cb,
            min_eigenvalue: g_l.base().affine(-model.cb, 1.0).min_eigenvalue(),
        });
    }
    Problem::new(model, inputs, spec, Terminal::Fixed(g_l.base().clone()))?.solve(opts)
}

/// `I_Z(z) = inf { I_G(g) + |r|^2/2 : g^# r = z }`.
pub fn output_rate_iz(
    z: &DMatrix<f64>,
    model: &NetworkConfig,
    inputs: &InputSet,
    spec: &ExpectSpec,
) -> Result<ChainResult> {
    output_rate_iz_with(z, model, inputs, spec, &ChainOptions::default())
}

pub fn output_rate_iz_with(
    z: &DMatrix<f64>,
    model: &NetworkConfig,
    inputs: &InputSet,
    spec: &ExpectSpec,
    opts: &ChainOptions,
) -> Result<ChainResult> {
    if z.ncols() != model.n_out {
        return Err(Error::DimensionMismatch {
            what: "columns of z",
            expected: model.n_out,
            found: z.ncols(),
        });
    }
    Problem::new(model, inputs, spec, Terminal::Output(z.clone()))?.solve(opts)
}

/// Half-space rate `t^2 / (2 ghat_{aa})` for the event `{Z_a >= t}` under the
/// Gaussian moderate-deviation rate.
pub fn half_space_md_rate(t: f64, ghat_l: &CovMatrix, alpha: usize) -> RateValue {
    let g = ghat_l.get(alpha, alpha);
    if t <= 0.0 {
        return RateValue::ZERO;
    }
    if g <= 0.0 {
        return RateValue::INFINITY;
    }
    RateValue::new(t * t / (2.0 * g))
}
