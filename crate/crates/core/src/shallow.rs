//! Sensitivities of one-hidden-layer networks.
//!
//! With `n` hidden units, `d^(s_h) Z_h(x_alpha) / sqrt(n)` equals
//! `b_h / sqrt(n) [s_h = 0] + (1/n) sum_j F_hj(x_alpha)`, where
//! `F_hj(x) = sqrt(C_W) What_hj sigma^(s_h)(b_j + <W_j, x>) W_j1^(s_h)` are
//! i.i.d. in `j`. The large-deviation rate combines the output-bias rate with
//! the conjugate of `Upsilon`, the log-MGF of one summand; the moderate rate
//! uses the quadratic part of `Upsilon` instead.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::activation::{check_growth_star, Activation};
use crate::conjugate::{self, AscentOptions, LogMgf, Moments};
use crate::error::{Error, Result};
use crate::gauss_expect::{ExpectSpec, UpsilonModel};
use crate::model::{InputSet, NetworkConfig};
use crate::parallel;
use crate::psd::{min_norm_preimage, CovMatrix, SymMatrix};
use crate::rng::{self, domain, BLOCK};
use crate::simulator::{
    fit_slope, HalfSpace, SampleBatch, Scaling, TailEstimate, TailStudy, WidthSchedule,
};
use crate::value::RateValue;

/// Derivative orders `s_h in {0, 1}`, one per output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DerivativePattern(pub Vec<u8>);

impl DerivativePattern {
    pub fn zeros(n2: usize) -> Self {
        DerivativePattern(vec![0; n2])
    }

    pub fn validate(&self, model: &NetworkConfig) -> Result<()> {
        if self.0.len() != model.n_out {
            return Err(Error::DimensionMismatch {
                what: "derivative pattern",
                expected: model.n_out,
                found: self.0.len(),
            });
        }
        if self.0.iter().any(|&s| s > 1) {
            return Err(Error::InvalidConfig(
                "derivative pattern entries must be 0 or 1".into(),
            ));
        }
        Ok(())
    }

    /// Outputs that keep their bias: `C_b > 0` and `s_h = 0`.
    fn free(&self, cb: f64) -> Vec<bool> {
        self.0.iter().map(|&s| s == 0 && cb > 0.0).collect()
    }
}

impl std::str::FromStr for DerivativePattern {
    type Err = Error;

    /// Comma-separated digits, e.g. `0,1,1`.
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|t| match t.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::InvalidConfig(format!(
                    "pattern entry `{other}` is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(DerivativePattern)
    }
}

fn check_shallow(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
) -> Result<()> {
    model.validate()?;
    inputs.validate(model.n0)?;
    pattern.validate(model)?;
    if model.depth != 1 {
        return Err(Error::InvalidConfig(format!(
            "sensitivities need one hidden layer, got depth {}",
            model.depth
        )));
    }
    Ok(())
}

fn write_f(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &[u8],
    g: &mut rng::Stream,
    w: &mut [f64],
    out: &mut [f64],
    accumulate: bool,
) {
    let na = inputs.len();
    let b = if model.cb > 0.0 {
        model.cb.sqrt() * rng::normal(g)
    } else {
        0.0
    };
    let sw = (model.cw / model.n0 as f64).sqrt();
    for v in w.iter_mut() {
        *v = sw * rng::normal(g);
    }
    let scale = model.cw.sqrt();
    for (h, &s) in pattern.iter().enumerate() {
        let what = scale * rng::normal(g);
        for (a, x) in inputs.points.iter().enumerate() {
            let arg = b + w.iter().zip(x).map(|(wr, xr)| wr * xr).sum::<f64>();
            let mut v = model.activation.eval_order(s, arg);
            if s == 1 {
                v *= w[0];
            }
            let f = what * v;
            if accumulate {
                out[h * na + a] += f;
            } else {
                out[h * na + a] = f;
            }
        }
    }
}

/// `count` i.i.d. draws of the `|A| x n2` matrix `(F_h1(x_alpha))`.
pub fn sample_f(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
    count: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_shallow(model, inputs, pattern)?;
    let stride = inputs.len() * model.n_out;
    let blocks = parallel::map_blocks(count, BLOCK, |b, range| {
        let mut g = rng::stream(seed, domain::SHALLOW, b as u64);
        let mut w = vec![0.0; model.n0];
        let mut out = vec![0.0; range.len() * stride];
        for chunk in out.chunks_exact_mut(stride) {
            write_f(model, inputs, &pattern.0, &mut g, &mut w, chunk, false);
        }
        out
    });
    Ok(SampleBatch {
        points: inputs.len(),
        outputs: model.n_out,
        data: blocks.concat(),
    })
}

fn sensitivity_into(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &[u8],
    n: usize,
    g: &mut rng::Stream,
    w: &mut [f64],
    out: &mut [f64],
) {
    let na = inputs.len();
    out.fill(0.0);
    for _ in 0..n {
        write_f(model, inputs, pattern, g, w, out, true);
    }
    let inv = 1.0 / n as f64;
    for v in out.iter_mut() {
        *v *= inv;
    }
    if model.cb > 0.0 {
        let sb = model.cb.sqrt() / (n as f64).sqrt();
        for (h, &s) in pattern.iter().enumerate() {
            let bias = sb * rng::normal(g);
            if s == 0 {
                for a in 0..na {
                    out[h * na + a] += bias;
                }
            }
        }
    }
}

/// Draws of `b_h / sqrt(n) [s_h = 0] + (1/n) sum_j F_hj(x_alpha)`, the scaled
/// sensitivities of a width-`n` network.
pub fn sample_sensitivity(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_shallow(model, inputs, pattern)?;
    if n == 0 || count == 0 {
        return Err(Error::InvalidConfig(
            "width and sample count must be positive".into(),
        ));
    }
    let stride = inputs.len() * model.n_out;
    let blocks = parallel::map_blocks(count, BLOCK, |b, range| {
        let mut g = rng::stream(rng::child_seed(seed, n as u64), domain::SHALLOW, b as u64);
        let mut w = vec![0.0; model.n0];
        let mut out = vec![0.0; range.len() * stride];
        for chunk in out.chunks_exact_mut(stride) {
            sensitivity_into(model, inputs, &pattern.0, n, &mut g, &mut w, chunk);
        }
        out
    });
    Ok(SampleBatch {
        points: inputs.len(),
        outputs: model.n_out,
        data: blocks.concat(),
    })
}

/// `sum_h I_h(y_h)`: `y_h^2 / (2 C_b)` for outputs with a bias, `Delta(y_h; 0)`
/// otherwise.
pub fn bias_rate(
    y: &[f64],
    model: &NetworkConfig,
    pattern: &DerivativePattern,
) -> Result<RateValue> {
    pattern.validate(model)?;
    if y.len() != model.n_out {
        return Err(Error::DimensionMismatch {
            what: "bias shifts",
            expected: model.n_out,
            found: y.len(),
        });
    }
    let mut total = RateValue::ZERO;
    for (&v, free) in y.iter().zip(pattern.free(model.cb)) {
        total = total
            + if free {
                RateValue::new(v * v / (2.0 * model.cb))
            } else if v == 0.0 {
                RateValue::ZERO
            } else {
                RateValue::INFINITY
            };
    }
    Ok(total)
}

/// Growth constant used when checking condition (*) for a rate request.
pub fn default_growth_constant(act: &Activation) -> f64 {
    let m = act
        .linear_growth_constant()
        .max(act.deriv_sup_norm().unwrap_or(0.0));
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ShallowRate {
    pub value: RateValue,
    /// `false` when the growth scan found a violation, so `Upsilon` may be
    /// infinite near 0 and the value is only formal.
    pub growth_ok: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub diverged: bool,
}

/// Log-MGF of the scaled sensitivity at speed `n`:
/// `Upsilon(theta) + sum_{h free} (C_b/2) (sum_a theta_ah)^2`.
struct SensitivityMgf {
    upsilon: UpsilonModel,
    na: usize,
    cb: f64,
    free: Vec<bool>,
}

impl SensitivityMgf {
    fn bias_part(&self, t: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = t.len();
        let mut value = 0.0;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for (h, &free) in self.free.iter().enumerate() {
            if !free {
                continue;
            }
            let r = h * self.na..(h + 1) * self.na;
            let s: f64 = t.rows(r.start, self.na).sum();
            value += 0.5 * self.cb * s * s;
            for i in r.clone() {
                grad[i] = self.cb * s;
                for j in r.clone() {
                    hess[(i, j)] = self.cb;
                }
            }
        }
        (value, grad, hess)
    }
}

impl LogMgf for SensitivityMgf {
    fn dim(&self) -> usize {
        self.upsilon.dim()
    }

    fn moments(&self, t: &DVector<f64>) -> Option<Moments> {
        let m = self.upsilon.moments(t)?;
        let (v, g, h) = self.bias_part(t);
        Some(Moments {
            value: m.value + v,
            grad: m.grad + g,
            hess: m.hess + h,
        })
    }

    fn value(&self, t: &DVector<f64>) -> Option<f64> {
        Some(self.upsilon.value(t)? + self.bias_part(t).0)
    }
}

fn check_z(z: &DMatrix<f64>, inputs: &InputSet, model: &NetworkConfig) -> Result<()> {
    if z.nrows() != inputs.len() || z.ncols() != model.n_out {
        return Err(Error::DimensionMismatch {
            what: "z entries",
            expected: inputs.len() * model.n_out,
            found: z.len(),
        });
    }
    Ok(())
}

/// `inf { sum_h I_h(y_h) + Upsilon*(f) : y_h + f_ah = z_ah }`.
///
/// Computed as the conjugate of the summed log-MGF: the infimal convolution
/// of the bias rate and `Upsilon*` is the conjugate of the sum of their
/// conjugates, which is smooth in `theta`.
pub fn shallow_ld_rate(
    z: &DMatrix<f64>,
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
    spec: &ExpectSpec,
) -> Result<ShallowRate> {
    check_shallow(model, inputs, pattern)?;
    check_z(z, inputs, model)?;
    let growth_ok = check_growth_star(
        &model.activation,
        &pattern.0,
        &inputs.points,
        default_growth_constant(&model.activation),
    );
    let mgf = SensitivityMgf {
        upsilon: UpsilonModel::new(model, inputs, &pattern.0, spec, true)?,
        na: inputs.len(),
        cb: model.cb,
        free: pattern.free(model.cb),
    };
    let b = DVector::from_column_slice(z.as_slice());
    let c = conjugate::legendre(&mgf, &b, &AscentOptions::default())?;
    Ok(ShallowRate {
        value: c.value,
        growth_ok,
        iterations: c.iterations,
        grad_norm: c.grad_norm,
        diverged: c.diverged,
    })
}

/// Per-output covariance of the scaled sensitivity: `Q_h + C_b 1 1^T` for
/// outputs with a bias, `Q_h` otherwise, where `Q_h` is the Hessian block of
/// `Upsilon` at 0.
pub fn sensitivity_covariances(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
    spec: &ExpectSpec,
) -> Result<Vec<SymMatrix>> {
    check_shallow(model, inputs, pattern)?;
    let q = UpsilonModel::new(model, inputs, &pattern.0, spec, true)?.coefficients();
    Ok(q.into_iter()
        .zip(pattern.free(model.cb))
        .map(|(q, free)| if free { q.affine(model.cb, 1.0) } else { q })
        .collect())
}

/// `inf { sum_h I_h(y_h) + Upsilon~*(f) : y_h + f_ah = z_ah }`, in closed form
/// `sum_h 1/2 z_h^T M_h^+ z_h` with `M_h` from [`sensitivity_covariances`];
/// `+inf` when some `z_h` leaves the range of `M_h`.
pub fn shallow_md_rate(
    z: &DMatrix<f64>,
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
    spec: &ExpectSpec,
) -> Result<ShallowRate> {
    check_shallow(model, inputs, pattern)?;
    check_z(z, inputs, model)?;
    let growth_ok = check_growth_star(
        &model.activation,
        &pattern.0,
        &inputs.points,
        default_growth_constant(&model.activation),
    );
    let mut total = RateValue::ZERO;
    for (h, m) in sensitivity_covariances(model, inputs, pattern, spec)?
        .into_iter()
        .enumerate()
    {
        let cov = CovMatrix::psd(m)?;
        let col = DMatrix::from_column_slice(inputs.len(), 1, z.column(h).as_slice());
        total = total + min_norm_preimage(&cov, &col)?.0;
    }
    Ok(ShallowRate {
        value: total,
        growth_ok,
        iterations: 0,
        grad_norm: 0.0,
        diverged: false,
    })
}

/// Empirical tails of `scale_n d^(s)Z(x_alpha)_h` across widths, where
/// `d^(s)Z = sqrt(n)` times the scaled sensitivity.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sensitivity_tail(
    model: &NetworkConfig,
    inputs: &InputSet,
    pattern: &DerivativePattern,
    schedule: &WidthSchedule,
    event: &HalfSpace,
    scaling: Scaling,
    samples: usize,
    seed: u64,
) -> Result<TailStudy> {
    check_shallow(model, inputs, pattern)?;
    schedule.validate()?;
    scaling.validate()?;
    if event.alpha >= inputs.len() || event.output >= model.n_out || event.thresholds.is_empty() {
        return Err(Error::InvalidConfig(
            "event coordinate out of range or no thresholds".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    let na = inputs.len();
    let stride = na * model.n_out;
    let coord = event.output * na + event.alpha;
    let nt = event.thresholds.len();
    let mut estimates = Vec::new();
    for &n in &schedule.pivots {
        let scale = scaling.output_scale(n) * (n as f64).sqrt();
        let width_seed = rng::child_seed(seed, n as u64);
        let counts = parallel::map_blocks(samples, BLOCK, |b, range| {
            let mut g = rng::stream(width_seed, domain::SHALLOW, b as u64);
            let mut w = vec![0.0; model.n0];
            let mut out = vec![0.0; stride];
            let mut hits = vec![0u64; nt];
            for _ in range {
                sensitivity_into(model, inputs, &pattern.0, n, &mut g, &mut w, &mut out);
                let v = scale * out[coord];
                for (k, &t) in event.thresholds.iter().enumerate() {
                    hits[k] += u64::from(v >= t);
                }
            }
            hits
        });
        for (k, &t) in event.thresholds.iter().enumerate() {
            let hits = counts.iter().map(|c| c[k]).sum();
            estimates.push(TailEstimate::from_counts(n, t, hits, samples as u64));
        }
    }
    let fits = (0..nt)
        .map(|k| {
            let per: Vec<TailEstimate> = estimates.iter().skip(k).step_by(nt).cloned().collect();
            fit_slope(&per, scaling)
        })
        .collect();
    Ok(TailStudy {
        depth: 1,
        scaling,
        estimates,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(act: Activation, cb: f64, cw: f64) -> NetworkConfig {
        NetworkConfig::new(1, 1, 1, cb, cw, act)
    }

    #[test]
    fn bias_rate_examples() {
        let model = NetworkConfig::new(1, 1, 2, 2.0, 1.0, Activation::Tanh);
        let p = DerivativePattern::zeros(2);
        assert_eq!(bias_rate(&[0.0, 0.0], &model, &p).unwrap(), RateValue::ZERO);
        assert_eq!(bias_rate(&[2.0, 0.0], &model, &p).unwrap().value(), 1.0);
        let p = DerivativePattern(vec![1, 0]);
        assert!(bias_rate(&[0.5, 0.0], &model, &p).unwrap().is_infinite());
        let no_bias = NetworkConfig::new(1, 1, 2, 0.0, 1.0, Activation::Tanh);
        assert!(
            bias_rate(&[0.0, 0.1], &no_bias, &DerivativePattern::zeros(2))
                .unwrap()
                .is_infinite()
        );
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!(
            "0,1, 1".parse::<DerivativePattern>().unwrap().0,
            vec![0, 1, 1]
        );
        assert!("0,2".parse::<DerivativePattern>().is_err());
    }

    #[test]
    fn gaussian_conjugate_case() {
        let model = one(Activation::Constant(1.0), 0.0, 1.7);
        let inputs = InputSet::new(vec![vec![0.4]]);
        let p = DerivativePattern::zeros(1);
        let spec = ExpectSpec::default();
        for z in [0.0, 0.3, -1.2, 2.5] {
            let zm = DMatrix::from_element(1, 1, z);
            let expect = z * z / (2.0 * 1.7);
            let ld = shallow_ld_rate(&zm, &model, &inputs, &p, &spec).unwrap();
            assert!(
                (ld.value.value() - expect).abs() < 1e-8,
                "{z}: {:?}",
                ld.value
            );
            let md = shallow_md_rate(&zm, &model, &inputs, &p, &spec).unwrap();
            assert!((md.value.value() - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn bias_enters_as_gaussian_convolution() {
        // sigma = 1 and a bias: Z/sqrt(n) = b/sqrt(n) + mean of N(0, C_W), so
        // the rate is z^2 / (2 (C_b + C_W)).
        let model = one(Activation::Constant(1.0), 0.6, 1.1);
        let inputs = InputSet::new(vec![vec![1.0]]);
        let p = DerivativePattern::zeros(1);
        let z = DMatrix::from_element(1, 1, 0.9);
        let ld = shallow_ld_rate(&z, &model, &inputs, &p, &Default::default()).unwrap();
        assert!((ld.value.value() - 0.81 / (2.0 * 1.7)).abs() < 1e-8);
        let md = shallow_md_rate(&z, &model, &inputs, &p, &Default::default()).unwrap();
        assert!((md.value.value() - 0.81 / (2.0 * 1.7)).abs() < 1e-8);
    }

    #[test]
    fn ld_rate_zero_at_origin_and_positive_elsewhere() {
        let model = NetworkConfig::new(1, 2, 2, 0.3, 1.2, Activation::Tanh);
        let inputs = InputSet::new(vec![vec![1.0, 0.5], vec![-0.5, 0.8]]);
        let p = DerivativePattern(vec![0, 1]);
        let spec = ExpectSpec::default();
        let r = shallow_ld_rate(&DMatrix::zeros(2, 2), &model, &inputs, &p, &spec).unwrap();
        assert!(r.value.value() <= 1e-12 && r.growth_ok);
        let z = DMatrix::from_row_slice(2, 2, &[0.2, -0.1, 0.05, 0.1]);
        assert!(
            shallow_ld_rate(&z, &model, &inputs, &p, &spec)
                .unwrap()
                .value
                .value()
                > 0.0
        );
    }

    #[test]
    fn duplicate_inputs_make_off_range_infinite() {
        let model = one(Activation::Tanh, 0.0, 1.0);
        let inputs = InputSet::new(vec![vec![0.7], vec![0.7]]);
        let p = DerivativePattern::zeros(1);
        let spec = ExpectSpec::default();
        let z = DMatrix::from_column_slice(2, 1, &[0.3, -0.3]);
        assert!(shallow_md_rate(&z, &model, &inputs, &p, &spec)
            .unwrap()
            .value
            .is_infinite());
        let z = DMatrix::from_column_slice(2, 1, &[0.3, 0.3]);
        assert!(shallow_md_rate(&z, &model, &inputs, &p, &spec)
            .unwrap()
            .value
            .is_finite());
    }

    #[test]
    fn sampler_moments() {
        let model = one(Activation::Constant(1.0), 0.0, 2.0);
        let inputs = InputSet::new(vec![vec![1.0]]);
        let b = sample_f(&model, &inputs, &DerivativePattern::zeros(1), 50_000, 4).unwrap();
        let m = b.moments();
        assert!(m.mean[0].abs() < 4.0 * m.mean_se[0]);
        assert!((m.second[0] - 2.0).abs() < 4.0 * m.second_se[0]);
        let zero = one(Activation::Constant(0.0), 0.0, 2.0);
        let b = sample_f(&zero, &inputs, &DerivativePattern::zeros(1), 100, 4).unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sensitivity_variance_matches_covariance() {
        let model = one(Activation::Relu, 0.4, 1.0);
        let inputs = InputSet::new(vec![vec![1.0]]);
        let p = DerivativePattern(vec![1]);
        let cov = sensitivity_covariances(&model, &inputs, &p, &Default::default()).unwrap();
        // s = 1 drops the output bias: E[W^2 1{b + W > 0}] with W ~ N(0, 1).
        let n = 8;
        let b = sample_sensitivity(&model, &inputs, &p, n, 40_000, 9).unwrap();
        let m = b.moments();
        let target = cov[0].get(0, 0) / n as f64;
        assert!(
            (m.second[0] - target).abs() < 4.0 * m.second_se[0],
            "{} vs {target}",
            m.second[0]
        );
    }
}
