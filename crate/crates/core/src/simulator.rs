//! Monte Carlo sampling of finite-width networks and empirical tail slopes.
//!
//! Two samplers draw the outputs `Z^(L+1)(x_alpha)_h`: the forward pass with
//! fresh Gaussian parameters, and the random covariance chain
//! `G^(l) = C_b + (C_W/n_l) sum_j sigma(G^(l-1)# N_j) sigma(G^(l-1)# N_j)^T`
//! followed by `Z_h = G^(L)# N_h`. Both have the same law; the second costs
//! `O(n |A|^2)` per layer instead of `O(n^2)`.
//!
//! Samples are grouped in blocks of [`rng::BLOCK`]; block `b` draws from the
//! stream `(seed, domain, b)`, so results never depend on the thread count.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::gauss_expect::ExpectSpec;
use crate::model::{InputSet, NetworkConfig};
use crate::parallel;
use crate::psd::{sqrt_psd, CovMatrix, SymMatrix};
use crate::rates::chain::{half_space_md_rate, output_rate_iz};
use crate::recursion::{initial_cov, limit_cov_chain};
use crate::rng::{self, domain, BLOCK};
use crate::value::RateValue;

/// Fewer hits than this flag a tail estimate and drop it from the fit.
pub const MIN_HITS: u64 = 10;

/// Two-sided normal quantile for the slope confidence band.
const Z_95: f64 = 1.96;

/// Pivot widths `n`; every hidden width follows from the model's ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSchedule {
    pub pivots: Vec<usize>,
}

impl WidthSchedule {
    /// `2^lo, 2^(lo+1), ..., 2^hi`.
    pub fn powers_of_two(lo: u32, hi: u32) -> Self {
        WidthSchedule {
            pivots: (lo..=hi).map(|k| 1usize << k).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pivots.is_empty() || self.pivots.contains(&0) {
            return Err(Error::InvalidConfig(
                "width schedule needs positive widths".into(),
            ));
        }
        Ok(())
    }

    /// Hidden widths `n_1(n), ..., n_L(n)`.
    pub fn widths(model: &NetworkConfig, n: usize) -> Vec<usize> {
        (0..model.depth).map(|l| model.ratios.width(l, n)).collect()
    }
}

/// Large-deviation scaling `Z / sqrt(n)` at speed `n`, or moderate scaling
/// `sqrt(a_n) Z` at speed `1/a_n` with `a_n = n^-rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Scaling {
    Ld,
    Md { rho: f64 },
}

impl Scaling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Scaling::Md { rho } if !(rho > 0.0 && rho < 1.0) => Err(Error::InvalidConfig(format!(
                "rho = {rho} must lie in (0, 1)"
            ))),
            _ => Ok(()),
        }
    }

    pub fn speed(&self, n: usize) -> f64 {
        match *self {
            Scaling::Ld => n as f64,
            Scaling::Md { rho } => (n as f64).powf(rho),
        }
    }

    /// Factor applied to the raw output before comparing with the threshold.
    pub fn output_scale(&self, n: usize) -> f64 {
        1.0 / self.speed(n).sqrt()
    }
}

/// Outputs of `len` independent networks, each an `|A| x n_out` matrix
/// stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub points: usize,
    pub outputs: usize,
    pub data: Vec<f64>,
}

/// Entrywise sample moments of the flattened outputs. Second moments are
/// `E[v_k v_l]` for `k <= l` in row-major order.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub second: Vec<f64>,
    pub second_se: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn stride(&self) -> usize {
        self.points * self.outputs
    }

    pub fn get(&self, sample: usize, alpha: usize, h: usize) -> f64 {
        self.data[sample * self.stride() + h * self.points + alpha]
    }

    pub fn sample(&self, i: usize) -> DMatrix<f64> {
        let s = self.stride();
        DMatrix::from_column_slice(self.points, self.outputs, &self.data[i * s..(i + 1) * s])
    }

    pub fn moments(&self) -> BatchMoments {
        let k = self.stride();
        let m = self.len() as f64;
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
        let mut prod = vec![0.0; pairs.len()];
        let mut prod_sq = vec![0.0; pairs.len()];
        for v in self.data.chunks_exact(k) {
            for i in 0..k {
                sum[i] += v[i];
                sum_sq[i] += v[i] * v[i];
            }
            for (p, &(a, b)) in pairs.iter().enumerate() {
                let x = v[a] * v[b];
                prod[p] += x;
                prod_sq[p] += x * x;
            }
        }
        let stats = |s: &[f64], s2: &[f64]| -> (Vec<f64>, Vec<f64>) {
            s.iter()
                .zip(s2)
                .map(|(&a, &b)| {
                    let mean = a / m;
                    let var = (b / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
                    (mean, (var / m).sqrt())
                })
                .unzip()
        };
        let (mean, mean_se) = stats(&sum, &sum_sq);
        let (second, second_se) = stats(&prod, &prod_sq);
        BatchMoments {
            mean,
            mean_se,
            second,
            second_se,
        }
    }
}

fn check_inputs(model: &NetworkConfig, inputs: &InputSet, n: usize, batch: usize) -> Result<()> {
    model.validate()?;
    inputs.validate(model.n0)?;
    if n == 0 || batch == 0 {
        return Err(Error::InvalidConfig(
            "width and batch size must be positive".into(),
        ));
    }
    Ok(())
}

/// Runs `draw` for `count` samples in deterministic blocks and concatenates
/// the `stride` values written per sample.
fn sample_blocks<F>(count: usize, stride: usize, seed: u64, dom: u64, draw: F) -> Vec<f64>
where
    F: Fn(&mut rng::Stream, &mut [f64]) + Sync + Send,
{
    let blocks = parallel::map_blocks(count, BLOCK, |b, range| {
        let mut g = rng::stream(seed, dom, b as u64);
        let mut out = vec![0.0; range.len() * stride];
        for chunk in out.chunks_exact_mut(stride) {
            draw(&mut g, chunk);
        }
        out
    });
    blocks.concat()
}

/// One forward pass with fresh parameters; writes `|A| x n_out` column-major.
fn forward_pass(
    model: &NetworkConfig,
    inputs: &InputSet,
    widths: &[usize],
    g: &mut rng::Stream,
    out: &mut [f64],
) {
    let d = inputs.len();
    let sb = model.cb.sqrt();
    let act = model.activation;
    // prev[k * d + alpha]: the k-th unit of the previous layer at input alpha.
    let mut prev: Vec<f64> = (0..model.n0)
        .flat_map(|r| inputs.points.iter().map(move |x| x[r]))
        .collect();
    let mut fan_in = model.n0;
    let mut z = vec![0.0; d];
    for (layer, &width) in widths
        .iter()
        .chain(std::iter::once(&model.n_out))
        .enumerate()
    {
        let sw = (model.cw / fan_in as f64).sqrt();
        let last = layer == widths.len();
        let mut next = vec![0.0; width * d];
        for j in 0..width {
            let b = sb * rng::normal(g);
            z.fill(b);
            for k in 0..fan_in {
                let w = sw * rng::normal(g);
                for (a, za) in z.iter_mut().enumerate() {
                    *za += w * prev[k * d + a];
                }
            }
            for a in 0..d {
                next[j * d + a] = if last { z[a] } else { act.eval(z[a]) };
            }
        }
        if last {
            out.copy_from_slice(&next);
        }
        prev = next;
        fan_in = width;
    }
}

/// Outputs of the forward recursion with i.i.d. `N(0, C_b)` biases and
/// `N(0, C_W / fan_in)` weights, pivot width `n`.
pub fn simulate_direct(
    model: &NetworkConfig,
    inputs: &InputSet,
    n: usize,
    batch: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_inputs(model, inputs, n, batch)?;
    let widths = WidthSchedule::widths(model, n);
    let stride = inputs.len() * model.n_out;
    let data = sample_blocks(batch, stride, seed, domain::DIRECT, |g, out| {
        forward_pass(model, inputs, &widths, g, out)
    });
    Ok(SampleBatch {
        points: inputs.len(),
        outputs: model.n_out,
        data,
    })
}

/// Precomputed pieces of the covariance-chain sampler.
struct ChainSampler {
    d: usize,
    cb: f64,
    cw: f64,
    act: Activation,
    widths: Vec<usize>,
    root0: DMatrix<f64>,
}

impl ChainSampler {
    fn new(model: &NetworkConfig, inputs: &InputSet, n: usize) -> Result<Self> {
        let g0 = initial_cov(model, inputs)?;
        Ok(ChainSampler {
            d: inputs.len(),
            cb: model.cb,
            cw: model.cw,
            act: model.activation,
            widths: WidthSchedule::widths(model, n),
            root0: g0.sqrt().as_matrix().clone(),
        })
    }

    /// Draws `G^(1), ..., G^(L)`, calling `visit(rng, layer, G, G#)` after
    /// each layer.
    fn run<F>(&self, g: &mut rng::Stream, mut visit: F)
    where
        F: FnMut(&mut rng::Stream, usize, &DMatrix<f64>, &DMatrix<f64>),
    {
        if self.d == 1 {
            let mut root = self.root0[(0, 0)];
            for (l, &width) in self.widths.iter().enumerate() {
                let next = self.cb + self.cw / width as f64 * self.scalar_layer_sum(g, root, width);
                root = next.max(0.0).sqrt();
                visit(
                    g,
                    l,
                    &DMatrix::from_element(1, 1, next),
                    &DMatrix::from_element(1, 1, root),
                );
            }
            return;
        }
        let d = self.d;
        let mut root = self.root0.clone();
        let mut u = vec![0.0; d];
        let mut s = vec![0.0; d];
        for (l, &width) in self.widths.iter().enumerate() {
            let mut acc = DMatrix::<f64>::zeros(d, d);
            for _ in 0..width {
                rng::fill_normal(g, &mut u);
                for a in 0..d {
                    let mut v = 0.0;
                    for c in 0..d {
                        v += root[(a, c)] * u[c];
                    }
                    s[a] = self.act.eval(v);
                }
                for b in 0..d {
                    for a in b..d {
                        acc[(a, b)] += s[a] * s[b];
                    }
                }
            }
            let scale = self.cw / width as f64;
            let next = DMatrix::from_fn(d, d, |a, b| {
                let (i, j) = if a >= b { (a, b) } else { (b, a) };
                self.cb + scale * acc[(i, j)]
            });
            let sym = SymMatrix::from_matrix(next.clone()).expect("finite chain entries");
            root = sqrt_psd(&sym).expect("chain entries are PSD").into_matrix();
            visit(g, l, &next, &root);
        }
    }

    /// `sum_j sigma(root N_j)^2` over `width` fresh normals.
    fn scalar_layer_sum(&self, g: &mut rng::Stream, root: f64, width: usize) -> f64 {
        match self.act {
            Activation::HardClip => squared_sum(g, width, |x| (root * x).clamp(-1.0, 1.0)),
            Activation::Relu => squared_sum(g, width, |x| (root * x).max(0.0)),
            Activation::Tanh => squared_sum(g, width, |x| (root * x).tanh()),
            act => squared_sum(g, width, |x| act.eval(root * x)),
        }
    }

    fn chain(&self, g: &mut rng::Stream) -> Vec<DMatrix<f64>> {
        let mut kept = Vec::with_capacity(self.widths.len());
        self.run(g, |_, _, next, _| kept.push(next.clone()));
        kept
    }

    fn last_root(&self, g: &mut rng::Stream) -> DMatrix<f64> {
        let mut last = self.root0.clone();
        self.run(g, |_, _, _, root| last = root.clone());
        last
    }
}

/// `sum_j f(N_j)^2` over `width` fresh normals, drawn in chunks so the
/// accumulation loop stays tight.
#[inline(always)]
fn squared_sum(g: &mut rng::Stream, width: usize, f: impl Fn(f64) -> f64) -> f64 {
    const CHUNK: usize = 256;
    let mut buf = [0.0; CHUNK];
    let mut acc = [0.0; 4];
    let mut left = width;
    while left > 0 {
        let m = left.min(CHUNK);
        rng::fill_normal(g, &mut buf[..m]);
        let mut quads = buf[..m].chunks_exact(4);
        for q in &mut quads {
            for k in 0..4 {
                let v = f(q[k]);
                acc[k] += v * v;
            }
        }
        for &x in quads.remainder() {
            let v = f(x);
            acc[0] += v * v;
        }
        left -= m;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// One realization of `G_n^(1), ..., G_n^(L)`.
pub fn random_cov_chain(
    model: &NetworkConfig,
    inputs: &InputSet,
    n: usize,
    seed: u64,
) -> Result<Vec<CovMatrix>> {
    check_inputs(model, inputs, n, 1)?;
    let sampler = ChainSampler::new(model, inputs, n)?;
    let chain = sampler.chain(&mut rng::stream(seed, domain::CHAIN, 0));
    chain
        .into_iter()
        .map(|g| CovMatrix::new(SymMatrix::from_matrix(g)?, model.cb))
        .collect()
}

/// `count` independent realizations of the chain, drawn in deterministic blocks.
pub fn random_cov_chains(
    model: &NetworkConfig,
    inputs: &InputSet,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<SymMatrix>>> {
    check_inputs(model, inputs, n, count)?;
    let sampler = ChainSampler::new(model, inputs, n)?;
    let d = inputs.len();
    let stride = model.depth * d * d;
    let data = sample_blocks(count, stride, seed, domain::CHAIN, |g, out| {
        let chain = sampler.chain(g);
        for (l, m) in chain.iter().enumerate() {
            out[l * d * d..(l + 1) * d * d].copy_from_slice(m.as_slice());
        }
    });
    data.chunks_exact(stride)
        .map(|c| {
            c.chunks_exact(d * d)
                .map(|m| SymMatrix::from_matrix(DMatrix::from_column_slice(d, d, m)))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Outputs drawn through the random covariance chain: `Z_h = G_n^(L)# N_h`.
pub fn simulate_representation(
    model: &NetworkConfig,
    inputs: &InputSet,
    n: usize,
    batch: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_inputs(model, inputs, n, batch)?;
    let sampler = ChainSampler::new(model, inputs, n)?;
    let d = inputs.len();
    let stride = d * model.n_out;
    let data = sample_blocks(batch, stride, seed, domain::REPRESENTATION, |g, out| {
        let root = sampler.last_root(g);
        let mut u = vec![0.0; d];
        for h in 0..model.n_out {
            rng::fill_normal(g, &mut u);
            for a in 0..d {
                out[h * d + a] = (0..d).map(|c| root[(a, c)] * u[c]).sum();
            }
        }
    });
    Ok(SampleBatch {
        points: d,
        outputs: model.n_out,
        data,
    })
}

/// Half-space events `{scale_n * Z_output(x_alpha) >= t}` for each `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfSpace {
    #[serde(default)]
    pub alpha: usize,
    #[serde(default)]
    pub output: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailEstimate {
    pub n: usize,
    pub threshold: f64,
    pub hits: u64,
    pub samples: u64,
    pub log_prob: f64,
    /// Delta-method standard error of `log_prob`; infinite without hits.
    pub stderr: f64,
    /// Fewer than [`MIN_HITS`] hits: reported but left out of the fit.
    pub insufficient_hits: bool,
}

impl TailEstimate {
    pub fn from_counts(n: usize, threshold: f64, hits: u64, samples: u64) -> Self {
        let p = hits as f64 / samples as f64;
        let (log_prob, stderr) = if hits == 0 {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            (p.ln(), ((1.0 - p) / hits as f64).sqrt())
        };
        TailEstimate {
            n,
            threshold,
            hits,
            samples,
            log_prob,
            stderr,
            insufficient_hits: hits < MIN_HITS,
        }
    }
}

/// Weighted least-squares fit of `-log p_n = slope * speed_n + intercept`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub threshold: f64,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

/// Fits the usable estimates of one threshold; `None` with fewer than two.
pub fn fit_slope(estimates: &[TailEstimate], scaling: Scaling) -> Option<SlopeFit> {
    let usable: Vec<&TailEstimate> = estimates.iter().filter(|e| !e.insufficient_hits).collect();
    if usable.len() < 2 {
        return None;
    }
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for e in &usable {
        let w = 1.0 / (e.stderr * e.stderr).max(1e-300);
        let x = scaling.speed(e.n);
        let y = -e.log_prob;
        sw += w;
        swx += w * x;
        swy += w * y;
        swxx += w * x * x;
        swxy += w * x * y;
    }
    let det = sw * swxx - swx * swx;
    if !(det > 0.0) {
        return None;
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    let stderr = (sw / det).sqrt();
    Some(SlopeFit {
        threshold: usable[0].threshold,
        slope,
        intercept,
        stderr,
        lower: slope - Z_95 * stderr,
        upper: slope + Z_95 * stderr,
        points: usable.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TailStudy {
    /// Number of hidden layers of the network the events refer to.
    pub depth: usize,
    pub scaling: Scaling,
    /// Ordered by width, then by threshold.
    pub estimates: Vec<TailEstimate>,
    /// One entry per threshold, `None` when too few widths had enough hits.
    pub fits: Vec<Option<SlopeFit>>,
}

/// Empirical probabilities of the half-space events across the schedule,
/// sampled through the covariance chain, with per-threshold slope fits.
pub fn estimate_tail(
    model: &NetworkConfig,
    inputs: &InputSet,
    schedule: &WidthSchedule,
    event: &HalfSpace,
    scaling: Scaling,
    samples: usize,
    seed: u64,
) -> Result<TailStudy> {
    let mut studies =
        estimate_tail_by_depth(model, inputs, schedule, event, scaling, samples, seed)?;
    Ok(studies.pop().expect("depth >= 1"))
}

/// Like [`estimate_tail`], for the networks truncated after each hidden
/// layer `1..=L`. A truncated chain is the full chain of the shallower
/// network, so one pass serves every depth.
#[allow(clippy::too_many_arguments)]
pub fn estimate_tail_by_depth(
    model: &NetworkConfig,
    inputs: &InputSet,
    schedule: &WidthSchedule,
    event: &HalfSpace,
    scaling: Scaling,
    samples: usize,
    seed: u64,
) -> Result<Vec<TailStudy>> {
    schedule.validate()?;
    scaling.validate()?;
    check_inputs(model, inputs, 1, samples)?;
    if event.alpha >= inputs.len() || event.output >= model.n_out {
        return Err(Error::InvalidConfig("event coordinate out of range".into()));
    }
    if event.thresholds.is_empty() {
        return Err(Error::InvalidConfig("no thresholds given".into()));
    }
    let d = inputs.len();
    let depth = model.depth;
    let nt = event.thresholds.len();
    let mut estimates = vec![Vec::new(); depth];
    for &n in &schedule.pivots {
        let sampler = ChainSampler::new(model, inputs, n)?;
        let scale = scaling.output_scale(n);
        let width_seed = rng::child_seed(seed, n as u64);
        let counts = parallel::map_blocks(samples, BLOCK, |b, range| {
            let mut g = rng::stream(width_seed, domain::TAIL, b as u64);
            // hits[layer * nt + k]
            let mut hits = vec![0u64; depth * nt];
            let mut u = vec![0.0; d];
            for _ in range {
                sampler.run(&mut g, |g, l, _, root| {
                    rng::fill_normal(g, &mut u);
                    let z: f64 = (0..d).map(|c| root[(event.alpha, c)] * u[c]).sum();
                    for (k, &t) in event.thresholds.iter().enumerate() {
                        hits[l * nt + k] += u64::from(scale * z >= t);
                    }
                });
            }
            hits
        });
        for (l, per_depth) in estimates.iter_mut().enumerate() {
            for (k, &t) in event.thresholds.iter().enumerate() {
                let hits = counts.iter().map(|c| c[l * nt + k]).sum();
                per_depth.push(TailEstimate::from_counts(n, t, hits, samples as u64));
            }
        }
    }
    Ok(estimates
        .into_iter()
        .enumerate()
        .map(|(l, estimates)| {
            let fits = (0..nt)
                .map(|k| {
                    let per: Vec<TailEstimate> =
                        estimates.iter().skip(k).step_by(nt).cloned().collect();
                    fit_slope(&per, scaling)
                })
                .collect();
            TailStudy {
                depth: l + 1,
                scaling,
                estimates,
                fits,
            }
        })
        .collect())
}

/// Threshold `t` with `P(scale_n Z >= t) ~ p` at width `n` under the
/// infinite-width Gaussian approximation `Z ~ N(0, ghat_aa)`.
pub fn tune_threshold(ghat_aa: f64, scaling: Scaling, n: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target probability {p} outside (0, 1)"
        )));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(scaling.output_scale(n) * ghat_aa.max(0.0).sqrt() * std.inverse_cdf(1.0 - p))
}

/// Limiting slope of `-log P(event)` against the speed: `t^2 / (2 ghat_aa)`
/// for moderate scaling, the output rate at `t e_output` for large
/// deviations with a single input (other shapes are not covered).
pub fn predicted_rate(
    model: &NetworkConfig,
    inputs: &InputSet,
    scaling: Scaling,
    event: &HalfSpace,
    t: f64,
    spec: &ExpectSpec,
) -> Result<Option<RateValue>> {
    let ghat = limit_cov_chain(model, inputs, spec)?;
    let last = &ghat[model.depth - 1];
    match scaling {
        Scaling::Md { .. } => Ok(Some(half_space_md_rate(t, last, event.alpha))),
        Scaling::Ld if inputs.len() == 1 => {
            if t <= 0.0 {
                return Ok(Some(RateValue::ZERO));
            }
            let mut z = DMatrix::zeros(1, model.n_out);
            z[(0, event.output)] = t;
            Ok(Some(output_rate_iz(&z, model, inputs, spec)?.value))
        }
        Scaling::Ld => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize, act: Activation) -> NetworkConfig {
        NetworkConfig::new(depth, 2, 2, 0.2, 1.5, act)
    }

    #[test]
    fn zero_activation_gives_zero_outputs() {
        let model = NetworkConfig::new(1, 1, 1, 0.0, 1.0, Activation::Constant(0.0));
        let inputs = InputSet::new(vec![vec![1.0]]);
        let b = simulate_direct(&model, &inputs, 8, 100, 1).unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
        let chain = random_cov_chain(&model, &inputs, 8, 1).unwrap();
        assert_eq!(chain[0].get(0, 0), 0.0);
    }

    #[test]
    fn batches_are_reproducible() {
        let model = small(2, Activation::Tanh);
        let inputs = InputSet::new(vec![vec![1.0, 0.5], vec![-0.3, 0.2]]);
        let a = simulate_direct(&model, &inputs, 5, 3000, 7).unwrap();
        let b = simulate_direct(&model, &inputs, 5, 3000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3000);
        let c = simulate_direct(&model, &inputs, 5, 3000, 8).unwrap();
        assert_ne!(a, c);
        let r = simulate_representation(&model, &inputs, 5, 3000, 7).unwrap();
        assert_eq!(
            r,
            simulate_representation(&model, &inputs, 5, 3000, 7).unwrap()
        );
    }

    #[test]
    fn outputs_are_centered() {
        let model = small(1, Activation::HardClip);
        let inputs = InputSet::new(vec![vec![1.0, 0.5], vec![-0.3, 0.2]]);
        let b = simulate_direct(&model, &inputs, 6, 20_000, 3).unwrap();
        let m = b.moments();
        for (mean, se) in m.mean.iter().zip(&m.mean_se) {
            assert!(mean.abs() < 4.0 * se, "{mean} vs {se}");
        }
    }

    #[test]
    fn constant_one_representation_variance() {
        let model = NetworkConfig::new(1, 1, 1, 0.3, 1.2, Activation::Constant(1.0));
        let inputs = InputSet::new(vec![vec![2.0]]);
        let b = simulate_representation(&model, &inputs, 4, 50_000, 5).unwrap();
        let m = b.moments();
        assert!((m.second[0] - 1.5).abs() < 4.0 * m.second_se[0]);
    }

    #[test]
    fn bounded_chain_entries_stay_in_box() {
        let model = NetworkConfig::new(3, 2, 1, 0.1, 2.0, Activation::Tanh);
        let inputs = InputSet::new(vec![vec![3.0, -1.0], vec![-2.0, 0.5]]);
        for seed in 0..20 {
            for g in random_cov_chain(&model, &inputs, 7, seed).unwrap() {
                for a in 0..2 {
                    assert!(g.get(a, a) >= 0.1 && g.get(a, a) <= 2.1 + 1e-12);
                }
                assert!((g.get(0, 1) - 0.1).abs() <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn tail_estimate_counts() {
        let e = TailEstimate::from_counts(16, 0.5, 0, 1000);
        assert!(e.insufficient_hits && e.stderr.is_infinite());
        let e = TailEstimate::from_counts(16, 0.5, 250, 1000);
        assert!((e.log_prob - 0.25f64.ln()).abs() < 1e-15);
        assert!((e.stderr - (0.75f64 / 250.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn slope_fit_recovers_a_line() {
        let scaling = Scaling::Md { rho: 0.5 };
        let est: Vec<TailEstimate> = [64usize, 256, 1024]
            .iter()
            .map(|&n| {
                let y = 0.7 * scaling.speed(n) + 0.3;
                TailEstimate {
                    n,
                    threshold: 1.0,
                    hits: 100,
                    samples: 1_000_000,
                    log_prob: -y,
                    stderr: 0.1,
                    insufficient_hits: false,
                }
            })
            .collect();
        let fit = fit_slope(&est, scaling).unwrap();
        assert!((fit.slope - 0.7).abs() < 1e-12 && (fit.intercept - 0.3).abs() < 1e-10);
        assert!(fit.lower < fit.slope && fit.upper > fit.slope);
        assert!(fit_slope(&est[..1], scaling).is_none());
    }

    #[test]
    fn zero_threshold_has_probability_one_half() {
        let model = NetworkConfig::new(1, 1, 1, 0.0, 1.0, Activation::HardClip);
        let inputs = InputSet::new(vec![vec![1.0]]);
        let study = estimate_tail(
            &model,
            &inputs,
            &WidthSchedule { pivots: vec![16] },
            &HalfSpace {
                alpha: 0,
                output: 0,
                thresholds: vec![0.0],
            },
            Scaling::Md { rho: 0.5 },
            40_000,
            2,
        )
        .unwrap();
        let e = &study.estimates[0];
        assert!((e.log_prob + std::f64::consts::LN_2).abs() < 4.0 * e.stderr);
    }

    #[test]
    fn tuned_threshold_matches_gaussian_tail() {
        let t = tune_threshold(0.5, Scaling::Ld, 1, 0.5).unwrap();
        assert!(t.abs() < 1e-12);
        let t = tune_threshold(1.0, Scaling::Ld, 1, 0.022750131948179195).unwrap();
        assert!((t - 2.0).abs() < 1e-8);
    }

    #[test]
    fn scaling_validation() {
        assert!(Scaling::Md { rho: 1.0 }.validate().is_err());
        assert!(Scaling::Md { rho: 0.5 }.validate().is_ok());
        let s: Scaling = serde_json::from_str(r#"{"kind":"md","rho":0.5}"#).unwrap();
        assert_eq!(s, Scaling::Md { rho: 0.5 });
    }
}
