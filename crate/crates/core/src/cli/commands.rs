//! One function per subcommand, each producing tables and diagnostics.

use nalgebra::DMatrix;
use serde_json::json;

use super::config::{ExperimentConfig, Matrix};
use super::report::{dmatrix_cell, matrix_cell, num, opt, rate, Table};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::gauss_expect::{kappa_mc, Backend, KappaModel};
use crate::psd::{CovMatrix, SymMatrix};
use crate::rates::chain::{chain_rate_ig, output_rate_iz};
use crate::rates::relu::relu_eta;
use crate::rates::{kappa_star_relu_scalar, legendre_with, md_rate};
use crate::recursion::{initial_cov, limit_cov_chain};
use crate::shallow::{
    estimate_sensitivity_tail, sensitivity_covariances, shallow_ld_rate, shallow_md_rate,
    DerivativePattern,
};
use crate::simulator::{
    estimate_tail, predicted_rate, tune_threshold, HalfSpace, Scaling, TailStudy,
};

pub struct Outcome {
    pub tables: Vec<Table>,
    pub diagnostics: serde_json::Value,
}

fn sym(m: &Matrix) -> Result<SymMatrix> {
    SymMatrix::from_rows(m)
}

fn dense(m: &Matrix, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            what: "query matrix entries",
            expected: rows * cols,
            found: m.iter().map(Vec::len).sum(),
        });
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| m[i][j]))
}

fn require<'a, T>(list: &'a [T], name: &str) -> Result<&'a [T]> {
    if list.is_empty() {
        return Err(Error::InvalidConfig(format!("query.{name} is empty")));
    }
    Ok(list)
}

fn query_cov(cfg: &ExperimentConfig) -> Result<CovMatrix> {
    match &cfg.query.q {
        Some(q) => CovMatrix::psd(sym(q)?),
        None => initial_cov(&cfg.model, &cfg.inputs),
    }
}

fn backend_name(b: Backend) -> String {
    match b {
        Backend::Quadrature => "quadrature".into(),
        Backend::MonteCarlo => "monte_carlo".into(),
    }
}

pub fn kappa(cfg: &ExperimentConfig) -> Result<Outcome> {
    let q = query_cov(cfg)?;
    let act = cfg.model.activation;
    let model = KappaModel::new(&q, &act, &cfg.expect)?;
    let mut t = Table::new(
        "kappa",
        &[
            "eta",
            "q",
            "backend",
            "kappa",
            "kappa_mc",
            "mc_stderr",
            "discrepancy",
        ],
    );
    let mut worst: f64 = 0.0;
    for eta in require(&cfg.query.eta, "eta")? {
        let eta = sym(eta)?;
        let value = model.kappa(&eta)?;
        let (mc, se) = kappa_mc(&eta, &q, &act, cfg.expect.mc)?;
        let gap = (value - mc).abs();
        if gap.is_finite() {
            worst = worst.max(gap);
        }
        t.push(vec![
            matrix_cell(&eta.to_rows()),
            matrix_cell(&q.base().to_rows()),
            backend_name(model.backend()),
            num(value),
            num(mc),
            num(se),
            num(gap),
        ]);
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics: json!({ "max_discrepancy": worst }),
    })
}

pub fn kappa_star(cfg: &ExperimentConfig) -> Result<Outcome> {
    let q = query_cov(cfg)?;
    let act = cfg.model.activation;
    let scalar_relu = q.dim() == 1 && act == Activation::Relu;
    let model = KappaModel::new(&q, &act, &cfg.expect)?;
    let mut t = Table::new(
        "kappa_star",
        &[
            "y",
            "q",
            "method",
            "value",
            "eta",
            "iterations",
            "grad_norm",
            "diverged",
        ],
    );
    for y in require(&cfg.query.y, "y")? {
        let y = sym(y)?;
        if scalar_relu {
            let (yv, qv) = (y.get(0, 0), q.get(0, 0));
            let eta = if yv > 0.0 {
                num(relu_eta(yv, qv))
            } else if yv == 0.0 {
                num(f64::NEG_INFINITY)
            } else {
                String::new()
            };
            t.push(vec![
                matrix_cell(&y.to_rows()),
                matrix_cell(&q.base().to_rows()),
                "closed_form".into(),
                rate(kappa_star_relu_scalar(yv, qv)),
                eta,
                "0".into(),
                "0".into(),
                "false".into(),
            ]);
            continue;
        }
        let ks = legendre_with(&model, &y)?;
        t.push(vec![
            matrix_cell(&y.to_rows()),
            matrix_cell(&q.base().to_rows()),
            "newton".into(),
            rate(ks.value),
            matrix_cell(&ks.eta.to_rows()),
            ks.iterations.to_string(),
            num(ks.grad_norm),
            ks.diverged.to_string(),
        ]);
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics: json!({}),
    })
}

fn chain_cell(chain: &[SymMatrix]) -> String {
    chain
        .iter()
        .map(|g| matrix_cell(&g.to_rows()))
        .collect::<Vec<_>>()
        .join(" | ")
}

const CHAIN_HEADER: [&str; 7] = [
    "target",
    "value",
    "chain",
    "best_start",
    "converged_starts",
    "evaluations",
    "failed_evaluations",
];

pub fn chain(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut t = Table::new("chain", &CHAIN_HEADER);
    let mut failed = 0;
    for g in require(&cfg.query.g, "g")? {
        let g = CovMatrix::new(sym(g)?, cfg.model.cb)?;
        let r = chain_rate_ig(&g, &cfg.model, &cfg.inputs, &cfg.expect)?;
        failed += r.failed_evaluations;
        t.push(vec![
            matrix_cell(&g.base().to_rows()),
            rate(r.value),
            chain_cell(&r.chain),
            r.best_start.to_string(),
            r.converged_starts.to_string(),
            r.evaluations.to_string(),
            r.failed_evaluations.to_string(),
        ]);
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics: json!({ "failed_evaluations": failed }),
    })
}

pub fn output(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut t = Table::new("output", &CHAIN_HEADER);
    let mut failed = 0;
    for z in require(&cfg.query.z, "z")? {
        let z = dense(z, cfg.inputs.len(), cfg.model.n_out)?;
        let r = output_rate_iz(&z, &cfg.model, &cfg.inputs, &cfg.expect)?;
        failed += r.failed_evaluations;
        t.push(vec![
            dmatrix_cell(&z),
            rate(r.value),
            chain_cell(&r.chain),
            r.best_start.to_string(),
            r.converged_starts.to_string(),
            r.evaluations.to_string(),
            r.failed_evaluations.to_string(),
        ]);
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics: json!({ "failed_evaluations": failed }),
    })
}

pub fn md(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ghat = limit_cov_chain(&cfg.model, &cfg.inputs, &cfg.expect)?;
    let last = &ghat[cfg.model.depth - 1];
    let mut t = Table::new("md", &["z", "ghat", "value"]);
    for z in require(&cfg.query.z, "z")? {
        let z = dense(z, cfg.inputs.len(), cfg.model.n_out)?;
        t.push(vec![
            dmatrix_cell(&z),
            matrix_cell(&last.base().to_rows()),
            rate(md_rate(&z, last)?),
        ]);
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics: json!({}),
    })
}

pub fn recursion(cfg: &ExperimentConfig) -> Result<Outcome> {
    let d = cfg.inputs.len();
    let mut header = vec!["layer".to_string(), "row".to_string()];
    header.extend((0..d).map(|c| format!("col_{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new("recursion", &header);
    let g0 = initial_cov(&cfg.model, &cfg.inputs)?;
    let chain = limit_cov_chain(&cfg.model, &cfg.inputs, &cfg.expect)?;
    for (layer, g) in std::iter::once(&g0).chain(chain.iter()).enumerate() {
        for (r, row) in g.base().to_rows().iter().enumerate() {
            let mut cells = vec![layer.to_string(), r.to_string()];
            cells.extend(row.iter().map(|v| num(*v)));
            t.push(cells);
        }
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics: json!({}),
    })
}

/// Event thresholds, tuned from the limiting variance when none are given.
fn thresholds(cfg: &ExperimentConfig, variance: f64) -> Result<Vec<f64>> {
    if !cfg.event.thresholds.is_empty() {
        return Ok(cfg.event.thresholds.clone());
    }
    let n = *cfg
        .schedule
        .pivots
        .iter()
        .min()
        .expect("validated schedule");
    Ok(vec![tune_threshold(
        variance,
        cfg.scaling,
        n,
        cfg.event.target_prob,
    )?])
}

const TAIL_HEADER: [&str; 8] = [
    "n",
    "t",
    "hits",
    "samples",
    "log_prob",
    "stderr",
    "predicted_rate",
    "fitted_slope",
];

const SLOPE_HEADER: [&str; 8] = [
    "t",
    "predicted_rate",
    "fitted_slope",
    "stderr",
    "lower",
    "upper",
    "points",
    "relative_error",
];

fn tail_tables(study: &TailStudy, predicted: &[Option<f64>]) -> (Table, Table) {
    let nt = predicted.len();
    let mut tail = Table::new("tail", &TAIL_HEADER);
    for (i, e) in study.estimates.iter().enumerate() {
        let k = i % nt;
        tail.push(vec![
            e.n.to_string(),
            num(e.threshold),
            e.hits.to_string(),
            e.samples.to_string(),
            num(e.log_prob),
            num(e.stderr),
            opt(predicted[k]),
            opt(study.fits[k].as_ref().map(|f| f.slope)),
        ]);
    }
    let mut slopes = Table::new("slopes", &SLOPE_HEADER);
    for (k, fit) in study.fits.iter().enumerate() {
        let t = study.estimates[k].threshold;
        let rel = match (fit, predicted[k]) {
            (Some(f), Some(p)) if p > 0.0 => Some((f.slope - p).abs() / p),
            _ => None,
        };
        slopes.push(vec![
            num(t),
            opt(predicted[k]),
            opt(fit.as_ref().map(|f| f.slope)),
            opt(fit.as_ref().map(|f| f.stderr)),
            opt(fit.as_ref().map(|f| f.lower)),
            opt(fit.as_ref().map(|f| f.upper)),
            fit.as_ref().map_or(0, |f| f.points).to_string(),
            opt(rel),
        ]);
    }
    (tail, slopes)
}

fn tail_diagnostics(study: &TailStudy) -> serde_json::Value {
    let flagged: Vec<_> = study
        .estimates
        .iter()
        .filter(|e| e.insufficient_hits)
        .map(|e| json!({ "n": e.n, "t": e.threshold, "hits": e.hits }))
        .collect();
    json!({ "insufficient_hits": flagged })
}

fn network_study(cfg: &ExperimentConfig) -> Result<(TailStudy, HalfSpace)> {
    let ghat = limit_cov_chain(&cfg.model, &cfg.inputs, &cfg.expect)?;
    let var = ghat[cfg.model.depth - 1].get(cfg.event.alpha, cfg.event.alpha);
    let event = HalfSpace {
        alpha: cfg.event.alpha,
        output: cfg.event.output,
        thresholds: thresholds(cfg, var)?,
    };
    let study = estimate_tail(
        &cfg.model,
        &cfg.inputs,
        &cfg.schedule,
        &event,
        cfg.scaling,
        cfg.samples,
        cfg.seed,
    )?;
    Ok((study, event))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (study, event) = network_study(cfg)?;
    let (tail, _) = tail_tables(&study, &vec![None; event.thresholds.len()]);
    Ok(Outcome {
        tables: vec![tail],
        diagnostics: tail_diagnostics(&study),
    })
}

pub fn validate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (study, event) = network_study(cfg)?;
    let predicted = event
        .thresholds
        .iter()
        .map(|&t| {
            predicted_rate(&cfg.model, &cfg.inputs, cfg.scaling, &event, t, &cfg.expect)
                .map(|r| r.map(|v| v.value()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (tail, slopes) = tail_tables(&study, &predicted);
    Ok(Outcome {
        tables: vec![tail, slopes],
        diagnostics: tail_diagnostics(&study),
    })
}

fn pattern(cfg: &ExperimentConfig) -> DerivativePattern {
    DerivativePattern(cfg.pattern_or_zeros())
}

pub fn shallow_rate(cfg: &ExperimentConfig, moderate: bool) -> Result<Outcome> {
    let p = pattern(cfg);
    let name = if moderate {
        "shallow_md_rate"
    } else {
        "shallow_rate"
    };
    let mut t = Table::new(
        name,
        &[
            "z",
            "pattern",
            "value",
            "growth_ok",
            "iterations",
            "grad_norm",
            "diverged",
        ],
    );
    let mut formal = false;
    for z in require(&cfg.query.z, "z")? {
        let z = dense(z, cfg.inputs.len(), cfg.model.n_out)?;
        let r = if moderate {
            shallow_md_rate(&z, &cfg.model, &cfg.inputs, &p, &cfg.expect)?
        } else {
            shallow_ld_rate(&z, &cfg.model, &cfg.inputs, &p, &cfg.expect)?
        };
        formal |= !r.growth_ok;
        t.push(vec![
            dmatrix_cell(&z),
            p.0.iter().map(u8::to_string).collect::<Vec<_>>().join(" "),
            rate(r.value),
            r.growth_ok.to_string(),
            r.iterations.to_string(),
            num(r.grad_norm),
            r.diverged.to_string(),
        ]);
    }
    let mut diagnostics = json!({ "growth_ok": !formal });
    if formal {
        diagnostics["warning"] =
            json!("growth condition (*) failed on the scan grid; rates may be formal");
    }
    Ok(Outcome {
        tables: vec![t],
        diagnostics,
    })
}

pub fn shallow_validate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = pattern(cfg);
    let (alpha, h) = (cfg.event.alpha, cfg.event.output);
    let cov = sensitivity_covariances(&cfg.model, &cfg.inputs, &p, &cfg.expect)?;
    let var = cov[h].get(alpha, alpha);
    let event = HalfSpace {
        alpha,
        output: h,
        thresholds: thresholds(cfg, var)?,
    };
    let study = estimate_sensitivity_tail(
        &cfg.model,
        &cfg.inputs,
        &p,
        &cfg.schedule,
        &event,
        cfg.scaling,
        cfg.samples,
        cfg.seed,
    )?;
    let single = cfg.inputs.len() == 1 && cfg.model.n_out == 1;
    let predicted = event
        .thresholds
        .iter()
        .map(|&t| -> Result<Option<f64>> {
            if t <= 0.0 {
                return Ok(Some(0.0));
            }
            match cfg.scaling {
                Scaling::Md { .. } => Ok(Some(if var > 0.0 {
                    t * t / (2.0 * var)
                } else {
                    f64::INFINITY
                })),
                Scaling::Ld if single => {
                    let z = DMatrix::from_element(1, 1, t);
                    Ok(Some(
                        shallow_ld_rate(&z, &cfg.model, &cfg.inputs, &p, &cfg.expect)?
                            .value
                            .value(),
                    ))
                }
                Scaling::Ld => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (tail, slopes) = tail_tables(&study, &predicted);
    Ok(Outcome {
        tables: vec![tail, slopes],
        diagnostics: tail_diagnostics(&study),
    })
}
