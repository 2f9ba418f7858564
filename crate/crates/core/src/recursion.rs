//! Deterministic covariance structures: the input Gram matrix `g^(0)` and the
//! infinite-width chain `ghat^(l) = C_b 1 + C_W y(ghat^(l-1))`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gauss_expect::{y_of_q, ExpectSpec};
use crate::model::{InputSet, NetworkConfig};
use crate::psd::{CovMatrix, SymMatrix};

/// `g^(0)_ab = C_b + (C_W / n0) <x_a, x_b>`.
pub fn initial_cov(model: &NetworkConfig, inputs: &InputSet) -> Result<CovMatrix> {
    inputs.validate(model.n0)?;
    let a = inputs.len();
    let x = DMatrix::from_fn(a, model.n0, |i, r| inputs.points[i][r]);
    let gram = &x * x.transpose();
    let g = gram.map(|v| model.cb + model.cw / model.n0 as f64 * v);
    CovMatrix::new(SymMatrix::from_matrix(g)?, model.cb)
}

/// One step of the recursion from `prev`.
pub fn next_cov(model: &NetworkConfig, prev: &CovMatrix, spec: &ExpectSpec) -> Result<CovMatrix> {
    let y = y_of_q(prev, &model.activation, spec)?;
    CovMatrix::new(y.affine(model.cb, model.cw), model.cb)
}

fn chain_cache() -> &'static Mutex<HashMap<String, Vec<CovMatrix>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Vec<CovMatrix>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// `ghat^(1), ..., ghat^(L)`, memoized per `(model, inputs, spec)`.
pub fn limit_cov_chain(
    model: &NetworkConfig,
    inputs: &InputSet,
    spec: &ExpectSpec,
) -> Result<Vec<CovMatrix>> {
    model.validate()?;
    let key = serde_json::to_string(&(model, inputs, spec))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if let Some(chain) = chain_cache().lock().unwrap().get(&key) {
        return Ok(chain.clone());
    }
    let mut prev = initial_cov(model, inputs)?;
    let mut chain = Vec::with_capacity(model.depth);
    for _ in 0..model.depth {
        let next = next_cov(model, &prev, spec)?;
        chain.push(next.clone());
        prev = next;
    }
    chain_cache().lock().unwrap().insert(key, chain.clone());
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::psd::in_family;

    #[test]
    fn initial_cov_example() {
        let model = NetworkConfig::new(1, 2, 1, 1.0, 2.0, Activation::Tanh);
        let inputs = InputSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = initial_cov(&model, &inputs).unwrap();
        let expect = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!(g.base().max_abs_diff(&expect) < 1e-15);

        let g = initial_cov(&model, &InputSet::new(vec![vec![0.0, 0.0]])).unwrap();
        assert_eq!(g.get(0, 0), 1.0);

        let dup = InputSet::new(vec![vec![0.5, 1.0], vec![0.5, 1.0]]);
        let g = initial_cov(&model, &dup).unwrap();
        assert_eq!(g.get(0, 1), g.get(0, 0));
        assert!(in_family(g.base(), 1.0));
    }

    #[test]
    fn relu_fixed_point_and_geometric_decay() {
        let spec = ExpectSpec::default();
        let inputs = InputSet::new(vec![vec![1.0]]);
        let fixed = NetworkConfig::new(4, 1, 1, 0.0, 2.0, Activation::Relu);
        for g in limit_cov_chain(&fixed, &inputs, &spec).unwrap() {
            assert!((g.get(0, 0) - 2.0).abs() < 1e-12);
        }
        let halving = NetworkConfig::new(4, 1, 1, 0.0, 1.0, Activation::Relu);
        for (l, g) in limit_cov_chain(&halving, &inputs, &spec)
            .unwrap()
            .iter()
            .enumerate()
        {
            assert!((g.get(0, 0) - 0.5f64.powi(l as i32 + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_inputs_give_zero_chain() {
        let model = NetworkConfig::new(3, 2, 1, 0.0, 1.5, Activation::Tanh);
        let inputs = InputSet::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        for g in limit_cov_chain(&model, &inputs, &Default::default()).unwrap() {
            assert_eq!(g.base().frobenius(), 0.0);
        }
    }

    #[test]
    fn bounded_chain_stays_in_box() {
        // The inputs are negatively correlated, so off-diagonal entries of y
        // are negative for the odd activation: only |g - C_b| is bounded.
        let model = NetworkConfig::new(3, 2, 1, 0.4, 1.3, Activation::HardClip);
        let inputs = InputSet::new(vec![vec![1.0, -0.5], vec![0.2, 2.0]]);
        let chain = limit_cov_chain(&model, &inputs, &Default::default()).unwrap();
        assert!(chain[0].get(0, 1) < 0.4);
        for g in chain {
            assert!(in_family(g.base(), 0.4));
            for a in 0..2 {
                assert!(g.get(a, a) >= 0.4 - 1e-12 && g.get(a, a) <= 0.4 + 1.3 + 1e-12);
            }
            assert!((g.get(0, 1) - 0.4).abs() <= 1.3 + 1e-12);
        }
    }
}
