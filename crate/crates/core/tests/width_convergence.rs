//! The random covariance chain concentrates on the limiting chain as the
//! width grows.

use ldpnn::gauss_expect::ExpectSpec;
use ldpnn::recursion::limit_cov_chain;
use ldpnn::simulator::random_cov_chains;
use ldpnn::{Activation, InputSet, NetworkConfig};

const WIDTHS: [usize; 3] = [100, 1_000, 10_000];
const CHAINS: usize = 2_000;

/// Entrywise `(|mean - limit|, stderr)` of the last layer.
fn deviations(model: &NetworkConfig, inputs: &InputSet, n: usize) -> Vec<(f64, f64)> {
    let limit = limit_cov_chain(model, inputs, &ExpectSpec::default()).unwrap();
    let last = &limit[model.depth - 1];
    let chains = random_cov_chains(model, inputs, n, CHAINS, 11).unwrap();
    let d = inputs.len();
    let m = CHAINS as f64;
    let mut out = Vec::new();
    for i in 0..d {
        for j in i..d {
            let xs: Vec<f64> = chains
                .iter()
                .map(|c| c[model.depth - 1].get(i, j))
                .collect();
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            out.push(((mean - last.get(i, j)).abs(), (var / m).sqrt()));
        }
    }
    out
}

fn check(model: NetworkConfig, inputs: InputSet) {
    let devs: Vec<_> = WIDTHS
        .iter()
        .map(|&n| deviations(&model, &inputs, n))
        .collect();
    for k in 0..devs[0].len() {
        for w in 1..WIDTHS.len() {
            let (prev, se_prev) = devs[w - 1][k];
            let (cur, se_cur) = devs[w][k];
            assert!(
                cur <= prev + 2.0 * (se_prev + se_cur),
                "entry {k}: deviation grew from {prev:.3e} to {cur:.3e} at n = {}",
                WIDTHS[w]
            );
        }
        let (last, se) = devs[WIDTHS.len() - 1][k];
        assert!(
            last <= 4.0 * se + 1e-3,
            "entry {k}: {last:.3e} vs stderr {se:.3e}"
        );
    }
}

#[test]
fn hard_clip_two_inputs_depth_two() {
    let inputs = InputSet::new(vec![vec![1.0], vec![-0.4]]);
    check(
        NetworkConfig::new(2, 1, 1, 0.1, 1.5, Activation::HardClip),
        inputs,
    );
}

#[test]
fn tanh_single_input_depth_three() {
    let inputs = InputSet::new(vec![vec![0.8, 0.6]]);
    check(
        NetworkConfig::new(3, 2, 1, 0.0, 2.0, Activation::Tanh),
        inputs,
    );
}
