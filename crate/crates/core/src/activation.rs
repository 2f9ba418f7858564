//! Pre-activation functions with a.e. derivatives and growth metadata.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    Bounded,
    Sublinear,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Sin,
    Swish,
    Softplus,
    HardClip,
    /// `sigma(x) = c` for every `x`. Used for degenerate and closed-form checks.
    Constant(f64),
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub const BUILTIN_NAMES: [&'static str; 7] = [
        "relu",
        "tanh",
        "sigmoid",
        "sin",
        "swish",
        "softplus",
        "hard_clip",
    ];

    pub fn builtin(name: &str) -> Result<Self> {
        name.parse()
    }

    pub fn name(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Tanh => "tanh".into(),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Sin => "sin".into(),
            Activation::Swish => "swish".into(),
            Activation::Softplus => "softplus".into(),
            Activation::HardClip => "hard_clip".into(),
            Activation::Constant(c) => format!("const:{c}"),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => logistic(x),
            Activation::Sin => x.sin(),
            Activation::Swish => x * logistic(x),
            Activation::Softplus => {
                // log(1 + e^x) without overflow for large x.
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            }
            Activation::HardClip => x.clamp(-1.0, 1.0),
            Activation::Constant(c) => c,
        }
    }

    /// Almost-everywhere derivative. At kinks the left/right choice is fixed:
    /// relu'(0) = 0 and hard_clip'(+-1) = 1.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Sin => x.cos(),
            Activation::Swish => {
                let s = logistic(x);
                s + x * s * (1.0 - s)
            }
            Activation::Softplus => logistic(x),
            Activation::HardClip => {
                if x.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Constant(_) => 0.0,
        }
    }

    /// `sigma^(s)`: the function itself for `s = 0`, its derivative for `s = 1`.
    #[inline]
    pub fn eval_order(&self, s: u8, x: f64) -> f64 {
        if s == 0 {
            self.eval(x)
        } else {
            self.deriv(x)
        }
    }

    /// `||sigma||_inf` when finite.
    pub fn sup_norm(&self) -> Option<f64> {
        match *self {
            Activation::Tanh | Activation::Sigmoid | Activation::Sin | Activation::HardClip => {
                Some(1.0)
            }
            Activation::Constant(c) => Some(c.abs()),
            _ => None,
        }
    }

    /// `||sigma'||_inf` when finite.
    pub fn deriv_sup_norm(&self) -> Option<f64> {
        match *self {
            Activation::Relu
            | Activation::Tanh
            | Activation::Sin
            | Activation::HardClip
            | Activation::Softplus => Some(1.0),
            Activation::Sigmoid => Some(0.25),
            // max of swish' is 1.0998393... at x ~ 2.3994; rounded up.
            Activation::Swish => Some(1.099_839_4),
            Activation::Constant(_) => Some(0.0),
        }
    }

    pub fn growth(&self) -> Growth {
        match self {
            Activation::Relu | Activation::Swish | Activation::Softplus => Growth::Sublinear,
            _ => Growth::Bounded,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.growth() == Growth::Bounded
    }

    /// A constant `C` with `|sigma(x)| <= C (1 + |x|)` everywhere.
    pub fn linear_growth_constant(&self) -> f64 {
        match *self {
            Activation::Relu | Activation::Swish | Activation::Softplus => 1.0,
            _ => self.sup_norm().unwrap_or(f64::INFINITY),
        }
    }

    /// Points where `sigma` is not differentiable.
    pub fn kinks(&self) -> &'static [f64] {
        match self {
            Activation::Relu => &[0.0],
            Activation::HardClip => &[-1.0, 1.0],
            _ => &[],
        }
    }

    /// `sigma(0) == 0`.
    pub fn vanishes_at_zero(&self) -> bool {
        self.eval(0.0) == 0.0
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let act = match s {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "sin" => Activation::Sin,
            "swish" => Activation::Swish,
            "softplus" => Activation::Softplus,
            "hard_clip" => Activation::HardClip,
            other => match other.strip_prefix("const:").map(str::parse::<f64>) {
                Some(Ok(c)) if c.is_finite() => Activation::Constant(c),
                _ => return Err(Error::UnknownActivation(other.to_string())),
            },
        };
        Ok(act)
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Low-discrepancy points in `[0,1)^d` from the additive recurrence on the
/// generalized golden ratio.
pub fn rd_sequence(dim: usize, count: usize) -> Vec<Vec<f64>> {
    // phi_d solves x^(d+1) = x + 1.
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alpha: Vec<f64> = (1..=dim)
        .map(|k| (1.0 / phi.powi(k as i32)).fract())
        .collect();
    (0..count)
        .map(|i| {
            alpha
                .iter()
                .map(|a| (0.5 + a * (i as f64 + 1.0)).fract())
                .collect()
        })
        .collect()
}

/// Number of grid points used by [`check_growth_star`].
pub const GROWTH_GRID_POINTS: usize = 100_000;

/// Half-width of the `(b, w)` box scanned by [`check_growth_star`].
pub const GROWTH_BOX: f64 = 50.0;

/// Scans `(b, w) in [-50, 50]^(n0+1)` for violations of the growth bound on
/// `sigma^(s_h)(b + <w, x_alpha>) w_1^(s_h)`.
///
/// For `s_h = 0` the bound is `|sigma(t)| <= M (1 + |t|)` with
/// `t = b + <w, x_alpha>`. For `s_h = 1` the derivative term is compared with
/// `M (1 + |b| + sum_r |w_r|)`: the product `sigma'(t) w_1` need not be small
/// when `t` is, so the bound is taken in the parameters themselves, which is
/// what the finiteness argument needs.
///
/// Semi-decidable: `true` means no violation was found on the grid.
pub fn check_growth_star(act: &Activation, pattern: &[u8], inputs: &[Vec<f64>], m: f64) -> bool {
    assert!(m > 0.0, "growth constant must be positive");
    let n0 = inputs.first().map_or(0, Vec::len);
    let use_s0 = pattern.contains(&0);
    let use_s1 = pattern.contains(&1);
    for u in rd_sequence(n0 + 1, GROWTH_GRID_POINTS) {
        let b = GROWTH_BOX * (2.0 * u[0] - 1.0);
        let w: Vec<f64> = u[1..]
            .iter()
            .map(|v| GROWTH_BOX * (2.0 * v - 1.0))
            .collect();
        let param_size = 1.0 + b.abs() + w.iter().map(|v| v.abs()).sum::<f64>();
        for x in inputs {
            let t = b + w.iter().zip(x).map(|(wr, xr)| wr * xr).sum::<f64>();
            if use_s0 && act.eval(t).abs() > m * (1.0 + t.abs()) * (1.0 + 1e-12) {
                return false;
            }
            if use_s1 {
                let w1 = w.first().copied().unwrap_or(0.0);
                if (act.deriv(t) * w1).abs() > m * param_size * (1.0 + 1e-12) {
                    return false;
                }
            }
        }
    }
    true
}
