//! Network and input descriptions shared by every module.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::activation::Activation;
use crate::error::{Error, Result};

/// Width ratios `gamma_l = lim n_l / v_n*` in `[1, +inf]`, one per hidden
/// layer, with `gammas[pivot] == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthRatios {
    pub gammas: Vec<f64>,
    pub pivot: usize,
}

impl WidthRatios {
    /// All layers as wide as the pivot.
    pub fn uniform(depth: usize) -> Self {
        WidthRatios {
            gammas: vec![1.0; depth],
            pivot: 0,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.gammas.len() != depth {
            return Err(Error::DimensionMismatch {
                what: "width ratios",
                expected: depth,
                found: self.gammas.len(),
            });
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g >= 1.0)) {
            return Err(Error::InvalidConfig(format!("width ratio {g} < 1")));
        }
        if self.gammas.get(self.pivot) != Some(&1.0) {
            return Err(Error::InvalidConfig(format!(
                "pivot layer {} must have width ratio 1",
                self.pivot
            )));
        }
        Ok(())
    }

    /// Width of hidden layer `layer` (0-based) when the pivot has width `n`:
    /// `ceil(gamma n)` for finite ratios and `n ceil(log2(n + 2))` otherwise.
    pub fn width(&self, layer: usize, n: usize) -> usize {
        let g = self.gammas[layer];
        if g.is_infinite() {
            n * ((n as f64 + 2.0).log2().ceil() as usize)
        } else {
            ((g * n as f64).ceil() as usize).max(1)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RatioRepr {
    Num(f64),
    Text(String),
}

impl Serialize for WidthRatios {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            gammas: Vec<RatioRepr>,
            pivot: usize,
        }
        Repr {
            gammas: self
                .gammas
                .iter()
                .map(|g| {
                    if g.is_infinite() {
                        RatioRepr::Text("inf".into())
                    } else {
                        RatioRepr::Num(*g)
                    }
                })
                .collect(),
            pivot: self.pivot,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for WidthRatios {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            gammas: Vec<RatioRepr>,
            #[serde(default)]
            pivot: usize,
        }
        let r = Repr::deserialize(d)?;
        let gammas = r
            .gammas
            .into_iter()
            .map(|g| match g {
                RatioRepr::Num(v) => Ok(v),
                RatioRepr::Text(t) if t == "inf" => Ok(f64::INFINITY),
                RatioRepr::Text(t) => Err(serde::de::Error::custom(format!(
                    "width ratio must be a number or \"inf\", got `{t}`"
                ))),
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(WidthRatios {
            gammas,
            pivot: r.pivot,
        })
    }
}

/// A fully connected Gaussian network with `depth` hidden layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub n0: usize,
    pub n_out: usize,
    pub cb: f64,
    pub cw: f64,
    pub activation: Activation,
    pub ratios: WidthRatios,
}

impl NetworkConfig {
    /// Depth-`depth` network with unit width ratios.
    pub fn new(depth: usize, n0: usize, n_out: usize, cb: f64, cw: f64, act: Activation) -> Self {
        NetworkConfig {
            depth,
            n0,
            n_out,
            cb,
            cw,
            activation: act,
            ratios: WidthRatios::uniform(depth),
        }
    }

    pub fn with_ratios(mut self, ratios: WidthRatios) -> Self {
        self.ratios = ratios;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        if self.n0 == 0 || self.n_out == 0 {
            return Err(Error::InvalidConfig(
                "input and output dimensions must be positive".into(),
            ));
        }
        if !(self.cb >= 0.0) || !self.cb.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "C_b = {} must be >= 0",
                self.cb
            )));
        }
        if !(self.cw > 0.0) || !self.cw.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "C_W = {} must be > 0",
                self.cw
            )));
        }
        self.ratios.validate(self.depth)
    }
}

/// The finite input family `{x_alpha}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSet {
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl InputSet {
    pub fn new(points: Vec<Vec<f64>>) -> Self {
        let labels = (0..points.len()).map(|i| format!("x{i}")).collect();
        InputSet { points, labels }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self, i: usize) -> String {
        self.labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("x{i}"))
    }

    pub fn validate(&self, n0: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidConfig("input set is empty".into()));
        }
        if !self.labels.is_empty() && self.labels.len() != self.points.len() {
            return Err(Error::DimensionMismatch {
                what: "input labels",
                expected: self.points.len(),
                found: self.labels.len(),
            });
        }
        for p in &self.points {
            if p.len() != n0 {
                return Err(Error::DimensionMismatch {
                    what: "input point length",
                    expected: n0,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(
                    "input point has non-finite entries".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_ratios() {
        let r = WidthRatios {
            gammas: vec![1.0, 2.5, f64::INFINITY],
            pivot: 0,
        };
        r.validate(3).unwrap();
        assert_eq!(r.width(0, 100), 100);
        assert_eq!(r.width(1, 100), 250);
        assert_eq!(r.width(2, 100), 700);
    }

    #[test]
    fn ratios_roundtrip_json() {
        let r: WidthRatios = serde_json::from_str(r#"{"gammas":[1,"inf"],"pivot":0}"#).unwrap();
        assert!(r.gammas[1].is_infinite());
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"gammas":[1.0,"inf"],"pivot":0}"#);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut m = NetworkConfig::new(2, 1, 1, 0.0, 1.0, Activation::Tanh);
        m.validate().unwrap();
        m.ratios.gammas[0] = 2.0;
        assert!(m.validate().is_err());
        let m = NetworkConfig::new(1, 1, 1, -1.0, 1.0, Activation::Tanh);
        assert!(m.validate().is_err());
        assert!(InputSet::new(vec![vec![1.0, 2.0]]).validate(1).is_err());
    }
}
