use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stats::LossVector;

/// A named loss sequence with its parameters.
///
/// Every generator accepts `scale` (default 1) and `offset` (default 0);
/// the emitted loss is `offset + scale * x` for the generator's raw `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    /// `x ~ U[0, 1)` independently.
    IidUniform { scale: f64, offset: f64 },
    /// Per-expert means follow Gaussian random walks with step `drift`;
    /// `x = mean + N(0, 1)`.
    GaussianDrift { scale: f64, offset: f64, drift: f64 },
    /// `x ~ U[0, 1)`, except the expert `(start + sigma * (t - 1)) mod M`
    /// gets `x - delta`: a planted moving-rate strategy.
    AdversarialCyclic { scale: f64, offset: f64, sigma: usize, delta: f64, start: usize },
    /// `x ~ U[0, 1)`, and a planted expert with advantage `delta` that jumps
    /// to a different random expert every `segment` rounds.
    AdversarialSwitching { scale: f64, offset: f64, delta: f64, segment: usize },
    /// `x = value + spread * m`, identical every round.
    Constant { scale: f64, offset: f64, value: f64, spread: f64 },
}

pub const GENERATOR_NAMES: [&str; 5] = [
    "iid-uniform",
    "gaussian-drift",
    "adversarial-cyclic",
    "adversarial-switching",
    "constant",
];

struct Params<'a> {
    name: &'a str,
    map: &'a BTreeMap<String, String>,
}

impl Params<'_> {
    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => {
                let x: f64 = v.trim().parse().map_err(|_| {
                    Error::Config(format!("{}: parameter {key}={v} is not a number", self.name))
                })?;
                if !x.is_finite() {
                    return Err(Error::Config(format!("{}: parameter {key} must be finite", self.name)));
                }
                Ok(x)
            }
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| {
                Error::Config(format!("{}: parameter {key}={v} is not a nonnegative integer", self.name))
            }),
        }
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) && key != "scale" && key != "offset" {
                return Err(Error::Config(format!(
                    "{}: unknown parameter '{key}' (accepted: scale, offset, {})",
                    self.name,
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

impl GeneratorSpec {
    pub fn parse(name: &str, params: &BTreeMap<String, String>) -> Result<Self> {
        let p = Params { name, map: params };
        let scale = p.f64("scale", 1.0)?;
        let offset = p.f64("offset", 0.0)?;
        if scale <= 0.0 {
            return Err(Error::Config(format!("{name}: scale must be positive")));
        }
        let spec = match name {
            "iid-uniform" => {
                p.only(&[])?;
                GeneratorSpec::IidUniform { scale, offset }
            }
            "gaussian-drift" => {
                p.only(&["drift"])?;
                let drift = p.f64("drift", 0.05)?;
                if drift < 0.0 {
                    return Err(Error::Config("gaussian-drift: drift must be nonnegative".into()));
                }
                GeneratorSpec::GaussianDrift { scale, offset, drift }
            }
            "adversarial-cyclic" => {
                p.only(&["sigma", "delta", "start"])?;
                GeneratorSpec::AdversarialCyclic {
                    scale,
                    offset,
                    sigma: p.usize("sigma", 1)?,
                    delta: p.f64("delta", 0.3)?,
                    start: p.usize("start", 0)?,
                }
            }
            "adversarial-switching" => {
                p.only(&["delta", "segment"])?;
                let segment = p.usize("segment", 100)?;
                if segment == 0 {
                    return Err(Error::Config("adversarial-switching: segment must be positive".into()));
                }
                GeneratorSpec::AdversarialSwitching { scale, offset, delta: p.f64("delta", 0.3)?, segment }
            }
            "constant" => {
                p.only(&["value", "spread"])?;
                GeneratorSpec::Constant {
                    scale,
                    offset,
                    value: p.f64("value", 0.5)?,
                    spread: p.f64("spread", 0.0)?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown loss generator '{other}' (expected one of {})",
                    GENERATOR_NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorSpec::IidUniform { .. } => "iid-uniform",
            GeneratorSpec::GaussianDrift { .. } => "gaussian-drift",
            GeneratorSpec::AdversarialCyclic { .. } => "adversarial-cyclic",
            GeneratorSpec::AdversarialSwitching { .. } => "adversarial-switching",
            GeneratorSpec::Constant { .. } => "constant",
        }
    }

    /// Deterministic stream of `M`-expert losses driven by `rng`.
    pub fn stream(&self, experts: usize, rng: ChaCha8Rng) -> Result<LossStream> {
        if experts == 0 {
            return Err(Error::Config("number of experts must be at least 1".into()));
        }
        Ok(LossStream {
            spec: self.clone(),
            experts,
            rng,
            round: 0,
            means: vec![0.0; experts],
            planted: 0,
        })
    }
}

/// Infinite iterator of round-tagged losses.
#[derive(Debug, Clone)]
pub struct LossStream {
    spec: GeneratorSpec,
    experts: usize,
    rng: ChaCha8Rng,
    round: usize,
    means: Vec<f64>,
    planted: usize,
}

impl LossStream {
    fn raw(&mut self) -> Vec<f64> {
        let m = self.experts;
        let t = self.round;
        match self.spec {
            GeneratorSpec::IidUniform { .. } => (0..m).map(|_| self.rng.random::<f64>()).collect(),
            GeneratorSpec::GaussianDrift { drift, .. } => {
                for mean in self.means.iter_mut() {
                    let step: f64 = StandardNormal.sample(&mut self.rng);
                    *mean += drift * step;
                }
                let mut out = Vec::with_capacity(m);
                for k in 0..m {
                    let noise: f64 = StandardNormal.sample(&mut self.rng);
                    out.push(self.means[k] + noise);
                }
                out
            }
            GeneratorSpec::AdversarialCyclic { sigma, delta, start, .. } => {
                let planted = (start + sigma * (t - 1)) % m;
                let mut out: Vec<f64> = (0..m).map(|_| self.rng.random::<f64>()).collect();
                out[planted] -= delta;
                out
            }
            GeneratorSpec::AdversarialSwitching { delta, segment, .. } => {
                if t == 1 {
                    self.planted = self.rng.random_range(0..m);
                } else if m > 1 && (t - 1).is_multiple_of(segment) {
                    let shift = self.rng.random_range(1..m);
                    self.planted = (self.planted + shift) % m;
                }
                let mut out: Vec<f64> = (0..m).map(|_| self.rng.random::<f64>()).collect();
                out[self.planted] -= delta;
                out
            }
            GeneratorSpec::Constant { value, spread, .. } => {
                (0..m).map(|k| value + spread * k as f64).collect()
            }
        }
    }

    fn affine(&self) -> (f64, f64) {
        match self.spec {
            GeneratorSpec::IidUniform { scale, offset }
            | GeneratorSpec::GaussianDrift { scale, offset, .. }
            | GeneratorSpec::AdversarialCyclic { scale, offset, .. }
            | GeneratorSpec::AdversarialSwitching { scale, offset, .. }
            | GeneratorSpec::Constant { scale, offset, .. } => (scale, offset),
        }
    }
}

impl Iterator for LossStream {
    type Item = LossVector;

    fn next(&mut self) -> Option<LossVector> {
        self.round += 1;
        let (scale, offset) = self.affine();
        let values = self.raw().into_iter().map(|x| offset + scale * x).collect();
        Some(LossVector::new(self.round, values).expect("generators emit finite losses"))
    }
}
