use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

use super::generators::GeneratorSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaMode {
    /// `gamma = sqrt(W_T / (2(e-2)))` from the kernel's declared budget.
    Auto,
    Explicit(f64),
}

/// Post-processing of generated losses: `l' = scale * (l + c_t)` with
/// `c_t ~ U[-shift, shift]` drawn from its own seeded stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub shift: f64,
}

impl Default for Transform {
    fn default() -> Self {
        Self { scale: 1.0, shift: 0.0 }
    }
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.shift == 0.0
    }
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experts: usize,
    pub rounds: usize,
    pub kernel: KernelSpec,
    pub gamma: GammaMode,
    pub generator: GeneratorSpec,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub debug_probs: bool,
    pub transform: Transform,
}

/// Keys accepted in config files; each is also a CLI flag of the same name.
pub const CONFIG_KEYS: [&str; 12] = [
    "experts",
    "rounds",
    "kernel",
    "kernel-param",
    "gamma",
    "loss-gen",
    "loss-param",
    "seed",
    "out",
    "debug-probs",
    "transform-scale",
    "transform-shift",
];

/// Collects flat `key = value` settings; later settings override earlier
/// ones. `kernel-param` and `loss-param` take `name=value` and accumulate.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    values: BTreeMap<String, String>,
    kernel_params: BTreeMap<String, String>,
    loss_params: BTreeMap<String, String>,
}

fn split_param(raw: &str) -> Result<(String, String)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("parameter '{raw}' is not of the form name=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("parameter '{raw}' has an empty name")));
    }
    Ok((k.replace('-', "_"), v.trim().to_string()))
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut builder = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1))
            })?;
            builder.set(k.trim(), v.trim())?;
        }
        Ok(builder)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<&mut Self> {
        match key {
            "kernel-param" => {
                let (k, v) = split_param(value)?;
                self.kernel_params.insert(k, v);
            }
            "loss-param" => {
                let (k, v) = split_param(value)?;
                self.loss_params.insert(k, v);
            }
            k if CONFIG_KEYS.contains(&k) => {
                self.values.insert(k.to_string(), value.to_string());
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown key '{other}' (accepted: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(self)
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let experts: usize = self.get("experts", 4)?;
        let rounds: usize = self.get("rounds", 1000)?;
        if experts == 0 {
            return Err(Error::Config("experts must be at least 1".into()));
        }
        if rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }

        let kernel_name = self.values.get("kernel").map(String::as_str).unwrap_or("fixed");
        let kernel = parse_kernel(kernel_name, &self.kernel_params)?;

        let gamma = match self.values.get("gamma").map(|s| s.trim()) {
            None | Some("auto") => GammaMode::Auto,
            Some(raw) => {
                let g: f64 = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("gamma: expected 'auto' or a number, got '{raw}'")))?;
                crate::stats::validate_gamma(g)?;
                GammaMode::Explicit(g)
            }
        };

        let loss_gen = self.values.get("loss-gen").map(String::as_str).unwrap_or("iid-uniform");
        let generator = GeneratorSpec::parse(loss_gen, &self.loss_params)?;

        let debug_probs = match self.values.get("debug-probs").map(String::as_str) {
            None | Some("false") | Some("0") | Some("no") => false,
            Some("true") | Some("1") | Some("yes") | Some("") => true,
            Some(other) => return Err(Error::Config(format!("debug-probs: cannot parse '{other}'"))),
        };

        let transform = Transform {
            scale: self.get("transform-scale", 1.0)?,
            shift: self.get("transform-shift", 0.0)?,
        };
        if !(transform.scale.is_finite() && transform.scale > 0.0) {
            return Err(Error::Config("transform-scale must be positive".into()));
        }
        if !(transform.shift.is_finite() && transform.shift >= 0.0) {
            return Err(Error::Config("transform-shift must be nonnegative".into()));
        }

        let config = ExperimentConfig {
            experts,
            rounds,
            kernel,
            gamma,
            generator,
            seed: self.get("seed", 0)?,
            out: self.values.get("out").map(PathBuf::from),
            debug_probs,
            transform,
        };
        // catches e.g. a switching kernel with one expert
        config.kernel.build(experts)?;
        Ok(config)
    }
}

fn parse_kernel(name: &str, params: &BTreeMap<String, String>) -> Result<KernelSpec> {
    let reject_extra = |allowed: &[&str]| -> Result<()> {
        match params.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("kernel {name}: unknown parameter '{k}'"))),
            None => Ok(()),
        }
    };
    match name {
        "fixed" => {
            reject_extra(&[])?;
            Ok(KernelSpec::Fixed)
        }
        "cyclic" => {
            reject_extra(&[])?;
            Ok(KernelSpec::Cyclic)
        }
        "switching" => {
            reject_extra(&["switch_weight"])?;
            let raw = params.get("switch_weight").map(String::as_str).unwrap_or("0.01");
            let switch_weight: f64 = raw
                .parse()
                .map_err(|_| Error::Config(format!("switch_weight: cannot parse '{raw}'")))?;
            Ok(KernelSpec::Switching { switch_weight })
        }
        other => Err(Error::Config(format!(
            "unknown kernel '{other}' (expected fixed, cyclic or switching)"
        ))),
    }
}

impl ExperimentConfig {
    /// Flat `key = value` rendering accepted by [`ConfigBuilder::parse_str`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("experts", self.experts.to_string());
        line("rounds", self.rounds.to_string());
        line("kernel", self.kernel.name().to_string());
        if let KernelSpec::Switching { switch_weight } = self.kernel {
            line("kernel-param", format!("switch_weight={switch_weight}"));
        }
        line(
            "gamma",
            match self.gamma {
                GammaMode::Auto => "auto".into(),
                GammaMode::Explicit(g) => g.to_string(),
            },
        );
        line("loss-gen", self.generator.name().to_string());
        for (k, v) in generator_params(&self.generator) {
            line("loss-param", format!("{k}={v}"));
        }
        line("seed", self.seed.to_string());
        if let Some(out) = &self.out {
            line("out", out.display().to_string());
        }
        line("debug-probs", self.debug_probs.to_string());
        line("transform-scale", self.transform.scale.to_string());
        line("transform-shift", self.transform.shift.to_string());
        out
    }
}

fn generator_params(spec: &GeneratorSpec) -> Vec<(&'static str, String)> {
    match *spec {
        GeneratorSpec::IidUniform { scale, offset } => {
            vec![("scale", scale.to_string()), ("offset", offset.to_string())]
        }
        GeneratorSpec::GaussianDrift { scale, offset, drift } => vec![
            ("scale", scale.to_string()),
            ("offset", offset.to_string()),
            ("drift", drift.to_string()),
        ],
        GeneratorSpec::AdversarialCyclic { scale, offset, sigma, delta, start } => vec![
            ("scale", scale.to_string()),
            ("offset", offset.to_string()),
            ("sigma", sigma.to_string()),
            ("delta", delta.to_string()),
            ("start", start.to_string()),
        ],
        GeneratorSpec::AdversarialSwitching { scale, offset, delta, segment } => vec![
            ("scale", scale.to_string()),
            ("offset", offset.to_string()),
            ("delta", delta.to_string()),
            ("segment", segment.to_string()),
        ],
        GeneratorSpec::Constant { scale, offset, value, spread } => vec![
            ("scale", scale.to_string()),
            ("offset", offset.to_string()),
            ("value", value.to_string()),
            ("spread", spread.to_string()),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ConfigBuilder::new().build().unwrap();
        assert_eq!(c.experts, 4);
        assert_eq!(c.rounds, 1000);
        assert_eq!(c.kernel, KernelSpec::Fixed);
        assert_eq!(c.gamma, GammaMode::Auto);
        assert_eq!(c.generator.name(), "iid-uniform");
        assert!(c.transform.is_identity());
    }

    #[test]
    fn parses_file_and_overrides() {
        let text = "
            # moving-rate run
            experts = 8
            rounds = 500
            kernel = switching
            kernel-param = switch_weight=0.05
            gamma = 1.5
            loss-gen = adversarial-cyclic
            loss-param = delta=0.4
            loss-param = sigma=3
            seed = 42
        ";
        let mut b = ConfigBuilder::parse_str(text).unwrap();
        b.set("rounds", "50").unwrap();
        b.set("loss-param", "delta=0.1").unwrap();
        let c = b.build().unwrap();
        assert_eq!(c.experts, 8);
        assert_eq!(c.rounds, 50);
        assert_eq!(c.kernel, KernelSpec::Switching { switch_weight: 0.05 });
        assert_eq!(c.gamma, GammaMode::Explicit(1.5));
        assert_eq!(c.seed, 42);
        match c.generator {
            GeneratorSpec::AdversarialCyclic { delta, sigma, .. } => {
                assert_eq!(delta, 0.1);
                assert_eq!(sigma, 3);
            }
            ref g => panic!("wrong generator {g:?}"),
        }
    }

    #[test]
    fn round_trips_through_text() {
        let mut b = ConfigBuilder::new();
        b.set("kernel", "cyclic").unwrap();
        b.set("loss-gen", "gaussian-drift").unwrap();
        b.set("loss-param", "drift=0.2").unwrap();
        b.set("transform-shift", "3").unwrap();
        let c = b.build().unwrap();
        let again = ConfigBuilder::parse_str(&c.to_config_string()).unwrap().build().unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |k: &str, v: &str| {
            let mut b = ConfigBuilder::new();
            b.set(k, v).and_then(|b| b.build()).is_err()
        };
        assert!(bad("experts", "0"));
        assert!(bad("rounds", "-1"));
        assert!(bad("kernel", "markov"));
        assert!(bad("gamma", "0"));
        assert!(bad("gamma", "fast"));
        assert!(bad("loss-gen", "bogus"));
        assert!(bad("colour", "red"));
        assert!(bad("kernel-param", "novalue"));
        assert!(bad("transform-scale", "-2"));
        assert!(bad("debug-probs", "maybe"));
        let mut b = ConfigBuilder::new();
        b.set("kernel", "switching").unwrap().set("experts", "1").unwrap();
        assert!(b.build().is_err());
        let mut b = ConfigBuilder::new();
        b.set("kernel", "fixed").unwrap().set("kernel-param", "switch_weight=0.1").unwrap();
        assert!(b.build().is_err());
        assert!(ConfigBuilder::parse_str("experts 3").is_err());
    }
}
