//! Run configuration: one TOML document with `[data]`, `[model]`, `[train]`,
//! `[geometry]`, `[tda]` and `[eval]` sections. Every field has a default
//! and unknown keys are rejected.

use std::path::Path;

use chartflow::atlas::TrainConfig;
use chartflow::eval::EvalConfig;
use chartflow::flows::FlowConfig;
use chartflow::geo_multi::{ExpScheme, MultiExpConfig};
use chartflow::geo_single::LogMapConfig;
use chartflow::manifolds::{DistributionSpec, ManifoldSpec};
use chartflow::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub geometry: GeometrySection,
    pub tda: TdaSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            threads: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            geometry: GeometrySection::default(),
            tda: TdaSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifold: ManifoldSpec,
    pub distribution: DistributionSpec,
    pub n: usize,
    pub seed: u64,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifold: ManifoldSpec::default(),
            distribution: DistributionSpec::default(),
            n: 12000,
            seed: 0,
            n_val: 1000,
            n_test: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub charts: usize,
    pub g_layers: usize,
    pub h_layers: usize,
    pub hidden: usize,
    pub s_max: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = FlowConfig::default();
        ModelSection {
            charts: 4,
            g_layers: f.g_layers,
            h_layers: f.h_layers,
            hidden: f.hidden,
            s_max: f.s_max,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub scheme: ExpScheme,
    pub exp: MultiExpConfig,
    pub log: LogMapConfig,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let e = EvalConfig::default();
        GeometrySection {
            scheme: e.exp_scheme,
            exp: e.exp,
            log: e.log,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdaSection {
    pub max_dim: usize,
    /// Truncation radius; absent means the enclosing radius.
    pub max_radius: Option<f64>,
}

impl Default for TdaSection {
    fn default() -> Self {
        TdaSection {
            max_dim: 1,
            max_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub subsamples: usize,
    pub subsample_size: usize,
    pub exp_points: usize,
    pub dist_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            seed: e.seed,
            subsamples: e.subsamples,
            subsample_size: e.subsample_size,
            exp_points: e.exp_points,
            dist_points: e.dist_points,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Self::parse(&text)?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.manifold.validate()?;
        self.data.distribution.validate(&self.data.manifold)?;
        if self.data.n == 0 {
            return Err(Error::Config("data.n must be >= 1".into()));
        }
        if self.model.charts == 0 {
            return Err(Error::Config("model.charts must be >= 1".into()));
        }
        self.train.validate()?;
        self.geometry.exp.validate()?;
        self.geometry.log.validate()?;
        if !(1..=2).contains(&self.tda.max_dim) {
            return Err(Error::Config("tda.max_dim must be 1 or 2".into()));
        }
        self.eval_config().validate()
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            latent_dim: self.data.manifold.latent_dim(),
            ambient_dim: self.data.manifold.ambient_dim(),
            g_layers: self.model.g_layers,
            h_layers: self.model.h_layers,
            hidden: self.model.hidden,
            s_max: self.model.s_max,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.eval.seed,
            subsamples: self.eval.subsamples,
            subsample_size: self.eval.subsample_size,
            exp_points: self.eval.exp_points,
            dist_points: self.eval.dist_points,
            exp_scheme: self.geometry.scheme,
            exp: self.geometry.exp,
            log: self.geometry.log.clone(),
        }
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[data]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[nosuchsection]\n").is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "threads = 1\n[data]\nn = 50\nmanifold = { kind = \"torus\", major = 3.0, minor = 1.0 }\n\
             distribution = { kind = \"bvm_mixture\", means = [[0.0, 0.0]], concentration = 2.0, correlation = 0.0 }\n\
             [train]\nmode = \"single\"\n[geometry]\nscheme = \"hard_switch\"\n[tda]\nmax_radius = 2.5\n",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.data.n, 50);
        assert_eq!(c.flow_config().ambient_dim, 3);
        assert_eq!(c.eval_config().exp_scheme, ExpScheme::HardSwitch);
        assert_eq!(c.tda.max_radius, Some(2.5));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c =
            RunConfig::parse("[data]\nmanifold = { kind = \"sphere\", radius = -1.0 }\n").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse("[tda]\nmax_dim = 3\n").unwrap();
        assert!(c.validate().is_err());
    }
}
