//! Run configuration file format.

use crate::error::{CliError, CliResult};
use qnoise_core::autodiff::MlpConfig;
use qnoise_core::compose::FlowSpec;
use qnoise_core::datasets::ToyTarget;
use qnoise_core::quantile::{AnalyticQuantile, ProductQuantile, RqsConfig};
use qnoise_core::sampling::OdeConfig;
use qnoise_core::training::{Latent, Noise, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LatentConfig {
    Analytic { quantile: AnalyticQuantile },
    Rqs {
        #[serde(default)]
        spline: RqsConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding")]
    pub time_embedding: usize,
}

fn default_embedding() -> usize {
    64
}

impl NetworkConfig {
    /// 3x64 without time embedding for the funnel, 4x256 otherwise.
    pub fn for_target(target: &ToyTarget) -> Self {
        match target {
            ToyTarget::Funnel { .. } => Self { hidden: vec![64; 3], time_embedding: 0 },
            _ => Self { hidden: vec![256; 4], time_embedding: 64 },
        }
    }
}

fn default_log_every() -> u64 {
    100
}

fn default_zscore_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: ToyTarget,
    /// Process-driven flow; mutually exclusive with `latent`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<FlowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub sampling: OdeConfig,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Write a checkpoint every this many joint steps (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Training-set draws used to fit the z-score statistics.
    #[serde(default = "default_zscore_samples")]
    pub zscore_samples: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        Ok(cfg.resolved()?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fills dataset-dependent defaults and validates the whole run.
    pub fn resolved(mut self) -> CliResult<Self> {
        self.dataset.validate()?;
        self.training.validate()?;
        self.sampling.validate()?;
        if self.network.is_none() {
            self.network = Some(NetworkConfig::for_target(&self.dataset));
        }
        match (&self.process, &self.latent) {
            (Some(_), Some(_)) => return Err(CliError::config("`process` and `latent` are mutually exclusive")),
            (None, None) => self.latent = Some(LatentConfig::Analytic { quantile: AnalyticQuantile::gaussian() }),
            _ => {}
        }
        if self.log_every == 0 {
            return Err(CliError::config("log_every must be positive"));
        }
        if let Some(LatentConfig::Analytic { quantile }) = &self.latent {
            quantile.validate()?;
        }
        if let Some(LatentConfig::Rqs { spline }) = &self.latent {
            spline.validate()?;
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialise config: {e}")))
    }

    pub fn noise(&self) -> CliResult<Noise> {
        let d = self.dataset.dim();
        if let Some(spec) = &self.process {
            return Ok(Noise::process(*spec, d)?);
        }
        Ok(match self.latent.as_ref().expect("resolved config has a latent") {
            LatentConfig::Analytic { quantile } => Noise::Quantile(Latent::Analytic { dim: d, quantile: *quantile }),
            LatentConfig::Rqs { spline } => Noise::Quantile(Latent::Learned { quantile: ProductQuantile::new(d, *spline)? }),
        })
    }

    pub fn mlp(&self) -> MlpConfig {
        let n = self.network.clone().unwrap_or_else(|| NetworkConfig::for_target(&self.dataset));
        MlpConfig::velocity(self.dataset.dim(), n.hidden, n.time_embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GMM: &str = r#"
seed = 3
output = "out"
[dataset]
name = "grid-gmm"
[latent]
kind = "rqs"
[training]
steps = 10
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let c = RunConfig::from_toml(GMM).unwrap();
        assert_eq!(c.network.as_ref().unwrap().hidden, vec![256; 4]);
        assert_eq!(c.training.batch, 128);
        assert!(matches!(c.latent, Some(LatentConfig::Rqs { .. })));
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml(&format!("{GMM}bogus = 1\n")).is_err());
        let nested = GMM.replace("steps = 10", "steps = 10\nwhatever = 2");
        assert!(RunConfig::from_toml(&nested).is_err());
        let latent = GMM.replace("kind = \"rqs\"", "kind = \"rqs\"\nextra = 1");
        assert!(RunConfig::from_toml(&latent).is_err());
    }

    #[test]
    fn process_and_latent_exclusive() {
        let both = format!("{GMM}[process]\nprocess = {{ family = \"kac\", a = 9.0, c = 3.0 }}\n");
        assert!(RunConfig::from_toml(&both).is_err());
        let only = both.replace("[latent]\nkind = \"rqs\"\n", "");
        let c = RunConfig::from_toml(&only).unwrap();
        assert!(c.process.is_some() && c.latent.is_none());
        assert!(c.to_toml().unwrap().contains("kac"));
    }

    #[test]
    fn analytic_latent_block() {
        let text = GMM.replace("kind = \"rqs\"", "kind = \"analytic\"\nquantile = { family = \"student-t\", nu = 20.0, scale = 4.0 }");
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c.latent, Some(LatentConfig::Analytic { quantile: AnalyticQuantile::student_t_preset() }));
    }
}
