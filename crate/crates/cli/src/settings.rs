//! Flags and the optional TOML config file share one set of keys; a flag
//! given on the command line overrides the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Model family: geometric or poisson.
    #[arg(long, global = true)]
    pub family: Option<String>,

    #[arg(long, global = true, allow_negative_numbers = true)]
    pub beta: Option<f64>,

    #[arg(long, global = true, allow_negative_numbers = true)]
    pub gamma: Option<f64>,

    /// Count table (`x,count` lines).
    #[arg(long, global = true, conflicts_with = "builtin")]
    pub data: Option<PathBuf>,

    /// Embedded dataset: drosophila_one, drosophila_control, drosophila_treated.
    #[arg(long, global = true)]
    pub builtin: Option<String>,

    /// Second sample for two-sample commands.
    #[arg(long, global = true, conflicts_with = "builtin2")]
    pub data2: Option<PathBuf>,

    #[arg(long, global = true)]
    pub builtin2: Option<String>,

    /// Cells removed from the first sample, e.g. `6,7`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub drop_cells: Option<Vec<u64>>,

    /// Cells removed from the second sample.
    #[arg(long, global = true, value_delimiter = ',')]
    pub drop_cells2: Option<Vec<u64>>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Monte Carlo draws for chi-square mixture p-values and quantiles.
    #[arg(long, global = true)]
    pub draws: Option<usize>,

    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Directional p-value convention: signed-root or upper-tail.
    #[arg(long, global = true)]
    pub convention: Option<String>,

    /// Parameter value for `divergence` and `simulate`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub theta: Option<f64>,

    /// First-argument model parameter for `divergence`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub theta_g: Option<f64>,

    /// Null parameter for `test-one`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub theta0: Option<f64>,

    /// Grid values of beta, e.g. `0,0.1,0.25`.
    #[arg(long, global = true, allow_hyphen_values = true, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,

    #[arg(long, global = true, allow_hyphen_values = true, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,

    /// Grid task: fit or test-two-signed.
    #[arg(long, global = true)]
    pub task: Option<String>,

    /// Sample size for `simulate`.
    #[arg(long, global = true)]
    pub n: Option<usize>,

    #[arg(long, global = true)]
    pub replicates: Option<usize>,

    /// For `fit`: report expected counts for cells 0..K-1 plus the tail.
    #[arg(long, global = true)]
    pub predicted: Option<u64>,
}

macro_rules! prefer {
    ($flags:ident, $file:ident, $($field:ident),* $(,)?) => {
        Settings { $($field: $flags.$field.or($file.$field)),* }
    };
}

impl Settings {
    /// Field-wise `self` over `file`.
    pub fn over(self, file: Settings) -> Settings {
        let flags = self;
        prefer!(
            flags,
            file,
            family,
            beta,
            gamma,
            data,
            builtin,
            data2,
            builtin2,
            drop_cells,
            drop_cells2,
            seed,
            draws,
            alpha,
            out,
            format,
            convention,
            theta,
            theta_g,
            theta0,
            betas,
            gammas,
            task,
            n,
            replicates,
            predicted,
        )
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Settings> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut settings: Settings =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative data paths in a config file are taken from its directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut settings.data, &mut settings.data2]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(settings)
    }

    pub fn family(&self) -> &str {
        self.family.as_deref().unwrap_or("poisson")
    }

    pub fn beta(&self) -> anyhow::Result<f64> {
        self.beta.context("--beta is required")
    }

    pub fn gamma(&self) -> anyhow::Result<f64> {
        self.gamma.context("--gamma is required")
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.05)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    pub fn require<T: Clone>(value: &Option<T>, flag: &str) -> anyhow::Result<T> {
        match value {
            Some(v) => Ok(v.clone()),
            None => bail!("--{flag} is required"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: Settings = toml::from_str(
            "family = \"geometric\"\nbeta = 0.5\ngamma = 0.1\nbetas = [0.0, 1.0]\nformat = \"json\"",
        )
        .unwrap();
        let flags = Settings {
            beta: Some(0.2),
            ..Settings::default()
        };
        let merged = flags.over(file);
        assert_eq!(merged.beta, Some(0.2));
        assert_eq!(merged.gamma, Some(0.1));
        assert_eq!(merged.family(), "geometric");
        assert_eq!(merged.betas, Some(vec![0.0, 1.0]));
        assert_eq!(merged.format(), Format::Json);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }
}
