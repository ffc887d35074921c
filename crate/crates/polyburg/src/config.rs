//! Experiment configuration: a small TOML schema that names a campaign,
//! describes the random environment, and carries the numeric knobs. Parsing
//! is strict (unknown keys are rejected) and validation reports every
//! offending key at once, so a bad file fails in one round trip.

use crate::env::{EnvironmentSpec, GeneratorKind};
use crate::stats::GridPolicy;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Which campaign to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Cross-module property suite with a pass/fail ledger.
    Validate,
    /// Shape-function table and quadratic fit.
    Shape,
    /// Fluctuation and transversal exponent fits.
    Exponents,
    /// Partition log-ratio sequences along deepening starts.
    Busemann,
    /// Total-variation overlap of deep polymer measures.
    Overlap,
    /// Pullback-attraction table for the kick-forced flow.
    BurgersPullback,
    /// Draw polymer paths and write them out.
    SamplePaths,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Validate => "validate",
            ExperimentKind::Shape => "shape",
            ExperimentKind::Exponents => "exponents",
            ExperimentKind::Busemann => "busemann",
            ExperimentKind::Overlap => "overlap",
            ExperimentKind::BurgersPullback => "burgers-pullback",
            ExperimentKind::SamplePaths => "sample-paths",
        }
    }
}

/// Numeric knobs. Every field is optional in the file; validation decides
/// which ones the chosen campaign actually needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Terminal time for single-horizon campaigns.
    pub n: Option<i64>,
    /// Scale schedule for exponent campaigns.
    pub n_list: Option<Vec<i64>>,
    /// Depth schedule (negative times) for busemann/overlap/pullback runs.
    pub depths: Option<Vec<i64>>,
    /// Single slope.
    pub v: Option<f64>,
    /// Slope list for the shape campaign.
    pub v_list: Option<Vec<f64>>,
    pub replicates: Option<usize>,
    /// Paths per replicate (transversal fit, sample-paths).
    pub paths: Option<usize>,
    /// Anchor times and points for two-anchor campaigns.
    pub n1: Option<i64>,
    pub x1: Option<f64>,
    pub n2: Option<i64>,
    pub x2: Option<f64>,
    /// Perturbed-sequence scale for the busemann campaign.
    pub perturb_scale: Option<f64>,
    /// Basin-check margin for the pullback campaign.
    pub margin: Option<f64>,
    /// Grid overrides.
    pub dx: Option<f64>,
    pub half_width: Option<f64>,
    /// Kernel truncation in units of the step standard deviation.
    pub band_sigmas: Option<f64>,
}

/// A full experiment description. Round-trips through TOML losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub params: Params,
    /// Output directory; defaults to `out-<kind>` next to the working dir.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// A runnable starting point: moderate noise, desk-scale horizons.
    pub fn default_for(kind: ExperimentKind, master_seed: u64) -> ExperimentConfig {
        let mut params = Params::default();
        match kind {
            ExperimentKind::Validate => {}
            ExperimentKind::Shape => {
                params.n = Some(32);
                params.v_list = Some(vec![0.0, 0.25, -0.25, 0.5, -0.5]);
                params.replicates = Some(16);
            }
            ExperimentKind::Exponents => {
                params.n_list = Some(vec![8, 16, 32]);
                params.replicates = Some(32);
                params.paths = Some(32);
                params.v = Some(0.0);
            }
            ExperimentKind::Busemann => {
                params.n1 = Some(0);
                params.x1 = Some(0.5);
                params.n2 = Some(1);
                params.x2 = Some(-0.5);
                params.v = Some(0.0);
                params.depths = Some(vec![-4, -8, -16, -32]);
                params.perturb_scale = Some(1.0);
            }
            ExperimentKind::Overlap => {
                params.n1 = Some(0);
                params.x1 = Some(0.0);
                params.n2 = Some(0);
                params.x2 = Some(1.0);
                params.v = Some(0.0);
                params.depths = Some(vec![-2, -4, -8, -16]);
            }
            ExperimentKind::BurgersPullback => {
                params.n = Some(2);
                params.v = Some(0.25);
                params.depths = Some(vec![-4, -8, -16]);
                params.margin = Some(0.1);
            }
            ExperimentKind::SamplePaths => {
                params.n = Some(16);
                params.v = Some(0.0);
                params.paths = Some(64);
            }
        }
        ExperimentConfig {
            kind,
            environment: EnvironmentSpec {
                kind: GeneratorKind::MovingAverageGaussian,
                amplitude: 0.8,
                correlation_range: 0.5,
                offset: 0.0,
                kappa: 0.5,
                master_seed,
            },
            params,
            output_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialize error: {e}")))
    }

    pub fn read(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Grid policy assembled from the overrides, falling back to defaults.
    pub fn grid_policy(&self) -> GridPolicy {
        GridPolicy {
            dx: self.params.dx.unwrap_or(0.1),
            half_width_override: self.params.half_width,
            ..GridPolicy::default()
        }
    }

    pub fn transfer_options(&self) -> crate::lattice::TransferOptions {
        crate::lattice::TransferOptions {
            band_sigmas: self.params.band_sigmas,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("out-{}", self.kind.name())))
    }

    /// Check every precondition the chosen campaign relies on and report all
    /// violations at once, each naming its key.
    pub fn validate(&self) -> Result<()> {
        let mut faults: Vec<String> = Vec::new();
        if let Err(e) = self.environment.validate() {
            faults.push(format!("environment: {e}"));
        }
        let p = &self.params;
        if let Some(dx) = p.dx {
            if !(dx > 0.0 && dx.is_finite()) {
                faults.push(format!("params.dx: must be a positive number, got {dx}"));
            }
        }
        if let Some(h) = p.half_width {
            if !(h > 0.0 && h.is_finite()) {
                faults.push(format!(
                    "params.half_width: must be a positive number, got {h}"
                ));
            }
        }
        if let Some(b) = p.band_sigmas {
            if !(b > 0.0 && b.is_finite()) {
                faults.push(format!(
                    "params.band_sigmas: must be a positive number, got {b}"
                ));
            }
        }
        let need = |faults: &mut Vec<String>, ok: bool, key: &str, why: &str| {
            if !ok {
                faults.push(format!("params.{key}: {why}"));
            }
        };
        match self.kind {
            ExperimentKind::Validate => {}
            ExperimentKind::Shape => {
                need(
                    &mut faults,
                    p.n.map_or(false, |n| n >= 1),
                    "n",
                    "shape needs a horizon n >= 1",
                );
                need(
                    &mut faults,
                    p.v_list.as_ref().map_or(false, |v| !v.is_empty()),
                    "v_list",
                    "shape needs a nonempty slope list",
                );
                need(
                    &mut faults,
                    p.replicates.map_or(false, |r| r >= 8),
                    "replicates",
                    "shape needs replicates >= 8",
                );
            }
            ExperimentKind::Exponents => {
                let ok = p.n_list.as_ref().map_or(false, |l| {
                    l.len() >= 2 && l[0] >= 1 && l.windows(2).all(|w| w[0] < w[1])
                });
                need(
                    &mut faults,
                    ok,
                    "n_list",
                    "exponents need a strictly increasing scale list with n >= 1",
                );
                need(
                    &mut faults,
                    p.replicates.map_or(false, |r| r >= 32),
                    "replicates",
                    "exponents need replicates >= 32",
                );
                need(
                    &mut faults,
                    p.paths.map_or(false, |s| s >= 10),
                    "paths",
                    "the transversal fit needs at least 10 paths per replicate",
                );
            }
            ExperimentKind::Busemann | ExperimentKind::Overlap => {
                for (key, there) in [
                    ("n1", p.n1.is_some()),
                    ("x1", p.x1.is_some()),
                    ("n2", p.n2.is_some()),
                    ("x2", p.x2.is_some()),
                    ("v", p.v.is_some()),
                ] {
                    need(&mut faults, there, key, "two-anchor campaigns need this key");
                }
                let anchor_min = p.n1.unwrap_or(0).min(p.n2.unwrap_or(0));
                let ok = p.depths.as_ref().map_or(false, |d| {
                    !d.is_empty() && d.iter().all(|&m| m < anchor_min && m < 0)
                });
                need(
                    &mut faults,
                    ok,
                    "depths",
                    "needs a nonempty list of negative times before both anchors",
                );
            }
            ExperimentKind::BurgersPullback => {
                need(
                    &mut faults,
                    p.n.map_or(false, |n| n >= 1),
                    "n",
                    "pullback needs an observation time n >= 1",
                );
                need(&mut faults, p.v.is_some(), "v", "pullback needs a mean slope");
                let n = p.n.unwrap_or(1);
                let ok = p
                    .depths
                    .as_ref()
                    .map_or(false, |d| !d.is_empty() && d.iter().all(|&m| m < n - 2));
                need(
                    &mut faults,
                    ok,
                    "depths",
                    "needs a nonempty list of start times with m < n - 2",
                );
            }
            ExperimentKind::SamplePaths => {
                need(
                    &mut faults,
                    p.n.map_or(false, |n| n >= 1),
                    "n",
                    "sampling needs a horizon n >= 1",
                );
                need(
                    &mut faults,
                    p.paths.map_or(false, |s| s >= 1),
                    "paths",
                    "sampling needs at least one path",
                );
                need(&mut faults, p.v.is_some(), "v", "sampling needs a slope");
            }
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(faults.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_kind() {
        for kind in [
            ExperimentKind::Validate,
            ExperimentKind::Shape,
            ExperimentKind::Exponents,
            ExperimentKind::Busemann,
            ExperimentKind::Overlap,
            ExperimentKind::BurgersPullback,
            ExperimentKind::SamplePaths,
        ] {
            let c = ExperimentConfig::default_for(kind, 7);
            c.validate()
                .unwrap_or_else(|e| panic!("default {} config invalid: {e}", kind.name()));
        }
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default_for(ExperimentKind::Busemann, 99);
        c.params.dx = Some(0.05);
        c.params.band_sigmas = Some(9.0);
        c.output_dir = Some(PathBuf::from("results/busemann"));
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c, back);
        // And the serialization itself is stable.
        assert_eq!(text, back.to_toml_string().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
kind = "shape"
typo_key = 1

[environment]
kind = "moving-average-gaussian"
amplitude = 0.5
correlation_range = 0.5
master_seed = 1
"#;
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let mut c = ExperimentConfig::default_for(ExperimentKind::Shape, 1);
        c.params.dx = Some(-0.1);
        c.params.replicates = Some(2);
        c.params.v_list = Some(vec![]);
        let msg = c.validate().unwrap_err().to_string();
        for key in ["params.dx", "params.replicates", "params.v_list"] {
            assert!(msg.contains(key), "missing {key} in: {msg}");
        }
    }

    #[test]
    fn missing_campaign_parameters_are_named() {
        let mut c = ExperimentConfig::default_for(ExperimentKind::Busemann, 1);
        c.params.depths = Some(vec![-4, 5]);
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("params.depths"), "got: {msg}");
    }

    #[test]
    fn grid_policy_and_options_reflect_overrides() {
        let mut c = ExperimentConfig::default_for(ExperimentKind::Shape, 1);
        c.params.dx = Some(0.2);
        c.params.half_width = Some(17.0);
        c.params.band_sigmas = Some(6.0);
        let policy = c.grid_policy();
        assert_eq!(policy.dx, 0.2);
        assert_eq!(policy.half_width_override, Some(17.0));
        assert_eq!(c.transfer_options().band_sigmas, Some(6.0));
        assert_eq!(
            c.output_dir(),
            PathBuf::from("out-shape"),
            "default output directory follows the kind"
        );
    }
}
