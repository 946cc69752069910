//! Run configuration: TOML file with sections, command-line overrides,
//! validation and a canonical digest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{InitScheme, Integrator, Schedule};
use crate::error::{Error, Result};
use crate::lattice::TorusGrid;

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "SIGMAFLOW_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FreeCheck,
    Dynamics,
    #[serde(rename = "meanfield-1d")]
    Meanfield1d,
    #[serde(rename = "meanfield-2d")]
    Meanfield2d,
    Coupling,
    GffConvergence,
    BubbleValidation,
    Eo4,
    DsCheck,
    MuSolver,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::FreeCheck,
        Experiment::Dynamics,
        Experiment::Meanfield1d,
        Experiment::Meanfield2d,
        Experiment::Coupling,
        Experiment::GffConvergence,
        Experiment::BubbleValidation,
        Experiment::Eo4,
        Experiment::DsCheck,
        Experiment::MuSolver,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::FreeCheck => "free-check",
            Experiment::Dynamics => "dynamics",
            Experiment::Meanfield1d => "meanfield-1d",
            Experiment::Meanfield2d => "meanfield-2d",
            Experiment::Coupling => "coupling",
            Experiment::GffConvergence => "gff-convergence",
            Experiment::BubbleValidation => "bubble-validation",
            Experiment::Eo4 => "eo4",
            Experiment::DsCheck => "ds-check",
            Experiment::MuSolver => "mu-solver",
        }
    }

    /// Whether the experiment integrates the cubic drift.
    fn needs_cubic(&self) -> bool {
        matches!(
            self,
            Experiment::Dynamics
                | Experiment::Coupling
                | Experiment::GffConvergence
                | Experiment::BubbleValidation
                | Experiment::Eo4
                | Experiment::DsCheck
        )
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: f64,
    #[serde(default)]
    pub lambda: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { d: 2, n: 16, k: 3, m: 1.0, lambda: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// component count of a single N-system run
    #[serde(rename = "N")]
    pub n: usize,
    /// scaling axis for N-studies
    #[serde(rename = "N_values")]
    pub n_values: Vec<usize>,
    /// mean-field copy count
    #[serde(rename = "M")]
    pub m: usize,
    pub replicas: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { n: 1, n_values: vec![4, 16, 64, 256], m: 256, replicas: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub dt: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub thinning: u64,
    /// trajectory records are written every this many steps
    pub record_every: u64,
    pub batches: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { dt: 1e-3, steps: 1000, burn_in: 0, thinning: 1, record_every: 100, batches: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlagsSection {
    pub homogeneity: bool,
    pub dpd: bool,
    pub init: InitScheme,
    /// replaces the Wick constant `a` (negative controls use 0)
    pub counterterm_a: Option<f64>,
    /// replaces the `N+2` multiplier of the mass counterterm
    pub wick_multiplier: Option<f64>,
    /// also run the unrenormalized negative control where applicable
    pub negative_control: bool,
    /// combine runs at `dt` and `dt/2` by Richardson extrapolation
    pub extrapolate: bool,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    /// rayon worker count, 0 for the library default
    pub workers: usize,
}

impl Default for FlagsSection {
    fn default() -> Self {
        Self {
            homogeneity: true,
            dpd: false,
            init: InitScheme::StationaryFree,
            counterterm_a: None,
            wick_multiplier: None,
            negative_control: true,
            extrapolate: false,
            checkpoint_every: 0,
            resume: None,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub flags: FlagsSection,
}

const SECTIONS: [&str; 4] = ["grid", "ensemble", "time", "flags"];

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let grid = TorusGrid::new(g.d, g.n, g.k, g.m, g.lambda)?;
        if self.experiment.needs_cubic() && g.lambda > 0.0 {
            grid.require_alias_free_cubic()?;
        }
        let t = &self.time;
        if !(t.dt > 0.0) {
            return Err(Error::Config(format!("time.dt = {} must be positive", t.dt)));
        }
        if t.thinning == 0 {
            return Err(Error::Config("time.thinning must be at least 1".into()));
        }
        if self.ensemble.n == 0 {
            return Err(Error::Config("ensemble.N must be at least 1".into()));
        }
        if self.ensemble.replicas == 0 {
            return Err(Error::Config("ensemble.replicas must be at least 1".into()));
        }
        if self.ensemble.n_values.windows(2).any(|w| w[1] <= w[0]) || self.ensemble.n_values.contains(&0) {
            return Err(Error::Config("ensemble.N_values must be positive and strictly increasing".into()));
        }
        match self.experiment {
            Experiment::FreeCheck if g.lambda != 0.0 => {
                Err(Error::Config(format!("free-check needs lambda = 0, got {}", g.lambda)))
            }
            Experiment::Meanfield1d if g.d != 1 => Err(Error::Config(format!("meanfield-1d needs d = 1, got {}", g.d))),
            Experiment::Meanfield2d if g.d != 2 => Err(Error::Config(format!("meanfield-2d needs d = 2, got {}", g.d))),
            Experiment::Meanfield1d | Experiment::Meanfield2d if self.ensemble.m < 2 => {
                Err(Error::Config("mean-field runs need ensemble.M >= 2".into()))
            }
            Experiment::Coupling | Experiment::GffConvergence if self.ensemble.n_values.len() < 3 => {
                Err(Error::Config("scaling studies need at least 3 entries in ensemble.N_values".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn grid(&self) -> Result<std::sync::Arc<TorusGrid>> {
        let g = &self.grid;
        TorusGrid::new(g.d, g.n, g.k, g.m, g.lambda)
    }

    pub fn schedule(&self) -> Schedule {
        let t = &self.time;
        Schedule { dt: t.dt, steps: t.steps, burn_in: t.burn_in, thinning: t.thinning }
    }

    pub fn integrator(&self) -> Integrator {
        if self.flags.dpd {
            Integrator::Dpd
        } else {
            Integrator::Direct
        }
    }

    /// Canonical JSON echo of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical echo. The output
    /// directory, worker count and resume path do not affect results and
    /// are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.flags.workers = 0;
        c.flags.resume = None;
        let digest = Sha256::digest(c.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Config dir, else `$SIGMAFLOW_OUT`, else `./sigmaflow-out`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("sigmaflow-out"))
    }
}

/// Parses `--key=value` style arguments (leading dashes optional).
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg.trim_start_matches('-');
    let (k, v) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{arg}' is not of the form --key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn literal(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets `key` (bare or `section.key`) in the raw table. Bare keys resolve
/// to the top level or the unique section that knows them.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let v = literal(value);
    if let Some((section, name)) = key.split_once('.') {
        if !SECTIONS.contains(&section) {
            return Err(Error::Config(format!("unknown config section '{section}'")));
        }
        let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let sub = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{section}' is not a section")))?;
        sub.insert(name.to_string(), v);
        return Ok(());
    }
    if ["experiment", "seed", "output_dir"].contains(&key) {
        table.insert(key.to_string(), v);
        return Ok(());
    }
    let owner = SECTIONS
        .iter()
        .find(|s| section_keys(s).contains(&key))
        .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    let entry = table.entry(owner.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    entry
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{owner}' is not a section")))?
        .insert(key.to_string(), v);
    Ok(())
}

fn section_keys(section: &str) -> &'static [&'static str] {
    match section {
        "grid" => &["d", "n", "K", "m", "lambda"],
        "ensemble" => &["N", "N_values", "M", "replicas"],
        "time" => &["dt", "steps", "burn_in", "thinning", "record_every", "batches"],
        "flags" => &[
            "homogeneity",
            "dpd",
            "init",
            "counterterm_a",
            "wick_multiplier",
            "negative_control",
            "extrapolate",
            "checkpoint_every",
            "resume",
            "workers",
        ],
        _ => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "dynamics"
seed = 7

[grid]
d = 2
n = 16
K = 3
m = 2.0

[ensemble]
N = 4

[time]
dt = 0.01
steps = 10
"#;

    #[test]
    fn minimal_file_fills_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(c.grid.lambda, 0.0);
        assert_eq!(c.time.thinning, 1);
        assert!(c.flags.homogeneity);
        assert!(c.canonical_json().contains("\"experiment\":\"dynamics\""));
    }

    #[test]
    fn overrides_take_precedence() {
        let o = vec![parse_override("--m=5").unwrap(), parse_override("--flags.dpd=true").unwrap()];
        let c = RunConfig::from_toml_str(MINIMAL, &o).unwrap();
        assert_eq!(c.grid.m, 5.0);
        assert!(c.flags.dpd);
        assert!(c.canonical_json().contains("\"m\":5.0"));
        let o = vec![parse_override("--init=zero").unwrap()];
        assert_eq!(RunConfig::from_toml_str(MINIMAL, &o).unwrap().flags.init, InitScheme::Zero);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[flags]\nfancy = 1\n");
        assert!(RunConfig::from_toml_str(&bad, &[]).is_err());
        assert!(RunConfig::from_toml_str(MINIMAL, &[("colour".into(), "1".into())]).is_err());
        assert!(parse_override("--novalue").is_err());
    }

    #[test]
    fn small_grid_with_cubic_drift_cites_rule() {
        let o = vec![("n".into(), "10".into()), ("lambda".into(), "1.0".into())];
        let err = RunConfig::from_toml_str(MINIMAL, &o).unwrap_err().to_string();
        assert!(err.contains("4K+2"), "{err}");
    }

    #[test]
    fn hash_tracks_content_only() {
        let a = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        b.flags.workers = 8;
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml_str(MINIMAL, &[("seed".into(), "8".into())]).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            assert_eq!(serde_json::to_value(e).unwrap(), e.name());
        }
    }
}
