//! Run configuration files and their merge with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use dnf_core::darcy::DarcyConfig;
use dnf_core::problems::canonical_name;
use dnf_core::DnfConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DNF_OUT_DIR";

/// Output directory used when neither a flag, the config file, nor
/// [`OUT_DIR_ENV`] names one.
pub const FALLBACK_OUT_DIR: &str = "dnf-out";

/// Which artifacts `run` writes besides `trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportOptions {
    pub trace_csv: bool,
    pub designs: bool,
    /// Points per axis of the surrogate contour grid; 0 skips `grid.csv`.
    pub grid_res: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            trace_csv: true,
            designs: true,
            grid_res: 0,
        }
    }
}

/// Contents of a `--config` TOML file. Every section is optional.
///
/// ```toml
/// problem = "four-branch"
/// out = "results/fb"
///
/// [dnf]
/// criterion = "nfbd-fg"
/// seed = 3
/// [dnf.flow]
/// steps = 1000
///
/// [darcy]
/// m = 31
///
/// [export]
/// grid_res = 101
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub problem: Option<String>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub dnf: DnfConfig,
    #[serde(default)]
    pub darcy: DarcyConfig,
    #[serde(default)]
    pub export: ExportOptions,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        // toml's message already names the offending key and its location
        toml::from_str(text).map_err(|e| anyhow!("{}", e.to_string().trim_end()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Loads `path` when given, defaults otherwise.
    pub fn load_optional(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }
}

/// Fully resolved settings of one `run`, echoed into `trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveConfig {
    pub problem: String,
    pub out: PathBuf,
    pub dnf: DnfConfig,
    pub darcy: DarcyConfig,
    pub export: ExportOptions,
}

/// Canonical problem name or a config error naming the field.
pub fn resolve_problem(flag: Option<&str>, file: Option<&str>) -> anyhow::Result<String> {
    let Some(name) = flag.or(file) else {
        bail!("problem: no problem given (use --problem or `problem = ...` in the config)");
    };
    canonical_name(name)
        .map(str::to_string)
        .ok_or_else(|| anyhow!("problem: unknown problem `{name}` (expected four-branch, iso-probability or darcy)"))
}

/// Flag, then config file, then `DNF_OUT_DIR`, then `./dnf-out`.
pub fn resolve_out(flag: Option<&Path>, file: Option<&Path>) -> PathBuf {
    flag.or(file)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfigFile::parse("problem = \"iso\"\nbogus_key = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus_key"), "{e}");
        let e = RunConfigFile::parse("[dnf]\nn_maxx = 3\n").unwrap_err();
        assert!(e.to_string().contains("n_maxx"), "{e}");
        let e = RunConfigFile::parse("[dnf.flow]\nstep = 3\n").unwrap_err();
        assert!(e.to_string().contains("step"), "{e}");
    }

    #[test]
    fn sections_fill_defaults() {
        let c = RunConfigFile::parse("[dnf]\nseed = 4\ntolerance = \"inf\"\n[dnf.flow]\nsteps = 7\n").unwrap();
        assert_eq!(c.dnf.seed, 4);
        assert!(c.dnf.tolerance.is_infinite());
        assert_eq!(c.dnf.flow.steps, 7);
        assert_eq!(c.dnf.n_max, DnfConfig::default().n_max);
        assert_eq!(c.darcy, DarcyConfig::default());
        assert_eq!(c.export, ExportOptions::default());
        assert_eq!(RunConfigFile::parse("").unwrap(), RunConfigFile::default());
    }

    #[test]
    fn problem_resolution() {
        assert_eq!(resolve_problem(Some("iso"), Some("darcy")).unwrap(), "iso-probability");
        assert_eq!(resolve_problem(None, Some("darcy")).unwrap(), "darcy");
        assert!(resolve_problem(None, None).unwrap_err().to_string().starts_with("problem"));
        assert!(resolve_problem(Some("nope"), None).is_err());
    }
}
