//! Config file parsing and seed/output overrides.

use std::path::{Path, PathBuf};

use fasq_core::config::{config_keys, RunConfig};

use crate::error::{CliError, Result};

pub const ENV_SEED: &str = "IFLIP_SEED";
pub const ENV_OUT: &str = "IFLIP_OUT";

/// Values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Flags win over environment variables.
    pub fn resolve(seed_flag: Option<u64>, out_flag: Option<PathBuf>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let seed = match seed_flag {
            Some(s) => Some(s),
            None => match env(ENV_SEED) {
                Some(v) => Some(v.trim().parse::<u64>().map_err(|e| CliError::Config {
                    path: format!("seed (from {ENV_SEED})"),
                    message: format!("`{v}` is not an unsigned integer: {e}"),
                })?),
                None => None,
            },
        };
        let out = out_flag.or_else(|| env(ENV_OUT).filter(|v| !v.is_empty()).map(PathBuf::from));
        Ok(Self { seed, out })
    }
}

fn syntax_error(path: &Path, message: impl ToString) -> CliError {
    CliError::Config { path: path.display().to_string(), message: message.to_string() }
}

/// Parses TOML or JSON (by extension; TOML otherwise) into a config.
pub fn parse_config(text: &str, file: &Path) -> Result<RunConfig> {
    let is_json = file.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: serde_json::Value = if is_json {
        serde_json::from_str(text).map_err(|e| syntax_error(file, e))?
    } else {
        let t: toml::Table = toml::from_str(text).map_err(|e| syntax_error(file, e))?;
        serde_json::to_value(t)?
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config { path, message: e.into_inner().to_string() }
    })
}

/// Loads, overrides and validates the run configuration.
pub fn load_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(f) => {
            let text = std::fs::read_to_string(f).map_err(|e| syntax_error(f, e))?;
            parse_config(&text, f)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Help text listing every config key with its default.
pub fn keys_help() -> String {
    let keys = config_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (TOML or JSON, unknown keys rejected) and defaults:\n");
    for (k, v) in keys {
        s += &format!("  {k:<width$}  {v}\n");
    }
    s += &format!("\nEnvironment: {ENV_SEED} overrides `seed`, {ENV_OUT} overrides `out_dir`; command-line flags take precedence.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_path(text: &str, file: &str) -> String {
        match parse_config(text, Path::new(file)) {
            Err(CliError::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_report_their_path() {
        assert!(err_path("[train]\nepochz = 3\n", "c.toml").contains("train"));
        assert!(err_path(r#"{"data": {"meta": {"bogus": 1}}}"#, "c.json").starts_with("data.meta"));
    }

    #[test]
    fn wrong_types_report_their_path() {
        assert_eq!(err_path("[train]\nepochs = \"many\"\n", "c.toml"), "train.epochs");
    }

    #[test]
    fn toml_and_json_agree() {
        let a = parse_config("seed = 9\n[train]\nepochs = 2\n", Path::new("a.toml")).unwrap();
        let b = parse_config(r#"{"seed": 9, "train": {"epochs": 2}}"#, Path::new("a.json")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.epochs, 2);
    }

    #[test]
    fn flags_beat_environment() {
        let env = |k: &str| match k {
            ENV_SEED => Some("5".to_string()),
            ENV_OUT => Some("/tmp/env".to_string()),
            _ => None,
        };
        let o = Overrides::resolve(Some(3), None, env).unwrap();
        assert_eq!(o.seed, Some(3));
        assert_eq!(o.out, Some(PathBuf::from("/tmp/env")));
        let o = Overrides::resolve(None, None, env).unwrap();
        assert_eq!(o.seed, Some(5));
    }

    #[test]
    fn bad_env_seed_is_a_config_error() {
        let r = Overrides::resolve(None, None, |k| (k == ENV_SEED).then(|| "x".to_string()));
        assert!(matches!(r, Err(CliError::Config { .. })));
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        for (k, _) in config_keys() {
            assert!(h.contains(&k), "{k}");
        }
    }
}
