//! TOML scenario files and the default search path.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use cxlsim_core::endpoint::{EndpointConfig, MediaKind};
use cxlsim_core::scenario::{Mode, ScenarioConfig};

use crate::{CliError, Result};

/// Colon-separated directories searched for [`CONFIG_FILE`] when no
/// `--config` is given.
pub const CONFIG_PATH_ENV: &str = "CXLSIM_CONFIG_PATH";
pub const CONFIG_FILE: &str = "cxlsim.toml";

pub fn parse_config(text: &str, path: &Path) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, path)
}

pub fn to_toml(cfg: &ScenarioConfig) -> String {
    toml::to_string_pretty(cfg).expect("scenario configs serialize")
}

/// First [`CONFIG_FILE`] found along `search`, which has the syntax of
/// [`CONFIG_PATH_ENV`].
pub fn find_config(search: Option<&str>) -> Option<PathBuf> {
    env::split_paths(search?)
        .map(|d| d.join(CONFIG_FILE))
        .find(|p| p.is_file())
}

/// Explicit path, else the search path, else built-in Z-NAND defaults.
pub fn resolve(explicit: Option<&Path>) -> Result<ScenarioConfig> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    let search = env::var(CONFIG_PATH_ENV).ok();
    match find_config(search.as_deref()) {
        Some(p) => load_config(&p),
        None => Ok(ScenarioConfig::new(Mode::GpuDram, MediaKind::Znand)),
    }
}

pub fn parse_media(s: &str) -> Option<MediaKind> {
    let norm = s.to_ascii_lowercase().replace('-', "_");
    match norm.as_str() {
        "dram" => Some(MediaKind::DramDdr5),
        "z_nand" => Some(MediaKind::Znand),
        _ => MediaKind::ALL.into_iter().find(|m| m.name() == norm),
    }
}

/// `base` switched to `mode`, dropping a hint policy the mode cannot use.
pub fn with_mode(base: &ScenarioConfig, mode: Mode) -> ScenarioConfig {
    let mut c = base.clone();
    c.mode = mode;
    if !mode.is_cxl() {
        c.sr_policy = None;
    }
    c
}

/// Replaces every endpoint with the defaults for `media`.
pub fn with_media(base: &ScenarioConfig, media: MediaKind) -> ScenarioConfig {
    let mut c = base.clone();
    let n = c.endpoints.len().max(1);
    c.endpoints = vec![EndpointConfig::for_media(media); n];
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = ScenarioConfig::new(Mode::CxlSr, MediaKind::Znand);
        let back = parse_config(&to_toml(&cfg), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shipped_default_matches_builtin() {
        let text = include_str!("../../../configs/default.toml");
        let cfg = parse_config(text, Path::new("default.toml")).unwrap();
        assert_eq!(cfg, ScenarioConfig::new(Mode::CxlSr, MediaKind::Znand));
    }

    #[test]
    fn wrong_schema_version_is_a_config_error() {
        let mut cfg = ScenarioConfig::new(Mode::Cxl, MediaKind::Znand);
        cfg.schema_version = 9;
        let err = parse_config(&to_toml(&cfg), Path::new("x.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn malformed_toml_is_a_schema_error() {
        let err = parse_config("mode = 3", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, CliError::Schema { .. }));
        assert!(!err.one_line().contains('\n'));
    }

    #[test]
    fn search_path_finds_first_match() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::write(b.path().join(CONFIG_FILE), "").unwrap();
        let search = env::join_paths([a.path(), b.path()]).unwrap();
        let found = find_config(search.to_str()).unwrap();
        assert_eq!(found, b.path().join(CONFIG_FILE));
        assert_eq!(find_config(None), None);
    }

    #[test]
    fn media_names() {
        assert_eq!(parse_media("dram"), Some(MediaKind::DramDdr5));
        assert_eq!(parse_media("Z-NAND"), Some(MediaKind::Znand));
        assert_eq!(parse_media("optane"), Some(MediaKind::Optane));
        assert_eq!(parse_media("tape"), None);
    }
}
