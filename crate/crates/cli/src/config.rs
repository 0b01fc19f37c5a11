//! Flat TOML configuration with `--set KEY=VALUE` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Parses `VALUE` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn merged_table(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
        bail!("config must be flat; `{key}` is a table");
    }
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            bail!("override `{item}` is not KEY=VALUE");
        };
        let key = key.trim();
        if key.is_empty() {
            bail!("override `{item}` has an empty key");
        }
        table.insert(key.to_string(), parse_value(raw.trim()));
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).context("seed must fit in a signed 64-bit integer")?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    Ok(table)
}

/// Loads a config file, applies overrides and deserializes. Unknown keys
/// are rejected by the target type.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<T> {
    let table = merged_table(path, overrides, seed)?;
    Value::Table(table).try_into().context("invalid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use albumseq::data::GenConfig;
    use albumseq::layers::EmbeddingMode;
    use albumseq::training::TrainConfig;

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "hidden_dim = 7\nmode = \"addition\"\n").unwrap();
        let cfg: TrainConfig = load(
            Some(&path),
            &["mode=max".into(), "learning_rate=0.5".into(), "region=upper".into()],
            Some(3),
        )
        .unwrap();
        assert_eq!(cfg.hidden_dim, 7);
        assert_eq!(cfg.mode, EmbeddingMode::ElementwiseMax);
        assert_eq!(cfg.learning_rate, 0.5);
        assert_eq!(cfg.region, "upper");
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_keys_and_bad_overrides_fail() {
        assert!(load::<GenConfig>(None, &["colour=1".into()], None).is_err());
        assert!(load::<GenConfig>(None, &["noequals".into()], None).is_err());
        let cfg: GenConfig = load(None, &["regions=[\"a\", \"b\"]".into()], None).unwrap();
        assert_eq!(cfg.regions, vec!["a", "b"]);
    }

    #[test]
    fn nested_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nseed = 1\n").unwrap();
        assert!(merged_table(Some(&path), &[], None).is_err());
    }
}
