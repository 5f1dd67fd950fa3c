//! Run configuration: TOML file, then `SSBOOST_` environment overrides, then
//! command-line flags. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssboost::{Budget, SyntheticSceneConfig, TrainConfig};

use crate::CliError;

/// Prefix of environment overrides. `SSBOOST_TRAIN__ITERATIONS=20` sets
/// `train.iterations`; nested keys use further `__` separators.
pub const ENV_PREFIX: &str = "SSBOOST_";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub profile: ProfileConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory (holds `manifest.json`).
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    /// Scene `i` is generated with seed `seed + i`.
    pub seed: u64,
    pub scene: SyntheticSceneConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            scene: SyntheticSceneConfig::default(),
        }
    }
}

/// A budget in cost units or the string `"unlimited"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetValue {
    Units(f64),
    Named(String),
}

impl Default for BudgetValue {
    fn default() -> Self {
        BudgetValue::Named("unlimited".into())
    }
}

impl BudgetValue {
    pub fn resolve(&self) -> Result<Budget, CliError> {
        let parsed = match self {
            BudgetValue::Units(v) => Budget::limited(*v),
            BudgetValue::Named(s) => s.parse(),
        };
        parsed.map_err(|e| CliError::invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub budget: BudgetValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Explicit budget grid. When absent the grid is `steps + 1` evenly
    /// spaced fractions of the model's total stage cost, plus unlimited.
    pub budgets: Option<Vec<BudgetValue>>,
    pub steps: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            budgets: None,
            steps: 10,
        }
    }
}

/// Reads `path` (if any), applies environment overrides from `vars` and
/// deserializes.
pub fn load<I>(path: Option<&Path>, vars: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading config {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    parse(&text, vars)
}

/// Parses TOML `text`, applies environment overrides from `vars` and
/// deserializes.
pub fn parse<I>(text: &str, vars: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = text
        .parse::<toml::Table>()
        .map_err(|e| CliError::invalid(format!("config: {e}")))?;
    for (key, value) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::invalid(format!("malformed override {key}")));
        }
        set_path(&mut table, &path, parse_value(&value)).map_err(|m| CliError::invalid(format!("{key}: {m}")))?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::invalid(format!("config: {}", e.message())))
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("{p} is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_without_file() {
        let c = load(None, vars(&[])).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.iterations, 150);
    }

    #[test]
    fn env_overrides_nested_keys() {
        let c = load(
            None,
            vars(&[
                ("SSBOOST_TRAIN__ITERATIONS", "7"),
                ("SSBOOST_GENERATE__SCENE__WIDTH", "32"),
                ("SSBOOST_INFER__BUDGET", "12.5"),
                ("SSBOOST_PATHS__OUT", "results"),
                ("OTHER", "ignored"),
            ]),
        )
        .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.generate.scene.width, 32);
        assert_eq!(c.infer.budget.resolve().unwrap(), Budget::Limited(12.5));
        assert_eq!(c.paths.out, Some(PathBuf::from("results")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, vars(&[("SSBOOST_TRAIN__ITERATONS", "7")])).unwrap_err();
        assert_eq!(err.code, crate::EXIT_INVALID);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\niterations = 3\nbogus = 1\n").unwrap();
        assert_eq!(load(Some(&p), vars(&[])).unwrap_err().code, crate::EXIT_INVALID);
        std::fs::write(
            &p,
            "[train]\niterations = 3\n[profile]\nbudgets = [0, 10.5, \"unlimited\"]\n",
        )
        .unwrap();
        let c = load(Some(&p), vars(&[])).unwrap();
        assert_eq!(c.train.iterations, 3);
        assert_eq!(c.profile.budgets.unwrap().len(), 3);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load(Some(Path::new("/nonexistent/c.toml")), vars(&[])).unwrap_err();
        assert_eq!(err.code, crate::EXIT_IO);
    }

    #[test]
    fn negative_budget_is_invalid() {
        assert_eq!(
            BudgetValue::Units(-1.0).resolve().unwrap_err().code,
            crate::EXIT_INVALID
        );
        assert_eq!(
            BudgetValue::Named("lots".into()).resolve().unwrap_err().code,
            crate::EXIT_INVALID
        );
    }
}
