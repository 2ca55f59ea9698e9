//! Flag > config file > default resolution. The config file is a JSON
//! object whose keys are the long flag names (`"lr"`, `"policy-lr"`, ...).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Exit 1: the invocation or its inputs are invalid. Exit 2: the work
/// itself failed.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub trait RuntimeContext<T> {
    fn runtime(self, what: &str) -> Result<T, CliError>;
    fn invalid(self, what: &str) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> RuntimeContext<T> for Result<T, E> {
    fn runtime(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into().context(what.to_string())))
    }

    fn invalid(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(format!("{what}: {:#}", e.into())))
    }
}

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: Map<String, Value>,
    ckpt_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .invalid(&format!("cannot read config {}", path.display()))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(values)) => Ok(FileConfig {
                values,
                ckpt_dir: None,
            }),
            Ok(_) => Err(usage(format!(
                "config {} must be a JSON object",
                path.display()
            ))),
            Err(e) => Err(usage(format!("config {}: {e}", path.display()))),
        }
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| usage(format!("config key {key:?}: {e}"))),
        }
    }

    /// Flag, else file, else `default`.
    pub fn pick<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        Ok(self.maybe(flag, key)?.unwrap_or(default))
    }

    pub fn maybe<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn need<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        self.maybe(flag, key)?
            .ok_or_else(|| usage(format!("missing required flag --{key}")))
    }

    pub fn set_ckpt_dir(&mut self, dir: Option<PathBuf>) {
        self.ckpt_dir = dir;
    }

    /// A checkpoint path: relative paths live under the checkpoint
    /// directory when one is configured.
    pub fn ckpt_path(&self, path: PathBuf) -> PathBuf {
        match &self.ckpt_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lr": 0.5, "epochs": 3}"#).unwrap();
        let file = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(file.pick(Some(0.1), "lr", 9.0).unwrap(), 0.1);
        assert_eq!(file.pick(None, "lr", 9.0).unwrap(), 0.5);
        assert_eq!(file.pick::<f64>(None, "gamma", 9.0).unwrap(), 9.0);
        assert!(file.pick::<String>(None, "epochs", String::new()).is_err());
        let missing = file.need::<PathBuf>(None, "ckpt").unwrap_err();
        assert_eq!(missing.exit_code(), 1);
        assert!(missing.to_string().contains("--ckpt"));
    }

    #[test]
    fn checkpoint_directory() {
        let mut file = FileConfig::default();
        assert_eq!(file.ckpt_path("a.ckpt".into()), PathBuf::from("a.ckpt"));
        file.set_ckpt_dir(Some("/tmp/c".into()));
        assert_eq!(
            file.ckpt_path("a.ckpt".into()),
            PathBuf::from("/tmp/c/a.ckpt")
        );
        assert_eq!(
            file.ckpt_path("/x/a.ckpt".into()),
            PathBuf::from("/x/a.ckpt")
        );
    }
}
