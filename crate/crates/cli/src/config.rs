//! Flat key=value config files and flag/file/default layering.
//!
//! Keys are the long flag names (`epochs`, `batch-size`, ...). A flag given
//! on the command line wins over the file, which wins over the built-in
//! default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use l2sa_core::Error;

/// Every key a config file may set; anything else is a typo worth rejecting.
const KNOWN_KEYS: [&str; 21] = [
    "model",
    "dataset",
    "data-root",
    "epochs",
    "batch-size",
    "lr",
    "adam-epsilon",
    "seed",
    "repeats",
    "sab-kernels",
    "skips",
    "out",
    "precision",
    "per-class",
    "classes",
    "tolerance",
    "instances",
    "split",
    "module",
    "iterations",
    "warmup",
];

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: wrong flag value, malformed config, unknown name.
    Usage(String),
    /// Failure from the underlying library call.
    Run(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Run(e) => write!(f, "error[{}]: {e}", e.category()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub fn usage(msg: impl ToString) -> CliError {
    CliError::Usage(msg.to_string())
}

/// Values read from `--config`, consulted when a flag is absent.
#[derive(Debug, Default)]
pub struct Overlay {
    values: BTreeMap<String, String>,
}

impl Overlay {
    pub fn load(path: Option<&Path>) -> Result<Overlay, CliError> {
        let Some(path) = path else {
            return Ok(Overlay::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{} line {}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(usage(format!(
                    "{} line {}: unknown key {key:?} (keys mirror the long flag names)",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Overlay { values })
    }

    /// Flag value if given, else the file's, else the default.
    pub fn resolve<T: FromStr>(
        &self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        Ok(self.resolve_opt(key, flag)?.unwrap_or(default))
    }

    /// Flag value if given, else the file's, else None.
    pub fn resolve_opt<T: FromStr>(
        &self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                usage(format!("config key {key}: cannot parse value {raw:?}"))
            }),
        }
    }
}
