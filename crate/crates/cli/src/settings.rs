//! Config files, flag merging and the error-to-exit-code mapping.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass, or the computation itself failed.
    Check(String),
    Usage(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

impl From<attnseg::Error> for Failure {
    fn from(e: attnseg::Error) -> Self {
        use attnseg::Error::*;
        let msg = e.to_string();
        match e {
            Config(_) | Invalid(_) => Failure::Usage(msg),
            Io { .. } | Parse { .. } | Checkpoint(_) => Failure::Io(msg),
            _ => Failure::Check(msg),
        }
    }
}

pub type Outcome = Result<(), Failure>;

/// Settings from `path`, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

/// Rejects a config file written for another subcommand.
pub fn expect_command(found: &str, expected: &str) -> Outcome {
    if found == expected {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "config is for `{found}`, not `{expected}`"
        )))
    }
}

/// Overwrites `slot` with the flag value when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn echo(settings: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string(settings).expect("settings serialise")
    );
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, Failure> {
    value
        .clone()
        .ok_or_else(|| Failure::Usage(format!("{flag} is required")))
}
