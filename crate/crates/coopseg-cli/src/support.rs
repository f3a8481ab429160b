//! Flat key-value config files, run manifests, and error-to-exit-code
//! mapping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use coopseg::coop::CoopError;
use coopseg::data::DataError;
use coopseg::model_io::ModelIoError;
use coopseg::segnet::NetError;
use coopseg::tensor::TensorError;
use coopseg::trainer::TrainError;

/// CLI failure categories; each maps to a documented exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad flags or flag combinations.
    Usage(String),
    /// Exit 2: unreadable, malformed, or inconsistent inputs.
    Data(String),
    /// Exit 3: NaN/Inf or a failed gradient check.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CoopError> for CliError {
    fn from(e: CoopError) -> Self {
        match e {
            CoopError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            CoopError::UnknownTap(_)
            | CoopError::TargetIsHead(_)
            | CoopError::DuplicateTap(_)
            | CoopError::EmptySources => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            TrainError::HeadUnavailable { .. }
            | TrainError::BadCrop { .. }
            | TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Coop(c) => c.into(),
            TrainError::Net(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Flat `key value` (or `key=value`) config file. Flags always win over
/// config entries.
#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(KvConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => match line.split_once(char::is_whitespace) {
                    Some((k, v)) => (k.trim(), v.trim()),
                    None => {
                        return Err(CliError::Data(format!(
                            "config {} line {}: expected `key value`",
                            path.display(),
                            i + 1
                        )))
                    }
                },
            };
            entries.insert(key.to_string(), value.to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// flag > config > default.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match (flag, self.get(key)) {
            (Some(v), _) => Ok(v),
            (None, Some(raw)) => raw.parse().map_err(|e| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
            (None, None) => Ok(default),
        }
    }

    pub fn resolve_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match (flag, self.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(raw)) => raw.parse().map(Some).map_err(|e| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
            (None, None) => Ok(None),
        }
    }
}

/// Seed resolution: flag > config > COOPSEG_SEED env > 1.
pub fn resolve_seed(flag: Option<u64>, cfg: &KvConfig) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = cfg.get("seed") {
        return raw
            .parse()
            .map_err(|e| CliError::Usage(format!("config key seed: {e}")));
    }
    match std::env::var("COOPSEG_SEED") {
        Ok(raw) => raw
            .parse()
            .map_err(|e| CliError::Usage(format!("COOPSEG_SEED: {e}"))),
        Err(_) => Ok(1),
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Data(format!("hashing {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// Writes the run manifest next to a command's outputs: artifact version,
/// the exact command line, input dataset hashes, and every resolved config
/// value. Re-running the recorded command reproduces the outputs
/// byte-for-byte.
pub fn write_manifest(
    path: &Path,
    resolved: &[(&str, String)],
    datasets: &[&Path],
) -> Result<(), CliError> {
    let mut s = String::new();
    let _ = writeln!(s, "artifact_version {}", env!("CARGO_PKG_VERSION"));
    let args: Vec<String> = std::env::args().collect();
    let _ = writeln!(s, "command {}", args.join(" "));
    for d in datasets {
        let _ = writeln!(s, "dataset_sha256 {} {}", sha256_file(d)?, d.display());
    }
    for (k, v) in resolved {
        let _ = writeln!(s, "{k} {v}");
    }
    fs::write(path, s)?;
    Ok(())
}
