use std::fs;
use std::path::Path;

use ltau::{Error, Result};
use serde::Serialize;
use serde_json::json;

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Metadata { .. } => "metadata",
        Error::PayloadSize { .. } => "payload_size",
        Error::InvalidValue { .. } => "invalid_value",
        Error::Shape(_) => "shape",
        Error::Grid(_) => "grid",
        Error::Dimension { .. } => "dimension",
        Error::Empty(_) => "empty",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Format(_) => "format",
        Error::Version { .. } => "version",
        Error::UndefinedCorrelation(_) => "undefined_correlation",
        Error::Divergence { .. } => "divergence",
    }
}

pub fn report_error(kind: &str, message: &str) {
    eprintln!(
        "{}",
        json!({ "error": { "kind": kind, "message": message.trim_end() } })
    );
}

pub fn warn(message: &str) {
    eprintln!("{}", json!({ "warning": message }));
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
