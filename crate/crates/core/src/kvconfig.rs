//! Plain-text `key = value` configuration files. `#` starts a comment.

use std::path::Path;

use crate::error::{Error, Result};

/// Ordered key/value pairs; duplicate keys are an error.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parse a value, naming the key in the error.
pub fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
}
