//! TOML documents: parsing with key paths and line numbers, and dotted
//! `key=value` overrides applied before deserialisation.

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::coefficients::{CoefficientSpec, QpCoefficients};
use crate::error::{Error, Result};

/// Parses `text` into a table; syntax errors carry the offending line.
pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Config {
        path: String::new(),
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise; missing tables are created.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        path: assignment.to_string(),
        line: None,
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            path: key.to_string(),
            line: None,
            message: "empty key segment".into(),
        });
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: parts[..=i].join("."),
            line: None,
            message: "not a table".into(),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Deserialises a table, reporting the failing key path and, when the key
/// appears in `text`, its line.
pub fn from_table<T: DeserializeOwned>(table: Table, text: &str) -> Result<T> {
    serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        Error::Config {
            line: locate_line(text, &path),
            message: e.into_inner().message().to_string(),
            path,
        }
    })
}

/// Parses, overrides and deserialises in one go.
pub fn load_str<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut table = parse_table(text)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table, text)
}

/// Attaches a line number to a configuration error whose key path is
/// relative to the table at `prefix`.
pub fn locate_error(err: Error, text: &str, prefix: &str) -> Error {
    match err {
        Error::Config { path, line: None, message } => {
            let full = match (prefix.is_empty(), path.is_empty()) {
                (true, _) => path,
                (false, true) => prefix.to_string(),
                (false, false) => format!("{prefix}.{path}"),
            };
            Error::Config {
                line: locate_line(text, &full),
                path: full,
                message,
            }
        }
        other => other,
    }
}

/// Line (1-based) where the dotted key `path` is defined. Indices such as
/// `f0[1]` select the matching `[[array]]` entry; indices into inline
/// arrays fall back to the line of the key. Unknown paths fall back to the
/// closest defined ancestor.
pub fn locate_line(text: &str, path: &str) -> Option<usize> {
    let mut target = path.to_string();
    let keys = defined_keys(text);
    loop {
        if target.is_empty() {
            return None;
        }
        if let Some((_, line)) = keys.iter().find(|(k, _)| *k == target) {
            return Some(*line);
        }
        // Drop the last index or segment and retry.
        if target.ends_with(']') {
            if let Some(i) = target.rfind('[') {
                target.truncate(i);
                continue;
            }
        }
        match target.rfind('.') {
            Some(i) => target.truncate(i),
            None => return None,
        }
    }
}

/// Every key, table and array-of-tables entry in the document, spelled as
/// full dotted paths with indices, with its line.
fn defined_keys(text: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut header = String::new();
    let mut counts: std::collections::HashMap<String, usize> = Default::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(inner) = l.strip_prefix("[[").and_then(|r| r.split("]]").next()) {
            let name = indexed(inner.trim(), &counts);
            let n = counts.entry(inner.trim().to_string()).or_insert(0);
            header = format!("{name}[{n}]");
            *n += 1;
            out.push((header.clone(), line));
        } else if let Some(inner) = l.strip_prefix('[').and_then(|r| r.split(']').next()) {
            header = indexed(inner.trim(), &counts);
            out.push((header.clone(), line));
        } else if let Some((k, _)) = l.split_once('=') {
            let k = k.trim().trim_matches('"');
            let full = if header.is_empty() { k.to_string() } else { format!("{header}.{k}") };
            out.push((full, line));
        }
    }
    out
}

/// Rewrites `a.b.c` so that array-of-tables prefixes carry the index of
/// their latest entry, e.g. `runs.params` inside `[[runs]]` #2 becomes
/// `runs[1].params`.
fn indexed(name: &str, counts: &std::collections::HashMap<String, usize>) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let mut out = String::new();
    for i in 0..parts.len() {
        if i > 0 {
            out.push('.');
        }
        out.push_str(parts[i]);
        let prefix = parts[..=i].join(".");
        if i + 1 < parts.len() {
            if let Some(n) = counts.get(&prefix) {
                out.push_str(&format!("[{}]", n - 1));
            }
        }
    }
    out
}

impl CoefficientSpec {
    /// Reads a coefficient table, either at the top level of `text` or under
    /// `[coefficients]`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<CoefficientSpec> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        match table.remove("coefficients") {
            Some(Value::Table(inner)) => from_table(inner, text).map_err(|e| prefix_error(e, "coefficients", text)),
            Some(_) => Err(Error::Config {
                path: "coefficients".into(),
                line: locate_line(text, "coefficients"),
                message: "expected a table".into(),
            }),
            None => from_table(table, text),
        }
    }

    /// Parses and validates; validation errors also carry lines.
    pub fn build_from_toml_str(text: &str, overrides: &[String]) -> Result<QpCoefficients> {
        let spec = Self::from_toml_str(text, overrides)?;
        let prefix = if text.parse::<Table>().map(|t| t.contains_key("coefficients")).unwrap_or(false) {
            "coefficients"
        } else {
            ""
        };
        spec.build().map_err(|e| locate_error(e, text, prefix))
    }
}

fn prefix_error(err: Error, prefix: &str, text: &str) -> Error {
    match err {
        Error::Config { path, message, .. } => {
            let full = if path.is_empty() { prefix.to_string() } else { format!("{prefix}.{path}") };
            Error::Config {
                line: locate_line(text, &full),
                path: full,
                message,
            }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = r#"
[coefficients]
dim = 1
tau1 = 1.0
tau2 = 1.4142135623730951
a = [[1.0]]
sigma0 = [[0.5]]

[[coefficients.f0]]
amplitude = 1.0
n1 = 1

[[coefficients.f0]]
amplitude = 0.7
n2 = 1

[coefficients.declared]
alpha = 1.0
m = 2.2
ell = 2.2
"#;

    #[test]
    fn default_document_matches_builtin_spec() {
        let spec = CoefficientSpec::from_toml_str(DEFAULT, &[]).unwrap();
        let builtin = CoefficientSpec::default_ou();
        assert_eq!(spec.a, builtin.a);
        assert_eq!(spec.f0, builtin.f0);
        assert_eq!(spec.sigma0, builtin.sigma0);
        assert_eq!(spec.tau2, builtin.tau2);
    }

    #[test]
    fn type_errors_report_path_and_line() {
        let bad = DEFAULT.replace("amplitude = 0.7", "amplitude = \"big\"");
        match CoefficientSpec::from_toml_str(&bad, &[]).unwrap_err() {
            Error::Config { path, line, .. } => {
                assert_eq!(path, "coefficients.f0[1].amplitude");
                assert_eq!(line, Some(14));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn syntax_errors_report_line() {
        let bad = DEFAULT.replace("tau1 = 1.0", "tau1 = = 1.0");
        match parse_table(&bad).unwrap_err() {
            Error::Config { line, .. } => assert_eq!(line, Some(4)),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn validation_errors_carry_lines() {
        let bad = DEFAULT.replace("a = [[1.0]]", "a = [[1.0, 2.0]]");
        match CoefficientSpec::build_from_toml_str(&bad, &[]).unwrap_err() {
            Error::Config { path, line, .. } => {
                assert!(path.starts_with("coefficients.a"), "{path}");
                assert_eq!(line, Some(6));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let spec = CoefficientSpec::from_toml_str(DEFAULT, &["coefficients.sigma0=[[0.25]]".into(), "coefficients.nonlinearity=tanh".into()]).unwrap();
        assert_eq!(spec.sigma0, vec![vec![0.25]]);
        assert_eq!(spec.nonlinearity, crate::coefficients::Nonlinearity::Tanh);
        let mut t = Table::new();
        apply_override(&mut t, "run.dt=0.01").unwrap();
        assert_eq!(t["run"]["dt"].as_float(), Some(0.01));
        assert!(apply_override(&mut t, "run.dt.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = DEFAULT.replace("dim = 1", "dim = 1\ndimension = 2");
        match CoefficientSpec::from_toml_str(&bad, &[]).unwrap_err() {
            Error::Config { message, .. } => assert!(message.contains("dimension"), "{message}"),
            other => panic!("{other}"),
        }
    }
}
