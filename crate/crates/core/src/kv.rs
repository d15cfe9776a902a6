//! Flat `key=value` text used for config files and checkpoint snapshots.

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are rejected.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("duplicate key {k:?}")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_value(key, s.trim())).collect()
}

pub(crate) fn render_list(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Formats an `f64` so that parsing it back yields the same bits.
pub(crate) fn render_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let pairs = vec![("a".to_string(), "1".to_string()), ("b".to_string(), "x y".to_string())];
        assert_eq!(parse(&render(&pairs)).unwrap(), pairs);
    }

    #[test]
    fn comments_and_blanks() {
        let p = parse("# hi\n\n lr = 0.1 \n").unwrap();
        assert_eq!(p, vec![("lr".to_string(), "0.1".to_string())]);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse("a=1\na=2").is_err());
        assert!(parse("novalue").is_err());
        assert!(parse("=3").is_err());
    }

    #[test]
    fn f64_render_is_exact() {
        for v in [2e-4, 0.07, 1.0 / 3.0, 1e-8] {
            assert_eq!(render_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
