use std::io::{BufRead, Write};

use super::types::Scenario;
use super::SceneError;
use crate::scalar::Scalar;

/// One scenario as a single JSON line (no trailing newline).
pub fn to_json_line<T: Scalar>(s: &Scenario<T>) -> String {
    serde_json::to_string(s).expect("scenario serializes")
}

pub fn from_json_line<T: Scalar>(line: &str) -> Result<Scenario<T>, SceneError> {
    let s: Scenario<T> = serde_json::from_str(line).map_err(|e| SceneError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    s.validate()?;
    Ok(s)
}

pub fn write_scenarios<T: Scalar, W: Write>(mut w: W, scenarios: &[Scenario<T>]) -> std::io::Result<()> {
    for s in scenarios {
        writeln!(w, "{}", to_json_line(s))?;
    }
    w.flush()
}

/// Parses a JSON-lines stream. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn read_scenarios<T: Scalar, R: BufRead>(r: R) -> Result<Vec<Scenario<T>>, SceneError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = from_json_line(&line).map_err(|e| match e {
            SceneError::Parse { message, .. } => SceneError::Parse { line: i + 1, message },
            other => SceneError::Parse {
                line: i + 1,
                message: other.to_string(),
            },
        })?;
        out.push(s);
    }
    Ok(out)
}
