use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RESULTS_FILE: &str = "results.jsonl";

/// One line of the append-only result log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub config_hash: String,
    pub command: String,
    pub payload: Value,
}

impl ResultRecord {
    pub fn now(config_hash: impl Into<String>, command: impl Into<String>, payload: Value) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        Self {
            timestamp,
            config_hash: config_hash.into(),
            command: command.into(),
            payload,
        }
    }
}

/// Append `record` as a single line; one `write` call per record.
pub fn append_record(path: &Path, record: &ResultRecord) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?
        .write_all(line.as_bytes())
}

pub fn parse_records(text: &str) -> Result<Vec<ResultRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn append_only_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out").join(RESULTS_FILE);
        let a = ResultRecord::now("h1", "estimate", json!({"gaps": [0.0, 1.5]}));
        let b = ResultRecord::now("h2", "report", json!(null));
        append_record(&path, &a).unwrap();
        append_record(&path, &b).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_records(&text).unwrap(), vec![a, b]);
    }

    #[test]
    fn bad_line_is_reported_by_number() {
        let err = parse_records("{\"timestamp\":1,\"config_hash\":\"h\",\"command\":\"c\",\"payload\":null}\nnope\n")
            .unwrap_err();
        assert!(err.starts_with("line 2"), "{err}");
    }
}
