use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde_json::{Map, Value};

use crate::settings::Format;

pub type Record = Map<String, Value>;

fn csv_field(v: &Value) -> String {
    let raw = match v {
        Value::Null => "--".to_string(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(csv_field).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    };
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw
    }
}

/// Header plus one line per record; all records share the first one's keys.
pub fn to_csv(records: &[Record]) -> String {
    let Some(first) = records.first() else {
        return String::new();
    };
    let mut out = first.keys().cloned().collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in records {
        let line: Vec<String> = first
            .keys()
            .map(|k| csv_field(r.get(k).unwrap_or(&Value::Null)))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn render(record: Record, format: Format) -> String {
    match format {
        Format::Csv => to_csv(&[record]),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&Value::Object(record)).expect("json");
            s.push('\n');
            s
        }
    }
}

pub fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn csv_rendering() {
        let mut r = Record::new();
        r.insert("theta".into(), json!(0.5));
        r.insert("eigs".into(), json!([1.0, 2.0]));
        r.insert("se".into(), Value::Null);
        r.insert("note".into(), json!("a,b"));
        assert_eq!(to_csv(&[r]), "theta,eigs,se,note\n0.5,1.0;2.0,--,\"a,b\"\n");
        assert_eq!(to_csv(&[]), "");
    }
}
