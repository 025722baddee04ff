//! Rendering of JSON reports as JSON, a two-column table, or CSV.

use anyhow::Result;
use clap::ValueEnum;
use serde_json::Value;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
    Csv,
}

/// Flattens nested objects and arrays into dotted keys.
pub fn flatten(v: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    walk(v, String::new(), &mut out);
    out
}

fn walk(v: &Value, prefix: String, out: &mut Vec<(String, String)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                walk(x, join(k), out);
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                walk(x, join(&i.to_string()), out);
            }
        }
        Value::String(s) => out.push((prefix, s.clone())),
        Value::Null => out.push((prefix, String::new())),
        other => out.push((prefix, other.to_string())),
    }
}

/// `csv` is a command's native tabular output; other commands get key,value rows.
pub fn render(report: &Value, csv: Option<&str>, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        Format::Csv => match csv {
            Some(c) => c.to_string(),
            None => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["key", "value"])?;
                for (k, v) in flatten(report) {
                    w.write_record([k, v])?;
                }
                String::from_utf8(w.into_inner()?)?
            }
        },
        Format::Table => {
            let rows = flatten(report);
            let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
            let mut s = String::new();
            for (k, v) in rows {
                s.push_str(&format!("{k:<width$}  {v}\n"));
            }
            s
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flatten_uses_dotted_paths() {
        let v = json!({"a": {"b": 1, "c": [true, null]}, "d": "x"});
        let f = flatten(&v);
        assert_eq!(
            f,
            vec![
                ("a.b".into(), "1".into()),
                ("a.c.0".into(), "true".into()),
                ("a.c.1".into(), String::new()),
                ("d".into(), "x".into()),
            ]
        );
    }

    #[test]
    fn csv_quotes_commas() {
        let out = render(&json!({"k": "a,b"}), None, Format::Csv).unwrap();
        assert_eq!(out, "key,value\nk,\"a,b\"\n");
    }
}
