//! Report serialization: pretty JSON and CSV, written atomically.
//!
//! Files are first written to a temp sibling and then renamed into place, so
//! a failed run never leaves a truncated artifact behind.

use crate::conflict::EvalReport;
use crate::error::{AmpsError, Result};
use serde::Serialize;
use std::fs;
use std::path::Path;

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| AmpsError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp.{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        AmpsError::Io(e)
    })
}

/// Write any serializable report as pretty-printed JSON with a trailing
/// newline. f64 values round-trip bit-exactly.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        serde_json::to_writer(&mut bytes, v)?;
        bytes.push(b'\n');
    }
    atomic_write(path, &bytes)
}

fn fmt_f64(x: f64) -> String {
    let mut buf = ryu_style(x);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_style(x: f64) -> String {
    // serde_json uses shortest-roundtrip formatting; `{}` on f64 does too.
    format!("{x}")
}

/// CSV with the sweep rows: `alpha,visual_rate,text_rate,collapse_rate,flip_rate,n`.
pub fn write_sweep_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("alpha,visual_rate,text_rate,collapse_rate,flip_rate,n\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(row.alpha),
            fmt_f64(row.visual_rate),
            fmt_f64(row.text_rate),
            fmt_f64(row.collapse_rate),
            fmt_f64(row.flip_rate),
            row.n
        ));
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conflict::EvalRow;

    fn sample_report() -> EvalReport {
        EvalReport {
            rows: vec![
                EvalRow {
                    alpha: 0.0,
                    visual_rate: 0.25,
                    text_rate: 0.5,
                    collapse_rate: 0.125,
                    other_rate: 0.125,
                    flip_rate: 0.0,
                    n: 8,
                },
                EvalRow {
                    alpha: 1.5,
                    visual_rate: 0.5,
                    text_rate: 0.25,
                    collapse_rate: 0.25,
                    other_rate: 0.0,
                    flip_rate: 0.25,
                    n: 8,
                },
            ],
            n_samples: 8,
        }
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let value = vec![0.1 + 0.2, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0];
        write_json(&path, &value).unwrap();
        let back: Vec<f64> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        for (a, b) in value.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &sample_report()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "alpha,visual_rate,text_rate,collapse_rate,flip_rate,n"
        );
        assert_eq!(lines.next().unwrap(), "0.0,0.25,0.5,0.125,0.0,8");
        assert_eq!(lines.next().unwrap(), "1.5,0.5,0.25,0.25,0.25,8");
        assert!(lines.next().is_none());
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_json(&path, &42u32).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["r.json"]);
    }

    #[test]
    fn jsonl_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write_jsonl(&path, &[1u32, 2, 3]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "1\n2\n3\n");
    }
}
