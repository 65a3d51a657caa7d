//! Deterministic report files. Every writer formats floats to six decimal
//! places and ends each line with a bare newline, so a rerun with the same
//! config produces byte-identical output.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::roc::RocCurve;

/// Fixed-width float used in every CSV cell. Infinities print as literals so
/// division-by-zero metrics stay readable and stable.
pub fn fmt_f64(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.6}")
    }
}

/// A report directory; files land inside `out_dir`, created on demand.
pub struct Report {
    out_dir: PathBuf,
}

impl Report {
    pub fn create(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Report { out_dir: out_dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// `metric,value` rows; values arrive pre-formatted so counts stay
    /// integral and rates take the fixed six-decimal form.
    pub fn write_summary(&self, rows: &[(String, String)]) -> Result<PathBuf> {
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(k);
            out.push(',');
            out.push_str(v);
            out.push('\n');
        }
        self.write_file("summary.csv", out.as_bytes())
    }

    /// A general table; the caller owns header and cell formatting.
    pub fn write_csv(
        &self,
        name: &str,
        header: &str,
        rows: &[Vec<String>],
    ) -> Result<PathBuf> {
        let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
        out.push_str(header);
        out.push('\n');
        for row in rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        self.write_file(name, out.as_bytes())
    }

    /// One JSON object per line, in input order.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, items: &[T]) -> Result<PathBuf> {
        let mut out = Vec::new();
        for item in items {
            serde_json::to_writer(&mut out, item)?;
            out.push(b'\n');
        }
        self.write_file(name, &out)
    }

    /// `threshold,tpr,fpr` rows. The leading sentinel point at threshold
    /// `inf` is kept so the curve always starts at (0, 0).
    pub fn write_roc(&self, name: &str, curve: &RocCurve) -> Result<PathBuf> {
        let mut out = String::from("threshold,tpr,fpr\n");
        for p in &curve.points {
            out.push_str(&fmt_f64(p.threshold));
            out.push(',');
            out.push_str(&fmt_f64(p.tpr));
            out.push(',');
            out.push_str(&fmt_f64(p.fpr));
            out.push('\n');
        }
        self.write_file(name, out.as_bytes())
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        Ok(path)
    }
}

/// Builder for summary rows that keeps insertion order.
#[derive(Default)]
pub struct Summary {
    rows: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Summary::default()
    }

    pub fn count(&mut self, key: &str, value: u64) -> &mut Self {
        self.rows.push((key.to_string(), value.to_string()));
        self
    }

    pub fn rate(&mut self, key: &str, value: f64) -> &mut Self {
        self.rows.push((key.to_string(), fmt_f64(value)));
        self
    }

    pub fn text(&mut self, key: &str, value: &str) -> &mut Self {
        self.rows.push((key.to_string(), value.to_string()));
        self
    }

    pub fn rows(&self) -> &[(String, String)] {
        &self.rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roc::roc;

    #[test]
    fn float_cells_are_fixed_width() {
        assert_eq!(fmt_f64(0.5), "0.500000");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    #[test]
    fn summary_schema_is_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report::create(dir.path()).unwrap();
        let mut s = Summary::new();
        s.count("prompts", 100).rate("accuracy", 0.9875).text("mode", "live");
        let path = report.write_summary(s.rows()).unwrap();
        let got = std::fs::read_to_string(path).unwrap();
        assert_eq!(got, "metric,value\nprompts,100\naccuracy,0.987500\nmode,live\n");
    }

    #[test]
    fn roc_schema_is_frozen() {
        let samples = vec![(2.0, true), (1.0, true), (0.5, false)];
        let curve = roc(&samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = Report::create(dir.path()).unwrap();
        let path = report.write_roc("roc.csv", &curve).unwrap();
        let got = std::fs::read_to_string(path).unwrap();
        let want = "threshold,tpr,fpr\ninf,0.000000,0.000000\n2.000000,0.500000,0.000000\n\
                    1.000000,1.000000,0.000000\n0.500000,1.000000,1.000000\n";
        assert_eq!(got, want);
    }

    #[test]
    fn jsonl_emits_one_object_per_line() {
        #[derive(Serialize)]
        struct Row {
            a: u32,
            b: &'static str,
        }
        let dir = tempfile::tempdir().unwrap();
        let report = Report::create(dir.path()).unwrap();
        let path = report
            .write_jsonl("trace.jsonl", &[Row { a: 1, b: "x" }, Row { a: 2, b: "y" }])
            .unwrap();
        let got = std::fs::read_to_string(path).unwrap();
        assert_eq!(got, "{\"a\":1,\"b\":\"x\"}\n{\"a\":2,\"b\":\"y\"}\n");
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report::create(dir.path()).unwrap();
        let rows = vec![vec!["1".to_string(), fmt_f64(0.25)]];
        let p1 = report.write_csv("t.csv", "k,rate", &rows).unwrap();
        let first = std::fs::read(&p1).unwrap();
        let p2 = report.write_csv("t.csv", "k,rate", &rows).unwrap();
        assert_eq!(first, std::fs::read(&p2).unwrap());
        assert_eq!(p1, p2);
    }
}
