//! `BONDATA v1` dataset files.
//!
//! ```text
//! BONDATA v1 N=<int> D=<int>
//! v,id,f_0,...,f_{D-1}
//! ```
//!
//! One record per sample in ascending `v`, LF line endings. Reals use the
//! shortest decimal that parses back to the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bon_core::data::{Dataset, Sample};

use crate::error::{BonError, Result};

pub const DATASET_MAGIC: &str = "BONDATA v1";

/// Serializes a dataset to its text form.
pub fn encode_dataset(ds: &Dataset) -> String {
    let mut out = String::with_capacity(ds.len() * (ds.dim() * 20 + 16));
    let _ = writeln!(out, "{DATASET_MAGIC} N={} D={}", ds.len(), ds.dim());
    for s in ds.samples() {
        let _ = write!(out, "{},{}", s.v, s.id);
        for x in &s.features {
            // `{:?}` is the shortest round-trip representation
            let _ = write!(out, ",{x:?}");
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))
        .map_err(|e| BonError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| BonError::io(format!("reading {}", path.display()), e))?;
    decode_dataset(&text, &path.display().to_string())
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix(DATASET_MAGIC)?.strip_prefix(' ')?;
    let (n, d) = rest.split_once(' ')?;
    let n = n.strip_prefix("N=")?.parse().ok()?;
    let d = d.strip_prefix("D=")?.parse().ok()?;
    Some((n, d))
}

/// Parses dataset text; `origin` names the source in error messages.
pub fn decode_dataset(text: &str, origin: &str) -> Result<Dataset> {
    let err = |line: usize, message: String| BonError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    if text.contains('\r') {
        let line = text[..text.find('\r').unwrap()].matches('\n').count() + 1;
        return Err(err(line, "carriage return found; LF line endings required".into()));
    }
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or("");
    let (n, d) = parse_header(header)
        .ok_or_else(|| err(1, format!("malformed header {header:?}, expected `{DATASET_MAGIC} N=<int> D=<int>`")))?;

    let mut samples = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        if samples.len() == n {
            return Err(err(lineno, format!("more than N={n} records")));
        }
        let mut fields = line.split(',');
        let v: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err(lineno, "bad sample index".into()))?;
        if v != samples.len() {
            return Err(err(lineno, format!("sample index {v}, expected {}", samples.len())));
        }
        let id: u32 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err(lineno, "bad identity".into()))?;
        let mut features = Vec::with_capacity(d);
        for (j, f) in fields.enumerate() {
            let x: f64 = f
                .parse()
                .map_err(|_| err(lineno, format!("feature {j}: cannot parse {f:?}")))?;
            if !x.is_finite() {
                return Err(err(lineno, format!("feature {j} is not finite")));
            }
            features.push(x);
        }
        if features.len() != d {
            return Err(err(lineno, format!("{} features, header says D={d}", features.len())));
        }
        samples.push(Sample { v, id, features });
    }
    if samples.len() != n {
        let last = text.lines().count();
        return Err(err(last, format!("{} records, header says N={n}", samples.len())));
    }
    Dataset::new(samples, d).map_err(BonError::Data)
}
