//! Text serialization for named tensors and numeric tables.
//!
//! One line per tensor: `name dims values...`, dims as `d0` or `d0xd1`,
//! values printed with 17 significant digits so that f64 round-trips are
//! exact. Files are written atomically (temp file + rename) so interrupted
//! runs never leave corrupt outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::tensor::Tensor;

const MAGIC: &str = "tensors v1";

/// Formats an f64 with 17 significant digits (exact round-trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Writes `content` to `path` atomically via a sibling temp file.
pub fn atomic_write(path: &Path, content: &str) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes named tensors plus integer metadata to a flat text file.
pub fn write_named_tensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    meta: &BTreeMap<String, u64>,
) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (key, value) in meta {
        writeln!(out, "meta {} {}", key, value).expect("string write");
    }
    for (name, t) in tensors {
        debug_assert!(!name.contains(char::is_whitespace));
        let dims = match t.shape().len() {
            0 => "scalar".to_string(),
            1 => format!("{}", t.shape()[0]),
            _ => format!("{}x{}", t.shape()[0], t.shape()[1]),
        };
        write!(out, "{} {}", name, dims).expect("string write");
        for v in t.data() {
            write!(out, " {}", fmt_f64(*v)).expect("string write");
        }
        out.push('\n');
    }
    atomic_write(path, &out)
}

fn bad(detail: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, detail)
}

/// Reads a file produced by [`write_named_tensors`].
pub fn read_named_tensors(
    path: &Path,
) -> io::Result<(BTreeMap<String, Tensor>, BTreeMap<String, u64>)> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines();
    match lines.next() {
        Some(l) if l == MAGIC => {}
        other => return Err(bad(format!("bad header {:?}", other))),
    }
    let mut tensors = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let first = parts.next().ok_or_else(|| bad(format!("line {}: empty", lineno + 2)))?;
        if first == "meta" {
            let key = parts.next().ok_or_else(|| bad("meta without key".into()))?;
            let value: u64 = parts
                .next()
                .ok_or_else(|| bad("meta without value".into()))?
                .parse()
                .map_err(|e| bad(format!("meta value: {}", e)))?;
            meta.insert(key.to_string(), value);
            continue;
        }
        let dims = parts.next().ok_or_else(|| bad(format!("line {}: missing dims", lineno + 2)))?;
        let shape: Vec<usize> = if dims == "scalar" {
            vec![]
        } else {
            dims.split('x')
                .map(|d| d.parse::<usize>().map_err(|e| bad(format!("dims: {}", e))))
                .collect::<Result<_, _>>()?
        };
        let data: Vec<f64> = parts
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value: {}", e))))
            .collect::<Result<_, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        tensors.insert(first.to_string(), t);
    }
    Ok((tensors, meta))
}

/// Writes a CSV table with a header row; values formatted with 17
/// significant digits.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    atomic_write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_tensor_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.txt");
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".to_string(), Tensor::matrix(2, 2, vec![0.1, -1.5e-300, 3.0, f64::MIN_POSITIVE]).unwrap());
        tensors.insert("b".to_string(), Tensor::scalar(std::f64::consts::PI));
        tensors.insert("c".to_string(), Tensor::vector(vec![1.0 / 3.0]));
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), u64::MAX);
        write_named_tensors(&path, &tensors, &meta).unwrap();
        let (t2, m2) = read_named_tensors(&path).unwrap();
        assert_eq!(m2["seed"], u64::MAX);
        assert_eq!(t2.len(), 3);
        for (name, t) in &tensors {
            let r = &t2[name];
            assert_eq!(r.shape(), t.shape());
            for (a, b) in t.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{} did not round-trip", name);
            }
        }
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        atomic_write(&path, "one").unwrap();
        atomic_write(&path, "two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        // No temp files left behind.
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
