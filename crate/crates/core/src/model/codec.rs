//! Checkpoint format for parameter sets.
//!
//! ```text
//! EV3PARAMS 1
//! entries <k>
//! <key> <rows> <cols>        (k lines, in key order)
//! data
//! <little-endian f64 values, entries concatenated in header order>
//! ```

use std::fs;
use std::path::Path;

use super::{ParamKey, ParameterSet};
use crate::error::{Ev3Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "EV3PARAMS 1";

pub fn encode_params(params: &ParameterSet) -> Vec<u8> {
    let entries: Vec<(String, &Tensor)> = params.iter().map(|(k, t)| (k.to_string(), t)).collect();
    encode_named(&entries)
}

/// Encodes arbitrary named tensors in the checkpoint layout.
pub(crate) fn encode_named(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let count = entries.len();
    let mut header = format!("{MAGIC}\nentries {count}\n");
    let mut scalars = 0;
    for (name, t) in entries {
        header.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
        scalars += t.len();
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    out.reserve(scalars * 8);
    for (_, t) in entries {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    let rest = bytes.get(*pos..)?;
    let end = rest.iter().position(|&b| b == b'\n')?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).ok()
}

/// Decodes one block of named tensors starting at `*pos`, advancing past it.
pub(crate) fn decode_named_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if take_line(bytes, pos) != Some(MAGIC) {
        return Err("missing EV3PARAMS header".into());
    }
    let count: usize = take_line(bytes, pos)
        .and_then(|l| l.strip_prefix("entries "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or("bad entries line")?;
    let mut layout = Vec::with_capacity(count);
    for _ in 0..count {
        let line = take_line(bytes, pos).ok_or("truncated key list")?;
        let mut parts = line.split_whitespace();
        let (Some(name), Some(r), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(format!("bad key line `{line}`"));
        };
        let rows: usize = r.parse().map_err(|_| format!("bad rows in `{line}`"))?;
        let cols: usize = c.parse().map_err(|_| format!("bad cols in `{line}`"))?;
        layout.push((name.to_string(), rows, cols));
    }
    if take_line(bytes, pos) != Some("data") {
        return Err("missing data marker".into());
    }
    let mut out = Vec::with_capacity(layout.len());
    for (name, rows, cols) in layout {
        let n = rows * cols;
        let raw = bytes
            .get(*pos..*pos + n * 8)
            .ok_or_else(|| format!("truncated data for {name}"))?;
        *pos += n * 8;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(rows, cols, values).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

fn decode_params_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<ParameterSet, String> {
    let mut params = ParameterSet::new();
    for (name, t) in decode_named_at(bytes, pos)? {
        let key = ParamKey::parse(&name).ok_or_else(|| format!("unknown key `{name}`"))?;
        if params.insert(key, t).is_some() {
            return Err(format!("duplicate key {key}"));
        }
    }
    Ok(params)
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<ParameterSet, String> {
    let mut pos = 0;
    let params = decode_params_at(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok(params)
}

pub fn write_params(path: &Path, params: &ParameterSet) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Ev3Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ParameterSet> {
    let bytes = fs::read(path).map_err(|e| Ev3Error::io(path, e))?;
    decode_params(&bytes).map_err(|detail| Ev3Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, GraphSpec};

    #[test]
    fn file_round_trip_is_exact() {
        let spec = GraphSpec::from_pairs(5, 3, &[(4, 2), (6, 1)]).unwrap();
        let p = init_params(&spec, 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.params");
        write_params(&path, &p).unwrap();
        let q = read_params(&path).unwrap();
        assert_eq!(p, q);
        q.check(&spec).unwrap();
    }

    #[test]
    fn header_is_readable_text() {
        let spec = GraphSpec::from_pairs(2, 2, &[(3, 1)]).unwrap();
        let bytes = encode_params(&init_params(&spec, 0));
        let text = String::from_utf8_lossy(&bytes[..60]);
        assert!(text.starts_with("EV3PARAMS 1\nentries 8\nstem.weight 2 3\n"));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let spec = GraphSpec::from_pairs(2, 2, &[(3, 1)]).unwrap();
        let bytes = encode_params(&init_params(&spec, 0));
        assert!(decode_params(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_params(&extra).is_err());
        assert!(decode_params(b"EV3PARAMS 2\n").is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_params(&nan).is_err());
    }
}
