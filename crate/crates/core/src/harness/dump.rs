//! `GWAC` activation dumps.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    b"GWAC"
//! version  u32 (= 1)
//! header   u32 length + JSON {config_hash, step, d_model, rows, points}
//! classes  u32 x rows, prefix class of each row
//! blocks   one per capture point, in header order: rows x d_model f64
//! ```
//!
//! Rows follow the prefix trie, level by level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{expect_header, read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::ActivationSet;

pub const DUMP_MAGIC: &[u8; 4] = b"GWAC";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub config_hash: String,
    pub step: u64,
    pub d_model: usize,
    pub rows: usize,
    pub points: Vec<String>,
}

pub fn write_activation_dump(path: &Path, config_hash: &str, step: u64, classes: &[u32], acts: &ActivationSet) -> Result<()> {
    if classes.len() != acts.rows {
        return Err(Error::arg(format!("{} classes for {} rows", classes.len(), acts.rows)));
    }
    let header = DumpHeader {
        config_hash: config_hash.to_string(),
        step,
        d_model: acts.d_model,
        rows: acts.rows,
        points: acts.names().map(String::from).collect(),
    };
    let f = std::fs::File::create(path)?;
    let mut w = Writer::new(std::io::BufWriter::new(f));
    w.bytes(DUMP_MAGIC)?;
    w.u32(DUMP_VERSION)?;
    w.str(&serde_json::to_string(&header)?)?;
    for c in classes {
        w.u32(*c)?;
    }
    for (_, data) in &acts.points {
        w.f64s(data)?;
    }
    use std::io::Write;
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_activation_dump(path: &Path) -> Result<(DumpHeader, Vec<u32>, ActivationSet)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    expect_header(&mut r, DUMP_MAGIC, DUMP_VERSION)?;
    let header: DumpHeader =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Corruption(format!("dump header: {e}")))?;
    let per_point = header.rows.checked_mul(header.d_model);
    let need = per_point
        .and_then(|n| n.checked_mul(8 * header.points.len()))
        .and_then(|n| n.checked_add(4 * header.rows));
    if need.is_none_or(|n| n != r.remaining()) {
        return Err(Error::Corruption(format!(
            "dump body is {} bytes, header implies {need:?}",
            r.remaining()
        )));
    }
    let classes = (0..header.rows).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(header.points.len());
    for name in &header.points {
        points.push((name.clone(), r.f64s(header.rows * header.d_model)?));
    }
    r.finish()?;
    let acts = ActivationSet { d_model: header.d_model, rows: header.rows, points };
    Ok((header, classes, acts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gwac");
        let acts = ActivationSet {
            d_model: 2,
            rows: 3,
            points: vec![("x".into(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), ("y".into(), vec![0.5; 6])],
        };
        write_activation_dump(&path, "abc", 7, &[0, 1, 1], &acts).unwrap();
        let (h, classes, back) = read_activation_dump(&path).unwrap();
        assert_eq!(h.step, 7);
        assert_eq!(h.config_hash, "abc");
        assert_eq!(classes, vec![0, 1, 1]);
        assert_eq!(back.points, acts.points);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_activation_dump(&path), Err(Error::Corruption(_))));
    }
}
