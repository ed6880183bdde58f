//! `GWGT` table files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    b"GWGT"
//! version  u32 (= 1)
//! horizon  u64 T
//! levels   for n in 0..=T: (n+1)^2 f64 log counts, row-major rotated (i, j)
//! ```
//!
//! Unreachable cells do not exist in the rotated layout, so every stored value
//! is finite.

use std::io::Write;
use std::path::Path;

use crate::binio::{expect_header, read_file, Reader, Writer};
use crate::error::{Error, Result};

use super::GreensTable;

pub const MAGIC: &[u8; 4] = b"GWGT";
pub const VERSION: u32 = 1;

pub fn write_table<W: Write>(table: &GreensTable, out: W) -> Result<()> {
    let mut w = Writer::new(out);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u64(table.horizon())?;
    for level in table.levels() {
        w.f64s(level)?;
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn decode_table(bytes: &[u8]) -> Result<GreensTable> {
    let mut r = Reader::new(bytes);
    expect_header(&mut r, MAGIC, VERSION)?;
    let horizon = r.u64()?;
    let need = super::greens::table_bytes(horizon);
    if need > r.remaining() as u128 {
        return Err(Error::Corruption(format!(
            "horizon {horizon} needs {need} bytes of levels, {} present",
            r.remaining()
        )));
    }
    let mut levels = Vec::with_capacity(horizon as usize + 1);
    for n in 0..=horizon as usize {
        let level = r.f64s((n + 1) * (n + 1))?;
        if level.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corruption(format!("non-finite count at level {n}")));
        }
        levels.push(level);
    }
    r.finish()?;
    Ok(GreensTable::from_levels(horizon, levels))
}

pub fn save_table(table: &GreensTable, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_table(table, std::io::BufWriter::new(f))
}

pub fn load_table(path: &Path) -> Result<GreensTable> {
    decode_table(&read_file(path)?)
}
