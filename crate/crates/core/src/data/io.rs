//! Series file formats.
//!
//! Binary layout (little-endian):
//!
//! | field          | type        |
//! |----------------|-------------|
//! | magic          | `b"STGS"`   |
//! | version        | u16 (= 1)   |
//! | nodes          | u32         |
//! | steps          | u32         |
//! | steps_per_day  | u32         |
//! | interval_min   | u16         |
//! | values         | f64 × steps·nodes, row-major |

use std::io::{Read, Write};
use std::path::Path;

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STGS";
const VERSION: u16 = 1;

pub fn write_series(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + ds.series().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.nodes() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.steps() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.steps_per_day() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.interval_minutes() as u16).to_le_bytes());
    for v in ds.series() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<TimeSeriesDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..4] != MAGIC {
        return Err(bad("not an STGS series file"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    if u16_at(4) != VERSION {
        return Err(bad(&format!("unsupported version {}", u16_at(4))));
    }
    let nodes = u32_at(6);
    let steps = u32_at(10);
    let steps_per_day = u32_at(14);
    let interval = u16_at(18) as usize;
    if steps_per_day * interval != 1440 {
        return Err(bad("steps_per_day × interval_min must equal 1440"));
    }
    let body = &buf[20..];
    if body.len() != steps * nodes * 8 {
        return Err(bad(&format!(
            "expected {} value bytes, found {}",
            steps * nodes * 8,
            body.len()
        )));
    }
    let series = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TimeSeriesDataset::new(series, steps, nodes, steps_per_day)
}

/// CSV with a header of node ids and one row of values per step.
pub fn read_csv(path: &Path, steps_per_day: usize) -> Result<TimeSeriesDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let nodes = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .len();
    let mut series = Vec::new();
    let mut steps = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        if record.len() != nodes {
            return Err(Error::Data(format!(
                "row {} has {} columns, expected {nodes}",
                row + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {}: cannot parse {field:?}", row + 1)))?;
            series.push(v);
        }
        steps += 1;
    }
    TimeSeriesDataset::new(series, steps, nodes, steps_per_day)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip_and_header() {
        let ds =
            TimeSeriesDataset::new((0..12).map(|v| v as f64 * 0.5).collect(), 4, 3, 288).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.stgs");
        write_series(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"STGS");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[18..20], &5u16.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 12 * 8);
        assert_eq!(read_series(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_error() {
        let ds = TimeSeriesDataset::new(vec![1.0; 6], 3, 2, 288).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.stgs");
        write_series(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_series(&path).is_err());
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "400,401\n1.5,2\n3,4.25\n").unwrap();
        let ds = read_csv(&path, 288).unwrap();
        assert_eq!((ds.steps(), ds.nodes()), (2, 2));
        assert_eq!(ds.series(), &[1.5, 2.0, 3.0, 4.25]);
    }
}
