//! CSV training logs and PGM slice images.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use mtreg::trainer::StepRecord;
use mtreg::uncertainty::Map64;

/// Step log that is flushed after every row, so an aborted run keeps the
/// rows written so far.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", StepRecord::CSV_HEADER)?;
        out.flush()?;
        Ok(CsvLog { out })
    }

    pub fn append(&mut self, r: &StepRecord) -> io::Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()
    }
}

/// Channel `c` of the slice `z = nz / 2`, row-major in `(y, x)`.
pub fn mid_axial_slice(map: &Map64, c: usize) -> Vec<f64> {
    let [nx, ny, nz] = map.grid().dims();
    let z = nz / 2;
    let start = (c * nz + z) * ny * nx;
    map.data()[start..start + ny * nx].to_vec()
}

/// Binary 8-bit PGM, min-max normalized; a constant image is black.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> io::Result<()> {
    std::fs::write(path, encode_pgm(width, height, values))
}
