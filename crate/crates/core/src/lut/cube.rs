//! Plain-text `.cube` export/import for [`Lut3D`].
//!
//! Layout written by [`write_cube`]:
//!
//! ```text
//! TITLE "<title>"
//! LUT_3D_SIZE <D>
//! DOMAIN_MIN 0.0 0.0 0.0
//! DOMAIN_MAX 1.0 1.0 1.0
//! <r> <g> <b>        D³ rows, red index fastest, then green, then blue
//! ```
//!
//! Values are printed with 9 decimal places. The reader accepts `#` comments,
//! blank lines, and ignores `TITLE`/`DOMAIN_*` keywords (only the unit domain
//! is supported).

use std::io::{BufRead, Write};

use thiserror::Error;

use super::{Lut3D, LutError};

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("cube i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("cube parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Lut(#[from] LutError),
}

pub fn write_cube<W: Write>(out: &mut W, lut: &Lut3D, title: &str) -> Result<(), CubeError> {
    writeln!(out, "TITLE \"{}\"", title.replace('"', "'"))?;
    writeln!(out, "LUT_3D_SIZE {}", lut.dim())?;
    writeln!(out, "DOMAIN_MIN 0.0 0.0 0.0")?;
    writeln!(out, "DOMAIN_MAX 1.0 1.0 1.0")?;
    for rgb in lut.grid().chunks_exact(3) {
        writeln!(out, "{:.9} {:.9} {:.9}", rgb[0], rgb[1], rgb[2])?;
    }
    Ok(())
}

pub fn read_cube<R: BufRead>(input: R) -> Result<Lut3D, CubeError> {
    let mut dim = None;
    let mut grid = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CubeError::Parse { line: n + 1, message };
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or_default();
        match head {
            "TITLE" | "DOMAIN_MIN" | "DOMAIN_MAX" => continue,
            "LUT_1D_SIZE" => return Err(err("1D cube files are not supported".into())),
            "LUT_3D_SIZE" => {
                let d: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("bad LUT_3D_SIZE".into()))?;
                dim = Some(d);
                grid.reserve(d * d * d * 3);
            }
            _ => {
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(e.to_string()))?;
                if vals.len() != 3 {
                    return Err(err(format!("expected 3 values, found {}", vals.len())));
                }
                if dim.is_none() {
                    return Err(err("data row before LUT_3D_SIZE".into()));
                }
                grid.extend(vals);
            }
        }
    }
    let dim = dim.ok_or(CubeError::Parse { line: 0, message: "missing LUT_3D_SIZE".into() })?;
    Ok(Lut3D::from_grid(dim, grid)?)
}
