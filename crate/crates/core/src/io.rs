//! Readers and writers: series CSV files, the binary `CGSG` grid format and
//! numeric CSV outputs.
//!
//! Numbers are written with 17 significant digits so every `f64` survives a
//! write/read round trip unchanged.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"CGSG";
pub const GRID_VERSION: u32 = 1;
const GRID_HEADER_LEN: usize = 20;

/// Format a number with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // keeps the sign of negative zero
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    format!("{v:.16e}")
}

/// Series in columns, one row per time point.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesData {
    /// Contents of the first column.
    pub times: Vec<String>,
    /// Column names of the series.
    pub names: Vec<String>,
    /// n x p.
    pub values: DMatrix<f64>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Read a CSV file with a header row, a time column and one column per series.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesData> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(parse_err(path, 1, "expected a time column and at least one series column"));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let p = names.len();
    let mut times = Vec::new();
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|pos| pos.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|pos| pos.line() as usize).unwrap_or(0);
        if record.len() != p + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", p + 1, record.len())));
        }
        let time = record[0].trim().to_string();
        if !seen.insert(time.clone()) {
            return Err(parse_err(path, line, format!("duplicate time index {time:?}")));
        }
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {:?}: {cell:?} is not a number", names[j])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {:?}: missing or non-finite value", names[j])));
            }
            values.push(v);
        }
        times.push(time);
    }
    let n = times.len();
    if n == 0 {
        return Err(parse_err(path, 2, "no data rows"));
    }
    Ok(SeriesData {
        times,
        names,
        values: DMatrix::from_row_slice(n, p, &values),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Write rows of already formatted fields under a header.
pub fn write_rows<I, R>(path: impl AsRef<Path>, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    let wrap = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write series in the layout read by [`load_csv`].
pub fn save_csv(path: impl AsRef<Path>, data: &SeriesData) -> Result<()> {
    let mut header = vec!["t"];
    header.extend(data.names.iter().map(String::as_str));
    let rows = (0..data.values.nrows()).map(|t| {
        std::iter::once(data.times[t].clone()).chain(data.values.row(t).iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>())
    });
    write_rows(path, &header, rows)
}

/// Series data with time points `1..=n` and columns `y1, y2, ...`.
pub fn series_from_matrix(values: DMatrix<f64>, prefix: &str) -> SeriesData {
    SeriesData {
        times: (1..=values.nrows()).map(|t| t.to_string()).collect(),
        names: (1..=values.ncols()).map(|j| format!("{prefix}{j}")).collect(),
        values,
    }
}

/// A space-time data set on a rectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub rows: usize,
    pub cols: usize,
    /// T x (rows * cols); within a frame, pixels are row-major.
    pub values: DMatrix<f64>,
    pub timestamps: Option<Vec<String>>,
    /// T x k_r.
    pub regressors: Option<DMatrix<f64>>,
}

impl GridDataset {
    pub fn n_times(&self) -> usize {
        self.values.nrows()
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Read a `CGSG` file: magic, then version, rows, cols and T as little-endian
/// `u32`, then `T * rows * cols` little-endian `f64` frames.
pub fn load_grid(path: impl AsRef<Path>) -> Result<GridDataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < GRID_HEADER_LEN {
        return Err(format_err(path, format!("header needs {GRID_HEADER_LEN} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("four bytes")) as usize;
    let (version, rows, cols, n) = (word(0), word(1), word(2), word(3));
    if version != GRID_VERSION as usize {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(path, "grid dimensions overflow"))?;
    let expected = GRID_HEADER_LEN + 8 * count;
    if bytes.len() != expected {
        return Err(format_err(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let payload = &bytes[GRID_HEADER_LEN..];
    let mut values = DMatrix::zeros(n, rows * cols);
    for t in 0..n {
        for c in 0..rows * cols {
            let o = 8 * (t * rows * cols + c);
            let v = f64::from_le_bytes(payload[o..o + 8].try_into().expect("eight bytes"));
            if !v.is_finite() {
                return Err(format_err(path, format!("non-finite value at frame {}, pixel {}", t + 1, c + 1)));
            }
            values[(t, c)] = v;
        }
    }
    Ok(GridDataset {
        rows,
        cols,
        values,
        timestamps: None,
        regressors: None,
    })
}

/// Write the `CGSG` binary layout read by [`load_grid`].
pub fn write_grid(path: impl AsRef<Path>, grid: &GridDataset) -> Result<()> {
    let path = path.as_ref();
    if grid.values.ncols() != grid.rows * grid.cols {
        return Err(Error::dim("grid frame size", grid.rows * grid.cols, grid.values.ncols()));
    }
    let mut w = create(path)?;
    let mut buf = Vec::with_capacity(GRID_HEADER_LEN + 8 * grid.values.len());
    buf.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION as usize, grid.rows, grid.cols, grid.n_times()] {
        let v = u32::try_from(v).map_err(|_| format_err(path, format!("{v} does not fit in a u32 header field")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in 0..grid.n_times() {
        for c in 0..grid.values.ncols() {
            buf.extend_from_slice(&grid.values[(t, c)].to_le_bytes());
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Read a matrix written by [`save_csv`] or any CSV with a label column,
/// returning only the numbers.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    Ok(load_csv(path)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_keeps_every_bit() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MAX, f64::MIN_POSITIVE, -0.0, 2.0f64.sqrt()] {
            let back: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
        }
    }

    #[test]
    fn small_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "t,a,b\n1,1.5,2\n2,-3,4e-1\n3,0,7\n").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!(d.values.shape(), (3, 2));
        assert_eq!(d.values[(1, 1)], 0.4);
        assert_eq!(d.names, vec!["a", "b"]);
        assert_eq!(d.times, vec!["1", "2", "3"]);
    }

    #[test]
    fn bad_cell_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "t,a\n1,1\n2,2\n3,3\n4,4\n5,5\n6,x\n7,7\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_and_duplicate_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "t,a,b\n1,1,2\n2,3\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&path, "t,a\n1,1\n2,3\n1,4\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 4, .. })));
        std::fs::write(&path, "t,a\n1,1\n2,\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn grid_fixture_bytes() {
        let mut bytes = b"CGSG".to_vec();
        for v in [1u32, 2, 2, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..12 {
            bytes.extend_from_slice(&(i as f64 * 0.5).to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.cgsg");
        std::fs::write(&path, &bytes).unwrap();
        let g = load_grid(&path).unwrap();
        assert_eq!((g.rows, g.cols, g.n_times()), (2, 2, 3));
        assert_eq!(g.values[(1, 2)], 3.0);
        assert_eq!(g.values[(2, 3)], 5.5);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_grid(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("expected 116 bytes, found 113"), "{message}"),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_grid(&path), Err(Error::Format { .. })));
    }
}
