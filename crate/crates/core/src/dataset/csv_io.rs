use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::RawSeries;
use crate::error::{Error, Result};

fn read_rows(path: &Path, has_header: bool) -> Result<Vec<(usize, Vec<String>)>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Parse {
            row: 0,
            col: 0,
            msg: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            col: 0,
            msg: e.to_string(),
        })?;
        let line = record
            .position()
            .map_or(rows.len() + 1, |p| p.line() as usize);
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 0,
            col: 0,
            msg: format!("{} contains no data rows", path.display()),
        });
    }
    Ok(rows)
}

fn parse_matrix<T>(
    rows: Vec<(usize, Vec<String>)>,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Vec<Vec<T>>> {
    let width = rows[0].1.len();
    rows.into_iter()
        .map(|(line, fields)| {
            if fields.len() != width {
                return Err(Error::Parse {
                    row: line,
                    col: fields.len().min(width),
                    msg: format!("expected {width} fields, found {}", fields.len()),
                });
            }
            fields
                .iter()
                .enumerate()
                .map(|(col, f)| {
                    parse(f).ok_or_else(|| Error::Parse {
                        row: line,
                        col,
                        msg: format!("invalid value {f:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

fn parse_label(s: &str) -> Option<u8> {
    match s.parse::<f64>().ok()? {
        0.0 => Some(0),
        1.0 => Some(1),
        _ => None,
    }
}

/// Reads a numeric CSV, one row per timestamp, and optionally a label file
/// of the same shape with entries in {0, 1}.
pub fn load_csv(path: &Path, has_header: bool, label_path: Option<&Path>) -> Result<RawSeries> {
    let values = parse_matrix(read_rows(path, has_header)?, |s| {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    })?;
    let labels = match label_path {
        Some(lp) => {
            let labels = load_labels(lp, has_header)?;
            let m = values[0].len();
            if labels.len() != values.len() || labels[0].len() != m {
                return Err(Error::ShapeMismatch(format!(
                    "labels are {}x{}, values are {}x{m}",
                    labels.len(),
                    labels[0].len(),
                    values.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    let name = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    RawSeries::new(name, values, labels)
}

/// Reads a {0, 1} label matrix of any width.
pub fn load_labels(path: &Path, has_header: bool) -> Result<Vec<Vec<u8>>> {
    parse_matrix(read_rows(path, has_header)?, parse_label)
}

/// Writes rows as CSV with an optional header line.
pub fn write_matrix_csv<T: std::fmt::Display>(
    path: &Path,
    header: Option<&[String]>,
    rows: &[Vec<T>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(","))?;
    }
    for row in rows {
        let line: Vec<String> = row.iter().map(ToString::to_string).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_plain_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "v.csv", "0,1\n2,3\n4,5\n");
        let s = load_csv(&p, false, None).unwrap();
        assert_eq!((s.len(), s.dims()), (3, 2));
        assert_eq!(s.values[2], vec![4.0, 5.0]);
        assert_eq!(s.name, "v");
    }

    #[test]
    fn header_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "v.csv", "a,b\n0,1\n");
        assert_eq!(load_csv(&p, true, None).unwrap().len(), 1);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "v.csv", "");
        assert!(matches!(
            load_csv(&p, false, None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn non_numeric_cell_names_its_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "v.csv", "0,1\n2,x\n");
        assert!(matches!(
            load_csv(&p, false, None),
            Err(Error::Parse { row: 2, col: 1, .. })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_csv(Path::new("/nonexistent/v.csv"), false, None),
            Err(Error::FileNotFound(_))
        ));
    }

    #[test]
    fn label_row_count_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let values: String = (0..10).map(|i| format!("{i}\n")).collect();
        let labels: String = (0..9).map(|_| "0\n").collect();
        let v = write(dir.path(), "v.csv", &values);
        let l = write(dir.path(), "l.csv", &labels);
        assert!(matches!(
            load_csv(&v, false, Some(&l)),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
