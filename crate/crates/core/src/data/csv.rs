//! `label,pixel,pixel,...` files with 0..=255 pixel values and an optional
//! header row.

use std::path::Path;

use super::{LabeledSet, Record, Role};
use crate::error::{Error, Result};

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Reads a CSV file. Rows whose pixel count is a perfect square become
/// `[1, s, s]` images; other widths stay flat.
pub fn read_csv(path: &Path, role: Role, num_classes: Option<usize>) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let mut records = Vec::new();
    let mut width = None;
    for (row, result) in reader.records().enumerate() {
        let rec = result.map_err(|e| {
            let offset = e.position().map(|p| p.byte()).unwrap_or(0);
            parse_err(offset, e.to_string())
        })?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        let first = rec.get(0).unwrap_or("");
        if row == 0 && first.parse::<f64>().is_err() {
            continue;
        }
        let label: usize = first
            .parse()
            .map_err(|_| parse_err(offset, format!("invalid label `{first}`")))?;
        let pixels = rec
            .iter()
            .skip(1)
            .map(|field| {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(offset, format!("invalid pixel `{field}`")))?;
                if !(0.0..=255.0).contains(&v) {
                    return Err(parse_err(offset, format!("pixel {v} outside 0..=255")));
                }
                Ok(v / 255.0)
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None if pixels.is_empty() => return Err(parse_err(offset, "row has no pixels")),
            None => width = Some(pixels.len()),
            Some(w) if w != pixels.len() => {
                return Err(parse_err(
                    offset,
                    format!("row has {} pixels, expected {w}", pixels.len()),
                ))
            }
            _ => {}
        }
        records.push(Record { input: pixels, label });
    }
    let width = width.ok_or_else(|| parse_err(0, "no data rows"))?;
    let side = (width as f64).sqrt().round() as usize;
    let shape = if side * side == width {
        vec![1, side, side]
    } else {
        vec![width]
    };
    let inferred = records.iter().map(|r| r.label + 1).max().unwrap_or(0).max(2);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledSet::new(records, shape, num_classes.unwrap_or(inferred), role, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_records_are_normalized() {
        let f = write("label,p0,p1,p2,p3\n1,0,255,51,102\n0,255,255,0,0\n");
        let set = read_csv(f.path(), Role::Train, None).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.input_shape(), &[1, 2, 2]);
        assert_eq!(set.records()[0].input, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(set.labels(), vec![1, 0]);
    }

    #[test]
    fn ragged_row_reports_offset() {
        let f = write("0,1,2,3\n1,4,5\n");
        match read_csv(f.path(), Role::Train, None) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_values() {
        assert!(read_csv(write("0,1,2\n1,x,2\n").path(), Role::Train, None).is_err());
        assert!(read_csv(write("0,300\n").path(), Role::Train, None).is_err());
        assert!(read_csv(write("").path(), Role::Train, None).is_err());
    }
}
