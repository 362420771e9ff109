use std::io::{Read, Write};
use std::path::Path;

use super::{validate_dataset, Dataset, RawRow};
use crate::error::{Error, Result};

struct Layout {
    r: usize,
    y: usize,
    x: Vec<usize>,
    yhat: Option<usize>,
}

fn layout(headers: &csv::StringRecord) -> Result<Layout> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing = |name: &str| Error::InvalidRow {
        row: 0,
        what: format!("header lacks column `{name}`"),
    };
    let r = find("r").ok_or_else(|| missing("r"))?;
    let y = find("y").ok_or_else(|| missing("y"))?;
    let mut x = Vec::new();
    while let Some(c) = find(&format!("x{}", x.len() + 1)) {
        x.push(c);
    }
    Ok(Layout {
        r,
        y,
        x,
        yhat: find("yhat"),
    })
}

fn cell(rec: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<Option<f64>> {
    let s = rec.get(col).map(str::trim).unwrap_or("");
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::InvalidRow {
        row,
        what: format!("column `{name}`: cannot parse `{s}` as a number"),
    })
}

/// Parse a dataset from CSV with header `r,y,x1,...,xp[,yhat]`. Empty cells are
/// missing values. Row numbers in errors count data rows from 1.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let lay = layout(rdr.headers()?)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let r = cell(&rec, lay.r, row, "r")?.ok_or(Error::InvalidRow {
            row,
            what: "missing label indicator".into(),
        })?;
        let mut x = Vec::with_capacity(lay.x.len());
        for (j, &c) in lay.x.iter().enumerate() {
            match cell(&rec, c, row, &format!("x{}", j + 1))? {
                Some(v) => x.push(v),
                None => {
                    return Err(Error::RaggedCovariates {
                        row,
                        expected: lay.x.len(),
                        found: j,
                    })
                }
            }
        }
        rows.push(RawRow {
            r,
            y: cell(&rec, lay.y, row, "y")?,
            x,
            yhat: match lay.yhat {
                Some(c) => cell(&rec, c, row, "yhat")?,
                None => None,
            },
        });
    }
    validate_dataset(rows)
}

pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(std::io::BufReader::new(f))
}

/// Write a dataset in the same CSV layout `read_csv` accepts. The `yhat` column
/// is omitted for Scenario I data.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_acp = data.observations().iter().any(|o| o.yhat.is_some());
    let mut header = vec!["r".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    if with_acp {
        header.push("yhat".into());
    }
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for o in data.observations() {
        let mut rec = vec![if o.r { "1" } else { "0" }.to_string(), fmt(o.y)];
        rec.extend(o.x.iter().map(|v| format!("{v:?}")));
        if with_acp {
            rec.push(fmt(o.yhat));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_path(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    write_csv(data, std::io::BufWriter::new(f))
}
