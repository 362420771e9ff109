//! Split a sweep table into one CSV per figure panel.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Panel names recognised in the `panel` column, with their output stems.
pub const PANELS: [(&str, &str); 4] = [("n", "are_vs_n"), ("N", "are_vs_N"), ("alpha", "are_vs_alpha"), ("zeta", "are_vs_zeta")];

/// Rows per panel, in `PANELS` order, plus the header. Rows with an empty
/// panel belong to every panel.
pub struct Split {
    pub header: csv::StringRecord,
    pub panels: Vec<Vec<csv::StringRecord>>,
}

pub fn split<R: Read>(input: R) -> Result<Split, CliError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| CliError::Validation(format!("input table: {e}")))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let are = col("are").ok_or_else(|| CliError::Validation("input table lacks column `are`".into()))?;
    let panel = col("panel");
    let mut panels = vec![Vec::new(); PANELS.len()];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::Validation(format!("input row {row}: {e}")))?;
        let v = rec.get(are).unwrap_or("").trim();
        if !v.is_empty() && v.parse::<f64>().is_err() {
            return Err(CliError::Validation(format!("input row {row}: `are` value `{v}` is not a number")));
        }
        let name = panel.and_then(|c| rec.get(c)).unwrap_or("").trim();
        if name.is_empty() {
            for p in panels.iter_mut() {
                p.push(rec.clone());
            }
            continue;
        }
        let k = PANELS
            .iter()
            .position(|(p, _)| *p == name)
            .ok_or_else(|| CliError::Validation(format!("input row {row}: unknown panel `{name}`")))?;
        panels[k].push(rec);
    }
    Ok(Split { header, panels })
}

/// Write the per-panel files and return their paths.
pub fn write(split: &Split, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))?;
    let mut paths = Vec::new();
    for ((_, stem), rows) in PANELS.iter().zip(&split.panels) {
        let path = out.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| CliError::Validation(format!("{}: {e}", path.display()));
        w.write_record(&split.header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Validation(e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        let t = "panel,n,are\nn,300,2.0\nn,600,3.0\nN,300,1.5\nalpha,300,1.0\nzeta,300,NaN\n";
        let s = split(t.as_bytes()).unwrap();
        let counts: Vec<usize> = s.panels.iter().map(Vec::len).collect();
        assert_eq!(counts, vec![2, 1, 1, 1]);
    }

    #[test]
    fn blank_panel_goes_everywhere() {
        let s = split("panel,are\n,1.0\n".as_bytes()).unwrap();
        assert!(s.panels.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn schema_errors() {
        assert!(split("panel,mse\nn,1\n".as_bytes()).is_err());
        assert!(split("panel,are\nq,1\n".as_bytes()).is_err());
        assert!(split("panel,are\nn,abc\n".as_bytes()).is_err());
    }
}
