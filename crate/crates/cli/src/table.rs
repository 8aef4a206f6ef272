//! Result tables: tab-separated records for machines, aligned text for
//! people.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use twotower_core::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, row: usize, column: &str) -> Option<&str> {
        self.column(column).map(|c| self.rows[row][c].as_str())
    }

    /// Numeric cell; `None` for missing columns and unparseable values.
    pub fn number(&self, row: usize, column: &str) -> Option<f64> {
        self.get(row, column)?.parse().ok()
    }

    /// A copy restricted to the named columns, in the given order.
    pub fn select(&self, columns: &[&str]) -> Table {
        let idx: Vec<usize> = columns.iter().filter_map(|c| self.column(c)).collect();
        Table {
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                .collect(),
        }
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.columns.join("\t"))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join("\t"))?;
        }
        Ok(())
    }

    /// Column-aligned view; fractional numbers are shown to four places.
    pub fn write_aligned<W: Write>(&self, mut w: W) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|c| pretty(c)).collect())
            .collect();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for row in &rows {
            for (wd, cell) in widths.iter_mut().zip(row) {
                *wd = (*wd).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &wd)| format!("{c:<wd$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(w, "{}", line(&self.columns))?;
        let rule: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        writeln!(w, "{}", "-".repeat(rule))?;
        for row in &rows {
            writeln!(w, "{}", line(row))?;
        }
        Ok(())
    }

    /// Parses a header line and rows; blank lines and `#` lines are skipped.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Table> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(h) => h?,
            None => return Err(Error::EmptyDataset),
        };
        let mut table = Table::new(header.split('\t'));
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<String> = line.split('\t').map(String::from).collect();
            if row.len() != table.columns.len() {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!(
                        "{} fields under a {}-column header",
                        row.len(),
                        table.columns.len()
                    ),
                });
            }
            table.rows.push(row);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Table> {
        Table::read_tsv(BufReader::new(fs::File::open(path)?))
    }
}

fn pretty(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(x) if cell.contains('.') || cell.contains('e') => format!("{x:.4}"),
        _ => cell.to_string(),
    }
}

/// Writes `path` (tab-separated) and a sibling `.txt` with the aligned view.
/// Returns the path of the aligned file.
pub fn emit_report(table: &Table, path: &Path) -> Result<PathBuf> {
    let mut tsv = Vec::new();
    table.write_tsv(&mut tsv)?;
    fs::write(path, tsv)?;
    let aligned_path = path.with_extension("txt");
    let mut aligned = Vec::new();
    table.write_aligned(&mut aligned)?;
    fs::write(&aligned_path, aligned)?;
    Ok(aligned_path)
}

/// Shortest decimal form that parses back to the same value.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new(["name", "recall@50", "seed"]);
        t.push(vec!["cbns".into(), num(0.1 + 0.2), "0".into()]);
        t.push(vec!["in_batch".into(), num(1.0 / 3.0), "1".into()]);
        t
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(["a", "b"]);
        let mut out = Vec::new();
        t.write_tsv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "a\tb\n");
    }

    #[test]
    fn round_trip_preserves_values() {
        let t = sample();
        let mut out = Vec::new();
        t.write_tsv(&mut out).unwrap();
        let back = Table::read_tsv(&out[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.number(0, "recall@50"), Some(0.1 + 0.2));
        assert_eq!(back.number(1, "recall@50"), Some(1.0 / 3.0));
    }

    #[test]
    fn emission_is_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        emit_report(&t, &a).unwrap();
        emit_report(&t, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(a.with_extension("txt")).unwrap(), fs::read(b.with_extension("txt")).unwrap());
    }

    #[test]
    fn aligned_columns_line_up() {
        let mut out = Vec::new();
        sample().write_aligned(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let col = lines[0].find("recall@50").unwrap();
        assert_eq!(&lines[2][col..col + 4], "0.30");
        assert_eq!(&lines[3][col..col + 4], "0.33");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(Table::read_tsv("a\tb\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = emit_report(&sample(), Path::new("/nonexistent/dir/x.tsv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
