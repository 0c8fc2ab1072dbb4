//! Numeric CSV tables: one header row, comma separated, `\n` line ends.
//! Reals are written in their shortest round-tripping decimal form.

use super::fs::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::dim(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn encode(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<CsvTable> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "missing CSV header".into(),
            })?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut table = CsvTable {
            header,
            rows: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let row: Result<Vec<f64>> = line
                .split(',')
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 2,
                        message: format!("not a number: {f:?}"),
                    })
                })
                .collect();
            table.push(row?).map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
        }
        Ok(table)
    }
}

pub fn write_csv(table: &CsvTable, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, table.encode().as_bytes())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvTable> {
    let bytes = read_bytes(path.as_ref())?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("CSV is not UTF-8".into()))?;
    CsvTable::decode(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout() {
        let mut t = CsvTable::new(&["iteration", "loss"]);
        t.push(vec![0.0, 0.1]).unwrap();
        t.push(vec![1.0, 1.0 / 3.0]).unwrap();
        assert_eq!(t.encode(), "iteration,loss\n0,0.1\n1,0.3333333333333333\n");
        assert!(t.push(vec![1.0]).is_err());
        assert_eq!(t.column("loss").unwrap()[1], 1.0 / 3.0);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = CsvTable::decode("a,b\n1,2\n3,x\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(CsvTable::decode("").is_err());
    }

    proptest! {
        #[test]
        fn reals_round_trip_exactly(v in proptest::collection::vec(-1e300f64..1e300, 1..20)) {
            let mut t = CsvTable::new(&["x"]);
            for x in &v {
                t.push(vec![*x]).unwrap();
            }
            prop_assert_eq!(CsvTable::decode(&t.encode()).unwrap(), t);
        }
    }
}
