//! CSV tables with a header row. Numbers are written in Rust's shortest
//! round-trip form, so reading a table back reproduces every value exactly.

use crate::error::CliError;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v:?}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            Cell::Text(s) => s.parse().ok(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(headers: &[S]) -> Self {
        Self { headers: headers.iter().map(|h| h.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<Cell>> {
        let k = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].clone()).collect())
    }

    /// Numeric column; text cells that do not parse become NaN.
    pub fn numbers(&self, name: &str) -> Option<Vec<f64>> {
        Some(self.column(name)?.iter().map(|c| c.as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv_string(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::Output { path: "<memory>".into(), message: e.to_string() };
        w.write_record(&self.headers).map_err(err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render)).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Output { path: "<memory>".into(), message: e.to_string() })?;
        String::from_utf8(bytes).map_err(|e| CliError::Output { path: "<memory>".into(), message: e.to_string() })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = self.to_csv_string()?;
        std::fs::write(path, text).map_err(|e| CliError::Output { path: path.display().to_string(), message: e.to_string() })
    }

    /// Parses a table written by [`Table::write`]. Cells that parse as
    /// integers become `Int`, other numbers `Num`, the rest `Text`.
    pub fn from_csv_str(text: &str) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(parse_cell).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Output { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_csv_str(&text).map_err(|e| CliError::Output { path: path.display().to_string(), message: e.to_string() })
    }
}

fn parse_cell(s: &str) -> Cell {
    if let Ok(i) = s.parse::<u64>() {
        return Cell::Int(i);
    }
    match s.parse::<f64>() {
        Ok(v) => Cell::Num(v),
        Err(_) => Cell::Text(s.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_mixed_table() {
        let mut t = Table::new(&["target", "model", "L_or_T", "l1", "kl"]);
        t.push(vec!["gmm1d".into(), "iresnet".into(), 0.25.into(), 0.1234567890123.into(), 1e-300.into()]);
        t.push(vec!["two, uniform".into(), "exact_flow".into(), 3.0.into(), f64::NAN.into(), f64::INFINITY.into()]);
        let back = Table::from_csv_str(&t.to_csv_string().unwrap()).unwrap();
        assert_eq!(back.headers, t.headers);
        assert_eq!(back.rows[0][0], Cell::Text("gmm1d".into()));
        assert_eq!(back.rows[1][0], Cell::Text("two, uniform".into()));
        assert_eq!(back.numbers("l1").unwrap()[0], 0.1234567890123);
        assert_eq!(back.numbers("kl").unwrap()[0], 1e-300);
        assert!(back.numbers("l1").unwrap()[1].is_nan());
        assert_eq!(back.numbers("kl").unwrap()[1], f64::INFINITY);
        assert_eq!(back.numbers("L_or_T").unwrap(), vec![0.25, 3.0]);
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(v in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..50)) {
            let mut t = Table::new(&["x"]);
            for x in &v {
                t.push(vec![(*x).into()]);
            }
            let back = Table::from_csv_str(&t.to_csv_string().unwrap()).unwrap();
            prop_assert_eq!(back.numbers("x").unwrap(), v);
        }
    }
}
