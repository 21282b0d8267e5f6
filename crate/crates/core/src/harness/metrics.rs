//! The versioned `metrics.csv` schema.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const SCHEMA: &str = "alix-metrics";
pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_MINOR: u32 = 0;

/// One metrics tick. Absent quantities are written as empty fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub td_loss: Option<f64>,
    pub td_loss_zero_reward: Option<f64>,
    pub td_loss_nonzero_reward: Option<f64>,
    pub q_mean: Option<f64>,
    pub pearson_target: Option<f64>,
    pub pearson_mc: Option<f64>,
    pub nd_instant: Option<f64>,
    pub nd_robust: Option<f64>,
    pub nd_accumulated: Option<f64>,
    #[serde(rename = "S")]
    pub s: Option<f64>,
    pub episode_return: Option<f64>,
}

pub const COLUMNS: [&str; 12] = [
    "step",
    "td_loss",
    "td_loss_zero_reward",
    "td_loss_nonzero_reward",
    "q_mean",
    "pearson_target",
    "pearson_mc",
    "nd_instant",
    "nd_robust",
    "nd_accumulated",
    "S",
    "episode_return",
];

impl MetricsRow {
    /// Value of a named column (step as a float).
    pub fn get(&self, column: &str) -> Result<Option<f64>> {
        Ok(match column {
            "step" => Some(self.step as f64),
            "td_loss" => self.td_loss,
            "td_loss_zero_reward" => self.td_loss_zero_reward,
            "td_loss_nonzero_reward" => self.td_loss_nonzero_reward,
            "q_mean" => self.q_mean,
            "pearson_target" => self.pearson_target,
            "pearson_mc" => self.pearson_mc,
            "nd_instant" => self.nd_instant,
            "nd_robust" => self.nd_robust,
            "nd_accumulated" => self.nd_accumulated,
            "S" => self.s,
            "episode_return" => self.episode_return,
            other => return Err(unknown_column(other)),
        })
    }
}

pub(crate) fn unknown_column(name: &str) -> Error {
    Error::Usage {
        field: name.into(),
        message: format!("unknown metrics column; expected one of {}", COLUMNS.join(", ")),
    }
}

fn schema_line() -> String {
    format!("#schema={SCHEMA}/{SCHEMA_MAJOR}.{SCHEMA_MINOR}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("metrics csv: {e}"))
}

/// Streams rows to a writer: schema line, header, then one line per row.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", schema_line())?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(COLUMNS).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = MetricsWriter::new(out)?;
    rows.iter().try_for_each(|r| w.write(r))
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_metrics(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

/// Parses a metrics file, rejecting other schemas and other major versions.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let version = first
        .trim_end()
        .strip_prefix("#schema=")
        .and_then(|s| s.strip_prefix(SCHEMA))
        .and_then(|s| s.strip_prefix('/'))
        .ok_or_else(|| Error::Incompatible {
            found: first.trim_end().to_string(),
            expected: schema_line(),
        })?;
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(SCHEMA_MAJOR) {
        return Err(Error::Incompatible {
            found: format!("{SCHEMA}/{version}"),
            expected: format!("{SCHEMA}/{SCHEMA_MAJOR}.x"),
        });
    }
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers().map_err(csv_err)?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::InvalidArgument(format!("unexpected metrics header {header:?}")));
    }
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn render(rows: &[MetricsRow]) -> String {
        let mut out = Vec::new();
        write_metrics(&mut out, rows).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn empty_rows_give_header_only() {
        let text = render(&[]);
        assert_eq!(text, format!("#schema=alix-metrics/1.0\n{}\n", COLUMNS.join(",")));
        assert!(read_metrics(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn absent_values_are_empty_fields() {
        let row = MetricsRow {
            step: 3,
            td_loss: Some(0.5),
            ..MetricsRow::default()
        };
        let text = render(&[row]);
        assert_eq!(text.lines().nth(2).unwrap(), "3,0.5,,,,,,,,,,");
    }

    #[test]
    fn unknown_major_version_is_rejected() {
        let text = render(&[MetricsRow::default()]).replace("/1.0", "/2.0");
        assert!(matches!(read_metrics(text.as_bytes()), Err(Error::Incompatible { .. })));
        let minor = render(&[MetricsRow::default()]).replace("/1.0", "/1.3");
        assert_eq!(read_metrics(minor.as_bytes()).unwrap().len(), 1);
        assert!(read_metrics("step,td_loss\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn column_lookup() {
        let row = MetricsRow {
            step: 9,
            s: Some(1.5),
            ..MetricsRow::default()
        };
        assert_eq!(row.get("S").unwrap(), Some(1.5));
        assert_eq!(row.get("step").unwrap(), Some(9.0));
        assert_eq!(row.get("q_mean").unwrap(), None);
        assert!(matches!(row.get("nope"), Err(Error::Usage { .. })));
    }

    fn opt() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![
            Just(None),
            any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)
        ]
    }

    proptest! {
        #[test]
        fn write_then_parse_roundtrips(values in proptest::collection::vec((any::<u64>(), proptest::collection::vec(opt(), 11)), 0..8)) {
            let rows: Vec<MetricsRow> = values
                .into_iter()
                .map(|(step, v)| MetricsRow {
                    step,
                    td_loss: v[0],
                    td_loss_zero_reward: v[1],
                    td_loss_nonzero_reward: v[2],
                    q_mean: v[3],
                    pearson_target: v[4],
                    pearson_mc: v[5],
                    nd_instant: v[6],
                    nd_robust: v[7],
                    nd_accumulated: v[8],
                    s: v[9],
                    episode_return: v[10],
                })
                .collect();
            let back = read_metrics(render(&rows).as_bytes()).unwrap();
            prop_assert_eq!(back, rows);
        }
    }
}
