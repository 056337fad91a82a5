use std::fmt::Write as _;
use std::path::Path;

use super::space::RawRecord;
use crate::error::{Error, Result};

/// One row of a log file: timestamp, label and the present attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRow {
    pub timestamp: i64,
    pub label: bool,
    pub values: RawRecord,
}

/// A parsed log: the attribute columns in file order plus rows.
///
/// Text form is UTF-8 TSV with a header `timestamp\tlabel\t<attr>...`;
/// an empty cell means the attribute is absent from that row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawLog {
    pub attributes: Vec<String>,
    pub rows: Vec<RawRow>,
}

impl RawLog {
    pub fn parse(text: &str, context: &str) -> Result<RawLog> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim_end_matches('\r').is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(Error::parse(context, 1, "missing header row"));
        };
        let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
        if cols.len() < 2 || cols[0] != "timestamp" || cols[1] != "label" {
            return Err(Error::parse(
                context,
                1,
                "header must start with `timestamp\\tlabel`",
            ));
        }
        let attributes: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (n, line) in lines {
            let cells: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if cells.len() != cols.len() {
                return Err(Error::parse(
                    context,
                    n + 1,
                    format!("expected {} cells, found {}", cols.len(), cells.len()),
                ));
            }
            let timestamp = cells[0].parse().map_err(|_| {
                Error::parse(context, n + 1, format!("bad timestamp `{}`", cells[0]))
            })?;
            let label = match cells[1] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::parse(
                        context,
                        n + 1,
                        format!("label `{other}` is not 0/1"),
                    ))
                }
            };
            let values = attributes
                .iter()
                .zip(&cells[2..])
                .filter(|(_, v)| !v.is_empty())
                .map(|(a, v)| (a.clone(), v.to_string()))
                .collect();
            rows.push(RawRow {
                timestamp,
                label,
                values,
            });
        }
        Ok(RawLog { attributes, rows })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("timestamp\tlabel");
        for a in &self.attributes {
            out.push('\t');
            out.push_str(a);
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}\t{}", row.timestamp, u8::from(row.label));
            for a in &self.attributes {
                out.push('\t');
                if let Some(v) = row.values.get(a) {
                    out.push_str(v);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Drops every attribute not in `keep`.
    pub fn project(&self, keep: &[&str]) -> RawLog {
        RawLog {
            attributes: self
                .attributes
                .iter()
                .filter(|a| keep.contains(&a.as_str()))
                .cloned()
                .collect(),
            rows: self
                .rows
                .iter()
                .map(|r| RawRow {
                    timestamp: r.timestamp,
                    label: r.label,
                    values: r
                        .values
                        .iter()
                        .filter(|(a, _)| keep.contains(&a.as_str()))
                        .map(|(a, v)| (a.clone(), v.clone()))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn records(&self) -> Vec<RawRecord> {
        self.rows.iter().map(|r| r.values.clone()).collect()
    }
}

pub fn read_log(path: &Path) -> Result<RawLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RawLog::parse(&text, &path.display().to_string())
}

pub fn write_log(path: &Path, log: &RawLog) -> Result<()> {
    std::fs::write(path, log.to_text()).map_err(|e| Error::io(path, e))
}
