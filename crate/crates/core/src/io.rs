//! CSV formats: long and wide frequency tables, and stacked subject rows.
//!
//! Long frequency file:
//!
//! ```text
//! kind,r,group,count
//! bilateral,0,cefaclor,9
//! unilateral,1,cefaclor,34
//! ```
//!
//! Wide frequency file (one count column per group, labels from the header):
//!
//! ```text
//! kind,r,cefaclor,amoxicillin
//! bilateral,0,9,7
//! ```
//!
//! Missing cells are zero in both forms. Blank lines and lines starting with
//! `#` are ignored.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CombinedCounts, GroupCounts};

const LONG_HEADER: [&str; 4] = ["kind", "r", "group", "count"];
const STACKED_HEADER: [&str; 5] = ["sub_id", "response", "group", "count", "replicate"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Bilateral,
    Unilateral,
}

impl CellKind {
    fn parse(s: &str, line: usize) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bilateral" => Ok(CellKind::Bilateral),
            "unilateral" => Ok(CellKind::Unilateral),
            _ => Err(parse_err(
                line,
                format!("kind must be 'bilateral' or 'unilateral', got '{s}'"),
            )),
        }
    }

    fn name(self) -> &'static str {
        match self {
            CellKind::Bilateral => "bilateral",
            CellKind::Unilateral => "unilateral",
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes())
}

/// Nonblank records with their 1-based line numbers.
fn records(text: &str) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader(text).records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_u64(field: &str, what: &str, line: usize) -> Result<u64> {
    if field.starts_with('-') && field[1..].parse::<u64>().is_ok() {
        return Err(parse_err(line, format!("{what} must be nonnegative, got {field}")));
    }
    field
        .parse()
        .map_err(|_| parse_err(line, format!("{what} must be a nonnegative integer, got '{field}'")))
}

fn parse_category(kind: CellKind, field: &str, line: usize) -> Result<usize> {
    let r = parse_u64(field, "r", line)?;
    let max = match kind {
        CellKind::Bilateral => 2,
        CellKind::Unilateral => 1,
    };
    if r > max {
        return Err(parse_err(line, format!("r = {r} is not allowed for {} rows", kind.name())));
    }
    Ok(r as usize)
}

fn set_cell(counts: &mut GroupCounts, kind: CellKind, r: usize, value: u64) {
    match (kind, r) {
        (CellKind::Bilateral, 0) => counts.m0 = value,
        (CellKind::Bilateral, 1) => counts.m1 = value,
        (CellKind::Bilateral, _) => counts.m2 = value,
        (CellKind::Unilateral, 0) => counts.n0 = value,
        (CellKind::Unilateral, _) => counts.n1 = value,
    }
}

fn check_header(rec: &csv::StringRecord, expected: &[&str], line: usize) -> Result<()> {
    let got: Vec<String> = rec.iter().map(str::to_ascii_lowercase).collect();
    if got.len() != expected.len() || got.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(parse_err(
            line,
            format!("expected header '{}', got '{}'", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn finish(labels: Vec<String>, groups: Vec<GroupCounts>) -> Result<CombinedCounts> {
    if labels.is_empty() {
        return Err(parse_err(0, "no groups"));
    }
    CombinedCounts::with_labels(labels, groups)
}

/// Parses the long format. Groups are ordered by first appearance.
pub fn parse_frequency(text: &str) -> Result<CombinedCounts> {
    let recs = records(text)?;
    let Some((hline, header)) = recs.first() else {
        return Err(parse_err(1, "missing header 'kind,r,group,count'"));
    };
    check_header(header, &LONG_HEADER, *hline)?;

    let mut labels: Vec<String> = Vec::new();
    let mut groups: Vec<GroupCounts> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(CellKind, usize, usize), usize> = HashMap::new();
    for (line, rec) in &recs[1..] {
        let line = *line;
        if rec.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let kind = CellKind::parse(&rec[0], line)?;
        let r = parse_category(kind, &rec[1], line)?;
        let label = &rec[2];
        if label.is_empty() {
            return Err(parse_err(line, "empty group label"));
        }
        let count = parse_u64(&rec[3], "count", line)?;
        let g = *index.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            groups.push(GroupCounts::default());
            labels.len() - 1
        });
        if let Some(first) = seen.insert((kind, r, g), line) {
            return Err(parse_err(
                line,
                format!("duplicate {} r={r} row for group '{label}' (first on line {first})", kind.name()),
            ));
        }
        set_cell(&mut groups[g], kind, r, count);
    }
    finish(labels, groups)
}

/// Parses the wide format: header `kind,r,<label>,...`.
pub fn parse_frequency_wide(text: &str) -> Result<CombinedCounts> {
    let recs = records(text)?;
    let Some((hline, header)) = recs.first() else {
        return Err(parse_err(1, "missing header 'kind,r,<group>,...'"));
    };
    let hline = *hline;
    if header.len() < 3
        || !header[0].eq_ignore_ascii_case("kind")
        || !header[1].eq_ignore_ascii_case("r")
    {
        return Err(parse_err(hline, "expected header 'kind,r,<group>,...'"));
    }
    let labels: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    if labels.iter().any(String::is_empty) {
        return Err(parse_err(hline, "empty group label"));
    }
    let mut groups = vec![GroupCounts::default(); labels.len()];
    let mut seen: HashMap<(CellKind, usize), usize> = HashMap::new();
    for (line, rec) in &recs[1..] {
        let line = *line;
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let kind = CellKind::parse(&rec[0], line)?;
        let r = parse_category(kind, &rec[1], line)?;
        if let Some(first) = seen.insert((kind, r), line) {
            return Err(parse_err(
                line,
                format!("duplicate {} r={r} row (first on line {first})", kind.name()),
            ));
        }
        for (g, field) in rec.iter().skip(2).enumerate() {
            set_cell(&mut groups[g], kind, r, parse_u64(field, "count", line)?);
        }
    }
    finish(labels, groups)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.trim() != s {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Long-format CSV with every cell of every group, zeros included.
pub fn render_frequency(data: &CombinedCounts) -> String {
    let mut out = LONG_HEADER.join(",");
    out.push('\n');
    for (label, gc) in data.labels().iter().zip(data.groups()) {
        let label = csv_field(label);
        for (r, m) in gc.bilateral().iter().enumerate() {
            let _ = writeln!(out, "bilateral,{r},{label},{m}");
        }
        for (r, n) in gc.unilateral().iter().enumerate() {
            let _ = writeln!(out, "unilateral,{r},{label},{n}");
        }
    }
    out
}

/// One row of the stacked layout: a response of a (collapsed) subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedRow {
    pub sub_id: u64,
    pub response: u8,
    pub group: String,
    pub count: u64,
    pub replicate: u64,
}

/// Row expansion with one subject id per cell: all bilateral cells first
/// (responses `(0,0)`, `(1,0)`, `(1,1)` per group), then the unilateral
/// cells. Zero-count cells are kept so the layout does not depend on data.
pub fn convert(data: &CombinedCounts, replicate: u64) -> Vec<StackedRow> {
    let mut rows = Vec::new();
    let mut sub_id = 0;
    let patterns: [&[u8]; 3] = [&[0, 0], &[1, 0], &[1, 1]];
    for (label, gc) in data.labels().iter().zip(data.groups()) {
        for (pattern, &count) in patterns.iter().zip(&gc.bilateral()) {
            sub_id += 1;
            for &response in *pattern {
                rows.push(StackedRow {
                    sub_id,
                    response,
                    group: label.clone(),
                    count,
                    replicate,
                });
            }
        }
    }
    for (label, gc) in data.labels().iter().zip(data.groups()) {
        for (response, &count) in gc.unilateral().iter().enumerate() {
            sub_id += 1;
            rows.push(StackedRow {
                sub_id,
                response: response as u8,
                group: label.clone(),
                count,
                replicate,
            });
        }
    }
    rows
}

pub fn render_stacked(rows: &[StackedRow]) -> String {
    let mut out = STACKED_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.sub_id,
            r.response,
            csv_field(&r.group),
            r.count,
            r.replicate
        );
    }
    out
}

pub fn parse_stacked(text: &str) -> Result<Vec<StackedRow>> {
    let recs = records(text)?;
    let Some((hline, header)) = recs.first() else {
        return Err(parse_err(1, "missing header 'sub_id,response,group,count,replicate'"));
    };
    check_header(header, &STACKED_HEADER, *hline)?;
    recs[1..]
        .iter()
        .map(|(line, rec)| {
            let line = *line;
            if rec.len() != 5 {
                return Err(parse_err(line, format!("expected 5 fields, found {}", rec.len())));
            }
            let response = parse_u64(&rec[1], "response", line)?;
            if response > 1 {
                return Err(parse_err(line, format!("response must be 0 or 1, got {response}")));
            }
            Ok(StackedRow {
                sub_id: parse_u64(&rec[0], "sub_id", line)?,
                response: response as u8,
                group: rec[2].to_string(),
                count: parse_u64(&rec[3], "count", line)?,
                replicate: parse_u64(&rec[4], "replicate", line)?,
            })
        })
        .collect()
}

/// Inverse of [`convert`]: per replicate (in order of first appearance),
/// the frequency table. Rows of one subject id must agree on group and
/// count; subjects with the same response pattern accumulate.
pub fn collapse(rows: &[StackedRow]) -> Result<Vec<(u64, CombinedCounts)>> {
    let mut replicates: Vec<u64> = Vec::new();
    for r in rows {
        if !replicates.contains(&r.replicate) {
            replicates.push(r.replicate);
        }
    }
    let mut result = Vec::with_capacity(replicates.len());
    for rep in replicates {
        let mut subjects: Vec<(u64, &str, u64, Vec<u8>)> = Vec::new();
        let mut position: HashMap<u64, usize> = HashMap::new();
        for r in rows.iter().filter(|r| r.replicate == rep) {
            match position.get(&r.sub_id) {
                Some(&i) => {
                    let s = &mut subjects[i];
                    if s.1 != r.group || s.2 != r.count {
                        return Err(Error::InvalidData(format!(
                            "subject {} in replicate {rep} has inconsistent group or count",
                            r.sub_id
                        )));
                    }
                    s.3.push(r.response);
                }
                None => {
                    position.insert(r.sub_id, subjects.len());
                    subjects.push((r.sub_id, &r.group, r.count, vec![r.response]));
                }
            }
        }
        let mut labels: Vec<String> = Vec::new();
        let mut groups: Vec<GroupCounts> = Vec::new();
        for (id, group, count, responses) in &subjects {
            let g = match labels.iter().position(|l| l == group) {
                Some(g) => g,
                None => {
                    labels.push(group.to_string());
                    groups.push(GroupCounts::default());
                    labels.len() - 1
                }
            };
            let gc = &mut groups[g];
            match responses.as_slice() {
                [z] if *z == 0 => gc.n0 += count,
                [_] => gc.n1 += count,
                [a, b] => match a + b {
                    0 => gc.m0 += count,
                    1 => gc.m1 += count,
                    _ => gc.m2 += count,
                },
                _ => {
                    return Err(Error::InvalidData(format!(
                        "subject {id} in replicate {rep} has {} rows; expected 1 or 2",
                        responses.len()
                    )))
                }
            }
        }
        result.push((rep, CombinedCounts::with_labels(labels, groups)?));
    }
    Ok(result)
}
