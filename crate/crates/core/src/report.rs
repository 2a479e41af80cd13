//! Metric tables and the sweep CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::Component;
use crate::training::{Metrics, SpikeReport};

/// Column order of every table and report.
pub const COLUMNS: [&str; 8] = ["gamma", "L2", "S_M", "S_P", "S_f", "S_spectral", "S_spatial", "S_final"];

const SPIKE_COLUMNS: [Component; 6] = [
    Component::M,
    Component::P,
    Component::F,
    Component::Spectral,
    Component::Spatial,
    Component::Final,
];

/// Placeholder for a component the model does not have.
pub const NOT_APPLICABLE: &str = "—";

/// Published reference points printed below every sweep report.
pub const REFERENCE_FOOTER: [&str; 3] = [
    "# reference (full-scale benchmark, gamma = 0):",
    "#   spectral_only L2 = 0.71%",
    "#   full L2 = 1.04%",
];

pub fn format_percent(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{:.*}%", decimals, 100.0 * x),
        None => NOT_APPLICABLE.to_string(),
    }
}

/// Header plus one row in the fixed column order, L2 with two decimals and
/// spike rates with one.
pub fn metrics_table(gamma: f64, m: &Metrics) -> String {
    let mut cells = vec![format!("{gamma}"), format_percent(Some(m.l2_mean), 2)];
    cells.extend(SPIKE_COLUMNS.iter().map(|&c| format_percent(m.spikes.get(c), 1)));
    let widths: Vec<usize> = COLUMNS
        .iter()
        .zip(&cells)
        .map(|(h, c)| h.chars().count().max(c.chars().count()))
        .collect();
    let line = |items: Vec<String>| {
        items
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    format!(
        "{}\n{}\n",
        line(COLUMNS.iter().map(|s| s.to_string()).collect()),
        line(cells)
    )
}

/// One sweep result. Percentages are stored as written so the CSV
/// round-trips exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub gamma: f64,
    /// Mean relative L2 in percent; `None` for a failed run.
    pub l2_percent: Option<f64>,
    /// Spike percentages in `S_M, S_P, S_f, S_spectral, S_spatial, S_final` order.
    pub spikes_percent: [Option<f64>; 6],
    pub note: String,
}

impl ReportRow {
    pub fn from_metrics(gamma: f64, m: &Metrics) -> Self {
        ReportRow {
            gamma,
            l2_percent: Some(100.0 * m.l2_mean),
            spikes_percent: spikes_percent(&m.spikes),
            note: String::new(),
        }
    }

    pub fn failed(gamma: f64, note: impl Into<String>) -> Self {
        ReportRow {
            gamma,
            l2_percent: None,
            spikes_percent: [None; 6],
            note: note.into(),
        }
    }
}

fn spikes_percent(s: &SpikeReport) -> [Option<f64>; 6] {
    let mut out = [None; 6];
    for (o, &c) in out.iter_mut().zip(&SPIKE_COLUMNS) {
        *o = s.get(c).map(|v| 100.0 * v);
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| NOT_APPLICABLE.to_string())
}

/// CSV with a header row, rows sorted by `gamma`, and a `#` footer.
pub fn write_report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = COLUMNS.to_vec();
    header.push("note");
    w.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        let mut rec = vec![format!("{}", r.gamma), cell(r.l2_percent)];
        rec.extend(r.spikes_percent.iter().map(|&v| cell(v)));
        rec.push(r.note.clone());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let mut text = String::from_utf8(w.into_inner().map_err(|e| Error::format("report", e.to_string()))?)
        .expect("csv output is UTF-8");
    for line in REFERENCE_FOOTER {
        text.push_str(line);
        text.push('\n');
    }
    Ok(text)
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("report", e.to_string())
}

fn parse_cell(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    if s == NOT_APPLICABLE {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::format("report", format!("line {line}, column {col}: {s:?} is not a number")))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    let mut expected: Vec<&str> = COLUMNS.to_vec();
    expected.push("note");
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format("report", format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let gamma = parse_cell(&rec[0], line, "gamma")?
            .ok_or_else(|| Error::format("report", format!("line {line}: gamma missing")))?;
        let mut spikes = [None; 6];
        for (j, s) in spikes.iter_mut().enumerate() {
            *s = parse_cell(&rec[2 + j], line, COLUMNS[2 + j])?;
        }
        rows.push(ReportRow {
            gamma,
            l2_percent: parse_cell(&rec[1], line, "L2")?,
            spikes_percent: spikes,
            note: rec[8].to_string(),
        });
    }
    Ok(rows)
}
