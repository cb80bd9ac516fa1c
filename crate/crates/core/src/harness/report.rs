use std::fmt::{self, Write as _};

use crate::datamodel::BAND_NAMES;
use crate::error::{Error, Result};

/// Forecast horizon buckets, half-open at the upper edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bucket {
    Under25,
    From25To50,
    From50To100,
    Over100,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [
        Bucket::Under25,
        Bucket::From25To50,
        Bucket::From50To100,
        Bucket::Over100,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Under25 => "0 - 25 days",
            Bucket::From25To50 => "25 - 50 days",
            Bucket::From50To100 => "50 - 100 days",
            Bucket::Over100 => "More than 100 days",
        }
    }

    /// At least 50 days ahead.
    pub fn is_long(self) -> bool {
        matches!(self, Bucket::From50To100 | Bucket::Over100)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn bucketize(delta: i64) -> Result<Bucket> {
    match delta {
        d if d < 0 => Err(Error::Domain(format!("negative forecast horizon {d}"))),
        0..=24 => Ok(Bucket::Under25),
        25..=49 => Ok(Bucket::From25To50),
        50..=99 => Ok(Bucket::From50To100),
        _ => Ok(Bucket::Over100),
    }
}

/// Parses `B4,B3,B2` into band indices.
pub fn parse_bands(spec: &str) -> Result<[usize; 3]> {
    let idx: Vec<usize> = spec
        .split(',')
        .map(|b| {
            let b = b.trim();
            BAND_NAMES
                .iter()
                .position(|n| n.eq_ignore_ascii_case(b))
                .ok_or_else(|| Error::Config(format!("unknown band {b:?}; expected one of {BAND_NAMES:?}")))
        })
        .collect::<Result<_>>()?;
    idx.try_into()
        .map_err(|_| Error::Config(format!("band list {spec:?} must name exactly three bands")))
}

/// A labelled grid of cells rendered as aligned text or CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportTable {
    pub title: String,
    pub note: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn new(title: &str, header: &[&str]) -> Self {
        ReportTable {
            title: title.into(),
            note: String::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// Cell in the row whose first column is `row` under column `col`.
    pub fn cell(&self, row: &str, col: &str) -> Option<&str> {
        let c = self.header.iter().position(|h| h == col)?;
        self.rows
            .iter()
            .find(|r| r.first().is_some_and(|x| x == row))
            .and_then(|r| r.get(c))
            .map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |r: &[String]| {
            let cells: Vec<String> = r.iter().zip(&width).map(|(c, &w)| format!("{c:<w$}")).collect();
            cells.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("{}\n", self.title);
        if !self.note.is_empty() {
            out += &format!("({})\n", self.note);
        }
        out += &line(&self.header);
        out += &(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  ") + "\n");
        for r in &self.rows {
            out += &line(r);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let esc = |c: &str| {
            if c.contains([',', '"']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.to_string()
            }
        };
        let mut out = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let _ = writeln!(out, "{}", r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(","));
        }
        out
    }
}

pub const REFERENCE_NOTE: &str = "published reference, not reproduced at desk scale";

fn table(title: &str, header: &[&str], rows: &[&[&str]]) -> ReportTable {
    let mut t = ReportTable::new(title, header);
    t.note = REFERENCE_NOTE.into();
    for r in rows {
        t.push(r.iter().map(|s| s.to_string()).collect());
    }
    t
}

/// The five published result tables, cells exactly as printed.
pub fn render_reference_tables() -> Vec<ReportTable> {
    vec![
        table(
            "Soil moisture forecasting, MAE",
            &["Future Forecast Day Range", "SM-VSF", "CI-VSF"],
            &[
                &["0 - 25 days", "0.0406", "0.0179"],
                &["25 - 50 days", "0.0429", "0.0184"],
                &["50 - 100 days", "0.0549", "0.0189"],
                &["More than 100 days", "0.0678", "0.0204"],
            ],
        ),
        table(
            "Soil moisture estimation, MAE",
            &["TEST Tile", "SM-MR", "MM-MR", "SM-VSF", "CI-VSF"],
            &[
                &["All", "0.0615", "0.0458", "0.0483", "0.0282"],
                &["T11SKA", "0.1113", "0.0847", "0.1121", "0.0695"],
                &["T15TUH", "0.1283", "0.1365", "0.1181", "0.0834"],
                &["T14SKC", "0.1159", "0.1275", "0.1312", "0.0958"],
                &["T16SBF", "0.0821", "0.0631", "0.0895", "0.0544"],
                &["T10SEJ", "0.1003", "0.0718", "0.1011", "0.0587"],
                &["T14RQT", "0.0815", "0.0579", "0.0658", "0.0558"],
            ],
        ),
        table(
            "Crop mapping, 11 class average F1",
            &["", "SM-MR", "MM-MR", "SM-VSF", "CI-VSF"],
            &[&["Average", "0.5331", "0.5789", "0.5731", "0.6233"]],
        ),
        table(
            "Missing image prediction, MSE",
            &["% Missing", "SM-MR", "MM-MR", "SM-VSF", "CI-VSF"],
            &[
                &["50%", "792.68", "788.94", "362.02", "326.43"],
                &["70%", "820.46", "814.75", "394.32", "337.79"],
                &["90%", "826.23", "820.43", "404.32", "343.88"],
            ],
        ),
        table(
            "Image forecasting, MSE",
            &["Forecast Day Range", "SM-VSF", "CI-VSF"],
            &[
                &["0 - 25 days", "340.13", "237.21"],
                &["25 - 50 days", "591.54", "278.83"],
                &["50 - 100 days", "1093.62", "358.23"],
                &["More than 100 days", "1112.84", "457.27"],
            ],
        ),
    ]
}
