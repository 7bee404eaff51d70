//! Side-by-side comparison of metrics reports with best and second-best
//! flags per column.

use distgeo::io::fmt_f64;
use distgeo::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Higher,
    Lower,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Higher => "↑",
            Direction::Lower => "↓",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Best,
    Second,
    None,
}

pub struct Column {
    pub name: String,
    pub direction: Direction,
    pub values: Vec<Option<f64>>,
    pub flags: Vec<Flag>,
}

pub struct Table {
    pub labels: Vec<String>,
    pub columns: Vec<Column>,
}

/// Metric names in report order with their preferred direction.
pub fn flatten(r: &MetricsReport) -> Vec<(String, Direction, Option<f64>)> {
    use Direction::*;
    let mut v = vec![
        ("spearman".to_string(), Higher, r.spearman),
        ("pearson".to_string(), Higher, r.pearson),
        ("stress1".to_string(), Lower, r.stress1),
        ("edge_roc_auc".to_string(), Higher, r.edge_roc_auc),
        ("bap".to_string(), Higher, r.bap),
        ("shell_f1_macro".to_string(), Higher, r.shell_f1_macro),
        ("trust_at_k".to_string(), Higher, r.trust_at_k),
        ("cont_at_k".to_string(), Higher, r.cont_at_k),
        ("swd".to_string(), Lower, r.swd),
        ("w1_knn".to_string(), Lower, r.w1_knn),
        ("cal_err".to_string(), Lower, r.cal_err),
    ];
    for (k, val) in &r.lrmse {
        v.push((format!("lrmse@{k}"), Lower, *val));
    }
    v
}

fn flags(values: &[Option<f64>], dir: Direction) -> Vec<Flag> {
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| match dir {
        Direction::Higher => b.total_cmp(a),
        Direction::Lower => a.total_cmp(b),
    });
    distinct.dedup();
    values
        .iter()
        .map(|v| match v {
            Some(x) if distinct.first() == Some(x) => Flag::Best,
            Some(x) if distinct.get(1) == Some(x) => Flag::Second,
            _ => Flag::None,
        })
        .collect()
}

/// Errors when the reports disagree on their metric columns.
pub fn build(labels: Vec<String>, reports: &[MetricsReport]) -> Result<Table, String> {
    let flat: Vec<_> = reports.iter().map(flatten).collect();
    let names: Vec<(String, Direction)> = flat[0].iter().map(|(n, d, _)| (n.clone(), *d)).collect();
    for (i, f) in flat.iter().enumerate().skip(1) {
        let other: Vec<&String> = f.iter().map(|(n, _, _)| n).collect();
        if other.len() != names.len() || other.iter().zip(&names).any(|(a, b)| *a != &b.0) {
            return Err(format!("report {} has a different metric schema than report {}", labels[i], labels[0]));
        }
    }
    let columns = names
        .into_iter()
        .enumerate()
        .map(|(c, (name, direction))| {
            let values: Vec<Option<f64>> = flat.iter().map(|f| f[c].2).collect();
            let flags = flags(&values, direction);
            Column { name, direction, values, flags }
        })
        .collect();
    Ok(Table { labels, columns })
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| report |");
        for c in &self.columns {
            s.push_str(&format!(" {} {} |", c.name, c.direction.arrow()));
        }
        s.push_str("\n|---|");
        for _ in &self.columns {
            s.push_str("---:|");
        }
        s.push('\n');
        for (r, label) in self.labels.iter().enumerate() {
            s.push_str(&format!("| {label} |"));
            for c in &self.columns {
                let cell = match c.values[r] {
                    Some(v) => format!("{v:.4}"),
                    None => "n/a".to_string(),
                };
                let cell = match c.flags[r] {
                    Flag::Best => format!("**{cell}**"),
                    Flag::Second => format!("_{cell}_"),
                    Flag::None => cell,
                };
                s.push_str(&format!(" {cell} |"));
            }
            s.push('\n');
        }
        s
    }

    /// Header row, then one row per report; each metric has a value column
    /// and a `<metric>_flag` column (`best`, `second` or empty).
    pub fn to_csv_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["report".to_string()];
        for c in &self.columns {
            header.push(c.name.clone());
            header.push(format!("{}_flag", c.name));
        }
        let rows = self
            .labels
            .iter()
            .enumerate()
            .map(|(r, label)| {
                let mut row = vec![label.clone()];
                for c in &self.columns {
                    row.push(c.values[r].map(fmt_f64).unwrap_or_default());
                    row.push(
                        match c.flags[r] {
                            Flag::Best => "best",
                            Flag::Second => "second",
                            Flag::None => "",
                        }
                        .to_string(),
                    );
                }
                row
            })
            .collect();
        (header, rows)
    }
}
