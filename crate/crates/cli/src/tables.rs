//! CSV tables exchanged between commands. Floats are written with 17
//! significant digits; every reader error names the offending line.

use std::path::Path;

use peclab_core::fmt::g17;
use peclab_core::pec::OnsetPoint;
use peclab_core::virtualfab::{DesignPoint, DeviceOutcome, Factor};
use peclab_core::yieldsurface::Sample;

use crate::error::{CliError, CliResult};

pub const LABEL_HEADER: [&str; 6] = ["D", "d_hsq", "d_al", "t_hsq", "t_mf312", "outcome"];
pub const ONSET_HEADER: [&str; 2] = ["rho", "D_l"];
pub const RAW_HEADER: [&str; 3] = ["rho", "D", "f_u"];

pub fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

pub fn label_row(p: &DesignPoint, outcome: DeviceOutcome) -> String {
    let mut f: Vec<String> = p.to_array().iter().map(|&v| g17(v)).collect();
    f.push(outcome.name().to_string());
    csv_line(&f)
}

pub fn header_line(cols: &[&str]) -> String {
    csv_line(&cols.iter().map(|c| c.to_string()).collect::<Vec<_>>())
}

/// Parsed CSV body: header and `(line number, fields)` rows.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| table_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| table_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn table_error(path: &Path, e: csv::Error) -> CliError {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            _ => unreachable!(),
        },
        _ => {
            let line = e
                .position()
                .map_or(String::new(), |p| format!(" line {}", p.line()));
            CliError::validation(format!("{}{line}: {e}", path.display()))
        }
    }
}

impl Table {
    pub fn header_is(&self, cols: &[&str]) -> bool {
        self.header.len() == cols.len() && self.header.iter().zip(cols).all(|(a, b)| a == b)
    }

    fn field_count(&self, path: &Path, line: u64, fields: &[String]) -> CliResult<()> {
        if fields.len() != self.header.len() {
            return Err(CliError::validation(format!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                self.header.len(),
                fields.len()
            )));
        }
        Ok(())
    }
}

fn number(path: &Path, line: u64, col: &str, v: &str) -> CliResult<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(CliError::validation(format!(
            "{} line {line}: column {col}: invalid number {v:?}",
            path.display()
        ))),
    }
}

pub fn read_labels(path: &Path) -> CliResult<Vec<Sample>> {
    let t = read_table(path)?;
    if !t.header_is(&LABEL_HEADER) {
        return Err(CliError::validation(format!(
            "{} line 1: expected header {}, found {}",
            path.display(),
            LABEL_HEADER.join(","),
            t.header.join(",")
        )));
    }
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, fields) in &t.rows {
        t.field_count(path, *line, fields)?;
        let mut a = [0.0; 5];
        for f in Factor::ALL {
            a[f.index()] = number(path, *line, f.name(), &fields[f.index()])?;
        }
        let p = DesignPoint::from_array(a);
        p.validate()
            .map_err(|e| CliError::validation(format!("{} line {line}: {e}", path.display())))?;
        let outcome: DeviceOutcome = fields[5]
            .parse()
            .map_err(|e| CliError::validation(format!("{} line {line}: {e}", path.display())))?;
        out.push(Sample::from_outcome(p, outcome));
    }
    if out.is_empty() {
        return Err(CliError::validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(out)
}

/// Onset data: either `rho,D_l` or raw `rho,D,f_u` counts.
pub enum OnsetTable {
    Onsets(Vec<OnsetPoint>),
    Raw(Vec<(f64, f64, f64)>),
}

pub fn read_onsets(path: &Path) -> CliResult<OnsetTable> {
    let t = read_table(path)?;
    let raw = if t.header_is(&ONSET_HEADER) {
        false
    } else if t.header_is(&RAW_HEADER) {
        true
    } else {
        return Err(CliError::validation(format!(
            "{} line 1: expected header {} or {}, found {}",
            path.display(),
            ONSET_HEADER.join(","),
            RAW_HEADER.join(","),
            t.header.join(",")
        )));
    };
    let mut onsets = Vec::new();
    let mut counts = Vec::new();
    for (line, fields) in &t.rows {
        t.field_count(path, *line, fields)?;
        let rho = number(path, *line, "rho", &fields[0])?;
        if raw {
            let d = number(path, *line, "D", &fields[1])?;
            let f = number(path, *line, "f_u", &fields[2])?;
            if !(0.0..=1.0).contains(&f) || !(rho > 0.0 && rho < 1.0) || d <= 0.0 {
                return Err(CliError::validation(format!(
                    "{} line {line}: need 0 < rho < 1, D > 0 and 0 <= f_u <= 1",
                    path.display()
                )));
            }
            counts.push((rho, d, f));
        } else {
            let d = number(path, *line, "D_l", &fields[1])?;
            onsets.push(OnsetPoint::new(rho, d).map_err(|e| {
                CliError::validation(format!("{} line {line}: {e}", path.display()))
            })?);
        }
    }
    if onsets.is_empty() && counts.is_empty() {
        return Err(CliError::validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(if raw {
        OnsetTable::Raw(counts)
    } else {
        OnsetTable::Onsets(onsets)
    })
}
