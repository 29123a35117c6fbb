use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

/// CSV with a reproducibility header and fixed 17-significant-digit numbers.
pub struct Csv {
    text: String,
    n_cols: usize,
}

impl Csv {
    pub fn new(command: &str, config: &Value, seed: u64, extra: &[(&str, String)], columns: &[String]) -> Self {
        let mut text = String::new();
        let _ = writeln!(text, "# nmqsd {command}");
        let _ = writeln!(text, "# config {}", serde_json::to_string(config).expect("json value serializes"));
        let _ = writeln!(text, "# master_seed {seed}");
        for (k, v) in extra {
            let _ = writeln!(text, "# {k} {v}");
        }
        text.push_str(&columns.join(","));
        text.push('\n');
        Self { text, n_cols: columns.len() }
    }

    pub fn row(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.n_cols);
        for (k, v) in values.iter().enumerate() {
            if k > 0 {
                self.text.push(',');
            }
            let _ = write!(self.text, "{v:.16e}");
        }
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, &self.text)
    }
}

/// Pretty JSON; object keys come out sorted because `serde_json::Map` is a BTreeMap.
pub fn write_json(path: &Path, value: &Value) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    std::fs::write(path, s)
}

/// Column names `{prefix}_{i}_{j}_{re,im}` for the upper triangle of a `dim × dim` matrix.
pub fn matrix_columns(prefix: &str, dim: usize) -> Vec<String> {
    let mut cols = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            cols.push(format!("{prefix}_{i}_{j}_re"));
            cols.push(format!("{prefix}_{i}_{j}_im"));
        }
    }
    cols
}

/// Reads the numeric body of a CSV written by [`Csv`]: column names and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines.next().ok_or_else(|| format!("{} has no header", path.display()))?.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let row: Vec<f64> = line.split(',').map(|v| v.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{} row {k}: {e}", path.display()))?;
        if row.len() != header.len() {
            return Err(format!("{} row {k}: expected {} values, got {}", path.display(), header.len(), row.len()));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
