//! The results CSV: `task,model,mode,restart,bin,acc,ppl,n_seq,n_det`.

use std::fs::{self, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const RESULTS_HEADER: [&str; 9] = [
    "task", "model", "mode", "restart", "bin", "acc", "ppl", "n_seq", "n_det",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub model: String,
    pub mode: String,
    pub restart: usize,
    pub bin: String,
    /// Empty in the file when the bin has no determined positions.
    pub acc: Option<f64>,
    pub ppl: f64,
    pub n_seq: usize,
    pub n_det: usize,
}

fn err(path: &Path, msg: impl Into<String>) -> EvalError {
    EvalError::Results {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), EvalError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| err(path, e.to_string()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER).map_err(|e| err(path, e.to_string()))?;
    }
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.model.clone(),
            r.mode.clone(),
            r.restart.to_string(),
            r.bin.clone(),
            r.acc.map(|a| a.to_string()).unwrap_or_default(),
            r.ppl.to_string(),
            r.n_seq.to_string(),
            r.n_det.to_string(),
        ])
        .map_err(|e| err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| err(path, e.to_string()))
}

/// Reads a results CSV, checking the header and every row. Errors name
/// the offending line.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| err(path, e.to_string()))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| err(path, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    for name in RESULTS_HEADER {
        if !cols.contains(&name) {
            return Err(err(path, format!("line 1: missing column {name}")));
        }
    }
    let idx = |name: &str| cols.iter().position(|c| *c == name).expect("checked");
    let ix: Vec<usize> = RESULTS_HEADER.iter().map(|n| idx(n)).collect();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(path, format!("line {line}: {e}")))?;
        let field = |k: usize| rec.get(ix[k]).unwrap_or("");
        let bad = |what: &str| err(path, format!("line {line}: bad {what} {:?}", field(RESULTS_HEADER.iter().position(|n| *n == what).unwrap())));
        let acc = match field(5) {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("acc"))?),
        };
        if let Some(a) = acc {
            if !(0.0..=1.0).contains(&a) {
                return Err(bad("acc"));
            }
        }
        out.push(ResultRow {
            task: field(0).to_string(),
            model: field(1).to_string(),
            mode: field(2).to_string(),
            restart: field(3).parse().map_err(|_| bad("restart"))?,
            bin: field(4).to_string(),
            acc,
            ppl: field(6).parse().map_err(|_| bad("ppl"))?,
            n_seq: field(7).parse().map_err(|_| bad("n_seq"))?,
            n_det: field(8).parse().map_err(|_| bad("n_det"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bin: &str, acc: Option<f64>) -> ResultRow {
        ResultRow {
            task: "count3".into(),
            model: "lstm".into(),
            mode: "none".into(),
            restart: 0,
            bin: bin.into(),
            acc,
            ppl: 1.25,
            n_seq: 10,
            n_det: 100,
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results(&p, &[row("bin0", Some(0.98))]).unwrap();
        write_results(&p, &[row("bin1", None)]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("task,model,mode,restart,bin,acc,ppl,n_seq,n_det\n"));
        assert_eq!(text.lines().count(), 3);
        let back = read_results(&p).unwrap();
        assert_eq!(back, vec![row("bin0", Some(0.98)), row("bin1", None)]);
    }

    #[test]
    fn bad_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "task,model,mode,restart,bin,acc,ppl,n_seq,n_det\ncount3,lstm,none,x,bin0,0.5,2,1,1\n").unwrap();
        let e = read_results(&p).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        fs::write(&p, "task,model\n").unwrap();
        assert!(read_results(&p).unwrap_err().to_string().contains("missing column"));
    }
}
