//! Dataset files: one string per line, symbols separated by single spaces,
//! with a JSON header in `<path>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LangError, SampleSpec, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub task: Task,
    pub spec: SampleSpec,
    pub seed: u64,
    /// Symbol inventory, end-of-sequence last.
    pub symbols: Vec<String>,
}

impl DatasetHeader {
    pub fn new(task: Task, spec: SampleSpec) -> Self {
        Self {
            task,
            spec,
            seed: spec.seed,
            symbols: task.symbols().iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> LangError + '_ {
    move |source| LangError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LangError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, strings: &[Vec<usize>]) -> Result<(), LangError> {
    let mut body = String::new();
    for s in strings {
        body.push_str(&header.task.render(s));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())?;
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    write_atomic(&header_path(path), json.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Vec<usize>>), LangError> {
    let bad = |msg: String| LangError::Dataset {
        path: path.display().to_string(),
        msg,
    };
    let hp = header_path(path);
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(&hp).map_err(io_err(&hp))?)
        .map_err(|e| bad(format!("header: {e}")))?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let task = header.task;
    let strings = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    task.symbol_index(tok)
                        .ok_or_else(|| bad(format!("line {}: unknown symbol {tok:?}", i + 1)))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, strings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::sample;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.txt");
        let spec = SampleSpec::new(3, 12, 20, 5);
        let strings = sample(Task::Count3, &spec).unwrap();
        let header = DatasetHeader::new(Task::Count3, spec);
        write_dataset(&path, &header, &strings).unwrap();
        let (h, back) = read_dataset(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, strings);
        let first = fs::read_to_string(&path).unwrap();
        assert!(first.lines().next().unwrap().starts_with("a "));
    }
}
