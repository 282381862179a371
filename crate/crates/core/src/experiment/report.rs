//! Markdown tables from a results CSV.
//!
//! Formal-language tasks get one table per task: a row per `model (mode)`,
//! a column per bin holding the best restart's accuracy. Within each
//! model's group of rows the strict column maximum is bold. The
//! language-modelling task gets one table with a row per model and a test
//! perplexity column per mode; the strict column minimum is bold.

use std::path::Path;

use super::{ExperimentError, PTB_TASK};
use crate::eval::{read_results, ResultRow};

/// First-appearance order without duplicates.
fn ordered<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Restart whose `bin` row has the lowest perplexity; ties go to the
/// lower restart.
fn best_restart(rows: &[&ResultRow], bin: &str) -> Option<usize> {
    rows.iter()
        .filter(|r| r.bin == bin && r.ppl.is_finite())
        .min_by(|a, b| a.ppl.total_cmp(&b.ppl).then(a.restart.cmp(&b.restart)))
        .map(|r| r.restart)
}

/// Bold marks for the single strictly best value of each column in `cells`
/// (rows by columns); values are compared as displayed.
fn strict_best(cells: &[Vec<Option<String>>], higher: bool) -> Vec<Vec<bool>> {
    let mut bold = vec![vec![false; cells.first().map_or(0, Vec::len)]; cells.len()];
    if cells.len() < 2 {
        return bold;
    }
    for col in 0..bold[0].len() {
        let vals: Vec<Option<f64>> = cells.iter().map(|r| r[col].as_ref().and_then(|s| s.parse().ok())).collect();
        let best = vals.iter().flatten().copied().fold(None, |m: Option<f64>, v| {
            Some(match m {
                None => v,
                Some(m) if higher => m.max(v),
                Some(m) => m.min(v),
            })
        });
        let Some(best) = best else { continue };
        let hits: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] == Some(best)).collect();
        if let [only] = hits[..] {
            bold[only][col] = true;
        }
    }
    bold
}

fn table(out: &mut String, header: &[String], rows: &[(String, Vec<Option<String>>, Vec<bool>)]) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for (label, cells, bold) in rows {
        let shown: Vec<String> = cells
            .iter()
            .zip(bold)
            .map(|(c, &b)| match (c, b) {
                (Some(v), true) => format!("**{v}**"),
                (Some(v), false) => v.clone(),
                (None, _) => "-".to_string(),
            })
            .collect();
        out.push_str(&format!("| {label} | {} |\n", shown.join(" | ")));
    }
}

fn task_table(out: &mut String, task: &str, rows: &[&ResultRow]) {
    let bins = ordered(rows.iter().map(|r| r.bin.clone()));
    let models = ordered(rows.iter().map(|r| r.model.clone()));
    let mut body = Vec::new();
    for model in &models {
        let modes = ordered(rows.iter().filter(|r| &r.model == model).map(|r| r.mode.clone()));
        let mut cells = Vec::new();
        for mode in &modes {
            let cell: Vec<&ResultRow> = rows.iter().copied().filter(|r| &r.model == model && &r.mode == mode).collect();
            let best = best_restart(&cell, &bins[0]);
            let vals: Vec<Option<String>> = bins
                .iter()
                .map(|b| {
                    cell.iter()
                        .find(|r| Some(r.restart) == best && &r.bin == b)
                        .and_then(|r| r.acc)
                        .map(|a| format!("{a:.2}"))
                })
                .collect();
            cells.push((format!("{model} ({mode})"), vals));
        }
        let grid: Vec<Vec<Option<String>>> = cells.iter().map(|c| c.1.clone()).collect();
        for ((label, vals), bold) in cells.into_iter().zip(strict_best(&grid, true)) {
            body.push((label, vals, bold));
        }
    }
    out.push_str(&format!("## {task}\n\n"));
    let mut header = vec!["model".to_string()];
    header.extend(bins);
    table(out, &header, &body);
}

fn lm_table(out: &mut String, rows: &[&ResultRow]) {
    let models = ordered(rows.iter().map(|r| r.model.clone()));
    let modes = ordered(rows.iter().map(|r| r.mode.clone()));
    let grid: Vec<Vec<Option<String>>> = models
        .iter()
        .map(|model| {
            modes
                .iter()
                .map(|mode| {
                    let cell: Vec<&ResultRow> =
                        rows.iter().copied().filter(|r| &r.model == model && &r.mode == mode).collect();
                    let best = best_restart(&cell, "valid")?;
                    cell.iter()
                        .find(|r| r.restart == best && r.bin == "test")
                        .map(|r| format!("{:.1}", r.ppl))
                })
                .collect()
        })
        .collect();
    let bold = strict_best(&grid, false);
    let body: Vec<_> = models
        .into_iter()
        .zip(grid)
        .zip(bold)
        .map(|((m, v), b)| (m, v, b))
        .collect();
    out.push_str(&format!("## {PTB_TASK}\n\n"));
    let mut header = vec!["Model".to_string()];
    header.extend(modes.iter().map(|m| format!("Test PPL ({m})")));
    table(out, &header, &body);
}

/// Markdown for all tasks in `rows`, in first-appearance order. Empty
/// input gives an empty string.
pub fn render_report(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    for task in ordered(rows.iter().map(|r| r.task.clone())) {
        if !out.is_empty() {
            out.push('\n');
        }
        let these: Vec<&ResultRow> = rows.iter().filter(|r| r.task == task).collect();
        if task == PTB_TASK {
            lm_table(&mut out, &these);
        } else {
            task_table(&mut out, &task, &these);
        }
    }
    out
}

pub fn report_file(path: &Path) -> Result<String, ExperimentError> {
    Ok(render_report(&read_results(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, mode: &str, restart: usize, bin: &str, acc: Option<f64>, ppl: f64) -> ResultRow {
        ResultRow {
            task: "count3".into(),
            model: model.into(),
            mode: mode.into(),
            restart,
            bin: bin.into(),
            acc,
            ppl,
            n_seq: 1,
            n_det: 1,
        }
    }

    #[test]
    fn best_restart_follows_first_bin_perplexity() {
        let rows = vec![
            row("lstm", "n", 0, "bin0", Some(0.5), 2.0),
            row("lstm", "n", 0, "bin1", Some(0.9), 2.0),
            row("lstm", "n", 1, "bin0", Some(0.4), 1.5),
            row("lstm", "n", 1, "bin1", Some(0.3), 9.0),
        ];
        let md = render_report(&rows);
        assert!(md.contains("| lstm (n) | 0.40 | 0.30 |"), "{md}");
    }

    #[test]
    fn ties_are_not_bold() {
        let rows = vec![
            row("lstm", "n", 0, "bin0", Some(0.99), 1.0),
            row("lstm", "c", 0, "bin0", Some(0.99), 1.0),
        ];
        assert!(!render_report(&rows).contains("**"));
    }

    #[test]
    fn empty_is_empty() {
        assert_eq!(render_report(&[]), "");
    }
}
