//! Entry points behind the `run`, `compare` and `sweep` subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfigFile;
use super::trace::ConvergenceSummary;
use crate::error::{Error, Result};
use crate::peso::RunResult;

/// Process exit code for an error raised by a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse(_) => 2,
        Error::NonFinite(_) | Error::Convergence { .. } => 3,
        _ => 1,
    }
}

pub fn summary_line(summary: &ConvergenceSummary) -> String {
    format!(
        "final_loss={:.16e} min_grad_norm={:.16e} restarts={}",
        summary.final_loss, summary.min_grad_norm, summary.restarts
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

pub struct RunOutcome {
    pub result: RunResult,
    pub trace_path: PathBuf,
}

impl RunOutcome {
    /// Exit code: 0 on a completed run, 3 when it stopped early.
    pub fn exit_code(&self) -> i32 {
        match &self.result.abort {
            None => 0,
            Some(a) => exit_code(&a.error).max(1),
        }
    }
}

fn trace_path(cfg: &RunConfigFile, out: Option<&Path>) -> PathBuf {
    let name = cfg.output.clone().unwrap_or_else(|| "trace.csv".to_string());
    match out {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

/// Runs one config and writes its trace (partial on abort) and summary JSON.
pub fn run_config(cfg: &RunConfigFile, out: Option<&Path>) -> Result<RunOutcome> {
    let result = cfg.execute()?;
    let trace_path = trace_path(cfg, out);
    result.trace.write_csv(&trace_path)?;
    if let Some(summary) = &result.summary {
        let json = serde_json::to_string_pretty(summary).expect("summary serializes");
        write_file(&trace_path.with_extension("summary.json"), &json)?;
    }
    Ok(RunOutcome { result, trace_path })
}

pub fn cli_run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunOutcome> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run_config(&cfg, out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareEntry {
    pub label: String,
    pub final_loss: f64,
    pub min_grad_norm: f64,
    pub restarts: usize,
    pub aborted: bool,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub entries: Vec<CompareEntry>,
    pub floor: Option<f64>,
    /// `step,<label…>,gap_<label…>` with gaps relative to the first config.
    pub csv: String,
    pub text: String,
}

fn unique_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for p in paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        let mut label = stem.clone();
        let mut i = 2;
        while labels.contains(&label) {
            label = format!("{stem}_{i}");
            i += 1;
        }
        labels.push(label);
    }
    labels
}

fn fmt_cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

/// Runs each config (in parallel) over the same problem and aligns the losses.
pub fn compare_configs(
    labels: &[String],
    configs: &[RunConfigFile],
    out: Option<&Path>,
) -> Result<CompareReport> {
    if configs.len() < 2 {
        return Err(Error::config("compare", "need at least two configs"));
    }
    if let Some((i, _)) = configs
        .iter()
        .enumerate()
        .find(|(_, c)| c.problem != configs[0].problem)
    {
        return Err(Error::config(
            "problem",
            format!("`{}` and `{}` describe different problems", labels[0], labels[i]),
        ));
    }
    let results: Vec<Result<RunResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || c.execute())).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("compare worker panicked"))
            .collect()
    });
    let results: Vec<RunResult> = results.into_iter().collect::<Result<_>>()?;
    if let Some(dir) = out {
        for (label, r) in labels.iter().zip(&results) {
            r.trace.write_csv(&dir.join(format!("{label}.csv")))?;
        }
    }

    let steps = results.iter().map(|r| r.trace.len()).max().unwrap_or(0);
    let mut csv = String::from("step");
    for l in labels {
        let _ = write!(csv, ",{l}");
    }
    for l in &labels[1..] {
        let _ = write!(csv, ",gap_{l}");
    }
    csv.push('\n');
    for i in 0..steps {
        let _ = write!(csv, "{}", i + 1);
        let losses: Vec<Option<f64>> = results
            .iter()
            .map(|r| r.trace.records.get(i).map(|t| t.loss))
            .collect();
        for l in &losses {
            let _ = write!(csv, ",{}", fmt_cell(*l));
        }
        for l in &losses[1..] {
            let gap = match (l, losses[0]) {
                (Some(x), Some(base)) => Some(x - base),
                _ => None,
            };
            let _ = write!(csv, ",{}", fmt_cell(gap));
        }
        csv.push('\n');
    }

    let floor = configs[0].problem.low_rank_floor();
    let entries: Vec<CompareEntry> = labels
        .iter()
        .zip(&results)
        .map(|(label, r)| CompareEntry {
            label: label.clone(),
            final_loss: r.final_loss(),
            min_grad_norm: r.summary.as_ref().map_or(f64::NAN, |s| s.min_grad_norm),
            restarts: r.restart_steps.len(),
            aborted: r.abort.is_some(),
        })
        .collect();
    let mut text = String::new();
    if let Some(f) = floor {
        let _ = writeln!(text, "low-rank floor a^2 = {f:.6}");
    }
    for e in &entries {
        let _ = write!(text, "{}: final_loss={:.6e}", e.label, e.final_loss);
        if let Some(f) = floor {
            let _ = write!(text, " gap_to_floor={:.6e}", e.final_loss - f);
        }
        if e.aborted {
            text.push_str(" (aborted)");
        }
        text.push('\n');
    }
    if let Some(dir) = out {
        write_file(&dir.join("comparison.csv"), &csv)?;
        write_file(&dir.join("compare_report.txt"), &text)?;
    }
    Ok(CompareReport {
        entries,
        floor,
        csv,
        text,
    })
}

pub fn cli_compare(paths: &[PathBuf], out: Option<&Path>, seed: Option<u64>) -> Result<CompareReport> {
    let configs = paths
        .iter()
        .map(|p| {
            let mut c = RunConfigFile::load(p)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    compare_configs(&unique_labels(paths), &configs, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the run config, e.g. `method.K`.
    pub param: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub base: Value,
    pub grid: Vec<SweepAxis>,
}

pub struct SweepCell {
    pub index: usize,
    pub values: Vec<Value>,
    pub trace: PathBuf,
    pub summary: Option<ConvergenceSummary>,
    pub aborted: bool,
}

/// Grid value as a CSV cell: strings bare, other JSON verbatim, quoted if needed.
fn csv_value(v: &Value) -> String {
    let raw = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::config(
                "grid.param",
                format!("`{path}` does not address an object field"),
            ));
        }
        let obj = cur.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::config("grid.param", "empty parameter path"))
}

/// Expands the grid (row-major, last axis fastest) and runs every cell.
pub fn run_sweep(sweep: &SweepFile, out: &Path, seed: Option<u64>) -> Result<Vec<SweepCell>> {
    if sweep.grid.iter().any(|a| a.values.is_empty()) {
        return Err(Error::config(
            "grid.values",
            "every axis needs at least one value",
        ));
    }
    let sizes: Vec<usize> = sweep.grid.iter().map(|a| a.values.len()).collect();
    let total: usize = sizes.iter().product();
    let mut cells = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut picks = vec![0; sizes.len()];
        for (d, &s) in sizes.iter().enumerate().rev() {
            picks[d] = rem % s;
            rem /= s;
        }
        let mut doc = sweep.base.clone();
        let mut values = Vec::new();
        for (axis, &p) in sweep.grid.iter().zip(&picks) {
            set_path(&mut doc, &axis.param, axis.values[p].clone())?;
            values.push(axis.values[p].clone());
        }
        let mut cfg: RunConfigFile =
            serde_json::from_value(doc).map_err(|e| Error::config("base", format!("cell {index}: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.prepare()?;
        cfg.output = Some(format!("cell_{index:03}.csv"));
        cells.push((index, values, cfg));
    }
    let results: Vec<Result<RunOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .map(|(_, _, cfg)| s.spawn(move || run_config(cfg, Some(out))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut index_csv = String::from("cell");
    for a in &sweep.grid {
        let _ = write!(index_csv, ",{}", a.param);
    }
    index_csv.push_str(",trace,final_loss,min_grad_norm,restarts\n");
    let mut report = Vec::with_capacity(total);
    for ((index, values, _), res) in cells.into_iter().zip(results) {
        let outcome = res?;
        let _ = write!(index_csv, "{index}");
        for v in &values {
            let _ = write!(index_csv, ",{}", csv_value(v));
        }
        let name = outcome
            .trace_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let s = outcome.result.summary.clone();
        let _ = writeln!(
            index_csv,
            ",{name},{},{},{}",
            fmt_cell(s.as_ref().map(|s| s.final_loss)),
            fmt_cell(s.as_ref().map(|s| s.min_grad_norm)),
            s.as_ref().map_or(0, |s| s.restarts)
        );
        report.push(SweepCell {
            index,
            values,
            trace: outcome.trace_path,
            summary: s,
            aborted: outcome.result.abort.is_some(),
        });
    }
    write_file(&out.join("index.csv"), &index_csv)?;
    Ok(report)
}

pub fn cli_sweep(config: &Path, out: &Path, seed: Option<u64>) -> Result<Vec<SweepCell>> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", config.display())))?;
    let sweep: SweepFile = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
    run_sweep(&sweep, out, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_disambiguated() {
        let l = unique_labels(&[
            PathBuf::from("a/x.json"),
            PathBuf::from("b/x.json"),
            PathBuf::from("y.json"),
        ]);
        assert_eq!(l, vec!["x", "x_2", "y"]);
    }

    #[test]
    fn set_path_creates_nested_fields() {
        let mut v = serde_json::json!({"method": {"kind": "lora"}});
        set_path(&mut v, "method.K", serde_json::json!(7)).unwrap();
        set_path(&mut v, "noise.C", serde_json::json!(1.0)).unwrap();
        assert_eq!(v["method"]["K"], 7);
        assert_eq!(v["noise"]["C"], 1.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x", "y")), 2);
        assert_eq!(exit_code(&Error::NonFinite("loss".into())), 3);
        assert_eq!(exit_code(&Error::Parameter("p".into())), 1);
    }
}
