//! Re-derives aggregates from finished stages and renders plot-ready CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use condensegan_core::eval::{mean_std, ExperimentResult};
use serde_json::Value;

use crate::commands::result_stem;
use crate::error::{CliError, Result};

/// Tolerance for recomputed means and deviations.
pub const AGGREGATE_TOL: f64 = 1e-9;

/// Parses a JSON-lines file, naming the first malformed line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::BadInput {
                path: path.to_path_buf(),
                msg: format!("line {}: malformed JSON: {e}", i + 1),
            })
        })
        .collect()
}

fn bad(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::BadInput {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads every `results/*.json` of a stage in file-name order.
pub fn load_results(stage_dir: &Path) -> Result<Vec<ExperimentResult>> {
    let dir = stage_dir.join("results");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::missing(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::missing(&dir, "no result files"));
    }
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?;
            serde_json::from_str(&text).map_err(|e| bad(p, format!("malformed result: {e}")))
        })
        .collect()
}

/// Checks stored mean/std against the per-run accuracies and the summary
/// CSV of the same stage.
pub fn verify(stage_dir: &Path, results: &[ExperimentResult]) -> Result<()> {
    for r in results {
        let path = stage_dir.join("results").join(format!("{}.json", result_stem(r)));
        if !r.is_consistent(AGGREGATE_TOL) {
            return Err(bad(&path, "stored mean/std do not match the per-run accuracies"));
        }
    }
    let csv_path = stage_dir.join("summary.csv");
    let text = fs::read_to_string(&csv_path).map_err(|e| CliError::missing(&csv_path, e))?;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(&csv_path, format!("line {}: expected 7 fields", i + 1)));
        }
        let acc: f64 = f[5].parse().map_err(|_| bad(&csv_path, format!("line {}: bad accuracy", i + 1)))?;
        groups.entry((f[0].into(), f[1].into(), f[2].into())).or_default().push(acc);
    }
    for r in results {
        let size = r.size_per_class.map_or_else(|| "full".to_string(), |s| s.to_string());
        let key = (r.method.clone(), r.arch.name().to_string(), size);
        let accs = groups.get(&key).ok_or_else(|| bad(&csv_path, format!("no rows for {key:?}")))?;
        let (m, s) = mean_std(accs);
        if (m - r.mean).abs() > AGGREGATE_TOL || (s - r.std).abs() > AGGREGATE_TOL {
            return Err(bad(&csv_path, format!("{key:?}: summary gives {m}±{s}, result stores {}±{}", r.mean, r.std)));
        }
    }
    Ok(())
}

/// One row per (method, size): accuracy against latents per class.
pub fn size_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("method,arch,size_per_class,mean,std,runs\n");
    for r in results {
        let size = r.size_per_class.map_or_else(|| "full".to_string(), |s| s.to_string());
        out += &format!("{},{},{size},{},{},{}\n", r.method, r.arch.name(), r.mean, r.std, r.runs.len());
    }
    out
}

/// Mean train/test accuracy per epoch for each (method, size).
pub fn curves_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("method,arch,size_per_class,epoch,train_acc,test_acc\n");
    for r in results {
        let size = r.size_per_class.map_or_else(|| "full".to_string(), |s| s.to_string());
        let epochs = r.runs.iter().map(|run| run.curve.len()).min().unwrap_or(0);
        for e in 0..epochs {
            let n = r.runs.len() as f64;
            let train: f64 = r.runs.iter().map(|run| run.curve[e].train_acc).sum::<f64>() / n;
            let test: f64 = r.runs.iter().map(|run| run.curve[e].test_acc).sum::<f64>() / n;
            out += &format!("{},{},{size},{},{train},{test}\n", r.method, r.arch.name(), r.runs[0].curve[e].epoch);
        }
    }
    out
}

/// Condensation losses per iteration from a stage event log.
pub fn loss_csv(events: &[Value]) -> String {
    let mut out = String::from("run,group,iter,L_con,R,L\n");
    let num = |v: &Value| v.as_f64().map_or_else(String::new, |x| x.to_string());
    for e in events.iter().filter(|e| e["event"] == "iter") {
        let run = e.get("run").map_or_else(String::new, |v| v.to_string());
        let group = e.get("group").map_or_else(String::new, |v| v.to_string());
        out += &format!("{run},{group},{},{},{},{}\n", e["iter"], num(&e["L_con"]), num(&e["R"]), num(&e["L"]));
    }
    out
}

/// What `report` produced.
#[derive(Debug, Default)]
pub struct Rendered {
    pub files: Vec<PathBuf>,
    pub verified_results: usize,
}

/// Validates the event logs of every stage present in `run`, checks the
/// aggregates of the eval stages and writes CSVs into `<run>/report`.
/// Safe to repeat: outputs are overwritten with identical bytes.
pub fn report_render(run: &Path) -> Result<Rendered> {
    let mut out = Rendered::default();
    let mut logs = BTreeMap::new();
    for stage in ["data", "gan", "pool", "invert", "condense", "eval", "eval-cross", "ablate"] {
        let log = run.join(stage).join("report.jsonl");
        if log.exists() {
            logs.insert(stage, read_jsonl(&log)?);
        }
    }
    let mut files: Vec<(String, String)> = Vec::new();
    let mut any_curves = false;
    for stage in ["eval", "eval-cross"] {
        let dir = run.join(stage);
        if !dir.join("results").exists() {
            continue;
        }
        let results = load_results(&dir)?;
        verify(&dir, &results)?;
        out.verified_results += results.len();
        any_curves = true;
        files.push((format!("{stage}-size-accuracy.csv"), size_csv(&results)));
        files.push((format!("{stage}-curves.csv"), curves_csv(&results)));
    }
    if !any_curves {
        return Err(CliError::missing(&run.join("eval").join("results"), "no evaluation results to render"));
    }
    for stage in ["condense", "eval"] {
        if let Some(events) = logs.get(stage) {
            if events.iter().any(|e| e["event"] == "iter") {
                files.push((format!("{stage}-loss.csv"), loss_csv(events)));
            }
        }
    }
    let dir = run.join("report");
    fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        out.files.push(path);
    }
    Ok(out)
}
