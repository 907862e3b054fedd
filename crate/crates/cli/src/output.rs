//! Output directories, the JSON summary with its pass/fail checks, model
//! caching and seed-parallel execution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mechlab::nn::{load_checkpoint, save_checkpoint, Provenance};
use mechlab::report::fmt_f64;
use mechlab::ModelParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Where a run writes, and how it may reuse work.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    /// Directory of trained checkpoints keyed by their training inputs.
    pub cache: Option<PathBuf>,
    pub threads: usize,
    /// Print progress to stderr.
    pub verbose: bool,
}

impl RunContext {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), cache: None, threads: 1, verbose: false }
    }

    pub fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[mechlab] {}", msg.as_ref());
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
        }
        fs::write(&p, contents).map_err(|e| io_at(&p, e))
    }

    /// CSV with 17-significant-digit floats.
    pub fn write_csv(&self, rel: &str, header: &[&str], rows: &[Vec<Cell>]) -> CliResult<()> {
        self.write(rel, csv_text(header, rows))
    }

    pub fn save_model(&self, rel: &str, model: &ModelParams, seed: u64, note: &str) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
        }
        save_checkpoint(&p, model, Provenance { seed: Some(seed), note: note.to_string() })?;
        Ok(())
    }

    /// Train through `fit` unless the cache already holds a model for `key`.
    pub fn cached_model<K: Serialize>(
        &self,
        tag: &str,
        key: &K,
        fit: impl FnOnce() -> CliResult<ModelParams>,
    ) -> CliResult<ModelParams> {
        let Some(dir) = &self.cache else { return fit() };
        let text = serde_json::to_string(key)?;
        let file = dir.join(format!("{tag}-{:016x}.json", fnv1a(text.as_bytes())));
        if file.exists() {
            if let Ok((m, p)) = load_checkpoint(&file) {
                if p.note == text {
                    self.log(format!("reusing {}", file.display()));
                    return Ok(m);
                }
            }
        }
        let m = fit()?;
        fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
        save_checkpoint(&file, &m, Provenance { seed: None, note: text })?;
        Ok(m)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn io_at(p: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", p.display()))
}

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
        }
    }
}

pub fn csv_text(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(Cell::render).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// A named pass/fail comparison of a measured value against a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    /// The comparison that had to hold, e.g. `<=`.
    pub relation: String,
}

impl Check {
    fn cmp(name: impl Into<String>, value: f64, threshold: f64, relation: &str, passed: bool) -> Self {
        Self { name: name.into(), passed, value, threshold, relation: relation.into() }
    }

    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::cmp(name, value, threshold, "<", value < threshold)
    }

    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::cmp(name, value, threshold, "<=", value <= threshold)
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::cmp(name, value, threshold, ">", value > threshold)
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::cmp(name, value, threshold, ">=", value >= threshold)
    }

    /// A boolean outcome; `value` is 1 when the condition held.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::cmp(name, if ok { 1.0 } else { 0.0 }, 1.0, "==", ok)
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            fmt_f64(self.value),
            self.relation,
            fmt_f64(self.threshold)
        )
    }
}

/// Everything a recipe run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub recipe: String,
    pub seeds: Vec<u64>,
    pub passed: bool,
    pub thresholds: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub results: serde_json::Value,
}

impl Summary {
    pub fn new(
        recipe: &str,
        seeds: &[u64],
        thresholds: BTreeMap<String, f64>,
        checks: Vec<Check>,
        results: serde_json::Value,
    ) -> Self {
        Self {
            recipe: recipe.to_string(),
            seeds: seeds.to_vec(),
            passed: checks.iter().all(|c| c.passed),
            thresholds,
            checks,
            results,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn from_json(s: &str) -> CliResult<Self> {
        serde_json::from_str(s).map_err(|e| CliError::Usage(format!("not a run summary: {e}")))
    }

    pub fn checks_csv(&self) -> String {
        let rows: Vec<Vec<Cell>> = self
            .checks
            .iter()
            .map(|c| {
                vec![
                    c.name.clone().into(),
                    c.passed.into(),
                    c.value.into(),
                    c.relation.clone().into(),
                    c.threshold.into(),
                ]
            })
            .collect();
        csv_text(&["check", "passed", "value", "relation", "threshold"], &rows)
    }
}

/// Apply `f` to every item on up to `threads` worker threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_render() {
        let rows = vec![vec![Cell::from("a,b"), Cell::from(3usize), Cell::from(0.5)]];
        assert_eq!(csv_text(&["x", "y", "z"], &rows), "x,y,z\n\"a,b\",3,5.0000000000000000e-1\n");
        assert_eq!(csv_text(&["x"], &[]), "x\n");
    }

    #[test]
    fn summary_round_trips() {
        let mut t = BTreeMap::new();
        t.insert("epsilon_mc".to_string(), 0.1 + 0.2);
        let s = Summary::new(
            "grad-audit",
            &[1, 2],
            t,
            vec![Check::below("a", 1.0 / 3.0, 0.5), Check::holds("b", false)],
            serde_json::json!({"x": [1e-300, 2.5]}),
        );
        assert!(!s.passed);
        assert_eq!(Summary::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn check_relations() {
        assert!(Check::at_most("x", 1.0, 1.0).passed);
        assert!(!Check::below("x", 1.0, 1.0).passed);
        assert!(!Check::above("x", f64::NAN, 0.0).passed);
        assert!(Check::at_least("x", 2.0, 1.0).line().starts_with("PASS x: "));
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u64> = (0..17).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
