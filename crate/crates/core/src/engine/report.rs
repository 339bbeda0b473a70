//! Run fragments, aggregation into a report, and the text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::Method;
use crate::error::{Error, Result};

use super::config::{save_json, CONFIG_VERSION};
use super::stats::{paired_t_test, TTest};
use super::train::{mean_std, EvalResult, TrainOutcome};

pub const FRAGMENT_DIR: &str = "fragments";
pub const REPORT_FILE: &str = "report.json";

/// Result of one (configuration, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFragment {
    pub version: u32,
    /// Row of the table this run belongs to, e.g. a method name or an
    /// ablation setting.
    pub label: String,
    pub method: Method,
    pub seed: u64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub train: Option<TrainOutcome>,
    /// Per-domain evaluation on the test split.
    pub domains: BTreeMap<String, EvalResult>,
}

impl RunFragment {
    pub fn file_name(&self) -> String {
        let safe: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        format!("{safe}__seed{}.json", self.seed)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let dir = run_dir.join(FRAGMENT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_json(&dir.join(self.file_name()), self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    /// Mean over seeds of the per-seed mean IoU.
    pub mean: f64,
    /// Standard deviation over seeds.
    pub std: f64,
    pub seed_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub domains: BTreeMap<String, DomainSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestEntry {
    pub a: String,
    pub b: String,
    pub domain: String,
    pub result: TTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub rows: Vec<RowSummary>,
    /// Image-wise paired tests of the first row against every other row,
    /// on per-image IoU averaged over seeds.
    pub t_tests: Vec<TTestEntry>,
    pub fragments: Vec<RunFragment>,
    pub config: Option<serde_json::Value>,
}

/// Checks that every stored mean is reproduced by its per-image list.
pub fn verify_fragment(f: &RunFragment) -> Result<()> {
    for (d, e) in &f.domains {
        let (m, _) = mean_std(&e.ious);
        if (m - e.mean).abs() > 1e-9 {
            return Err(Error::Integrity(format!(
                "{} seed {} domain {d}: stored mean {} but per-image mean {m}",
                f.label, f.seed, e.mean
            )));
        }
    }
    Ok(())
}

fn image_means(frags: &[&RunFragment], domain: &str) -> Option<Vec<f64>> {
    let lists: Vec<&Vec<f64>> = frags.iter().filter_map(|f| f.domains.get(domain).map(|e| &e.ious)).collect();
    if lists.len() != frags.len() || lists.is_empty() {
        return None;
    }
    let n = lists[0].len();
    if lists.iter().any(|l| l.len() != n) {
        return None;
    }
    Some((0..n).map(|i| lists.iter().map(|l| l[i]).sum::<f64>() / lists.len() as f64).collect())
}

/// Aggregates fragments into rows (in first-seen label order) and t-tests.
pub fn aggregate(fragments: Vec<RunFragment>, config: Option<serde_json::Value>) -> Result<RunReport> {
    let mut order: Vec<String> = Vec::new();
    for f in &fragments {
        verify_fragment(f)?;
        if !order.contains(&f.label) {
            order.push(f.label.clone());
        }
    }
    let mut rows = Vec::new();
    for label in &order {
        let frags: Vec<&RunFragment> = fragments.iter().filter(|f| &f.label == label).collect();
        let first = frags[0];
        if frags.iter().any(|f| f.method != first.method || f.trainable_params != first.trainable_params) {
            return Err(Error::Integrity(format!("fragments of `{label}` disagree on method or parameter count")));
        }
        let mut domains = BTreeMap::new();
        let names: std::collections::BTreeSet<&String> = frags.iter().flat_map(|f| f.domains.keys()).collect();
        for d in names {
            let seed_means: Vec<f64> = frags.iter().filter_map(|f| f.domains.get(d).map(|e| e.mean)).collect();
            let (mean, std) = mean_std(&seed_means);
            domains.insert(d.clone(), DomainSummary { mean, std, seed_means });
        }
        rows.push(RowSummary {
            label: label.clone(),
            method: first.method,
            seeds: frags.iter().map(|f| f.seed).collect(),
            trainable_params: first.trainable_params,
            total_params: first.total_params,
            domains,
        });
    }

    let mut t_tests = Vec::new();
    if let Some(reference) = order.first() {
        let refs: Vec<&RunFragment> = fragments.iter().filter(|f| &f.label == reference).collect();
        for other in &order[1..] {
            let others: Vec<&RunFragment> = fragments.iter().filter(|f| &f.label == other).collect();
            for d in rows[0].domains.keys() {
                if let (Some(a), Some(b)) = (image_means(&refs, d), image_means(&others, d)) {
                    if a.len() == b.len() && a.len() >= 2 {
                        t_tests.push(TTestEntry {
                            a: reference.clone(),
                            b: other.clone(),
                            domain: d.clone(),
                            result: paired_t_test(&a, &b)?,
                        });
                    }
                }
            }
        }
    }
    Ok(RunReport {
        version: CONFIG_VERSION,
        rows,
        t_tests,
        fragments,
        config,
    })
}

/// Reads every fragment under `run_dir`, aggregates them, writes
/// `report.json` and returns the report.
pub fn emit_report(run_dir: &Path) -> Result<RunReport> {
    let dir = run_dir.join(FRAGMENT_DIR);
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no fragments in {}", dir.display())));
    }
    let mut fragments = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let f: RunFragment =
            serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", p.display())))?;
        fragments.push(f);
    }
    // Keep the experiment's row order when it recorded one.
    let order_path = run_dir.join("order.json");
    if order_path.exists() {
        let text = std::fs::read_to_string(&order_path).map_err(|e| Error::io(&order_path, e))?;
        let order: Vec<String> = serde_json::from_str(&text)?;
        fragments.sort_by_key(|f| (order.iter().position(|l| l == &f.label).unwrap_or(usize::MAX), f.seed));
    }
    let config_path = run_dir.join("config.json");
    let config = if config_path.exists() {
        let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let report = aggregate(fragments, config)?;
    save_json(&run_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Methods × domains table with a parameter column.
pub fn format_table(report: &RunReport) -> String {
    let domains: Vec<String> = report
        .rows
        .iter()
        .flat_map(|r| r.domains.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:<28} {:>12} {:>8}", "method", "params (M)", "frac %");
    for d in &domains {
        let _ = write!(s, " {:>17}", d);
    }
    s.push('\n');
    for r in &report.rows {
        let frac = 100.0 * r.trainable_params as f64 / r.total_params.max(1) as f64;
        let _ = write!(s, "{:<28} {:>12.4} {:>8.2}", r.label, r.trainable_params as f64 / 1e6, frac);
        for d in &domains {
            match r.domains.get(d) {
                Some(x) => {
                    let _ = write!(s, " {:>9.4} ± {:<5.3}", x.mean, x.std);
                }
                None => {
                    let _ = write!(s, " {:>17}", "-");
                }
            }
        }
        s.push('\n');
    }
    if !report.t_tests.is_empty() {
        s.push_str("\npaired t-tests (image-wise IoU, averaged over seeds)\n");
        for t in &report.t_tests {
            let _ = writeln!(
                s,
                "  {} vs {} on {}: t = {:.4}, p = {:.4e}, dof = {}{}",
                t.a,
                t.b,
                t.domain,
                t.result.t,
                t.result.p,
                t.result.dof,
                if t.result.degenerate { " (degenerate)" } else { "" }
            );
        }
    }
    s
}
