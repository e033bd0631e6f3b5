use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use super::config::Variant;
use super::eval::EvalReport;
use super::run::{RunSpec, RunSummary, Trainer, METRICS_HEADER};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    /// Template; `train.variant`, `train.seed` and `out_dir` are overridden.
    pub base: RunSpec,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub evals: Vec<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    pub failures: Vec<(Variant, u64, String)>,
    pub combined_csv: PathBuf,
    pub summary_md: PathBuf,
}

impl AblationResult {
    pub fn run(&self, variant: Variant, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }
}

/// Normalised trapezoid area under (step, eval_reward): the mean height of
/// the learning curve. A single point returns its own value.
pub fn curve_auc(evals: &[EvalReport]) -> Option<f64> {
    let first = evals.first()?;
    let last = evals.last()?;
    if evals.len() == 1 || last.step == first.step {
        return Some(first.eval_reward);
    }
    let area: f64 = evals
        .windows(2)
        .map(|w| 0.5 * (w[0].eval_reward + w[1].eval_reward) * (w[1].step - w[0].step) as f64)
        .sum();
    Some(area / (last.step - first.step) as f64)
}

/// First evaluation at or after `fraction` of the budget.
pub fn eval_at_fraction(evals: &[EvalReport], total_steps: u64, fraction: f64) -> Option<&EvalReport> {
    let target = (fraction * total_steps as f64).ceil() as u64;
    evals.iter().find(|e| e.step >= target)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Runs every (variant, seed) pair into `<out>/<variant>-seed<k>/`, then
/// writes `ablation.csv` and `summary.md` into `<out>`. A failed run is
/// recorded and the sweep continues.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationResult> {
    let out = spec.base.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut result = AblationResult {
        combined_csv: out.join("ablation.csv"),
        summary_md: out.join("summary.md"),
        ..Default::default()
    };
    let mut combined = format!("{METRICS_HEADER}\n");
    for &seed in &spec.seeds {
        for &variant in &spec.variants {
            let mut rs = spec.base.clone();
            rs.train.variant = variant;
            rs.train.seed = seed;
            rs.out_dir = out.join(format!("{variant}-seed{seed}"));
            log::info!("ablation run {variant} seed {seed}");
            match Trainer::new(rs).and_then(Trainer::run) {
                Ok(RunSummary { evals, metrics_csv, .. }) => {
                    let text = fs::read_to_string(&metrics_csv).map_err(|e| Error::io(&metrics_csv, e))?;
                    for line in text.lines().skip(1) {
                        combined.push_str(line);
                        combined.push('\n');
                    }
                    result.runs.push(AblationRun { variant, seed, evals });
                }
                Err(e) => {
                    log::error!("ablation run {variant} seed {seed} failed: {e}");
                    result.failures.push((variant, seed, e.to_string()));
                }
            }
        }
    }
    fs::write(&result.combined_csv, combined).map_err(|e| Error::io(&result.combined_csv, e))?;
    let md = summary_markdown(spec, &result);
    fs::write(&result.summary_md, md).map_err(|e| Error::io(&result.summary_md, e))?;
    Ok(result)
}

fn summary_markdown(spec: &AblationSpec, result: &AblationResult) -> String {
    let total = spec.base.train.total_steps;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Ablation: {} ({} steps, seeds {:?})\n",
        spec.base.scenario.kind, total, spec.seeds
    );
    s.push_str("| variant | runs | final return | final success | mid-budget return | curve AUC |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for &v in &spec.variants {
        let runs: Vec<&AblationRun> = result.runs.iter().filter(|r| r.variant == v).collect();
        let pick = |f: &dyn Fn(&AblationRun) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(|r| f(r)).collect() };
        let fin_r = mean_sd(&pick(&|r| r.evals.last().map(|e| e.eval_reward)));
        let fin_s = mean_sd(&pick(&|r| r.evals.last().map(|e| e.success_rate)));
        let mid = mean_sd(&pick(&|r| eval_at_fraction(&r.evals, total, 0.5).map(|e| e.eval_reward)));
        let auc = mean_sd(&pick(&|r| curve_auc(&r.evals)));
        let _ = writeln!(
            s,
            "| {v} | {} | {:.3} ± {:.3} | {:.2} ± {:.2} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
            runs.len(),
            fin_r.0,
            fin_r.1,
            fin_s.0,
            fin_s.1,
            mid.0,
            mid.1,
            auc.0,
            auc.1
        );
    }
    if !result.failures.is_empty() {
        s.push_str("\nFailed runs:\n\n");
        for (v, seed, e) in &result.failures {
            let _ = writeln!(s, "- {v} seed {seed}: {e}");
        }
    }
    s
}
