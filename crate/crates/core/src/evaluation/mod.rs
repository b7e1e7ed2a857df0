//! Scenario I / II protocols, the ablation ladder, the CSP + LDA baseline and
//! result aggregation.

mod csp;
mod protocol;
mod results;


use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::parallel::map_indexed;
use crate::signal::Trial;
use crate::training::{fit, predict, TrainConfig, Variant};

pub use csp::{
    class_covariances, csp_filters, csp_lda_baseline, log_variance_features, select_filters,
    trial_covariance, CspFilters, CspLda, Lda, DEFAULT_FILTERS,
};
pub use protocol::{
    leakage_check, plan, plan_scenario1, plan_scenario2, train_val_split, trial_hash,
    verify_partition,
    ProtocolPlan, Run, Scenario, NUM_FOLDS, VAL_EVERY,
};
pub use results::{
    aggregate, read_rows_csv, write_rows_csv, write_table_json, FoldScore, ResultRow,
    ResultTable, SubjectScore,
};

/// `baseline` when only the classification loss is active, else the variant.
pub fn variant_label(cfg: &TrainConfig) -> String {
    if cfg.weights.beta == 0.0 && cfg.weights.gamma == 0.0 {
        "baseline".into()
    } else {
        cfg.variant.to_string()
    }
}

/// Seed of one run; depends on the run index only, so every variant and
/// weighting sees the same initialization and batch order for a given run.
pub fn run_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

fn pick<'a>(trials: &'a [Trial], idx: &[usize]) -> Vec<&'a Trial> {
    idx.iter().map(|&i| &trials[i]).collect()
}

/// Per-subject accuracy rows for one run's test predictions.
fn score_rows(
    plan: &ProtocolPlan,
    run: &Run,
    test: &[&Trial],
    pred: &[usize],
    backbone: &str,
    variant: &str,
) -> Vec<ResultRow> {
    let mut tally: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    for (t, &p) in test.iter().zip(pred) {
        let e = tally.entry(t.subject()).or_default();
        e.0 += usize::from(p == t.label());
        e.1 += 1;
    }
    tally
        .into_iter()
        .map(|(subject_id, (hit, n))| ResultRow {
            scenario: plan.scenario,
            backbone: backbone.to_string(),
            variant: variant.to_string(),
            subject_id,
            fold: run.fold,
            accuracy: hit as f64 / n as f64,
        })
        .collect()
}

/// Train one model per run (runs in parallel) and score it on the run's
/// test trials.
pub fn run_plan(
    trials: &[Trial],
    plan: &ProtocolPlan,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<Vec<ResultRow>> {
    verify_partition(plan, trials.len())?;
    let backbone = model.encoder.backbone.to_string();
    let variant = variant_label(train);
    let per_run = map_indexed(plan.runs.len(), |k| -> Result<Vec<ResultRow>> {
        let run = &plan.runs[k];
        let seed = run_seed(train.seed, run.fold);
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        let m = Model::<f32>::new(model.clone(), seed)?;
        let fitted = fit(m, &pick(trials, &run.train), &pick(trials, &run.val), &cfg)?;
        let test = pick(trials, &run.test);
        let pred = predict(&fitted.model, &test)?;
        Ok(score_rows(plan, run, &test, &pred, &backbone, &variant))
    });
    let mut rows = Vec::new();
    for r in per_run {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Same plan, seeds and schedule for every variant; only the active MI terms
/// differ.
pub fn run_ablation(
    trials: &[Trial],
    plan: &ProtocolPlan,
    model: &ModelConfig,
    train: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<(Variant, ResultTable)>> {
    variants
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                variant: v,
                ..train.clone()
            };
            Ok((v, aggregate(run_plan(trials, plan, model, &cfg)?)?))
        })
        .collect()
}

/// CSP + LDA on every run of a plan, fitted on the run's train and
/// validation trials together.
pub fn run_csp(trials: &[Trial], plan: &ProtocolPlan, n_filters: usize) -> Result<Vec<ResultRow>> {
    verify_partition(plan, trials.len())?;
    let mut rows = Vec::new();
    for run in &plan.runs {
        let mut fit_idx = run.train.clone();
        fit_idx.extend(&run.val);
        let m = CspLda::fit(&pick(trials, &fit_idx), n_filters)?;
        let test = pick(trials, &run.test);
        let pred: Vec<usize> = test.iter().map(|t| m.predict(t)).collect();
        rows.extend(score_rows(plan, run, &test, &pred, "csp", "csp"));
    }
    Ok(rows)
}
