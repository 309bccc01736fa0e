//! CSV emitters for run artifacts. Formatting is deterministic: floats are
//! printed with Rust's shortest-roundtrip formatting.

use crate::losses::SmoothnessReport;
use crate::prune::PruneReport;
use crate::student::{CountReport, StudentPlan};
use crate::train::RunReport;
use crate::verify::VerifyCheck;
use std::collections::BTreeMap;
use std::fmt::Write;

/// Per-epoch history: `epoch,train_loss,train_acc,val_acc,lr`.
pub fn run_report_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_acc,lr\n");
    for r in &report.epochs {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.lr
        )
        .expect("string write");
    }
    out
}

/// Final metrics as `metric,value` rows.
pub fn metrics_csv(metrics: &BTreeMap<String, f64>) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in metrics {
        writeln!(out, "{},{}", k, v).expect("string write");
    }
    out
}

/// Census/plan table: `layer,kernel_area,teacher_nonzero,channels,student_weights,ratio_pct`.
pub fn census_csv(plan: &StudentPlan) -> String {
    let mut out =
        String::from("layer,kernel_area,teacher_nonzero,channels,student_weights,ratio_pct\n");
    for r in &plan.rows {
        let ratio = 100.0 * r.student_weights as f64 / r.teacher_capacity as f64;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name, r.kernel_area, r.teacher_nonzero, r.channels, r.student_weights, ratio
        )
        .expect("string write");
    }
    writeln!(out, "total,,,,{},", plan.total_weights).expect("string write");
    out
}

/// Per-sample smoothness terms:
/// `sample_index,true_label,prob_a,prob_b,log_ratio`.
pub fn smoothness_csv(report: &SmoothnessReport) -> String {
    let mut out = String::from("sample_index,true_label,prob_a,prob_b,log_ratio\n");
    for s in &report.per_sample {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.index, s.true_label, s.prob_a, s.prob_b, s.log_ratio
        )
        .expect("string write");
    }
    out
}

/// Iterative-pruning log:
/// `iteration,target_sparsity,achieved_sparsity,best_val_acc,finetune_epochs`.
pub fn prune_report_csv(report: &PruneReport) -> String {
    let mut out =
        String::from("iteration,target_sparsity,achieved_sparsity,best_val_acc,finetune_epochs\n");
    for r in &report.iterations {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.target_sparsity, r.achieved_sparsity, r.best_val_acc, r.finetune_epochs
        )
        .expect("string write");
    }
    out
}

/// Verification results: `check,passed,value,threshold,detail`.
pub fn verify_csv(checks: &[VerifyCheck]) -> String {
    let mut out = String::from("check,passed,value,threshold,detail\n");
    for c in checks {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.name,
            c.passed,
            c.value,
            c.threshold,
            c.detail.replace(',', ";")
        )
        .expect("string write");
    }
    out
}

/// Layer accounting: `layer,kind,weights,aux_params,macs,aux_macs`.
pub fn count_report_csv(report: &CountReport) -> String {
    let mut out = String::from("layer,kind,weights,aux_params,macs,aux_macs\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name, r.kind, r.weights, r.aux_params, r.macs, r.aux_macs
        )
        .expect("string write");
    }
    writeln!(
        out,
        "total,,{},{},{},{}",
        report.total_weights, report.total_aux_params, report.total_macs, report.total_aux_macs
    )
    .expect("string write");
    out
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
