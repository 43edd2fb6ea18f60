//! Statistics and probes for testing whether compute allocation tracks
//! complexity: rank correlations, regressions with ablation and collinearity
//! diagnostics, parse-state probes, and training-dynamics summaries.

mod brevo_probe;
mod mano_probe;
mod regression;

pub use brevo_probe::{brevo_state_features, BrevoStateFeatures};
pub use mano_probe::{mano_parse_state, ManoParseState};
pub use regression::{
    feature_screen, ols_fit, pearson, OlsOptions, RegressionResult, ScreenReport, VIF_CAP,
};

use crate::eval::EvalRecord;
use crate::train::TrainMetrics;

/// Spearman rank correlation with average ranks for ties. `None` when either
/// input is constant (undefined, flagged rather than fabricated).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman needs equal lengths");
    assert!(x.len() >= 2, "spearman needs at least two observations");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // average rank for the tie group [i, j]
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One row of the complexity-vs-allocation table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComplexityRow {
    pub knob: i64,
    pub count: usize,
    pub accuracy: f64,
    pub mean_depth_answer: f64,
}

/// Group evaluation records by knob value; empty groups cannot occur (rows
/// come from records), missing knob values are simply absent.
pub fn complexity_table(records: &[EvalRecord]) -> Vec<ComplexityRow> {
    let mut groups: std::collections::BTreeMap<i64, Vec<&EvalRecord>> = Default::default();
    for r in records {
        groups.entry(r.knob).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(knob, rs)| ComplexityRow {
            knob,
            count: rs.len(),
            accuracy: rs.iter().filter(|r| r.correct).count() as f64 / rs.len() as f64,
            mean_depth_answer: rs.iter().map(|r| r.d_bar_answer).sum::<f64>() / rs.len() as f64,
        })
        .collect()
}

/// Per-knob training curves plus the two-phase summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DynamicsReport {
    pub curves: Vec<KnobCurve>,
    /// (step, overall answer-token mean depth) at each evaluation point.
    pub overall_depth: Vec<(usize, f64)>,
    pub peak_step: usize,
    pub peak_depth: f64,
    pub final_depth: f64,
    /// final / peak; a value well below 1 signals the compute-reduction phase.
    pub final_to_peak_ratio: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct KnobCurve {
    pub knob: i64,
    /// (step, accuracy, answer-token mean depth)
    pub points: Vec<(usize, f64, f64)>,
}

/// Aggregate the training metrics stream into per-knob curves and the
/// learning / compute-reduction phase summary.
pub fn training_dynamics(metrics: &[TrainMetrics]) -> DynamicsReport {
    let mut curves: std::collections::BTreeMap<i64, Vec<(usize, f64, f64)>> = Default::default();
    let mut overall = Vec::new();
    for m in metrics {
        if let Some(eval) = &m.eval {
            for k in &eval.per_knob {
                curves
                    .entry(k.knob)
                    .or_default()
                    .push((m.step, k.accuracy, k.d_bar_answer));
            }
            overall.push((m.step, eval.overall_d_bar_answer));
        }
    }
    let (mut peak_step, mut peak_depth) = (0usize, f64::MIN);
    for &(step, d) in &overall {
        if d > peak_depth {
            peak_depth = d;
            peak_step = step;
        }
    }
    let final_depth = overall.last().map(|&(_, d)| d).unwrap_or(0.0);
    let ratio = if peak_depth > 0.0 {
        final_depth / peak_depth
    } else {
        1.0
    };
    DynamicsReport {
        curves: curves
            .into_iter()
            .map(|(knob, points)| KnobCurve { knob, points })
            .collect(),
        overall_depth: overall,
        peak_step,
        peak_depth: if peak_depth == f64::MIN { 0.0 } else { peak_depth },
        final_depth,
        final_to_peak_ratio: ratio,
    }
}
