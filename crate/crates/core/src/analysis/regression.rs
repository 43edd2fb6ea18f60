//! Ordinary least squares with ablation (ΔR²), variance-inflation factors,
//! optional categorical fixed effects, and the two-stage collinearity screen.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sentinel reported when a feature is exactly collinear with the rest.
pub const VIF_CAP: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct OlsOptions {
    /// Z-score features and target; coefficients come out in standardized
    /// units so their magnitudes are comparable across features.
    pub standardize: bool,
    /// Name of a feature to refit as categorical fixed effects (one-hot,
    /// first category as baseline). The dummies are controls: they join
    /// every fit but are not reported as features.
    pub categorical: Option<String>,
    pub compute_delta_r2: bool,
    pub compute_vif: bool,
}

impl Default for OlsOptions {
    fn default() -> Self {
        OlsOptions {
            standardize: true,
            categorical: None,
            compute_delta_r2: true,
            compute_vif: true,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RegressionResult {
    pub feature_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    /// R²_full − R²_without-feature, per feature.
    pub delta_r2: Vec<f64>,
    pub vif: Vec<f64>,
    pub n_observations: usize,
    /// Columns flagged as linearly dependent during fitting.
    pub dropped_columns: Vec<String>,
}

/// Least-squares fit of `target` on named feature columns.
pub fn ols_fit(
    features: &[Vec<f64>],
    names: &[String],
    target: &[f64],
    options: &OlsOptions,
) -> Result<RegressionResult> {
    if features.len() != names.len() {
        return Err(Error::contract(format!(
            "{} feature columns but {} names",
            features.len(),
            names.len()
        )));
    }
    let n = target.len();
    for (j, col) in features.iter().enumerate() {
        if col.len() != n {
            return Err(Error::contract(format!(
                "feature {} has {} rows, target has {n}",
                names[j],
                col.len()
            )));
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("feature {} is not finite", names[j])));
        }
    }

    // split off the categorical column into control dummies
    let mut reg_cols: Vec<Vec<f64>> = Vec::new();
    let mut reg_names: Vec<String> = Vec::new();
    let mut controls: Vec<Vec<f64>> = Vec::new();
    for (j, col) in features.iter().enumerate() {
        if options.categorical.as_deref() == Some(names[j].as_str()) {
            controls = one_hot_dummies(col);
        } else {
            reg_cols.push(col.clone());
            reg_names.push(names[j].clone());
        }
    }
    let p = reg_cols.len();
    if n <= p + controls.len() + 1 {
        return Err(Error::contract(format!(
            "need more observations ({n}) than design columns ({})",
            p + controls.len() + 1
        )));
    }

    let (xcols, y) = if options.standardize {
        (
            reg_cols.iter().map(|c| zscore(c)).collect::<Vec<_>>(),
            zscore(target),
        )
    } else {
        (reg_cols.clone(), target.to_vec())
    };

    let full_design: Vec<&[f64]> = xcols
        .iter()
        .map(|c| c.as_slice())
        .chain(controls.iter().map(|c| c.as_slice()))
        .collect();
    let full = fit_design(&full_design, &y)?;
    let r2 = full.r2;
    let dropped_columns: Vec<String> = full
        .dependent
        .iter()
        .map(|&j| {
            if j < p {
                reg_names[j].clone()
            } else {
                format!("control#{}", j - p)
            }
        })
        .collect();

    let mut delta_r2 = vec![0.0; p];
    if options.compute_delta_r2 {
        for j in 0..p {
            let reduced: Vec<&[f64]> = xcols
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, c)| c.as_slice())
                .chain(controls.iter().map(|c| c.as_slice()))
                .collect();
            let r = fit_design(&reduced, &y)?;
            delta_r2[j] = r2 - r.r2;
        }
    }

    let mut vif = vec![1.0; p];
    if options.compute_vif && p >= 2 {
        for j in 0..p {
            let others: Vec<&[f64]> = xcols
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, c)| c.as_slice())
                .collect();
            let r = fit_design(&others, &xcols[j])?;
            vif[j] = if r.r2 < 1.0 - 1.0 / VIF_CAP {
                (1.0 / (1.0 - r.r2)).max(1.0)
            } else {
                VIF_CAP
            };
        }
    }

    Ok(RegressionResult {
        feature_names: reg_names,
        coefficients: full.coefs[..p].to_vec(),
        intercept: full.intercept,
        r2,
        delta_r2,
        vif,
        n_observations: n,
        dropped_columns,
    })
}

struct FitOutcome {
    intercept: f64,
    coefs: Vec<f64>,
    r2: f64,
    dependent: Vec<usize>,
}

/// Solve min ‖y − (1, X)β‖² by SVD (minimum-norm under collinearity) and
/// report R² plus columns that are linear combinations of earlier ones.
fn fit_design(cols: &[&[f64]], y: &[f64]) -> Result<FitOutcome> {
    let n = y.len();
    let p = cols.len();
    let mut x = DMatrix::<f64>::zeros(n, p + 1);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            x[(i, j + 1)] = col[i];
        }
    }
    let yv = DVector::from_column_slice(y);
    let dependent = dependent_columns(&x);
    let svd = x.clone().svd(true, true);
    let beta = svd
        .solve(&yv, 1e-12)
        .map_err(|e| Error::numeric(format!("least-squares solve failed: {e}")))?;
    let residual = &yv - &x * &beta;
    let ss_res: f64 = residual.iter().map(|v| v * v).sum();
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r2 = if ss_tot <= 1e-30 {
        0.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(FitOutcome {
        intercept: beta[0],
        coefs: beta.iter().skip(1).copied().collect(),
        r2,
        dependent,
    })
}

/// Indices of design columns (excluding the intercept) that are linearly
/// dependent on earlier columns, by modified Gram–Schmidt with tolerance.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let n = x.nrows();
    let p = x.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..p {
        let mut v = DVector::from_fn(n, |i, _| x[(i, j)]);
        let norm0 = v.norm();
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        if v.norm() <= 1e-9 * norm0.max(1.0) {
            if j > 0 {
                dependent.push(j - 1);
            }
        } else {
            let norm = v.norm();
            basis.push(v / norm);
        }
    }
    dependent
}

fn zscore(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-30 {
        return vec![0.0; col.len()];
    }
    col.iter().map(|v| (v - mean) / sd).collect()
}

/// One-hot dummies for the distinct values of a column, first (sorted)
/// category as baseline.
fn one_hot_dummies(col: &[f64]) -> Vec<Vec<f64>> {
    let mut levels: Vec<i64> = col.iter().map(|&v| v.round() as i64).collect();
    levels.sort_unstable();
    levels.dedup();
    levels
        .iter()
        .skip(1)
        .map(|&lv| {
            col.iter()
                .map(|&v| if v.round() as i64 == lv { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Outcome of the two-stage collinearity screen.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScreenReport {
    pub retained: Vec<String>,
    /// (feature, reason) in removal order.
    pub removed: Vec<(String, String)>,
}

/// Stage 1: among pairs with |r| > `corr_cap`, drop the member less
/// correlated with the target. Stage 2: iteratively drop the highest-VIF
/// feature until all VIF < `vif_cap`.
pub fn feature_screen(
    features: &[Vec<f64>],
    names: &[String],
    target: &[f64],
    corr_cap: f64,
    vif_cap: f64,
) -> Result<ScreenReport> {
    let mut alive: Vec<usize> = (0..features.len()).collect();
    let mut removed = Vec::new();

    loop {
        let mut worst: Option<(usize, usize, f64)> = None;
        for ai in 0..alive.len() {
            for bi in ai + 1..alive.len() {
                let (a, b) = (alive[ai], alive[bi]);
                if let Some(r) = pearson(&features[a], &features[b]) {
                    if r.abs() > corr_cap
                        && worst.map(|(_, _, w)| r.abs() > w).unwrap_or(true)
                    {
                        worst = Some((ai, bi, r.abs()));
                    }
                }
            }
        }
        let Some((ai, bi, r)) = worst else { break };
        let (a, b) = (alive[ai], alive[bi]);
        let ca = pearson(&features[a], target).unwrap_or(0.0).abs();
        let cb = pearson(&features[b], target).unwrap_or(0.0).abs();
        let (drop_pos, keep) = if ca >= cb { (bi, a) } else { (ai, b) };
        let dropped = alive.remove(drop_pos);
        removed.push((
            names[dropped].clone(),
            format!("|r| = {r:.3} with {}", names[keep]),
        ));
    }

    loop {
        if alive.len() < 2 {
            break;
        }
        let cols: Vec<Vec<f64>> = alive.iter().map(|&i| features[i].clone()).collect();
        let nm: Vec<String> = alive.iter().map(|&i| names[i].clone()).collect();
        let fit = ols_fit(
            &cols,
            &nm,
            target,
            &OlsOptions {
                compute_delta_r2: false,
                compute_vif: true,
                ..Default::default()
            },
        )?;
        let (jmax, &vmax) = fit
            .vif
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite VIF"))
            .expect("non-empty");
        if vmax < vif_cap {
            break;
        }
        let dropped = alive.remove(jmax);
        removed.push((names[dropped].clone(), format!("VIF = {vmax:.1}")));
    }

    Ok(ScreenReport {
        retained: alive.into_iter().map(|i| names[i].clone()).collect(),
        removed,
    })
}

/// Pearson correlation; None when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson needs equal lengths");
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 1e-30 || syy <= 1e-30 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
