//! One-at-a-time screening and Sobol total-order indices.

use serde::{Deserialize, Serialize};

use crate::calibration::{BatchObjective, ParameterBounds};
use crate::error::{config, Result};

/// Index per parameter: GoF swing over its range, relative to the baseline GoF.
/// Non-finite evaluations (collisions) are left out of the swing.
pub fn oat_sensitivity(obj: &dyn BatchObjective, bounds: &ParameterBounds, baseline: &[f64], grid: usize) -> Result<Vec<f64>> {
    bounds.validate()?;
    if grid < 2 {
        return config("one-at-a-time grid needs at least two points");
    }
    if baseline.len() != bounds.dim() {
        return config("baseline does not match the parameter space");
    }
    let base = bounds.clamp(baseline);
    let mut batch = vec![base.clone()];
    for i in 0..bounds.dim() {
        for g in 0..grid {
            let mut x = base.clone();
            x[i] = bounds.lower[i] + (bounds.upper[i] - bounds.lower[i]) * g as f64 / (grid - 1) as f64;
            batch.push(x);
        }
    }
    let f = obj.evaluate(&batch);
    let f0 = f[0];
    let sweeps: Vec<(f64, f64)> = f[1..]
        .chunks(grid)
        .map(|c| {
            c.iter()
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let scale = if f0.is_finite() && f0 != 0.0 {
        f0.abs()
    } else {
        // Baseline at an exact optimum or infeasible: fall back to the
        // largest finite value seen so the index stays a ratio.
        f[1..].iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()))
    };
    Ok(sweeps
        .into_iter()
        .map(|(lo, hi)| if hi > lo && scale > 0.0 { (hi - lo) / scale } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolResult {
    pub s_total: Vec<f64>,
    pub variance: f64,
    /// Output variance was zero; all indices are reported as 0.
    pub zero_variance: bool,
    pub evaluations: usize,
    /// Base rows dropped because one of their evaluations was not finite.
    pub dropped_rows: usize,
}

/// Largest power of two not above `n` (0 for 0).
pub fn round_down_pow2(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        1 << (usize::BITS - 1 - n.leading_zeros())
    }
}

/// Rows of the Saltelli design in evaluation order: `A`, `B`, then `AB_i`
/// (`A` with column `i` taken from `B`) for every parameter.
pub fn saltelli_design(bounds: &ParameterBounds, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = bounds.dim();
    let seed = (seed ^ (seed >> 32)) as u32;
    let point = |j: usize, offset: usize| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let u = sobol_burley::sample(j as u32, (offset + i) as u32, seed) as f64;
                bounds.lower[i] + u * (bounds.upper[i] - bounds.lower[i])
            })
            .collect()
    };
    let a: Vec<Vec<f64>> = (0..n).map(|j| point(j, 0)).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|j| point(j, d)).collect();
    let mut rows = Vec::with_capacity(n * (d + 2));
    rows.extend(a.iter().cloned());
    rows.extend(b.iter().cloned());
    for i in 0..d {
        for j in 0..n {
            let mut r = a[j].clone();
            r[i] = b[j][i];
            rows.push(r);
        }
    }
    rows
}

/// Total-order indices with the Jansen estimator over `n·(d+2)` evaluations.
pub fn sobol_total_order(obj: &dyn BatchObjective, bounds: &ParameterBounds, n: usize, seed: u64) -> Result<SobolResult> {
    bounds.validate()?;
    if n < 2 || !n.is_power_of_two() {
        return config(format!("Sobol base sample count must be a power of two >= 2, got {n}"));
    }
    let d = bounds.dim();
    if 2 * d > 256 {
        return config("too many parameters for the low-discrepancy sequence");
    }
    let rows = saltelli_design(bounds, n, seed);
    let f = obj.evaluate(&rows);
    let fa = &f[..n];
    let fb = &f[n..2 * n];
    let fab = |i: usize| &f[(2 + i) * n..(3 + i) * n];

    let keep: Vec<usize> = (0..n)
        .filter(|&j| fa[j].is_finite() && fb[j].is_finite() && (0..d).all(|i| fab(i)[j].is_finite()))
        .collect();
    let m = keep.len();
    let zero = |variance: f64| SobolResult {
        s_total: vec![0.0; d],
        variance,
        zero_variance: true,
        evaluations: f.len(),
        dropped_rows: n - m,
    };
    if m < 2 {
        return Ok(zero(0.0));
    }
    let all: Vec<f64> = keep.iter().flat_map(|&j| [fa[j], fb[j]]).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
    if !(var > 1e-300) {
        return Ok(zero(var.max(0.0)));
    }
    let s_total = (0..d)
        .map(|i| {
            let ab = fab(i);
            let s: f64 = keep.iter().map(|&j| (fa[j] - ab[j]).powi(2)).sum();
            s / (2.0 * m as f64) / var
        })
        .collect();
    Ok(SobolResult {
        s_total,
        variance: var,
        zero_variance: false,
        evaluations: f.len(),
        dropped_rows: n - m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub parameter: String,
    pub lower: f64,
    pub upper: f64,
    pub oat_index: Option<f64>,
    pub sobol_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub model: Option<String>,
    pub entries: Vec<SensitivityEntry>,
    pub oat_grid: Option<usize>,
    pub sobol_samples: Option<usize>,
    pub evaluations: usize,
    pub zero_variance: bool,
    pub seed: u64,
}

impl SensitivityReport {
    pub fn new(bounds: &ParameterBounds, model: Option<String>, seed: u64) -> Self {
        SensitivityReport {
            model,
            entries: bounds
                .names
                .iter()
                .zip(bounds.lower.iter().zip(&bounds.upper))
                .map(|(n, (&lower, &upper))| SensitivityEntry {
                    parameter: n.clone(),
                    lower,
                    upper,
                    oat_index: None,
                    sobol_total: None,
                })
                .collect(),
            oat_grid: None,
            sobol_samples: None,
            evaluations: 0,
            zero_variance: false,
            seed,
        }
    }

    pub fn with_oat(mut self, idx: &[f64], grid: usize) -> Self {
        for (e, &v) in self.entries.iter_mut().zip(idx) {
            e.oat_index = Some(v);
        }
        self.oat_grid = Some(grid);
        self.evaluations += 1 + grid * idx.len();
        self
    }

    pub fn with_sobol(mut self, r: &SobolResult, n: usize) -> Self {
        for (e, &v) in self.entries.iter_mut().zip(&r.s_total) {
            e.sobol_total = Some(v);
        }
        self.sobol_samples = Some(n);
        self.evaluations += r.evaluations;
        self.zero_variance = r.zero_variance;
        self
    }

    /// `parameter,oat_index,sobol_total`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("parameter,oat_index,sobol_total\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.parameter, fmt(e.oat_index), fmt(e.sobol_total)));
        }
        s
    }
}

/// Parameters whose index exceeds `threshold`, most influential first. The
/// Sobol index is used when present, the one-at-a-time index otherwise.
pub fn rank_parameters(report: &SensitivityReport, threshold: f64) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = report
        .entries
        .iter()
        .filter_map(|e| e.sobol_total.or(e.oat_index).map(|v| (v, e.parameter.as_str())))
        .filter(|(v, _)| *v > threshold)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, n)| n.to_string()).collect()
}

/// `sin x1 + a sin² x2 + b x3⁴ sin x1` on `[-π, π]³`.
pub fn ishigami(x: &[f64], a: f64, b: f64) -> f64 {
    x[0].sin() + a * x[1].sin().powi(2) + b * x[2].powi(4) * x[0].sin()
}

/// Analytic total-order indices of [`ishigami`].
pub fn ishigami_total_indices(a: f64, b: f64) -> [f64; 3] {
    let pi4 = std::f64::consts::PI.powi(4);
    let v1 = 0.5 * (1.0 + b * pi4 / 5.0).powi(2);
    let v2 = a * a / 8.0;
    let v13 = 8.0 * b * b * pi4 * pi4 / 225.0;
    let v = v1 + v2 + v13;
    [(v1 + v13) / v, v2 / v, v13 / v]
}
