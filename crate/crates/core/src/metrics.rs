//! Coefficient error and support recovery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the per-term comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub name: String,
    pub truth: f64,
    pub identified: f64,
    /// Both zero or both nonzero.
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `‖Λ_id − Λ_true‖₂ / ‖Λ_true‖₂` after scale alignment.
    pub l2_rel: f64,
    /// Same without alignment.
    pub l2_raw: f64,
    /// Factor applied to `Λ_id` before computing `l2_rel`.
    pub scale: f64,
    pub precision: f64,
    pub recall: f64,
    pub terms: Vec<TermRow>,
}

/// Compares identified coefficients with the truth.
///
/// With `align`, `Λ_id` is first multiplied by the least-squares scalar
/// `c = ⟨Λ_id, Λ_true⟩ / ⟨Λ_id, Λ_id⟩` (kept at 1 unless positive), since any
/// positive multiple of a Lagrangian yields the same dynamics. Supports use
/// exact zeros.
pub fn evaluate(
    identified: &[f64],
    truth: &[f64],
    names: &[String],
    align: bool,
) -> Result<EvalResult> {
    if identified.len() != truth.len() || names.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} identified, {} true coefficients, {} names",
            identified.len(),
            truth.len(),
            names.len()
        )));
    }
    let norm_true = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_true == 0.0 {
        return Err(Error::UndefinedMetric(
            "true coefficient vector is zero".into(),
        ));
    }
    let nnz_id = identified.iter().filter(|&&v| v != 0.0).count();
    if nnz_id == 0 {
        return Err(Error::UndefinedMetric(
            "identified coefficient vector is zero".into(),
        ));
    }
    if identified.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite coefficient".into()));
    }
    let nnz_true = truth.iter().filter(|&&v| v != 0.0).count();
    let both = identified
        .iter()
        .zip(truth)
        .filter(|(a, b)| **a != 0.0 && **b != 0.0)
        .count();

    let dist = |c: f64| {
        identified
            .iter()
            .zip(truth)
            .map(|(a, b)| (c * a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / norm_true
    };
    let scale = if align {
        let dot: f64 = identified.iter().zip(truth).map(|(a, b)| a * b).sum();
        let sq: f64 = identified.iter().map(|a| a * a).sum();
        let c = dot / sq;
        if c > 0.0 {
            c
        } else {
            1.0
        }
    } else {
        1.0
    };
    let terms = names
        .iter()
        .zip(identified.iter().zip(truth))
        .map(|(name, (&a, &b))| TermRow {
            name: name.clone(),
            truth: b,
            identified: a,
            matched: (a != 0.0) == (b != 0.0),
        })
        .collect();
    Ok(EvalResult {
        l2_rel: dist(scale),
        l2_raw: dist(1.0),
        scale,
        precision: both as f64 / nnz_id as f64,
        recall: both as f64 / nnz_true as f64,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("t{k}")).collect()
    }

    #[test]
    fn identity() {
        let t = [0.5, 9.81, 0.0];
        let r = evaluate(&t, &t, &names(3), true).unwrap();
        assert_eq!((r.l2_rel, r.precision, r.recall), (0.0, 1.0, 1.0));
        assert!(r.terms.iter().all(|row| row.matched));
    }

    #[test]
    fn undefined_cases() {
        assert!(evaluate(&[1.0], &[0.0], &names(1), true).is_err());
        assert!(evaluate(&[0.0], &[1.0], &names(1), true).is_err());
        assert!(evaluate(&[1.0], &[1.0, 2.0], &names(2), true).is_err());
    }

    #[test]
    fn negative_scale_is_not_aligned() {
        let r = evaluate(&[-1.0, 0.0], &[1.0, 0.0], &names(2), true).unwrap();
        assert_eq!(r.scale, 1.0);
        assert_eq!(r.l2_rel, 2.0);
    }
}
