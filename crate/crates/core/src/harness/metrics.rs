use crate::error::{Error, Result};

fn check(pred: &[f32], truth: &[f32]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Domain("metric over empty input".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub fn mse(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check(pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes that occur in either
/// the predictions or the truth.
pub fn macro_f1(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "macro_f1",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Domain("macro-F1 over empty input".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c as usize >= classes) {
        return Err(Error::Domain(format!("label {bad} outside {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fneg[t as usize] += 1;
        }
    }
    let mut scores = Vec::new();
    for c in 0..classes {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        scores.push(2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_arrays_have_zero_error() {
        let a = [0.1, 0.5, -2.0];
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn known_values() {
        assert!((mae(&[1.0, 3.0], &[0.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!((mse(&[1.0, 3.0], &[0.0, 0.0]).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_labels() {
        assert_eq!(macro_f1(&[0, 1, 2, 2], &[0, 1, 2, 2], 4).unwrap(), 1.0);
    }

    #[test]
    fn two_class_hand_case() {
        // class 0: TP=1 FP=1 FN=0, class 1: TP=1 FP=0 FN=1
        let pred = [0, 0, 1];
        let truth = [0, 1, 1];
        let oracle = (2.0 / 3.0 + 2.0 / 3.0) / 2.0;
        assert!((macro_f1(&pred, &truth, 2).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_domain_error() {
        assert!(matches!(mae(&[], &[]), Err(Error::Domain(_))));
        assert!(matches!(macro_f1(&[], &[], 2), Err(Error::Domain(_))));
    }
}
