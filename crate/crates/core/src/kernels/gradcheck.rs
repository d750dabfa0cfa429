use crate::error::{Error, Result};

/// A named parameter block together with its analytic gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub values: Vec<f64>,
    pub analytic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `block[index]` of the worst entry.
    pub worst_param: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central differences of `loss` with respect to every entry of `params`.
pub fn numeric_gradient<F>(mut loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {eps} must be positive")));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss(&p);
        p[i] = orig - eps;
        let minus = loss(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares every analytic gradient entry with a central difference and reports the worst.
///
/// `loss` receives the blocks with exactly one entry perturbed.
pub fn finite_diff_check<F>(mut loss: F, blocks: &mut [ParamBlock], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[ParamBlock]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {eps} must be positive")));
    }
    if !loss(blocks).is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for b in 0..blocks.len() {
        if blocks[b].values.len() != blocks[b].analytic.len() {
            return Err(Error::Shape(format!(
                "block `{}` has {} values but {} gradient entries",
                blocks[b].name,
                blocks[b].values.len(),
                blocks[b].analytic.len()
            )));
        }
        for i in 0..blocks[b].values.len() {
            let orig = blocks[b].values[i];
            blocks[b].values[i] = orig + eps;
            let plus = loss(blocks);
            blocks[b].values[i] = orig - eps;
            let minus = loss(blocks);
            blocks[b].values[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(blocks[b].analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", blocks[b].name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let g = numeric_gradient(|p| 0.5 * p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);

        let mut blocks = vec![ParamBlock {
            name: "theta".into(),
            values: vec![3.0],
            analytic: vec![3.0],
        }];
        let report = finite_diff_check(|b| 0.5 * b[0].values[0].powi(2), &mut blocks, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.worst_param, "theta[0]");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut blocks = vec![
            ParamBlock {
                name: "a".into(),
                values: vec![1.0, 2.0],
                analytic: vec![2.0, 4.0],
            },
            ParamBlock {
                name: "b".into(),
                values: vec![1.0],
                analytic: vec![0.0],
            },
        ];
        let report = finite_diff_check(
            |b| b[0].values.iter().map(|x| x * x).sum::<f64>() + 3.0 * b[1].values[0],
            &mut blocks,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.worst_param, "b[0]");
        assert!(report.max_rel_error > 0.99);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut blocks = vec![ParamBlock {
            name: "x".into(),
            values: vec![0.0],
            analytic: vec![0.0],
        }];
        assert!(matches!(
            finite_diff_check(|b| 1.0 / b[0].values[0].abs(), &mut blocks, 1e-5),
            Err(Error::NonFiniteLoss)
        ));
    }
}
