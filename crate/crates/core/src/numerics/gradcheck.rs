//! Central-difference gradient oracle.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Outcome of a gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(leaf index, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Every probed coordinate.
    pub coords: Vec<CoordCheck>,
}

/// Differences at one coordinate. `forward` and `backward` are the one-sided
/// quotients; `numeric` is their mean.
#[derive(Clone, Copy, Debug)]
pub struct CoordCheck {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub forward: f64,
    pub backward: f64,
}

impl CoordCheck {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }

    /// True when the two one-sided quotients disagree by more than `tol`,
    /// i.e. the stencil crosses a point where the slope jumps.
    pub fn crosses_kink(&self, tol: f64) -> bool {
        relative_error(self.forward, self.backward) > tol
    }
}

/// Compares the analytic gradient of `f` at `x` with central differences.
///
/// `x` must be a leaf created with [`Tensor::param`]; its `grad` slot is
/// cleared before and after the check. Returns the maximum relative error
/// over all elements.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let report = check_leaves(|| f(x), std::slice::from_ref(x), None, h)?;
    Ok(report.max_rel_error)
}

/// Gradient check of a scalar closure against several leaves at once.
///
/// When `coords` is given, only those `(leaf, element)` pairs are probed.
pub fn check_leaves<F>(f: F, leaves: &[Tensor<f64>], coords: Option<&[(usize, usize)]>, h: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for leaf in leaves {
        if !leaf.is_leaf() || !leaf.requires_grad() {
            return Err(Error::Contract("gradient check needs trainable leaves".into()));
        }
        leaf.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()])).collect();
    drop(loss);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = leaves.iter().enumerate().flat_map(|(i, l)| (0..l.numel()).map(move |e| (i, e))).collect();
            &all
        }
    };

    let center = super::tensor::no_grad(&f)?.item();
    let mut report = GradCheckReport::default();
    for &(li, e) in coords {
        let leaf = &leaves[li];
        let orig = leaf.data()[e];
        leaf.data_mut()[e] = orig + h;
        let up = super::tensor::no_grad(&f)?.item();
        leaf.data_mut()[e] = orig - h;
        let down = super::tensor::no_grad(&f)?.item();
        leaf.data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[li][e], numeric);
        report.coords.push(CoordCheck {
            leaf: li,
            element: e,
            analytic: analytic[li][e],
            numeric,
            forward: (up - center) / h,
            backward: (center - down) / h,
        });
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((li, e, analytic[li][e], numeric));
        }
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        let err = finite_diff_check(|x| Ok(x.square().sum()), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_sum_is_flat() {
        let x = Tensor::<f64>::param(&[2, 5], (0..10).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let loss = x.softmax_last_dim().unwrap().sum();
        loss.backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|g| g.abs() < 1e-12));
        x.zero_grad();
        let err = finite_diff_check(|x| Ok(x.softmax_last_dim()?.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn kink_crossing_is_detected_and_resolves_with_a_smaller_step() {
        // |x| probed just right of zero: the step crosses the kink.
        let x = Tensor::<f64>::param(&[1], vec![2e-7]).unwrap();
        let rep = check_leaves(|| Ok(x.abs().sum()), &[x.clone()], None, 1e-6).unwrap();
        let c = rep.coords[0];
        assert!(c.rel_error() > 0.5);
        assert!(c.crosses_kink(1e-5));
        let fine = check_leaves(|| Ok(x.abs().sum()), &[x.clone()], None, 1e-8).unwrap();
        assert!(fine.coords[0].rel_error() < 1e-6 && !fine.coords[0].crosses_kink(1e-5));
        let rep = check_leaves(|| Ok(x.mul_scalar(2.0).square().sum()), &[x.clone()], None, 1e-6).unwrap();
        assert!(!rep.coords[0].crosses_kink(1e-5));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, -2.0]).unwrap();
        x.square().sum().backward().unwrap();
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));
    }
}
