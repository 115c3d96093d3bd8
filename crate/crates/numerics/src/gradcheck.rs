//! Central finite-difference gradient checks (64-bit only).

use crate::error::NumericsError;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-12)
}

fn eval_scalar(g: &Graph<f64>, y: Var) -> Result<f64, NumericsError> {
    let t = g.value(y);
    if t.len() != 1 {
        return Err(NumericsError::NonScalarLoss(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite(v));
    }
    Ok(v)
}

/// Max over coordinates of `|analytic − central difference| / (|central
/// difference| + 1e-12)` for a scalar function of one input tensor.
///
/// `f` builds the function on a fresh graph given the input leaf.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    assert!(eps > 0.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let y = f(&mut g, xv);
    eval_scalar(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval_at = |pert: &Tensor<f64>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let v = g.input(pert.clone(), false);
        let y = f(&mut g, v);
        eval_scalar(&g, y)
    };
    let mut worst: f64 = 0.0;
    let mut pert = x.clone();
    for i in 0..x.len() {
        let orig = pert.data()[i];
        pert.data_mut()[i] = orig + eps;
        let fp = eval_at(&pert)?;
        pert.data_mut()[i] = orig - eps;
        let fm = eval_at(&pert)?;
        pert.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter result of [`finite_diff_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Same check as [`finite_diff_check`] but with respect to parameters in a
/// store. At most `max_coords` evenly spaced coordinates are probed per
/// parameter (`usize::MAX` for all of them).
pub fn finite_diff_check_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<Vec<ParamCheck>, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let y = f(&mut g, store);
    eval_scalar(&g, y)?;
    let grads = g.backward(y)?;
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let mut gp = Graph::new();
            let yp = f(&mut gp, &work);
            let fp = eval_scalar(&gp, yp)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let mut gm = Graph::new();
            let ym = f(&mut gm, &work);
            let fm = eval_scalar(&gm, ym)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
        out.push(ParamCheck { name: store.name(id).to_string(), checked, max_rel_err: worst });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(&[4], &[0.1, -3.0, 7.5, 2.0]).unwrap();
        let err = finite_diff_check(|g, x| g.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x);
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let s = g.scale(x, f64::INFINITY);
                g.sum(s)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(NumericsError::NonFinite(_))));
    }
}
