//! Gradient verification by central finite differences.

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::tensor::Tensor;

/// Compare reverse-mode gradients of a scalar loss against central finite
/// differences, sweeping every element of every parameter.
///
/// `build` must deterministically construct the loss from parameter leaves
/// registered in the given order (it may capture fixed data). The returned
/// value is the worst relative error
/// `|analytic - fd| / max(1e-8, |analytic| + |fd|)`.
///
/// The secant denominator uses the actually-representable perturbed f32
/// values, not the nominal 2*eps, so quantization of the perturbation does
/// not masquerade as gradient error.
pub fn grad_check<F>(build: F, params: &[(String, Tensor)], eps: f32) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }

    let eval = |ps: &[(String, Tensor)], want_grads: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|(name, t)| g.param(name, t)).collect();
        let loss = build(&mut g, &ids)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NumericFault {
                node: loss,
                detail: format!("loss evaluated to {value}"),
            });
        }
        if want_grads {
            let map = g.backward(loss)?;
            let grads = ps.iter().map(|(name, _)| map[name].clone()).collect();
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    };

    let (_, grads) = eval(params, true)?;
    let analytic = grads.expect("requested gradients");

    let mut worst = 0.0f64;
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    for pi in 0..params.len() {
        for e in 0..params[pi].1.numel() {
            let center = params[pi].1.data()[e];
            let plus = center + eps;
            let minus = center - eps;
            let span = plus as f64 - minus as f64;
            if span == 0.0 {
                return Err(Error::contract(format!(
                    "eps {eps} vanishes at f32 value {center}"
                )));
            }

            work[pi].1.data_mut()[e] = plus;
            let (fp, _) = eval(&work, false)?;
            work[pi].1.data_mut()[e] = minus;
            let (fm, _) = eval(&work, false)?;
            work[pi].1.data_mut()[e] = center;

            let fd = (fp - fm) / span;
            let a = analytic[pi].data()[e] as f64;
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // f(x) = x^2 at x = 3, eps = 1e-4 -> error < 1e-6
        let params = vec![(
            "x".to_string(),
            Tensor::from_vec(vec![1], vec![3.0]).unwrap(),
        )];
        let err = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0]);
                Ok(g.sum_all(sq))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![(
            "x".to_string(),
            Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
        )];
        let err = grad_check(
            |g, _ids| {
                let c = g.input_rows(1, 1, vec![4.2]);
                Ok(g.sum_all(c))
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_perceptron_matches_fd() {
        // random 2-layer perceptron, d=8: max relative error < 1e-3 at eps 1e-3
        use crate::numcore::rng::Rng;
        let mut rng = Rng::seed_from_u64(17);
        let mut mk = |r: usize, c: usize| {
            let data: Vec<f32> = (0..r * c).map(|_| (rng.normal() * 0.5) as f32).collect();
            Tensor::from_vec(vec![r, c], data).unwrap()
        };
        let params = vec![
            ("w1".to_string(), mk(8, 8)),
            ("b1".to_string(), mk(1, 8)),
            ("w2".to_string(), mk(8, 1)),
        ];
        let x_data: Vec<f32> = (0..8).map(|i| ((i as f32) * 0.37).sin()).collect();

        let err = grad_check(
            move |g, ids| {
                let x = g.input_rows(1, 8, x_data.iter().map(|&v| v as f64).collect());
                let h = g.matmul(x, ids[0]);
                let hb = g.add_row(h, ids[1]);
                let a = g.tanh(hb);
                let out = g.matmul(a, ids[2]);
                Ok(g.sum_all(out))
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn non_finite_loss_reports_numeric_fault() {
        let params = vec![(
            "x".to_string(),
            Tensor::from_vec(vec![1], vec![0.0]).unwrap(),
        )];
        let res = grad_check(
            |g, ids| {
                // fine at x=0, overflows at any perturbed point
                let s = g.scale(ids[0], 1e200);
                let sq = g.mul(s, s);
                let sq2 = g.mul(sq, sq);
                Ok(g.sum_all(sq2))
            },
            &params,
            1e-3,
        );
        assert!(matches!(res, Err(Error::NumericFault { .. })));
    }
}
