//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId};
use crate::tensor::{ParamStore, Scalar};

/// Compare the reverse-mode gradient of a scalar computation against central
/// differences `(f(x+h) - f(x-h)) / 2h`, elementwise over every tensor in
/// `inputs`. Returns the maximum relative error, with the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic: any randomness inside must come from a fixed
/// `RngStream`. Determinism is verified by evaluating twice at the base
/// point; disagreement is a contract violation.
pub fn grad_check<T, F>(f: &F, inputs: &ParamStore<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bound) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidParameter(format!("grad_check step h must be > 0, got {h}")));
    }

    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = g.bind(store)?;
        let loss = f(&mut g, &bound)?;
        if g.values(loss).len() != 1 {
            return Err(Error::InvalidShape("grad_check target must be scalar".into()));
        }
        Ok(g.values(loss)[0].as_f64())
    };

    let base = eval(inputs)?;
    let base_again = eval(inputs)?;
    if base.to_bits() != base_again.to_bits() {
        return Err(Error::ContractViolation(
            "computation is not deterministic; fix its RngStream".into(),
        ));
    }

    // Analytic gradients.
    let mut g = Graph::new();
    let bound = g.bind(inputs)?;
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, tensor) in inputs.iter() {
        let id = bound.get(name)?;
        let grad = match g.grad(id) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; tensor.len()],
        };
        analytic.push((name.to_string(), grad));
    }

    let mut max_rel = 0.0f64;
    let mut probe = inputs.clone();
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = probe.get(name)?.values()[i];
            probe.get_mut(name)?.values_mut()[i] = orig + T::from_f64(h);
            let plus = eval(&probe)?;
            probe.get_mut(name)?.values_mut()[i] = orig - T::from_f64(h);
            let minus = eval(&probe)?;
            probe.get_mut(name)?.values_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::Tensor;

    fn store_of(name: &str, dims: Vec<usize>, values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_values(dims, values).unwrap());
        s
    }

    #[test]
    fn constant_function_has_zero_error() {
        let inputs = store_of("x", vec![3], vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            &|g: &mut Graph<f64>, _b: &Bound| {
                let c = g.constant(vec![1], vec![4.25])?;
                g.sum_all(c)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_function_is_exact() {
        let inputs = store_of("x", vec![4], vec![0.3, -1.2, 0.0, 2.0]);
        let err = grad_check(
            &|g: &mut Graph<f64>, b: &Bound| {
                let x = b.get("x")?;
                let s = g.scale(x, 3.0)?;
                g.sum_all(s)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let inputs = store_of("x", vec![2], vec![1.0, 2.0]);
        let calls = Cell::new(0u64);
        let err = grad_check(
            &move |g: &mut Graph<f64>, b: &Bound| {
                calls.set(calls.get() + 1);
                // Fresh stream id per call: an unfixed RNG.
                let mut rng = RngStream::new(0, calls.get());
                let x = b.get("x")?;
                let (out, _) = g.dropout(x, 0.5, &mut rng)?;
                g.sum_all(out)
            },
            &inputs,
            1e-5,
        );
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn fixed_rng_dropout_passes() {
        let inputs = store_of("x", vec![8], vec![0.5; 8]);
        let err = grad_check(
            &|g: &mut Graph<f64>, b: &Bound| {
                let mut rng = RngStream::new(7, 7);
                let x = b.get("x")?;
                let (out, _) = g.dropout(x, 0.5, &mut rng)?;
                g.sum_all(out)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn composed_nonlinear_ops_pass_at_1e4() {
        let mut inputs = ParamStore::new();
        let mut r = RngStream::new(21, 0);
        inputs.insert(
            "a",
            Tensor::from_values(vec![3, 4], (0..12).map(|_| r.next_normal()).collect()).unwrap(),
        );
        inputs.insert(
            "w",
            Tensor::from_values(vec![4, 4], (0..16).map(|_| r.next_normal()).collect()).unwrap(),
        );
        inputs.insert("gain", Tensor::from_values(vec![4], vec![1.0, 0.9, 1.1, 1.0]).unwrap());
        inputs.insert("bias", Tensor::from_values(vec![4], vec![0.0, 0.1, -0.1, 0.2]).unwrap());
        let err = grad_check(
            &|g: &mut Graph<f64>, b: &Bound| {
                let a = b.get("a")?;
                let w = b.get("w")?;
                let gain = b.get("gain")?;
                let bias = b.get("bias")?;
                let h = g.matmul(a, w)?;
                let ln = g.layer_norm(h, gain, bias, 1e-5)?;
                let sm = g.softmax_rows(ln)?;
                let loss = g.cross_entropy_mean(sm, &[0, 1, 2], &[true, true, true], false)?;
                g.scale(loss, 2.0)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
