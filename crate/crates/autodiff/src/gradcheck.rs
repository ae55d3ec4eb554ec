use thiserror::Error;

use crate::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("parameter {0} is not finite")]
    NonFiniteParam(String),
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Evenly spread coordinates; all of them when `numel <= samples`.
fn sample_coords(numel: usize, samples: usize) -> Vec<usize> {
    if numel <= samples {
        return (0..numel).collect();
    }
    let mut out: Vec<usize> = (0..samples).map(|k| k * numel / samples + (k * 7919) % (numel / samples).max(1)).collect();
    out.dedup();
    out
}

/// Compares tape gradients against central differences
/// `(f(p+eps) − f(p−eps)) / 2eps`.
///
/// Tensors with `requires_grad == false` are excluded. At most
/// `samples_per_tensor` coordinates of each tensor are probed.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    eps: f64,
    samples_per_tensor: usize,
    loss_fn: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    for (name, p) in params {
        if !p.is_finite() {
            return Err(GradCheckError::NonFiniteParam(name.clone()));
        }
    }
    let eval = |values: &[(String, Tensor<f64>)]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let first = tape.value(loss).data()[0];
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut tensors = Vec::new();
    for (i, var) in vars.iter().enumerate() {
        let Some(analytic) = grads.get(*var) else {
            continue;
        };
        let coords = sample_coords(analytic.numel(), samples_per_tensor);
        let mut worst = (0.0f64, 0usize);
        for &c in &coords {
            let orig = work[i].1.data()[c];
            work[i].1.data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[i].1.data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[i].1.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic.data()[c], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, c);
            }
        }
        tensors.push(TensorCheck {
            name: params[i].0.clone(),
            checked: coords.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_norm_is_exact() {
        let p = Tensor::from_fn(vec![10], |i| (i as f64 * 0.3).cos()).with_requires_grad(true);
        let report = grad_check(&[("p".into(), p)], 1e-5, 64, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn frozen_tensors_are_excluded() {
        let p = Tensor::from_fn(vec![3], |i| i as f64).with_requires_grad(true);
        let frozen = Tensor::from_fn(vec![3], |i| 1.0 + i as f64);
        let report = grad_check(
            &[("p".into(), p), ("frozen".into(), frozen)],
            1e-5,
            64,
            |tape, v| {
                let m = tape.mul(v[0], v[1])?;
                tape.sum_all(m)
            },
        )
        .unwrap();
        assert_eq!(report.tensors.len(), 1);
        assert_eq!(report.tensors[0].name, "p");
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let p = Tensor::from_fn(vec![2], |_| 1.0).with_requires_grad(true);
        let err = grad_check(&[("p".into(), p)], 1e-5, 64, |tape, v| {
            counter.set(counter.get() + 1.0);
            let s = tape.scale(v[0], counter.get())?;
            tape.sum_all(s)
        })
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    #[test]
    fn sampling_covers_at_least_requested_count() {
        let coords = sample_coords(10_000, 64);
        assert_eq!(coords.len(), 64);
        assert!(coords.windows(2).all(|w| w[0] < w[1]));
        assert!(*coords.last().unwrap() < 10_000);
    }
}
