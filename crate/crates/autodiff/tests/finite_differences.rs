//! Every differentiable op checked against central differences in f64.

use layerforge_autodiff::{grad_check, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn param(name: &str, shape: &[usize], seed: u64) -> (String, Tensor<f64>) {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let t = Tensor::from_fn(shape.to_vec(), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    });
    (name.to_owned(), t.with_requires_grad(true))
}

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so that
/// every output coordinate influences the loss differently.
fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Result<Var, TensorError> {
    let n = tape.value(v).numel();
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(Tensor::from_fn(shape, |i| 0.5 + ((i * 37 + 11) % n.max(1)) as f64 / n.max(1) as f64));
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

fn check(params: &[(String, Tensor<f64>)], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>) {
    let report = grad_check(params, EPS, 64, f).unwrap();
    assert!(report.max_rel_error < TOL, "{report:#?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
        check(&[param("a", &[m, k], seed), param("b", &[k, n], seed ^ 1)], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            weighted_sum(t, c)
        });
    }

    #[test]
    fn elementwise_and_bias(r in 1usize..10, c in 1usize..64, seed in any::<u64>()) {
        check(
            &[param("a", &[r, c], seed), param("b", &[r, c], seed ^ 2), param("bias", &[c], seed ^ 3)],
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let p = t.mul(s, v[0])?;
                let q = t.add_bias(p, v[2])?;
                let q = t.scale(q, 0.75)?;
                weighted_sum(t, q)
            },
        );
    }

    #[test]
    fn softmax_rms_gelu(r in 1usize..8, c in 1usize..64, seed in any::<u64>()) {
        check(&[param("x", &[r, c], seed)], |t, v| {
            let s = t.scale(v[0], 3.0)?;
            let a = t.softmax_rows(s)?;
            let b = t.rms_norm(v[0], 1e-6)?;
            let g = t.gelu(s)?;
            let ab = t.add(a, b)?;
            let all = t.add(ab, g)?;
            weighted_sum(t, all)
        });
    }

    #[test]
    fn reshape_transpose_concat_slice(r in 1usize..8, c in 2usize..16, seed in any::<u64>()) {
        check(&[param("x", &[r, c], seed), param("y", &[r, 3], seed ^ 5)], |t, v| {
            let tr = t.transpose(v[0])?;
            let back = t.reshape(tr, vec![c * r])?;
            let back = t.reshape(back, vec![c, r])?;
            let cat = t.concat(&[v[0], v[1]], 1)?;
            let sl = t.slice(cat, 1, 1, c + 2)?;
            let rows = t.concat(&[sl, sl], 0)?;
            let a = weighted_sum(t, back)?;
            let b = weighted_sum(t, rows)?;
            t.add(a, b)
        });
    }

    #[test]
    fn mse_both_sides(n in 1usize..64, seed in any::<u64>()) {
        check(&[param("p", &[n], seed), param("q", &[n], seed ^ 9)], |t, v| t.mse(v[0], v[1]));
    }

    #[test]
    fn rotary(r in 1usize..8, half in 1usize..8, seed in any::<u64>()) {
        let angles: Vec<f64> = (0..r * half).map(|i| (i as f64 * 0.91 + seed as f64 * 1e-3).sin() * 3.0).collect();
        check(&[param("x", &[r, 2 * half], seed)], move |t, v| {
            let rot = t.rotary(v[0], angles.iter().map(|a| a.cos()).collect(), angles.iter().map(|a| a.sin()).collect())?;
            weighted_sum(t, rot)
        });
    }
}

#[test]
fn small_attention_graph() {
    // One head of self-attention with a residual and an MSE head.
    let params = [
        param("x", &[5, 8], 1),
        param("wq", &[8, 8], 2),
        param("wk", &[8, 8], 3),
        param("wv", &[8, 8], 4),
        param("target", &[5, 8], 5),
    ];
    check(&params, |t, v| {
        let q = t.matmul(v[0], v[1])?;
        let k = t.matmul(v[0], v[2])?;
        let val = t.matmul(v[0], v[3])?;
        let kt = t.transpose(k)?;
        let s = t.matmul(q, kt)?;
        let s = t.scale(s, 1.0 / 8f64.sqrt())?;
        let a = t.softmax_rows(s)?;
        let o = t.matmul(a, val)?;
        let o = t.add(o, v[0])?;
        let o = t.rms_norm(o, 1e-6)?;
        t.mse(o, v[4])
    });
}

#[test]
fn broadcast_rows_through_ones_matmul() {
    let params = [param("x", &[4, 6], 7), param("row", &[1, 6], 8)];
    check(&params, |t, v| {
        let b = t.broadcast_rows(v[1], 4)?;
        let p = t.mul(v[0], b)?;
        weighted_sum(t, p)
    });
}
