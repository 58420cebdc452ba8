//! Central finite differences: the independent gradient oracle the analytic
//! backward passes are tested against.

use crate::error::NumError;
use crate::tensor::{Real, Tensor};

/// Central-difference gradient estimate of a scalar objective at `at`.
///
/// The objective is re-evaluated from scratch at each perturbed point, so it
/// must be deterministic. This function never touches the tape machinery of
/// whatever it is checking; that independence is the point.
pub fn finite_diff_grad<T: Real>(
    objective: impl Fn(&Tensor<T>) -> Result<T, NumError>,
    at: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>, NumError> {
    if h <= 0.0 {
        return Err(NumError::argument(format!("step h must be > 0, got {h}")));
    }
    let h_t = T::from_f64(h);
    let base = at.as_slice();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] += h_t;
        minus[i] -= h_t;
        let fp = objective(&Tensor::new(at.shape().to_vec(), plus))?;
        let fm = objective(&Tensor::new(at.shape().to_vec(), minus))?;
        grad.push((fp - fm) / (h_t + h_t));
    }
    Tensor::from_vec(at.shape().to_vec(), grad)
}

/// Norm-relative gradient error: `||a - b||_2 / max(||b||_2, floor)`.
/// The standard gradient-check metric; elementwise ratios blow up wherever a
/// true gradient entry is near zero.
pub fn relative_grad_error<T: Real>(analytic: &Tensor<T>, oracle: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), oracle.shape(), "gradient shape mismatch");
    let mut diff_sq = 0.0f64;
    let mut ref_sq = 0.0f64;
    for (&a, &b) in analytic.as_slice().iter().zip(oracle.as_slice()) {
        let d = a.as_f64() - b.as_f64();
        diff_sq += d * d;
        ref_sq += b.as_f64() * b.as_f64();
    }
    diff_sq.sqrt() / ref_sq.sqrt().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tape::Tape;

    #[test]
    fn fd_of_sum_is_ones() {
        let at = Tensor::new(vec![3], vec![0.3f64, -0.7, 1.1]);
        let g = finite_diff_grad(
            |x| Ok(x.as_slice().iter().sum()),
            &at,
            1e-5,
        )
        .unwrap();
        for &v in g.as_slice() {
            assert!((v - 1.0).abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn zero_step_is_an_error() {
        let at = Tensor::new(vec![1], vec![0.0f64]);
        assert!(finite_diff_grad(|_| Ok(0.0), &at, 0.0).is_err());
    }

    // Per-op gradient checks against the oracle: every differentiable tape op
    // on random f64 inputs, norm-relative error < 1e-4 (they land far below).
    #[test]
    fn tape_ops_match_finite_differences() {
        let mut rng = RngStream::new(2024);
        let check = |name: &str,
                     at: &Tensor<f64>,
                     build: &dyn Fn(&Tape<f64>, crate::tape::Var) -> crate::tape::Var| {
            let tape = Tape::new();
            let x = tape.leaf_grad(at.clone());
            let y = build(&tape, x);
            let analytic = tape.grad(y, &[x]).unwrap().remove(0);
            let oracle = finite_diff_grad(
                |p| {
                    let t = Tape::new();
                    let xp = t.leaf(p.clone());
                    Ok(t.value(build(&t, xp)).item())
                },
                at,
                1e-5,
            )
            .unwrap();
            let err = relative_grad_error(&analytic, &oracle);
            assert!(err < 1e-4, "op {name}: relative error {err}");
        };

        for trial in 0..3 {
            let m23: Tensor<f64> = rng.uniform(-1.0, 1.0, &[2, 3]).unwrap();
            let other = rng.uniform::<f64>(-1.0, 1.0, &[2, 3]).unwrap();
            let w34 = rng.uniform::<f64>(-1.0, 1.0, &[3, 4]).unwrap();
            let row = rng.uniform::<f64>(-1.0, 1.0, &[3]).unwrap();
            let gamma = rng.uniform::<f64>(0.5, 1.5, &[3]).unwrap();
            let beta = rng.uniform::<f64>(-0.5, 0.5, &[3]).unwrap();

            check("mul+sum", &m23, &{
                let o = other.clone();
                move |t, x| t.sum(t.mul(x, t.leaf(o.clone())))
            });
            check("sub+mean", &m23, &{
                let o = other.clone();
                move |t, x| t.mean(t.sub(x, t.leaf(o.clone())))
            });
            check("matmul", &m23, &{
                let w = w34.clone();
                move |t, x| t.sum(t.matmul(x, t.leaf(w.clone())))
            });
            check("matmul_rhs", &w34, &{
                let a = m23.clone();
                move |t, x| t.sum(t.matmul(t.leaf(a.clone()), x))
            });
            check("transpose", &m23, &|t, x| {
                t.sum(t.mul(t.transpose(x), t.transpose(x)))
            });
            check("softmax", &m23, &{
                let o = other.clone();
                move |t, x| t.sum(t.mul(t.softmax_rows(x), t.leaf(o.clone())))
            });
            check("gelu", &m23, &|t, x| t.sum(t.gelu(x)));
            check("add_row", &m23, &{
                let r = row.clone();
                move |t, x| t.sum(t.mul(t.add_row(x, t.leaf(r.clone())), x))
            });
            check("add_row_rhs", &row, &{
                let a = m23.clone();
                move |t, x| {
                    let m = t.leaf(a.clone());
                    t.sum(t.mul(t.add_row(m, x), m))
                }
            });
            check("mean_rows", &m23, &|t, x| {
                t.sum(t.mul(t.mean_rows(x), t.mean_rows(x)))
            });
            check("layer_norm", &m23, &{
                let (gm, bt) = (gamma.clone(), beta.clone());
                move |t, x| {
                    let y = t.layer_norm_rows(x, t.leaf(gm.clone()), t.leaf(bt.clone()), 1e-5);
                    t.sum(t.mul(y, y))
                }
            });
            check("layer_norm_gamma", &gamma, &{
                let (a, bt) = (m23.clone(), beta.clone());
                move |t, x| {
                    let y = t.layer_norm_rows(t.leaf(a.clone()), x, t.leaf(bt.clone()), 1e-5);
                    t.sum(t.mul(y, y))
                }
            });
            check("concat_slice", &m23, &|t, x| {
                let c = t.concat_rows(x, x);
                let s = t.slice_rows(c, 1, 2);
                t.sum(t.mul(s, s))
            });
            check("concat_cols", &m23, &{
                let o = other.clone();
                move |t, x| {
                    let c = t.concat_cols(x, t.leaf(o.clone()));
                    t.sum(t.mul(c, c))
                }
            });
            check("gather", &m23, &|t, x| {
                let idx = std::sync::Arc::new(vec![0usize, 2, 4, 4, 1, crate::tape::GATHER_ZERO]);
                let gathered = t.gather(x, idx, vec![2, 3]);
                t.sum(t.mul(gathered, gathered))
            });
            check("cross_entropy", &rng.uniform::<f64>(-2.0, 2.0, &[1, 5]).unwrap(), &{
                move |t, x| t.cross_entropy_logits(x, 2)
            });
            check("relu", &m23, &|t, x| t.sum(t.relu(x)));
            check("mse", &m23, &{
                let o = other.clone();
                move |t, x| t.mse(x, t.leaf(o.clone()))
            });
            check("add_n", &m23, &|t, x| {
                let y = t.mul(x, x);
                t.sum(t.add_n(&[x, y, x]))
            });
            let _ = trial;
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 7]));
        let ce = tape.cross_entropy_logits(logits, 3);
        assert!((tape.value(ce).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let tape = Tape::<f64>::new();
        let mut l = vec![-50.0f64; 6];
        l[2] = 50.0;
        let logits = tape.leaf(Tensor::new(vec![1, 6], l));
        let ce = tape.cross_entropy_logits(logits, 2);
        assert!(tape.value(ce).item() < 1e-12);
    }
}
