//! Gradient checking against central finite differences.
//!
//! The program under test is written once, generically over the scalar type,
//! so the same computation can be driven in `f32` (the training precision)
//! or in `f64` (the checking mode). The finite-difference oracle is always
//! accumulated in `f64` at the exact point the scalar type represents;
//! differencing in `f32` would bury real gradient bugs under rounding noise.

use super::{Scalar, Tape, Tensor, TensorError};

/// A scalar-valued computation that can run at any supported precision.
pub trait ScalarProgram {
    fn eval<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        inputs: &[Tensor<S>],
    ) -> Result<Tensor<S>, TensorError>;
}

/// Max over all input coordinates of
/// `|autodiff − central_difference| / max(|autodiff|, |cd|, 1e-8)`.
///
/// Autodiff runs at precision `S`; the central differences use step `step`
/// in `f64` around the same (S-rounded) point.
pub fn grad_check<S: Scalar, P: ScalarProgram>(
    program: &P,
    points: &[Tensor<S>],
    step: f64,
) -> Result<f64, TensorError> {
    // Autodiff pass at precision S.
    let mut tape: Tape<S> = Tape::new();
    let mut watched: Vec<Tensor<S>> = points.to_vec();
    for t in watched.iter_mut() {
        tape.watch(t);
    }
    let loss = program.eval(&mut tape, &watched)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(&loss)?;
    let autodiff: Vec<Vec<f64>> = watched
        .iter()
        .map(|t| {
            grads
                .wrt_or_zeros(t)
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect()
        })
        .collect();

    // Oracle pass: f64 evaluation at the S-rounded point.
    let base: Vec<Tensor<f64>> = points.iter().map(|t| t.cast::<f64>()).collect();
    let eval_at = |pts: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut t: Tape<f64> = Tape::new();
        let out = program.eval(&mut t, pts)?;
        let v = out.data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (ti, t) in base.iter().enumerate() {
        for ci in 0..t.numel() {
            let mut plus = base.clone();
            plus[ti].data_mut()[ci] += step;
            let f_plus = eval_at(&plus)?;
            let mut minus = base.clone();
            minus[ti].data_mut()[ci] -= step;
            let f_minus = eval_at(&minus)?;
            let cd = (f_plus - f_minus) / (2.0 * step);
            let ad = autodiff[ti][ci];
            let rel = (ad - cd).abs() / ad.abs().max(cd.abs()).max(1e-8);
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

    struct Square;

    impl ScalarProgram for Square {
        fn eval<S: Scalar>(
            &self,
            tape: &mut Tape<S>,
            inputs: &[Tensor<S>],
        ) -> Result<Tensor<S>, TensorError> {
            let sq = tape.mul(&inputs[0], &inputs[0])?;
            tape.sum_all(&sq)
        }
    }

    #[test]
    fn square_at_three_matches_closed_form() {
        // f(x) = x·x at x = 3, step 1e-4 → error < 1e-6 (f' = 2x)
        let err = grad_check(&Square, &[Tensor::from_vec(vec![3.0f64])], 1e-4).unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn square_in_f32_mode() {
        let err = grad_check(&Square, &[Tensor::from_vec(vec![3.0f32])], 1e-4).unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    struct Lin;

    impl ScalarProgram for Lin {
        fn eval<S: Scalar>(
            &self,
            tape: &mut Tape<S>,
            inputs: &[Tensor<S>],
        ) -> Result<Tensor<S>, TensorError> {
            let y = tape.matmul(&inputs[0], &inputs[1])?;
            let g = tape.gelu(&y)?;
            tape.mean_all(&g)
        }
    }

    #[test]
    fn matmul_gelu_chain() {
        let a = Tensor::new(vec![2, 3], vec![0.5f64, -0.3, 1.1, 0.2, -0.7, 0.9]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.0f64, -0.4, 0.6, 0.8, -1.2, 0.1]).unwrap();
        let err = grad_check(&Lin, &[a, b], 1e-6).unwrap();
        assert!(err < 1e-5, "error {err}");
    }

    struct NanProgram;

    impl ScalarProgram for NanProgram {
        fn eval<S: Scalar>(
            &self,
            tape: &mut Tape<S>,
            inputs: &[Tensor<S>],
        ) -> Result<Tensor<S>, TensorError> {
            let n = tape.l2_norm(&inputs[0])?;
            // ln of a negative-shifted norm goes non-finite for small inputs
            let shifted = tape.add_scalar(&n, S::from_f64(-100.0).unwrap())?;
            let logged = Tensor::from_vec(vec![shifted.data()[0].ln()]);
            let mut out = logged;
            out = tape.add_scalar(&out, S::zero())?;
            tape.sum_all(&out)
        }
    }

    #[test]
    fn non_finite_values_error() {
        let r = grad_check(&NanProgram, &[Tensor::from_vec(vec![1.0f64, 2.0])], 1e-6);
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
