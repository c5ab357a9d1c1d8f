//! Dense `f64` arithmetic and reverse-mode differentiation.

mod params;
mod tape;

use ndarray::{ArrayD, Axis};

use crate::error::{Error, Result};

pub use params::{ParamId, ParamStore};
pub use tape::{softmax_cols, softmax_rows, Gradients, Matrix, Segment, Segments, Tape, Var};

/// N-dimensional row-major tensor.
pub type Tensor = ArrayD<f64>;

/// Fails if any entry is NaN or infinite.
pub fn ensure_finite<'a, I>(values: I, location: &str) -> Result<()>
where
    I: IntoIterator<Item = &'a f64>,
{
    match values.into_iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::non_finite(format!("{location} (element {i})"))),
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::argument(format!(
            "softmax axis {axis} out of range for a {}-d tensor",
            x.ndim()
        )));
    }
    ensure_finite(x.iter(), "softmax input")?;
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
        lane.mapv_inplace(|a| (a - max).exp());
        let total = lane.sum();
        lane.mapv_inplace(|a| a / total);
    }
    Ok(out)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-based) GELU, `x·Φ(x)`, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.mapv(|a| a * normal_cdf(a))
}

/// Value and gradient of a scalar function of several matrix inputs.
///
/// `f` records its computation on a fresh tape from the leaves it is handed
/// and returns the `1×1` result node.
pub fn grad<F>(inputs: &[Matrix], f: F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &leaves);
    let value = tape.scalar(out);
    let mut grads = tape.backward(out)?;
    let per_input = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, m)| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.dim())))
        .collect();
    Ok((value, per_input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let out = softmax(&arr1(&[0.0, 0.0]).into_dyn(), 0).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        let out = softmax(&arr1(&[0.0, 2f64.ln()]).into_dyn(), 0).unwrap();
        // e^0 / (e^0 + e^{ln 2}) = 1/3
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let x = arr1(&[1.0]).into_dyn();
        assert!(matches!(softmax(&x, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let x = arr1(&[1.0, f64::NAN]).into_dyn();
        assert!(matches!(softmax(&x, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gelu_reference_points() {
        let x = arr1(&[0.0, 1.0, 8.0, 10.0]).into_dyn();
        let y = gelu(&x);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841345).abs() < 1e-5);
        assert!((y[2] - 8.0).abs() < 1e-6);
        assert!((y[3] - 10.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_lanes_sum_to_one(
            data in proptest::collection::vec(-1e3f64..1e3, 12),
            axis in 0usize..2,
        ) {
            let x = Tensor::from_shape_vec(IxDyn(&[3, 4]), data).unwrap();
            let y = softmax(&x, axis).unwrap();
            for lane in y.lanes(Axis(axis)) {
                prop_assert!((lane.sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            data in proptest::collection::vec(-50f64..50.0, 5),
            shift in -100f64..100.0,
        ) {
            let x = Tensor::from_shape_vec(IxDyn(&[5]), data).unwrap();
            let a = softmax(&x, 0).unwrap();
            let b = softmax(&x.mapv(|v| v + shift), 0).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
