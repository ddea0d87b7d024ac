//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations return [`Var`]
//! handles; [`Tape::backward`] consumes the tape and returns the gradient of
//! a scalar loss with respect to every leaf created with `requires_grad`.

mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{
    set_backward_fault, sigmoid, softplus, BinaryKind, Gradients, ReduceKind, Tape, UnaryKind, Var,
};
pub use tensor::Tensor;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("shapes {lhs:?} and {rhs:?} do not broadcast by the trailing-dimension rule")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error(
        "matmul of {lhs:?} and {rhs:?} (transpose_b = {transpose_b}) has mismatched dimensions"
    )]
    MatMul {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        transpose_b: bool,
    },
    #[error("{op} is undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("cannot concatenate {rhs:?} onto {lhs:?} along axis {axis}")]
    Concat {
        axis: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("slice {start}..{end} out of bounds for dimension {dim}")]
    SliceBounds {
        start: usize,
        end: usize,
        dim: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Step(f64),
    #[error("function is not finite at a perturbed point (coordinate {0})")]
    NonFinite(usize),
}

/// Maximum over coordinates of `|autodiff − central difference| / (1 + |central difference|)`
/// for a scalar function `f` at `x`.
///
/// `f` may use any error type that absorbs [`AutodiffError`].
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::Step(eps).into());
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |p: &Tensor| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFinite(i).into());
        }
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((analytic.data()[i] - fd).abs() / (1.0 + fd.abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: &mut Tape, data: &[f64]) -> Var {
        t.constant(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn unary_examples() {
        let mut t = Tape::new();
        let z = v(&mut t, &[0.0]);
        let y = t.tanh(z).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);
        let y = t.sigmoid(z).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
        let x = v(&mut t, &[0.0, 1.0]);
        let y = t.exp(x).unwrap();
        assert_eq!(t.value(y).data()[0], 1.0);
        assert!((t.value(y).data()[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let mut t = Tape::new();
        let x = v(&mut t, &[1.0, 0.0]);
        assert!(matches!(
            t.log(x),
            Err(AutodiffError::Domain { op: "log", .. })
        ));
        let x = v(&mut t, &[-2.0]);
        assert!(t.log(x).is_err());
    }

    #[test]
    fn binary_examples() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0, 2.0]);
        let b = v(&mut t, &[3.0, 4.0]);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        let a = v(&mut t, &[2.0]);
        let b = v(&mut t, &[0.0]);
        let p = t.mul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[0.0]);
        let a = v(&mut t, &[1.0]);
        let b = v(&mut t, &[4.0]);
        let q = t.div(a, b).unwrap();
        assert_eq!(t.value(q).data(), &[0.25]);
    }

    #[test]
    fn binary_errors() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0, 2.0]);
        let b = v(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(AutodiffError::Broadcast { .. })));
        let z = v(&mut t, &[1.0, 0.0]);
        assert_eq!(t.div(a, z), Err(AutodiffError::DivisionByZero));
    }

    #[test]
    fn broadcast_gradient_sums_over_leading_axis() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.leaf(Tensor::vector(vec![0.5, -1.0]), true);
        let y = t.mul(m, b).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[9.0, 12.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let col = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let y = t.matmul(eye, col).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);
        let z = t.constant(Tensor::zeros(&[2, 3]));
        let x = t.constant(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()));
        let y = t.matmul(z, x).unwrap();
        assert_eq!(t.value(y), &Tensor::zeros(&[2, 4]));
        assert!(matches!(t.matmul(x, z), Err(AutodiffError::MatMul { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let x = v(&mut t, &[1.0, 2.0, 3.0]);
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).item(), 6.0);
        let x = v(&mut t, &[2.0, 4.0]);
        let m = t.mean(x).unwrap();
        assert_eq!(t.value(m).item(), 3.0);
        let x = v(&mut t, &[0.0; 5]);
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        let m = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = t.sum_axis(m, 1).unwrap();
        assert_eq!(t.value(rows).data(), &[6.0, 15.0]);
        let cols = t.reduce(ReduceKind::Mean, m, Some(0)).unwrap();
        assert_eq!(t.value(cols).data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(t.sum_axis(m, 2), Err(AutodiffError::Axis { .. })));
    }

    #[test]
    fn concat_slice_examples() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0]);
        let b = v(&mut t, &[2.0]);
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);
        let x = v(&mut t, &[1.0, 2.0, 3.0]);
        let s = t.slice(x, 0, 1..3).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 3.0]);
        let empty = v(&mut t, &[]);
        let c = t.concat(&[x, empty], 0).unwrap();
        assert_eq!(t.value(c), t.value(x));
        assert!(matches!(
            t.slice(x, 0, 2..5),
            Err(AutodiffError::SliceBounds { .. })
        ));
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(
            t.concat(&[m, x], 1),
            Err(AutodiffError::Concat { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0), true);
        let y = t.tanh(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.square(x).unwrap();
        assert!(matches!(
            t.backward(y),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn grad_check_examples() {
        let lin: f64 =
            grad_check(|t, x| t.sum(x), &Tensor::vector(vec![0.3, -1.2, 4.0]), 1e-5).unwrap();
        assert!(lin < 1e-10, "{lin}");
        let sq = grad_check(
            |t, x| -> Result<Var, AutodiffError> {
                let y = t.square(x)?;
                t.sum(y)
            },
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(sq < 1e-7, "{sq}");
        assert!(matches!(
            grad_check(|t, x| t.sum(x), &Tensor::scalar(1.0), 1e-2),
            Err(AutodiffError::Step(_))
        ));
    }

    #[test]
    fn grad_check_reports_non_finite_points() {
        // log(x) at x = 1e-6 with step 1e-5 probes a negative point.
        let r = grad_check(
            |t, x| -> Result<Var, AutodiffError> {
                let y = t.log(x)?;
                t.sum(y)
            },
            &Tensor::vector(vec![1e-6]),
            1e-5,
        );
        assert!(r.is_err());
    }
}
