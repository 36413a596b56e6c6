//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::param::ParamStore;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(1, |analytic|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckStats {
    /// Largest relative error over the compared coordinates.
    pub worst: f64,
    pub compared: usize,
    /// Coordinates whose `±ε` evaluations took different piecewise branches
    /// (a ReLU or max-pool kink inside the interval); the central difference
    /// is meaningless there and they are left out.
    pub skipped: usize,
}

impl CheckStats {
    pub fn merge(self, other: CheckStats) -> CheckStats {
        CheckStats {
            worst: self.worst.max(other.worst),
            compared: self.compared + other.compared,
            skipped: self.skipped + other.skipped,
        }
    }

    fn record(&mut self, analytic: f64, plus: (f64, u64), minus: (f64, u64), eps: f64) {
        if plus.1 != minus.1 {
            self.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * eps);
        self.worst = self.worst.max(relative_error(analytic, numeric));
        self.compared += 1;
    }
}

fn eval_scalar<T: Scalar, F>(f: &F, point: &Tensor<T>) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    Ok((tape.value(y).item()?.as_f64(), tape.branch_signature()))
}

/// Maximum relative error between the tape gradient of the scalar function
/// `f` at `point` and its central difference with step `epsilon`, over every
/// coordinate of `point`.
pub fn finite_diff_check<T: Scalar, F>(f: F, point: &Tensor<T>, epsilon: T) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    Ok(finite_diff_check_with(f, point, epsilon, None, |_| {})?.worst)
}

/// As [`finite_diff_check`], restricted to `coords` when given. `configure`
/// runs on the analytic tape before the forward pass (fault injection).
pub fn finite_diff_check_with<T: Scalar, F>(
    f: F,
    point: &Tensor<T>,
    epsilon: T,
    coords: Option<&[usize]>,
    configure: impl FnOnce(&mut Tape<T>),
) -> Result<CheckStats>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    configure(&mut tape);
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad_or_zeros(x);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let eps = epsilon.as_f64();
    let mut stats = CheckStats::default();
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        stats.record(analytic.data()[i].as_f64(), plus, minus, eps);
    }
    Ok(stats)
}

/// Finite-difference check of parameter gradients. `build` records a scalar
/// loss on the given tape from the given store. At most `per_param` randomly
/// chosen coordinates of each parameter are probed (all when smaller).
pub fn param_grad_check<T: Scalar, F>(
    store: &ParamStore<T>,
    build: F,
    epsilon: T,
    per_param: usize,
    seed: u64,
    configure: impl FnOnce(&mut Tape<T>),
) -> Result<CheckStats>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    configure(&mut tape);
    let loss = build(&mut tape, store)?;
    tape.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&tape)?;

    let eval = |s: &ParamStore<T>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        Ok((t.value(l).item()?.as_f64(), t.branch_signature()))
    };

    let mut rng = SplitMix64::new(seed);
    let eps = epsilon.as_f64();
    let mut probe = store.clone();
    let mut stats = CheckStats::default();
    for id in store.ids() {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| (rng.next_f64() * n as f64) as usize % n).collect()
        };
        for i in coords {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            stats.record(grads.get(id).grad.data()[i].as_f64(), plus, minus, eps);
        }
    }
    Ok(stats)
}

/// Tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor<T: Scalar>(shape: crate::tensor::Shape, rng: &mut SplitMix64) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.uniform(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn quadratic() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = f(&mut tape, xv).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(xv).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let z = t.scale(v, 0.0);
            Ok(t.sum(z))
        };
        assert_eq!(finite_diff_check(f, &x, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn detects_corrupted_adjoint() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let err = finite_diff_check_with(f, &x, 1e-5, None, |t| {
            t.corrupt_adjoint(crate::tape::OpKind::Mul, 1.5)
        })
        .unwrap();
        assert!(err.worst > 0.1);
        assert_eq!(err.compared, 3);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // 1e-6 sits inside the ±1e-5 interval around the ReLU kink.
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1e-6, 0.5]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let r = t.relu(v);
            Ok(t.sum(r))
        };
        let stats = finite_diff_check_with(f, &x, 1e-5, None, |_| {}).unwrap();
        assert_eq!((stats.compared, stats.skipped), (1, 1));
        assert!(stats.worst < 1e-8);
    }
}
