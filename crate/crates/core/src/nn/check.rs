//! Finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of `inputs[which]`.
pub fn numeric_gradient(f: &dyn Fn(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], which: usize, eps: f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|j| {
            let orig = inputs[which].data()[j];
            work[which].data_mut()[j] = orig + eps;
            let up = f(&work);
            work[which].data_mut()[j] = orig - eps;
            let down = f(&work);
            work[which].data_mut()[j] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative error between analytic and numeric gradients over all inputs.
///
/// `build` records a scalar function of the input variables on the tape.
pub fn check_gradients(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let o = build(&mut t, &vs);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = numeric_gradient(&eval, inputs, i, eps);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
