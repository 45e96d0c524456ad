//! Test-only oracles. These evaluate forward passes only and never consult
//! the reverse sweep they are used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step 1e-5. Returns the worst norm-wise relative error over the inputs:
/// `max|g_rev - g_fd| / max(max|g_fd|, 1e-8)`.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.param(v.clone())).collect();
    let out = f(&mut t, &vars).unwrap();
    t.backward(out).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = t.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}
