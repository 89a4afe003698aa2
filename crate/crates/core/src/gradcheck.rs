//! Central finite-difference checker for scalar functions built on a [`Graph`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over checked coordinates.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// Every input tensor is a tracked leaf. When `max_coords` is set, at most that
/// many coordinates per input are perturbed, chosen by `seed`.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_coords: Option<usize>, seed: u64) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let (mut diff2, mut a2, mut n2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for (i, var) in vars.iter().enumerate() {
        let len = inputs[i].len();
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < len => sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[c] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-300);
    let rel_err = if diff2 == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    GradReport { rel_err, max_abs_err: max_abs, checked }
}
