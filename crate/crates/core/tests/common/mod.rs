//! Shared test oracles.
#![allow(dead_code)]

use chunkflow_core::autodiff::{Tape, Var};
use chunkflow_core::tensor::Tensor;

/// Worst relative error between the tape gradient of `f` and central
/// finite differences, over every input element. The relative error of an
/// element is `|a − n| / max(|a| + |n|, floor)`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, h: f64, floor: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j)))
        .collect();
    gradcheck_at(inputs, &coords, f, h, floor)
}

/// Same as [`gradcheck`], restricted to `(input, element)` pairs.
pub fn gradcheck_at<F>(inputs: &[Tensor], coords: &[(usize, usize)], f: F, h: f64, floor: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.variable(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g[j]);
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += h;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output element matters.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&mut rng, tape.shape(x), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w).expect("same shape");
    tape.sum(p)
}
