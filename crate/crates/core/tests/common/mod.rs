#![allow(dead_code)]

pub mod suite;

use motion_diffusion::numerics::{Matrix, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const TOL: f64 = 1e-4;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every entry of `x`.
pub fn fd_gradient(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + H;
        let up = f(&xp);
        xp[[r, c]] = orig - H;
        let down = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * H);
    }
    g
}

/// `‖a − b‖ / max(‖b‖, 1e-8)`.
pub fn rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = numeric.mapv(|v| v * v).sum().sqrt().max(1e-8);
    diff / scale
}

/// Evaluates a recorded scalar function on fresh leaves.
pub fn eval_scalar(inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &leaves);
    tape.scalar(out)
}

/// Compares the tape gradient of `build` with central differences for
/// every input; returns the largest relative error.
pub fn max_grad_error(inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (_, analytic) = motion_diffusion::numerics::grad(inputs, |t, v| build(t, v)).unwrap();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = fd_gradient(&inputs[i], |x| {
            let mut xs = inputs.to_vec();
            xs[i] = x.clone();
            eval_scalar(&xs, build)
        });
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

/// Reduces a matrix node to a scalar through fixed random weights so every
/// output entry contributes with a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.value(x).dim();
    let w = tape.leaf(random_matrix(r, c, seed));
    let p = tape.mul(x, w);
    tape.sum(p)
}
