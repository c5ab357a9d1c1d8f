//! Finite-difference checks shared by the gradient tests and the
//! acceptance harness. Each case is a name and its relative error.

use std::rc::Rc;

use motion_diffusion::denoiser::{pack_queries, DenoiserParams, ModelConfig};
use motion_diffusion::diffusion::EpsQuery;
use motion_diffusion::numerics::{Matrix, Segments, Tape, Var};
use motion_diffusion::text::TokenSeq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_gradient, max_grad_error, random_matrix, rel_err, weighted_sum, H};

pub type Cases = Vec<(String, f64)>;

fn check(out: &mut Cases, name: &str, inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    out.push((name.to_string(), max_grad_error(inputs, build)));
}

pub fn elementwise_and_linear_ops() -> Cases {
    let mut out = Cases::new();
    let a = random_matrix(3, 4, 1);
    let b = random_matrix(3, 4, 2);
    let m = random_matrix(4, 2, 3);
    let row = random_matrix(1, 4, 4);
    check(&mut out, "matmul", &[a.clone(), m], &|t, v| {
        let y = t.matmul(v[0], v[1]);
        weighted_sum(t, y, 10)
    });
    check(&mut out, "add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1]);
        weighted_sum(t, y, 11)
    });
    check(&mut out, "sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]);
        weighted_sum(t, y, 12)
    });
    check(&mut out, "mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1]);
        weighted_sum(t, y, 13)
    });
    check(&mut out, "add_row", &[a.clone(), row.clone()], &|t, v| {
        let y = t.add_row(v[0], v[1]);
        weighted_sum(t, y, 14)
    });
    check(&mut out, "mul_row", &[a.clone(), row], &|t, v| {
        let y = t.mul_row(v[0], v[1]);
        weighted_sum(t, y, 15)
    });
    check(&mut out, "scale", &[a.clone()], &|t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y, 16)
    });
    check(&mut out, "gelu", &[a.mapv(|x| 3.0 * x)], &|t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, 17)
    });
    check(&mut out, "silu", &[a.mapv(|x| 3.0 * x)], &|t, v| {
        let y = t.silu(v[0]);
        weighted_sum(t, y, 18)
    });
    check(&mut out, "mse", &[a.clone(), b.clone()], &|t, v| {
        t.mse(v[0], v[1])
    });
    check(&mut out, "norm", &[a.clone()], &|t, v| t.norm(v[0], 1e-8));
    check(&mut out, "sum", &[a], &|t, v| t.sum(v[0]));
    out
}

pub fn row_layout_ops() -> Cases {
    let mut out = Cases::new();
    let x = random_matrix(5, 3, 20);
    check(&mut out, "normalize_rows", &[x.clone()], &|t, v| {
        let y = t.normalize_rows(v[0], 1e-5);
        weighted_sum(t, y, 21)
    });
    check(&mut out, "slice_rows", &[x.clone()], &|t, v| {
        let y = t.slice_rows(v[0], 1, 3);
        weighted_sum(t, y, 22)
    });
    check(&mut out, "pad_rows", &[x.clone()], &|t, v| {
        let y = t.pad_rows(v[0], 2, 9);
        weighted_sum(t, y, 23)
    });
    let segs = Rc::new(Segments::from_padded(&[(3, 2), (2, 2)]));
    let s = segs.clone();
    check(&mut out, "segment_mean", &[x.clone()], &move |t, v| {
        let y = t.segment_mean(v[0], &s);
        weighted_sum(t, y, 24)
    });
    let rows = random_matrix(2, 3, 25);
    check(&mut out, "expand_rows", &[rows], &move |t, v| {
        let y = t.expand_rows(v[0], &segs);
        weighted_sum(t, y, 26)
    });
    let table = random_matrix(4, 3, 27);
    check(&mut out, "gather", &[table], &|t, v| {
        let y = t.gather(v[0], &[3, 0, 3, 1]);
        weighted_sum(t, y, 28)
    });
    out
}

pub fn efficient_attention_self_and_cross() -> Cases {
    let mut out = Cases::new();
    let segs = Rc::new(Segments::from_lengths(&[3, 4]));
    let inputs = [
        random_matrix(7, 4, 30),
        random_matrix(7, 4, 31),
        random_matrix(7, 4, 32),
    ];
    let s = segs.clone();
    check(
        &mut out,
        "efficient_attention self",
        &inputs,
        &move |t, v| {
            let y = t.efficient_attention(v[0], v[1], v[2], 2, &s, &s);
            weighted_sum(t, y, 33)
        },
    );
    let q_segs = Rc::new(Segments::from_lengths(&[2, 3]));
    let kv_segs = Rc::new(Segments::from_padded(&[(4, 3), (4, 1)]));
    let inputs = [
        random_matrix(5, 6, 34).mapv(|x| 2.0 * x),
        random_matrix(8, 6, 35).mapv(|x| 2.0 * x),
        random_matrix(8, 6, 36),
    ];
    check(
        &mut out,
        "efficient_attention cross",
        &inputs,
        &move |t, v| {
            let y = t.efficient_attention(v[0], v[1], v[2], 3, &q_segs, &kv_segs);
            weighted_sum(t, y, 37)
        },
    );
    out
}

pub fn softmax_attention_with_padding() -> Cases {
    let mut out = Cases::new();
    let segs = Rc::new(Segments::from_padded(&[(4, 3), (2, 2)]));
    let inputs = [
        random_matrix(6, 4, 40),
        random_matrix(6, 4, 41),
        random_matrix(6, 4, 42),
    ];
    check(&mut out, "softmax_attention", &inputs, &move |t, v| {
        let y = t.softmax_attention(v[0], v[1], v[2], 2, &segs);
        let valid = t.slice_rows(y, 0, 3);
        weighted_sum(t, valid, 43)
    });
    out
}

pub fn two_layer_perceptron() -> Cases {
    let mut out = Cases::new();
    let inputs = [
        random_matrix(6, 3, 50),
        random_matrix(3, 8, 51),
        random_matrix(1, 8, 52),
        random_matrix(8, 2, 53),
        random_matrix(1, 2, 54),
        random_matrix(6, 2, 55),
    ];
    check(&mut out, "mlp", &inputs, &|t, v| {
        let h = t.matmul(v[0], v[1]);
        let h = t.add_row(h, v[2]);
        let h = t.gelu(h);
        let y = t.matmul(h, v[3]);
        let y = t.add_row(y, v[4]);
        t.mse(y, v[5])
    });
    out
}

fn toy_model() -> DenoiserParams {
    let cfg = ModelConfig {
        n_decoder_layers: 2,
        n_text_layers: 1,
        latent_dim_motion: 16,
        latent_dim_text: 8,
        n_heads: 2,
        ffn_hidden: 16,
        vocab_size: 6,
        max_text_len: 4,
        pose_dim: 4,
    };
    let mut p = DenoiserParams::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = p.store().ids().collect();
    for id in ids {
        p.store_mut()
            .get_mut(id)
            .mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
    }
    p
}

/// `Σ W ⊙ ε_θ` over a batch of two sequences, the first with three frames.
fn toy_loss(p: &DenoiserParams, xs: &[Matrix; 2], tokens: &[TokenSeq; 2], w: &Matrix) -> f64 {
    let queries = [
        EpsQuery {
            x: &xs[0],
            t: 7,
            tokens: &tokens[0],
        },
        EpsQuery {
            x: &xs[1],
            t: 2,
            tokens: &tokens[1],
        },
    ];
    let (packed, items) = pack_queries(&queries);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let x = tape.leaf(packed);
    let out = p.forward(&mut tape, &bound, x, &items).unwrap();
    let wv = tape.leaf(w.clone());
    let prod = tape.mul(out, wv);
    let s = tape.sum(prod);
    tape.scalar(s)
}

/// Input gradient plus up to 24 entries of every parameter tensor of a
/// two-layer denoiser on a batch of a 3-frame and a 2-frame sequence.
pub fn toy_denoiser_parameters_and_input() -> Cases {
    let mut cases = Cases::new();
    let p = toy_model();
    let xs = [random_matrix(3, 4, 60), random_matrix(2, 4, 61)];
    let tokens = [TokenSeq::new(vec![1, 2, 3]), TokenSeq::new(vec![4, 5])];
    let w = random_matrix(5, 4, 62);

    let queries = [
        EpsQuery {
            x: &xs[0],
            t: 7,
            tokens: &tokens[0],
        },
        EpsQuery {
            x: &xs[1],
            t: 2,
            tokens: &tokens[1],
        },
    ];
    let (packed, items) = pack_queries(&queries);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let x = tape.leaf(packed.clone());
    let out = p.forward(&mut tape, &bound, x, &items).unwrap();
    let wv = tape.leaf(w.clone());
    let prod = tape.mul(out, wv);
    let s = tape.sum(prod);
    let mut grads = tape.backward(s).unwrap();
    let x_grad = grads.take(x).unwrap();
    let param_grads = p.store().collect_grads(bound.vars(), &mut grads);

    let numeric_x = fd_gradient(&packed, |xp| {
        let a = xp.slice(ndarray::s![0..3, ..]).to_owned();
        let b = xp.slice(ndarray::s![3..5, ..]).to_owned();
        toy_loss(&p, &[a, b], &tokens, &w)
    });
    cases.push(("denoiser input".into(), rel_err(&x_grad, &numeric_x)));

    let ids: Vec<_> = p.store().ids().collect();
    let names: Vec<String> = p.store().iter().map(|(n, _)| n.to_string()).collect();
    let mut probe = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mut checked = 0;
    for (k, id) in ids.into_iter().enumerate() {
        let (rows, cols) = p.store().get(id).dim();
        let picks: Vec<(usize, usize)> = if rows * cols <= 24 {
            (0..rows * cols).map(|i| (i / cols, i % cols)).collect()
        } else {
            (0..24)
                .map(|_| (rng.random_range(0..rows), rng.random_range(0..cols)))
                .collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (r, c) in picks {
            let orig = p.store().get(id)[[r, c]];
            probe.store_mut().get_mut(id)[[r, c]] = orig + H;
            let up = toy_loss(&probe, &xs, &tokens, &w);
            probe.store_mut().get_mut(id)[[r, c]] = orig - H;
            let down = toy_loss(&probe, &xs, &tokens, &w);
            probe.store_mut().get_mut(id)[[r, c]] = orig;
            numeric.push((up - down) / (2.0 * H));
            analytic.push(param_grads[k][[r, c]]);
            checked += 1;
        }
        let a = Matrix::from_shape_vec((1, analytic.len()), analytic).unwrap();
        let n = Matrix::from_shape_vec((1, numeric.len()), numeric).unwrap();
        let err = if n.iter().all(|v| v.abs() < 1e-9) {
            if a.iter().all(|v| v.abs() < 1e-7) {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            rel_err(&a, &n)
        };
        cases.push((names[k].clone(), err));
    }
    assert!(checked > 200);
    cases
}
