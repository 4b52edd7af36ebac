//! Central finite-difference gradient checking.
//!
//! The numeric side only re-runs forward passes, so it is independent of
//! every backward rule it audits. `op_registry` enumerates one check per
//! differentiable tape op; a test pins the registry against
//! [`DIFFERENTIABLE_OPS`](super::tape::DIFFERENTIABLE_OPS) so new ops
//! cannot ship unchecked.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Tape, TensorId, DIFFERENTIABLE_OPS};
use super::{rel_err, Tensor};
use crate::error::Result;
use crate::rng::SeedRng;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default acceptance threshold on the normwise relative error.
pub const FD_TOLERANCE: f64 = 1e-6;

/// Worst normwise relative error between analytic and central-difference
/// gradients of a scalar-valued tape program, over all inputs.
pub fn finite_diff_scalar<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).numel()],
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = xs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            numeric[e] = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    Ok(worst)
}

/// One registry entry: `run` returns the worst relative error over at
/// least three input shapes.
pub struct OpCheck {
    pub name: &'static str,
    pub run: fn(&mut SeedRng, f64) -> Result<f64>,
}

/// Outcome of one registry entry.
#[derive(Debug, Clone)]
pub struct OpCheckResult {
    pub name: String,
    pub rel_err: f64,
}

fn rand_t(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), rng.normal_vec(n, 0.0, 1.0)).unwrap()
}

/// Reduce to a scalar through fixed random weights so direction-dependent
/// backward bugs cannot cancel out.
fn weighted(tape: &mut Tape, id: TensorId, w: &[f64]) -> Result<TensorId> {
    let m = tape.apply_mask(id, w)?;
    tape.sum_all(m)
}

macro_rules! worst_of {
    ($rng:ident, $step:ident, $($body:expr),+ $(,)?) => {{
        let mut worst = 0.0f64;
        $( worst = worst.max($body?); )+
        Ok(worst)
    }};
}

fn check_matmul(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |m: usize, k: usize, n: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[m, k]);
        let b = rand_t(rng, &[k, n]);
        let w = rng.normal_vec(m * n, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.matmul(ids[0], ids[1])?;
                weighted(t, o, &w)
            },
            &[a, b],
            step,
        )
    };
    worst_of!(rng, step, one(2, 3, 4, rng), one(5, 7, 3, rng), one(1, 4, 2, rng))
}

fn check_add(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        let b = rand_t(rng, shape);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.add(ids[0], ids[1])?;
                weighted(t, o, &w)
            },
            &[a, b],
            step,
        )
    };
    worst_of!(rng, step, one(&[4], rng), one(&[3, 5], rng), one(&[2, 2, 3], rng))
}

fn check_add_row(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c]);
        let row = rand_t(rng, &[c]);
        let w = rng.normal_vec(r * c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.add_row(ids[0], ids[1])?;
                weighted(t, o, &w)
            },
            &[a, row],
            step,
        )
    };
    worst_of!(rng, step, one(3, 4, rng), one(2, 5, rng), one(1, 3, rng))
}

fn check_scale_rows(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c]);
        let diag = rand_t(rng, &[c]);
        let w = rng.normal_vec(r * c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.scale_rows(ids[0], ids[1])?;
                weighted(t, o, &w)
            },
            &[a, diag],
            step,
        )
    };
    worst_of!(rng, step, one(3, 4, rng), one(5, 2, rng), one(1, 6, rng))
}

fn check_scale_scalar(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        let s = rand_t(rng, &[1]);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.scale_scalar(ids[0], ids[1])?;
                weighted(t, o, &w)
            },
            &[a, s],
            step,
        )
    };
    worst_of!(rng, step, one(&[4], rng), one(&[3, 5], rng), one(&[2, 3, 2], rng))
}

fn check_scale_const(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], c: f64, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.scale_const(ids[0], c)?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(
        rng,
        step,
        one(&[4], 0.73, rng),
        one(&[3, 5], -1.25, rng),
        one(&[2, 2, 2], 2.0, rng)
    )
}

fn check_apply_mask(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        let mask = rng.normal_vec(a.numel(), 0.0, 1.0);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.apply_mask(ids[0], &mask)?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(&[5], rng), one(&[3, 4], rng), one(&[2, 2, 3], rng))
}

fn check_softmax(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.softmax(ids[0])?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(&[4], rng), one(&[3, 5], rng), one(&[2, 3, 4], rng))
}

fn check_layer_norm(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let d = *shape.last().unwrap();
        let a = rand_t(rng, shape);
        let gamma = rand_t(rng, &[d]);
        let beta = rand_t(rng, &[d]);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                weighted(t, o, &w)
            },
            &[a, gamma, beta],
            step,
        )
    };
    worst_of!(rng, step, one(&[3, 8], rng), one(&[1, 4], rng), one(&[2, 2, 6], rng))
}

fn check_gelu(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.gelu(ids[0])?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(&[5], rng), one(&[3, 4], rng), one(&[2, 2, 3], rng))
}

fn check_transpose(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c]);
        let w = rng.normal_vec(r * c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.transpose(ids[0])?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(3, 4, rng), one(1, 5, rng), one(4, 2, rng))
}

fn check_reshape(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |from: &[usize], to: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, from);
        let to = to.to_vec();
        let w = rng.normal_vec(a.numel(), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.reshape(ids[0], to.clone())?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(
        rng,
        step,
        one(&[2, 6], &[3, 4], rng),
        one(&[8], &[2, 4], rng),
        one(&[2, 2, 3], &[12], rng)
    )
}

fn check_mean_rows(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c]);
        let w = rng.normal_vec(c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.mean_rows(ids[0])?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(3, 4, rng), one(5, 2, rng), one(1, 3, rng))
}

fn check_mean_all(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| t.mean_all(ids[0]),
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(&[4], rng), one(&[3, 5], rng), one(&[2, 2, 2], rng))
}

fn check_sum_all(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |shape: &[usize], rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, shape);
        finite_diff_scalar(&|t: &mut Tape, ids: &[TensorId]| t.sum_all(ids[0]), &[a], step)
    };
    worst_of!(rng, step, one(&[4], rng), one(&[3, 5], rng), one(&[2, 2, 2], rng))
}

fn check_slice_rows(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c: usize, s: usize, l: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c]);
        let w = rng.normal_vec(l * c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.slice_rows(ids[0], s, l)?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(4, 3, 1, 2, rng), one(5, 2, 0, 5, rng), one(3, 4, 2, 1, rng))
}

fn check_slice_cols(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c: usize, s: usize, l: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c]);
        let w = rng.normal_vec(r * l, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.slice_cols(ids[0], s, l)?;
                weighted(t, o, &w)
            },
            &[a],
            step,
        )
    };
    worst_of!(rng, step, one(3, 6, 2, 3, rng), one(2, 4, 0, 4, rng), one(4, 5, 4, 1, rng))
}

fn check_concat_rows(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r1: usize, r2: usize, c: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r1, c]);
        let b = rand_t(rng, &[r2, c]);
        let w = rng.normal_vec((r1 + r2) * c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.concat_rows(&[ids[0], ids[1]])?;
                weighted(t, o, &w)
            },
            &[a, b],
            step,
        )
    };
    worst_of!(rng, step, one(1, 3, 4, rng), one(2, 2, 3, rng), one(3, 1, 2, rng))
}

fn check_concat_cols(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |r: usize, c1: usize, c2: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[r, c1]);
        let b = rand_t(rng, &[r, c2]);
        let w = rng.normal_vec(r * (c1 + c2), 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.concat_cols(&[ids[0], ids[1]])?;
                weighted(t, o, &w)
            },
            &[a, b],
            step,
        )
    };
    worst_of!(rng, step, one(3, 2, 4, rng), one(2, 3, 1, rng), one(1, 2, 2, rng))
}

fn check_mix_heads(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |h: usize, r: usize, c: usize, rng: &mut SeedRng| -> Result<f64> {
        let a = rand_t(rng, &[h * r, c]);
        let mix = rand_t(rng, &[h, h]);
        let w = rng.normal_vec(h * r * c, 0.0, 1.0);
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| {
                let o = t.mix_heads(ids[0], ids[1])?;
                weighted(t, o, &w)
            },
            &[a, mix],
            step,
        )
    };
    worst_of!(rng, step, one(2, 3, 4, rng), one(4, 2, 3, rng), one(3, 1, 5, rng))
}

fn check_cross_entropy(rng: &mut SeedRng, step: f64) -> Result<f64> {
    let one = |classes: usize, rng: &mut SeedRng| -> Result<f64> {
        let logits = rand_t(rng, &[classes]);
        let hot = rng.index(classes);
        let smooth = 0.1;
        let target: Vec<f64> = (0..classes)
            .map(|i| {
                if i == hot {
                    1.0 - smooth + smooth / classes as f64
                } else {
                    smooth / classes as f64
                }
            })
            .collect();
        finite_diff_scalar(
            &|t: &mut Tape, ids: &[TensorId]| t.cross_entropy(ids[0], &target),
            &[logits],
            step,
        )
    };
    worst_of!(rng, step, one(2, rng), one(5, rng), one(7, rng))
}

/// One finite-difference check per differentiable tape op.
pub fn op_registry() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "matmul", run: check_matmul },
        OpCheck { name: "add", run: check_add },
        OpCheck { name: "add_row", run: check_add_row },
        OpCheck { name: "scale_rows", run: check_scale_rows },
        OpCheck { name: "scale_scalar", run: check_scale_scalar },
        OpCheck { name: "scale_const", run: check_scale_const },
        OpCheck { name: "apply_mask", run: check_apply_mask },
        OpCheck { name: "softmax", run: check_softmax },
        OpCheck { name: "layer_norm", run: check_layer_norm },
        OpCheck { name: "gelu", run: check_gelu },
        OpCheck { name: "transpose", run: check_transpose },
        OpCheck { name: "reshape", run: check_reshape },
        OpCheck { name: "mean_rows", run: check_mean_rows },
        OpCheck { name: "mean_all", run: check_mean_all },
        OpCheck { name: "sum_all", run: check_sum_all },
        OpCheck { name: "slice_rows", run: check_slice_rows },
        OpCheck { name: "slice_cols", run: check_slice_cols },
        OpCheck { name: "concat_rows", run: check_concat_rows },
        OpCheck { name: "concat_cols", run: check_concat_cols },
        OpCheck { name: "mix_heads", run: check_mix_heads },
        OpCheck { name: "cross_entropy", run: check_cross_entropy },
    ]
}

/// Run every registry entry with the given seed and step.
pub fn run_registry(seed: u64, step: f64) -> Result<Vec<OpCheckResult>> {
    let mut out = Vec::new();
    for check in op_registry() {
        let mut rng = SeedRng::new(seed, 7);
        let rel = (check.run)(&mut rng, step)?;
        out.push(OpCheckResult {
            name: check.name.into(),
            rel_err: rel,
        });
    }
    Ok(out)
}

/// The registry must cover exactly the differentiable op set.
pub fn registry_covers_all_ops() -> bool {
    let mut names: Vec<&str> = op_registry().iter().map(|c| c.name).collect();
    names.sort_unstable();
    let mut expect: Vec<&str> = DIFFERENTIABLE_OPS.to_vec();
    expect.sort_unstable();
    names == expect
}
