//! Finite-difference checks for every differentiable tape operation.

use diffmavil::gradcheck::{check_all, worst, REL_FLOOR};
use diffmavil::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `op` on fresh leaves and reduces its output with a fixed random
/// weighting so every output entry contributes a distinct coefficient.
fn weighted<F>(op: &F, inputs: &[Tensor], weight_seed: u64, record: bool) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let w = random(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item();
    if !record {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

fn check_op<F>(name: &str, shapes: &[&[usize]], tol: f64, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let mut inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let (_, analytic) = weighted(&op, &inputs, seed, true);
        let checks = check_all(|x| weighted(&op, x, seed, false).0, &mut inputs, &analytic, H);
        let w = worst(&checks, REL_FLOOR).unwrap();
        assert!(
            w.rel_error(REL_FLOOR) < tol,
            "{name} seed {seed}: analytic {} vs numeric {} (rel {})",
            w.analytic,
            w.numeric,
            w.rel_error(REL_FLOOR)
        );
    }
}

#[test]
fn matmul_and_transpose() {
    check_op("matmul", &[&[3, 4], &[4, 2]], 1e-4, |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_op("transpose", &[&[3, 5]], 1e-4, |t, v| t.transpose(v[0]).unwrap());
}

#[test]
fn matmul_chain_is_sharp() {
    check_op("matmul chain", &[&[2, 3], &[3, 4], &[4, 2]], 1e-6, |t, v| {
        let ab = t.matmul(v[0], v[1]).unwrap();
        t.matmul(ab, v[2]).unwrap()
    });
}

#[test]
fn elementwise_binary() {
    check_op("add", &[&[3, 4], &[3, 4]], 1e-4, |t, v| t.add(v[0], v[1]).unwrap());
    check_op("sub", &[&[3, 4], &[3, 4]], 1e-4, |t, v| t.sub(v[0], v[1]).unwrap());
    check_op("mul", &[&[3, 4], &[3, 4]], 1e-4, |t, v| t.mul(v[0], v[1]).unwrap());
    check_op("mul self", &[&[3, 4]], 1e-4, |t, v| t.mul(v[0], v[0]).unwrap());
    check_op("add_row", &[&[3, 4], &[1, 4]], 1e-4, |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check_op("mul_row", &[&[3, 4], &[4]], 1e-4, |t, v| t.mul_row(v[0], v[1]).unwrap());
    check_op("scale", &[&[3, 4]], 1e-4, |t, v| t.scale(v[0], -2.5).unwrap());
}

#[test]
fn nonlinearities() {
    check_op("gelu", &[&[4, 5]], 1e-4, |t, v| t.gelu(v[0]).unwrap());
    check_op("layernorm", &[&[4, 6]], 1e-4, |t, v| t.layernorm(v[0], 1e-6).unwrap());
    check_op("softmax rows", &[&[3, 5]], 1e-4, |t, v| t.softmax(v[0], 1).unwrap());
    check_op("softmax cols", &[&[3, 5]], 1e-4, |t, v| t.softmax(v[0], 0).unwrap());
    check_op("l2_normalize_rows", &[&[3, 4]], 1e-4, |t, v| {
        t.l2_normalize_rows(v[0]).unwrap()
    });
}

#[test]
fn structural_ops() {
    check_op("concat_rows", &[&[2, 3], &[4, 3]], 1e-4, |t, v| {
        t.concat_rows(&[v[0], v[1]]).unwrap()
    });
    check_op("concat_cols", &[&[3, 2], &[3, 4]], 1e-4, |t, v| {
        t.concat_cols(&[v[0], v[1]]).unwrap()
    });
    check_op("slice_rows", &[&[5, 3]], 1e-4, |t, v| t.slice_rows(v[0], 1, 4).unwrap());
    check_op("slice_cols", &[&[3, 5]], 1e-4, |t, v| t.slice_cols(v[0], 2, 5).unwrap());
    check_op("gather_rows", &[&[4, 3]], 1e-4, |t, v| {
        t.gather_rows(v[0], &[3, 0, 0, 2]).unwrap()
    });
    check_op("mean_rows", &[&[4, 3]], 1e-4, |t, v| t.mean_rows(v[0]).unwrap());
    check_op("sum", &[&[4, 3]], 1e-4, |t, v| t.sum(v[0]).unwrap());
    check_op("mean", &[&[4, 3]], 1e-4, |t, v| t.mean(v[0]).unwrap());
}

#[test]
fn cross_entropy() {
    check_op("cross_entropy", &[&[4, 4]], 1e-4, |t, v| {
        t.cross_entropy(v[0], &[0, 1, 2, 3]).unwrap()
    });
    check_op("cross_entropy repeated targets", &[&[3, 5]], 1e-4, |t, v| {
        t.cross_entropy(v[0], &[4, 4, 0]).unwrap()
    });
}

#[test]
fn attention_composite() {
    // softmax(q kᵀ / sqrt(d)) v, the pattern every attention block uses.
    check_op("attention", &[&[3, 4], &[5, 4], &[5, 2]], 1e-4, |t, v| {
        let kt = t.transpose(v[1]).unwrap();
        let s = t.matmul(v[0], kt).unwrap();
        let s = t.scale(s, 0.5).unwrap();
        let a = t.softmax(s, 1).unwrap();
        t.matmul(a, v[2]).unwrap()
    });
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[7, 11]));
    let s = tape.scale(x, 30.0).unwrap();
    let p = tape.softmax(s, 1).unwrap();
    for row in tape.value(p).data().chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
