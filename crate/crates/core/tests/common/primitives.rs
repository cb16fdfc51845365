use std::sync::Arc;

use gencast::diffcore::{Tape, Tensor, Unary, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts a tensor against fixed pseudo-random weights so every
/// coordinate of the output influences the scalar.
pub fn probe(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 13.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w);
    tape.sum(p)
}

pub type Builder = Box<dyn Fn(&mut Tape, Var) -> Var>;

/// One scalar-valued probe per primitive, each differentiated with respect
/// to a single flat input that is reshaped and split inside the builder.
pub fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, Builder)> {
    let other = random(rng, &[3, 4]);
    let mat = random(rng, &[4, 2]);
    let block = Arc::new(random(rng, &[2, 3]));
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    let o5 = other.clone();
    vec![
        ("add", vec![3, 4], Box::new(move |t, x| {
            let c = t.constant(other.clone());
            let y = t.add(x, c);
            let y = t.square(y);
            probe(t, y)
        })),
        ("sub", vec![3, 4], Box::new(move |t, x| {
            let c = t.constant(o2.clone());
            let y = t.sub(c, x);
            let y = t.square(y);
            probe(t, y)
        })),
        ("mul", vec![3, 4], Box::new(move |t, x| {
            let c = t.constant(o3.clone());
            let y = t.mul(x, c);
            let y = t.mul(y, x);
            probe(t, y)
        })),
        ("maximum", vec![3, 4], Box::new(move |t, x| {
            let c = t.constant(o4.clone());
            let y = t.maximum(x, c);
            probe(t, y)
        })),
        ("add_row", vec![16], Box::new(|t, x| {
            let m = t.reshape(x, &[4, 4]);
            let b = t.gather_rows(m, Arc::new(vec![Some(0)]));
            let b = t.reshape(b, &[4]);
            let y = t.add_row(m, b);
            let y = t.square(y);
            probe(t, y)
        })),
        ("mul_row_scalar", vec![15], Box::new(|t, x| {
            let m = t.reshape(x, &[3, 5]);
            let s = t.sum_cols(m);
            let y = t.mul_row_scalar(m, s);
            probe(t, y)
        })),
        ("scale_shift", vec![6], Box::new(|t, x| {
            let y = t.scale(x, -2.5);
            let y = t.add_scalar(y, 0.7);
            let y = t.square(y);
            probe(t, y)
        })),
        ("matmul", vec![3, 4], Box::new(move |t, x| {
            let w = t.constant(mat.clone());
            let y = t.matmul(x, w);
            let y = t.square(y);
            probe(t, y)
        })),
        ("matmul_rhs", vec![4, 3], Box::new(move |t, x| {
            let a = t.constant(o5.clone());
            let y = t.matmul(a, x);
            let y = t.square(y);
            probe(t, y)
        })),
        ("batch_matmul", vec![2, 3, 4], Box::new(|t, x| {
            let y = t.batch_matmul(x, x, true);
            probe(t, y)
        })),
        ("batch_matmul_plain", vec![2, 3, 3], Box::new(|t, x| {
            let y = t.batch_matmul(x, x, false);
            probe(t, y)
        })),
        ("block_left_mul", vec![6, 2], Box::new(move |t, x| {
            let y = t.block_left_mul(block.clone(), x);
            let y = t.square(y);
            probe(t, y)
        })),
        ("sigmoid", vec![7], Box::new(|t, x| {
            let y = t.sigmoid(x);
            probe(t, y)
        })),
        ("tanh", vec![7], Box::new(|t, x| {
            let y = t.unary(x, Unary::Tanh);
            probe(t, y)
        })),
        ("exp_ln", vec![7], Box::new(|t, x| {
            let y = t.exp(x);
            let y = t.add_scalar(y, 1.0);
            let y = t.ln(y);
            probe(t, y)
        })),
        ("sin_cos", vec![7], Box::new(|t, x| {
            let a = t.sin(x);
            let b = t.cos(x);
            let y = t.mul(a, b);
            probe(t, y)
        })),
        ("sqrt_recip", vec![7], Box::new(|t, x| {
            let y = t.square(x);
            let y = t.add_scalar(y, 0.5);
            let s = t.sqrt(y);
            let r = t.unary(s, Unary::Recip);
            probe(t, r)
        })),
        ("neg_abs", vec![7], Box::new(|t, x| {
            let y = t.unary(x, Unary::Neg);
            let y = t.unary(y, Unary::Abs);
            probe(t, y)
        })),
        ("relu", vec![7], Box::new(|t, x| {
            let y = t.relu(x);
            probe(t, y)
        })),
        ("softmax_rows", vec![3, 5], Box::new(|t, x| {
            let y = t.softmax_rows(x);
            probe(t, y)
        })),
        ("concat_cols", vec![3, 4], Box::new(|t, x| {
            let s = t.square(x);
            let y = t.concat_cols(x, s);
            probe(t, y)
        })),
        ("mean", vec![3, 4], Box::new(|t, x| {
            let s = t.square(x);
            t.mean(s)
        })),
        ("sum_rows", vec![3, 4], Box::new(|t, x| {
            let s = t.sum_rows(x);
            let s = t.square(s);
            probe(t, s)
        })),
        ("sum_cols", vec![3, 4], Box::new(|t, x| {
            let s = t.sum_cols(x);
            let s = t.square(s);
            probe(t, s)
        })),
        ("gather_rows", vec![3, 4], Box::new(|t, x| {
            let g = t.gather_rows(x, Arc::new(vec![Some(2), None, Some(0), Some(2)]));
            let g = t.square(g);
            probe(t, g)
        })),
        ("transpose", vec![3, 4], Box::new(|t, x| {
            let y = t.transpose(x);
            let y = t.square(y);
            probe(t, y)
        })),
        ("cdist", vec![5, 3], Box::new(|t, x| {
            let a = t.gather_rows(x, Arc::new(vec![Some(0), Some(1), Some(2)]));
            let b = t.gather_rows(x, Arc::new(vec![Some(3), Some(4)]));
            let d = t.cdist(a, b);
            probe(t, d)
        })),
        ("huber", vec![8], Box::new(|t, x| {
            let y = t.scale(x, 3.0);
            let y = t.huber(y, 0.9);
            probe(t, y)
        })),
        ("causal_conv", vec![48, 1], Box::new(|t, x| {
            let xs = t.gather_rows(x, Arc::new((0..30).map(Some).collect()));
            let xs = t.reshape(xs, &[5, 2, 3]);
            let ws = t.gather_rows(x, Arc::new((30..48).map(Some).collect()));
            let ws = t.reshape(ws, &[3, 3, 2]);
            let y = t.causal_conv(xs, ws, 2);
            probe(t, y)
        })),
    ]
}

