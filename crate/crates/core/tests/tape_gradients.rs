//! Every differentiable op, and a small network built from them, checked
//! against central differences of the eager backend.

use std::sync::Arc;

use belle::numerics::{finite_difference_check, AttentionMask, Backend, Eager, Tape, Tensor};
use belle::sampler::RngStream;

/// A scalar-valued function written once for both backends.
trait Composite {
    fn run<B: Backend>(&self, b: &mut B, xs: &[B::V]) -> B::V;
}

fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    // Keep away from the kinks of abs and relu.
    let data = (0..n)
        .map(|_| {
            let u = rng.uniform() * 2.0 - 1.0;
            u.signum() * (0.1 + 1.4 * u.abs())
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn split(flat: &Tensor, shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat.data()[offset..offset + n].to_vec()).unwrap();
            offset += n;
            t
        })
        .collect()
}

/// Contracts a non-scalar output with fixed weights so every output entry
/// contributes to the checked scalar.
fn project<B: Backend>(b: &mut B, out: &B::V, seed: u64) -> B::V {
    let shape = b.value(out).shape().to_vec();
    let mut rng = RngStream::new(seed, 99);
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|_| 0.5 + rng.uniform()).collect()).unwrap();
    let w = b.input(w);
    let m = b.mul(out, &w).unwrap();
    b.sum(&m)
}

fn check(f: &impl Composite, shapes: &[&[usize]], seed: u64) {
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let mut rng = RngStream::new(seed, 0);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone().with_grad())).collect();
    let out = f.run(&mut tape, &vars);
    let loss = project(&mut tape, &out, seed);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_vec()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let point = Tensor::vector(flat);
    let analytic = Tensor::vector(analytic);
    let eval = |p: &Tensor| {
        let mut e = Eager;
        let xs = split(p, &shapes);
        let out = f.run(&mut e, &xs);
        project(&mut e, &out, seed).item()
    };
    let report = finite_difference_check(eval, &point, &analytic, 1e-5, 1e-4).unwrap();
    // Entries whose true gradient is ~0 only need absolute agreement.
    let bad: Vec<_> = report
        .failures()
        .filter(|c| !(c.finite && !c.kink && (c.analytic - c.numeric).abs() < 1e-9))
        .collect();
    assert!(bad.is_empty(), "max rel {:.3e}, failing {:?}", report.max_rel_error, bad);
}

macro_rules! op_check {
    ($name:ident, [$($shape:expr),+], |$b:ident, $x:ident| $body:block) => {
        #[test]
        fn $name() {
            struct F;
            impl Composite for F {
                fn run<B: Backend>(&self, $b: &mut B, $x: &[B::V]) -> B::V $body
            }
            for seed in 0..3 {
                check(&F, &[$(&$shape),+], seed);
            }
        }
    };
}

op_check!(add_sub_mul, [[3, 4], [3, 4], [3, 4]], |b, x| {
    let s = b.add(&x[0], &x[1]).unwrap();
    let d = b.sub(&s, &x[2]).unwrap();
    b.mul(&d, &x[0]).unwrap()
});

op_check!(scale_and_shift, [[2, 5]], |b, x| {
    let s = b.scale(&x[0], -1.7);
    b.add_scalar(&s, 0.3)
});

op_check!(add_row_broadcast, [[4, 3], [3]], |b, x| { b.add_row(&x[0], &x[1]).unwrap() });

op_check!(matmul_both_sides, [[3, 4], [4, 2]], |b, x| { b.matmul(&x[0], &x[1]).unwrap() });

op_check!(matmul_transposed, [[3, 4], [5, 4]], |b, x| { b.matmul_nt(&x[0], &x[1]).unwrap() });

op_check!(transpose_then_linear, [[4, 3], [4, 2], [2]], |b, x| {
    let t = b.transpose(&x[0]).unwrap();
    b.linear(&t, &x[1], &x[2]).unwrap()
});

op_check!(softmax_rows, [[3, 5]], |b, x| { b.softmax(&x[0]) });

op_check!(layer_norm_affine, [[3, 6], [6], [6]], |b, x| { b.layer_norm(&x[0], &x[1], &x[2]).unwrap() });

op_check!(conv1d_kernel3, [[5, 2], [6, 3], [3]], |b, x| { b.conv1d(&x[0], &x[1], &x[2], 3).unwrap() });

op_check!(conv1d_kernel5_short_input, [[3, 2], [10, 2], [2]], |b, x| {
    b.conv1d(&x[0], &x[1], &x[2], 5).unwrap()
});

op_check!(pointwise_activations, [[2, 4]], |b, x| {
    let s = b.sigmoid(&x[0]);
    let t = b.tanh(&x[0]);
    let r = b.relu(&x[0]);
    let p = b.softplus(&x[0]);
    let st = b.mul(&s, &t).unwrap();
    let rp = b.mul(&r, &p).unwrap();
    b.add(&st, &rp).unwrap()
});

op_check!(log_exp_abs_square, [[3, 3]], |b, x| {
    let sq = b.square(&x[0]);
    let pos = b.add_scalar(&sq, 0.5);
    let l = b.ln(&pos);
    let e = b.exp(&x[0]);
    let a = b.abs(&x[0]);
    let le = b.mul(&l, &e).unwrap();
    b.add(&le, &a).unwrap()
});

op_check!(log_gamma_positive, [[2, 3]], |b, x| {
    let sq = b.square(&x[0]);
    let pos = b.add_scalar(&sq, 0.7);
    b.ln_gamma(&pos)
});

op_check!(reductions, [[3, 4]], |b, x| {
    let s = b.sum(&x[0]);
    let sq = b.square(&x[0]);
    let m = b.mean(&sq);
    let sm = b.mul(&s, &m).unwrap();
    b.add(&sm, &s).unwrap()
});

op_check!(dropout_fixed_stream, [[4, 4]], |b, x| {
    let mut rng = RngStream::new(5, 3);
    b.dropout(&x[0], 0.3, &mut rng).unwrap()
});

op_check!(masked_attention, [[4, 3], [4, 3], [4, 2]], |b, x| {
    let mask = Arc::new(AttentionMask::causal(4));
    let s = b.masked_scores(&x[0], &x[1], &mask, 0.5).unwrap();
    let p = b.softmax(&s);
    b.matmul(&p, &x[2]).unwrap()
});

op_check!(row_and_column_plumbing, [[2, 3], [3, 3], [5, 4]], |b, x| {
    let rows = b.concat_rows(&[x[0].clone(), x[1].clone()]).unwrap();
    let mid = b.slice_rows(&rows, 1, 3).unwrap();
    let wide = b.concat_cols(&[mid.clone(), mid]).unwrap();
    let cut = b.slice_cols(&wide, 2, 3).unwrap();
    let g = b.gather_rows(&x[2], &[4, 0, 4]).unwrap();
    let g3 = b.slice_cols(&g, 1, 3).unwrap();
    b.mul(&cut, &g3).unwrap()
});

op_check!(two_layer_network, [[5, 3], [3, 8], [8], [8, 2], [2]], |b, x| {
    let h = b.linear(&x[0], &x[1], &x[2]).unwrap();
    let h = b.tanh(&h);
    let o = b.linear(&h, &x[3], &x[4]).unwrap();
    let sq = b.square(&o);
    b.mean(&sq)
});

#[test]
fn scalar_examples() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0).with_grad());
    let y = tape.mul(&x, &x).unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);

    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.0).with_grad());
    let y = tape.softplus(&x);
    assert!((tape.backward(y).unwrap().wrt(x).item() - 0.5).abs() < 1e-15);
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0).with_grad());
    let a = tape.scale(&x, 3.0);
    let b = tape.square(&x);
    let c = tape.add(&a, &b).unwrap();
    let d = tape.add(&c, &x).unwrap();
    // d = 3x + x² + x, d' = 4 + 2x.
    assert_eq!(tape.backward(d).unwrap().wrt(x).item(), 8.0);
}

#[test]
fn detached_leaf_gets_zeros() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let c = tape.var(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(&x, &c).unwrap();
    let s = tape.sum(&y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(c).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_output_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let y = tape.square(&x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn abs_subgradient_at_zero() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.0).with_grad());
    let y = tape.abs(&x);
    assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 0.0);
}

#[test]
fn dropout_mask_replays_and_keeps_rate() {
    let ones = Tensor::full(&[1000, 1000], 1.0);
    let mut e = Eager;
    let a = e.dropout(&ones, 0.25, &mut RngStream::new(77, 1)).unwrap();
    let b = e.dropout(&ones, 0.25, &mut RngStream::new(77, 1)).unwrap();
    assert_eq!(a.data(), b.data());
    let kept = a.data().iter().filter(|&&v| v != 0.0).count() as f64 / a.len() as f64;
    assert!((kept - 0.75).abs() / 0.75 < 0.003, "{kept}");
}

#[test]
fn forward_ops_stay_finite_on_wide_inputs() {
    let mut rng = RngStream::new(12, 0);
    for _ in 0..50 {
        let data: Vec<f64> = (0..24).map(|_| rng.uniform() * 20.0 - 10.0).collect();
        let x = Tensor::new(&[4, 6], data).unwrap();
        let mut e = Eager;
        let mag = e.abs(&x);
        let outs = [
            e.softmax(&x),
            e.sigmoid(&x),
            e.tanh(&x),
            e.softplus(&x),
            e.exp(&x),
            e.ln(&x),
            e.ln_gamma(&mag),
            e.layer_norm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6])).unwrap(),
        ];
        for o in &outs {
            assert!(o.all_finite(), "{o:?}");
        }
    }
}
