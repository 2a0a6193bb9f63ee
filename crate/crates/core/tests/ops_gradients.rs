//! Exhaustive central differences for single primitives.

use mrs_core::autograd::Tape;
use mrs_core::gradcheck::{finite_diff_grad, relative_error, FD_STEP};
use mrs_core::ops::{Activation, BinaryOp, ConvGeometry};
use mrs_core::{Result, SplitMix64, Tensor};

/// Checks `d/dx sum(r * f(x))` for every element of every argument.
fn check(args: Vec<Tensor>, f: impl Fn(&mut Tape, &[mrs_core::autograd::Var]) -> Result<mrs_core::autograd::Var>) {
    let mut rng = SplitMix64::new(99);
    let mut tape = Tape::new();
    let vars: Vec<_> = args.iter().map(|a| tape.leaf(a.clone())).collect();
    let y = f(&mut tape, &vars).unwrap();
    let r = Tensor::randn(tape.value(y).shape(), &mut rng, 1.0);
    tape.backward(y, &r).unwrap();
    for k in 0..args.len() {
        let analytic = tape.grad(vars[k]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<_> = args
                    .iter()
                    .enumerate()
                    .map(|(j, a)| t.leaf(if j == k { probe.clone() } else { a.clone() }))
                    .collect();
                let out = f(&mut t, &vs)?;
                Ok(t.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
            },
            &args[k],
            FD_STEP,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n) <= 1e-4, "arg {k}: {a} vs {n}");
        }
    }
}

fn rand(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut SplitMix64::new(seed), 1.0)
}

#[test]
fn conv_strided_grouped() {
    let geom = ConvGeometry::new(2, (1, 0), 2);
    check(
        vec![rand([2, 4, 5, 4], 1), rand([6, 2, 3, 2], 2), rand([1, 6, 1, 1], 3)],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom),
    );
}

#[test]
fn group_norm_affine() {
    check(
        vec![rand([2, 4, 3, 3], 4), rand([1, 4, 1, 1], 5), rand([1, 4, 1, 1], 6)],
        |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5),
    );
}

#[test]
fn pooling_resize_and_softmax() {
    check(vec![rand([1, 3, 4, 5], 7)], |t, v| t.avg_pool_1x1(v[0]));
    check(vec![rand([1, 2, 5, 5], 8)], |t, v| t.max_pool2d(v[0], 3, 1, 1));
    check(vec![rand([1, 2, 2, 3], 9)], |t, v| t.resize_nearest(v[0], 5, 4));
    check(vec![rand([2, 6, 1, 1], 10)], |t, v| t.softmax_blocks(v[0], 3));
}

#[test]
fn activations_and_broadcast() {
    check(vec![rand([1, 2, 3, 3], 11)], |t, v| t.activation(v[0], Activation::Silu));
    check(vec![rand([1, 2, 3, 3], 12)], |t, v| t.activation(v[0], Activation::Sigmoid));
    check(vec![rand([2, 3, 2, 2], 13), rand([2, 3, 1, 1], 14)], |t, v| t.binary(v[0], v[1], BinaryOp::Mul));
    check(vec![rand([2, 3, 2, 2], 15), rand([1, 3, 1, 1], 16)], |t, v| t.binary(v[0], v[1], BinaryOp::Add));
}

#[test]
fn channel_plumbing() {
    check(vec![rand([1, 5, 2, 2], 17), rand([1, 3, 2, 2], 18)], |t, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        let s = t.slice_channels(c, 2, 4)?;
        t.affine(s, -1.5, 0.5)
    });
}
