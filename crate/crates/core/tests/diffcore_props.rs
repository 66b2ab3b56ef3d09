use std::sync::Arc;

use binn_core::diffcore::{grad_check, grad_check_many, Activation, DiffError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn linear_forward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[&[1.0, 0.0]])).unwrap();
    let w = t.leaf(Tensor::from_rows(&[&[2.0, 3.0], &[4.0, 5.0]])).unwrap();
    let b = t.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 3.0]);

    let x0 = t.leaf(Tensor::from_rows(&[&[0.0, 0.0]])).unwrap();
    let b2 = t.leaf(Tensor::vector(vec![7.0, -1.0])).unwrap();
    let y = t.linear(x0, w, b2).unwrap();
    assert_eq!(t.value(y).data(), &[7.0, -1.0]);

    // hand product: [1,2]·[[1,1],[1,1]] = [3,3]; + [1,1]
    let x1 = t.leaf(Tensor::from_rows(&[&[1.0, 2.0]])).unwrap();
    let ones = t.leaf(Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
    let b1 = t.leaf(Tensor::vector(vec![1.0, 1.0])).unwrap();
    let y = t.linear(x1, ones, b1).unwrap();
    assert_eq!(t.value(y).data(), &[4.0, 4.0]);
}

#[test]
fn linear_shape_mismatch() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 3])).unwrap();
    let w = t.leaf(Tensor::zeros(&[2, 2])).unwrap();
    let b = t.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(t.linear(x, w, b), Err(DiffError::ShapeMismatch { .. })));
}

#[test]
fn activation_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![-2.0, 3.0])).unwrap();
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 3.0]);
    let one = t.leaf(Tensor::scalar(1.0)).unwrap();
    let th = t.tanh(one).unwrap();
    assert!((t.value(th).item() - 0.761_594_155_955_764_9).abs() < 1e-15);
}

#[test]
fn linear_map_gradient_is_input() {
    // loss = sum(x·W) → ∂/∂W[k,j] = x[k]
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[&[0.5, -2.0, 3.0]])).unwrap();
    let w = t.leaf(Tensor::zeros(&[3, 2])).unwrap();
    let y = t.matmul(x, w).unwrap();
    let loss = t.sum(y).unwrap();
    let g = t.backward(loss).unwrap().get(w);
    assert_eq!(g.data(), &[0.5, 0.5, -2.0, -2.0, 3.0, 3.0]);
}

#[test]
fn tanh_squared_at_origin_has_zero_gradient() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::scalar(0.0)).unwrap();
    let th = t.tanh(w).unwrap();
    let sq = t.mul(th, th).unwrap();
    let g = t.backward(sq).unwrap().get(w);
    assert_eq!(g.item(), 0.0);
}

#[test]
fn unused_leaf_gets_zero_gradient_and_fanout_accumulates() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let unused = t.leaf(Tensor::vector(vec![5.0])).unwrap();
    let s1 = t.sum(a).unwrap();
    let s2 = t.sum(a).unwrap();
    let tot = t.add(s1, s2).unwrap();
    let g = t.backward(tot).unwrap();
    assert_eq!(g.get(a).data(), &[2.0, 2.0]);
    assert_eq!(g.get(unused).data(), &[0.0]);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(t.backward(a), Err(DiffError::NonScalarLoss { .. })));
    let mut other = Tape::new();
    for _ in 0..5 {
        other.leaf(Tensor::scalar(0.0)).unwrap();
    }
    let far = other.sum(a).unwrap();
    assert!(matches!(t.backward(far), Err(DiffError::UnknownNode { .. })));
}

#[test]
fn non_finite_forward_names_the_op() {
    let mut t = Tape::new();
    let z = t.leaf(Tensor::scalar(0.0)).unwrap();
    match t.recip(z) {
        Err(DiffError::NonFinite { op, node }) => {
            assert_eq!(op, "recip");
            assert_eq!(node, 1);
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn random_mlp_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 4, 3);
        let params = vec![
            random(&mut rng, 3, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 6, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 6, 2),
            random(&mut rng, 1, 2),
        ];
        let target = random(&mut rng, 4, 2);
        let report = grad_check_many(
            |t, p| {
                let xv = t.leaf(x.clone())?;
                let tv = t.leaf(target.clone())?;
                let h = t.linear(xv, p[0], p[1])?;
                let h = t.tanh(h)?;
                let h = t.linear(h, p[2], p[3])?;
                let h = t.elu(h)?;
                let y = t.linear(h, p[4], p[5])?;
                t.squared_error(y, tv)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
    }
}

/// Applies one primitive chosen by `kind` to random inputs and reduces with a
/// fixed random projection so every output element matters.
fn primitive_objective(kind: usize, t: &mut Tape, p: &[Var], proj: &Tensor, n: usize) -> Result<Var, DiffError> {
    let y = match kind {
        0 => t.matmul(p[0], p[1])?,
        1 => t.add(p[0], p[2])?,
        2 => t.sub(p[0], p[2])?,
        3 => t.mul(p[0], p[2])?,
        4 => {
            let row = t.slice_rows(p[2], 0, 1)?;
            t.add_tiled(p[0], row)?
        }
        5 => {
            let row = t.slice_rows(p[2], 0, 1)?;
            t.mul_tiled(p[0], row)?
        }
        6 => t.tanh(p[0])?,
        7 => t.elu(p[0])?,
        8 => t.softplus(p[0])?,
        9 => {
            let sq = t.mul(p[0], p[0])?;
            let shifted = t.add_const(sq, 0.5)?;
            t.recip(shifted)?
        }
        10 => t.concat(p[0], p[2])?,
        11 => t.slice_cols(p[0], 1, 2)?,
        12 => {
            let idx: Arc<[usize]> = (0..2 * n).map(|i| (i * 7 + 3) % n).collect::<Vec<_>>().into();
            t.gather_rows(p[0], idx)?
        }
        13 => t.sum_blocks(p[0], n)?,
        14 => {
            let a = t.pair_sq_dist(p[0], n)?;
            t.block_matmul(a, p[2])?
        }
        15 => {
            let s = t.slice_cols(p[2], 0, 1)?;
            let s = t.slice_rows(s, 0, 1)?;
            t.mul_scalar(p[0], s)?
        }
        16 => {
            let m = t.mean(p[0])?;
            let s = t.sum(p[2])?;
            let both = t.mul(m, s)?;
            t.scale(both, 3.0)?
        }
        17 => {
            let len = t.value(p[0]).len();
            t.reshape(p[0], vec![len])?
        }
        _ => unreachable!(),
    };
    let yv = t.value(y).clone();
    let pr = t.leaf(Tensor::new(yv.shape().to_vec(), proj.data()[..yv.len()].to_vec())?)?;
    let weighted = t.mul(y, pr)?;
    t.sum(weighted)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn every_primitive_matches_finite_differences(kind in 0usize..18, n in 2usize..5, cols in 3usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 2 * n;
        let a = random(&mut rng, rows, cols);
        let b = random(&mut rng, cols, 3);
        let c = random(&mut rng, rows, cols);
        let proj = Tensor::vector((0..rows * rows.max(cols) * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = grad_check_many(|t, p| primitive_objective(kind, t, p, &proj, n), &[a, b, c], 1e-5).unwrap();
        prop_assert!(report.max_rel_error < 1e-5 || (report.analytic - report.numeric).abs() < 1e-9,
            "kind {kind}: {report:?}");
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let x = t.leaf(random(&mut rng, 5, 4)).unwrap();
            let w = t.leaf(random(&mut rng, 4, 4)).unwrap();
            let b = t.leaf(random(&mut rng, 1, 4)).unwrap();
            let h = t.linear(x, w, b).unwrap();
            let h = t.tanh(h).unwrap();
            let l = t.mean(h).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).item().to_bits(), g.get(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn tanh_and_elu_ranges(xs in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        for x in xs {
            let t = Activation::Tanh.apply(x);
            prop_assert!(t.abs() <= 1.0);
            prop_assert!(Activation::Elu.apply(x) >= -1.0);
        }
        prop_assert!(Activation::Tanh.apply(3.0) < 1.0);
    }
}

#[test]
fn grad_check_single_tensor_wrapper() {
    let r = grad_check(
        |t, x| {
            let y = t.tanh(x)?;
            let y2 = t.mul(y, x)?;
            t.sum(y2)
        },
        &Tensor::vector(vec![0.3, -1.2, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
    assert_eq!(r.checked, 3);
}
