use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let w = random(&mut rng, &[3, 2]);
    let report = finite_diff_check_many(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let wv = t.constant(w.clone());
            let q = t.mul(p, wv)?;
            Ok(t.sum(q))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap(), None).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap(), None).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    // Reference computed with 40-digit exp-normalize.
    let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
    let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), None).unwrap();
    for (v, e) in s.data().iter().zip(expected) {
        assert!(((v - e) / e).abs() < 1e-12);
    }
}

#[test]
fn softmax_mask_zeroes_entries_and_rejects_empty_rows() {
    let x = Tensor::from_rows(&[vec![5.0, 1.0, 2.0], vec![0.3, 0.2, 0.1]]).unwrap();
    let mask = [true, false, true, false, false, true];
    let s = softmax_rows(&x, Some(&mask)).unwrap();
    assert_eq!(s.get(0, 1), 0.0);
    assert_eq!(s.get(1, 0), 0.0);
    assert_eq!(s.get(1, 2), 1.0);
    let all_masked = [true, true, true, false, false, false];
    assert!(matches!(softmax_rows(&x, Some(&all_masked)), Err(Error::DegenerateRow { row: 1 })));
}

#[test]
fn mean_pool_examples() {
    let row = Tensor::from_rows(&[vec![1.5, -2.0, 3.0]]).unwrap();
    assert_eq!(mean_pool_rows(&row).unwrap().data(), row.data());
    let m = Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
    assert_eq!(mean_pool_rows(&m).unwrap().data(), &[1.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[5, 3]);
    let pooled = mean_pool_rows(&x).unwrap();
    for j in 0..3 {
        let mut s = 0.0;
        for i in (0..5).rev() {
            s += x.get(i, j);
        }
        assert!((pooled.data()[j] - s / 5.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let v = 7;
    let uniform = Tensor::zeros(&[2, v]);
    assert!((cross_entropy(&uniform, &[3, 0]).unwrap() - (v as f64).ln()).abs() < 1e-12);

    let mut peaked = Tensor::zeros(&[1, v]);
    peaked.data_mut()[4] = 1e6;
    assert!(cross_entropy(&peaked, &[4]).unwrap().abs() < 1e-12);

    assert!(matches!(cross_entropy(&uniform, &[7, 0]), Err(Error::Index(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, &[4, 7]);
    let err = finite_diff_check(|t, x| t.cross_entropy(x, &[0, 6, 2, 2]), &logits, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn finite_diff_check_examples() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let err = finite_diff_check(
        |t, v| {
            let s = t.square(v);
            Ok(t.sum(s))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-8);

    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true);
    let s = t.square(v);
    let out = t.sum(s);
    t.backward(out).unwrap();
    assert_eq!(t.grad(v).unwrap().data(), &[2.0, 4.0]);

    let bad = finite_diff_check(
        |t, v| {
            let c = t.constant(Tensor::scalar(0.0));
            let s = t.sum(v);
            t.div(s, c)
        },
        &x,
        1e-4,
    );
    assert!(matches!(bad, Err(Error::Numeric(_))));
}

/// One graph touching every tape operation.
fn composite(t: &mut Tape, v: &[Var]) -> crate::error::Result<Var> {
    let (x, w, gain, bias, row) = (v[0], v[1], v[2], v[3], v[4]);
    let ln = t.layer_norm(x, gain, bias)?; // 4x3
    let h = t.matmul_bt(ln, w)?; // 4x5
    let h = t.add_row(h, row)?;
    let g = t.gelu(h);
    let mask: Vec<bool> = (0..20).map(|i| i % 5 != 3).collect();
    let sm = t.softmax_rows(g, Some(&mask))?;
    let top = t.slice_rows(sm, 0, 2)?;
    let bottom = t.slice_rows(sm, 2, 2)?;
    let both = t.concat_rows(&[bottom, top])?;
    let left = t.slice_cols(both, 0, 2)?;
    let right = t.slice_cols(both, 2, 3)?;
    let re = t.concat_cols(&[right, left])?;
    let cmask: Arc<[f64]> = (0..20).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let masked = t.mul_const(re, cmask)?;
    let pos = t.affine(masked, 1.0, 0.5);
    let norm = t.normalize_rows(pos)?;
    let scaled = t.scale_rows_by(norm, x, 1)?;
    let bcast = t.slice_rows(x, 2, 1)?;
    let scaled = t.scale_rows_by(scaled, bcast, 0)?;
    let blk = t.select_block(scaled, &[3, 1], 1, 3)?; // 2x3
    let mean = t.mean_rows(blk)?;
    let emb = t.gather_rows(w, &[4, 0, 4])?; // 3x3
    let e = t.matmul(blk, emb)?; // 2x3
    let sq = t.square(mean);
    let prod = t.mul(sq, mean)?;
    let num = t.index_sum(prod, &[0, 2])?;
    let den = t.sum(pos);
    let ratio = t.div(num, den)?;
    let s3 = t.slice_cols(scaled, 0, 3)?;
    let pad = t.add_rows_at(s3, e, 1)?;
    let ce = t.cross_entropy(pad, &[0, 1, 2, 1])?;
    let sc = t.scale(ce, 0.3);
    t.add(ratio, sc)
}

fn composite_inputs() -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    vec![
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[5, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[5]),
    ]
}

#[test]
fn every_operation_passes_gradient_check() {
    let report = finite_diff_check_many(composite, &composite_inputs(), 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
    assert_eq!(report.coordinates, 12 + 15 + 3 + 3 + 5);
}

#[test]
fn shape_mismatch_surfaces_through_the_check() {
    let inputs = [Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])];
    let err = finite_diff_check_many(|t, v| t.matmul(v[0], v[1]).map(|p| t.sum(p)), &inputs, 1e-4).unwrap_err();
    assert!(err.to_string().contains("[2, 3] x [2, 3]"));
}

#[test]
fn repeated_backward_after_reset_is_bit_identical() {
    let inputs = composite_inputs();
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = composite(&mut t, &vars).unwrap();
    t.backward(out).unwrap();
    let first: Vec<Tensor> = vars.iter().map(|v| t.grad(*v).unwrap()).collect();
    t.zero_grad();
    t.backward(out).unwrap();
    for (v, g) in vars.iter().zip(&first) {
        assert_eq!(t.grad(*v).unwrap().data(), g.data());
    }
    // Without a reset, leaf gradients accumulate.
    t.backward(out).unwrap();
    let doubled = t.grad(vars[0]).unwrap();
    for (a, b) in doubled.data().iter().zip(first[0].data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = t.mul(a, b).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[3.0, 4.0]);
    assert!(t.grad(b).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        mask_bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let mut mask = mask_bits;
        for r in 0..3 { mask[r * 4] = true; }
        let s = softmax_rows(&x, Some(&mask)).unwrap();
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, v) in row.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(v));
                if !mask[r * 4 + j] { prop_assert_eq!(*v, 0.0); }
            }
        }
    }
}
