mod common;

use attnprof_core::numkernel::attention::{attention_forward, band_forward};
use attnprof_core::numkernel::{kernels, tally_ops, AttnShape, BandShape, Conv1dSpec, Tensor};
use attnprof_core::Error;
use common::*;
use proptest::prelude::*;

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 16,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), m in 0usize..40, k in 0usize..40, n in 0usize..40, ta: bool, tb: bool) {
        let mut r = rng(seed);
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, k * n);
        let at = if ta { tensor(&[k, m], &transpose(&a, m, k)) } else { tensor(&[m, k], &a) };
        let bt = if tb { tensor(&[n, k], &transpose(&b, k, n)) } else { tensor(&[k, n], &b) };
        let (y, tally) = tally_ops(|| kernels::matmul_t(&at, ta, &bt, tb).unwrap());
        prop_assert_eq!(y.shape(), &[m, n]);
        prop_assert!(max_diff(&to64(&y), &matmul(&a, &b, m, k, n)) < 1e-4);
        prop_assert_eq!(tally.total_macs(), (m * k * n) as u64);
    }

    #[test]
    fn conv1d_matches_direct_sum(
        seed in any::<u64>(),
        batch in 1usize..3,
        groups in 1usize..4,
        cig in 1usize..4,
        cog in 1usize..4,
        k in 1usize..6,
        stride in 1usize..4,
        pad in 0usize..4,
        t in 1usize..40,
    ) {
        let mut r = rng(seed);
        let (cin, cout) = (cig * groups, cog * groups);
        let x = rand_vec(&mut r, batch * cin * t);
        let w = rand_vec(&mut r, cout * cig * k);
        let b = rand_vec(&mut r, cout);
        let spec = Conv1dSpec { stride, padding: pad, groups };
        let got = kernels::conv1d(&tensor(&[batch * cin, t], &x), &tensor(&[cout, cig, k], &w), Some(&tensor(&[cout], &b)), spec, batch);
        if t + 2 * pad < k {
            let empty = matches!(got, Err(Error::EmptyOutput { .. }));
            prop_assert!(empty);
        } else {
            let (want, t_out) = common::conv1d(&x, batch, cin, t, &w, cout, k, Some(&b), stride, pad, groups);
            let got = got.unwrap();
            prop_assert_eq!(got.shape(), &[batch * cout, t_out]);
            prop_assert!(max_diff(&to64(&got), &want) < 1e-4);
        }
    }

    #[test]
    fn attention_matches_reference(seed in any::<u64>(), batch in 1usize..3, nq in 1usize..12, nk in 1usize..12, heads in 1usize..4, dh in 1usize..5) {
        let mut r = rng(seed);
        let d = heads * dh;
        let q = rand_vec(&mut r, batch * nq * d);
        let k = rand_vec(&mut r, batch * nk * d);
        let v = rand_vec(&mut r, batch * nk * d);
        let bias = rand_vec(&mut r, heads * nq * nk);
        let shape = AttnShape { batch, nq, nk, heads, scale: 0.3 };
        let ((out, probs), tally) = tally_ops(|| attention_forward(
            &tensor(&[batch * nq, d], &q), &tensor(&[batch * nk, d], &k), &tensor(&[batch * nk, d], &v),
            &shape, Some(&tensor(&[heads * nq, nk], &bias)), None,
        ).unwrap());
        let want = common::attention(&q, &k, &v, batch, nq, nk, heads, 0.3f32 as f64, Some(&bias), None);
        prop_assert!(max_diff(&to64(&out), &want) < 1e-5);
        for row in probs.data().chunks(nk) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        prop_assert_eq!(tally.total_macs(), (2 * batch * nq * nk * d) as u64);
        prop_assert_eq!(tally.total_elementwise(), (batch * heads * nq * nk) as u64);
    }

    #[test]
    fn band_equals_dense_under_band_mask(seed in any::<u64>(), batch in 1usize..3, n in 1usize..65, heads in 1usize..3, dh in 1usize..5, half in 0usize..10, global_first: bool) {
        let mut r = rng(seed);
        let d = heads * dh;
        let q = rand_vec(&mut r, batch * n * d);
        let k = rand_vec(&mut r, batch * n * d);
        let v = rand_vec(&mut r, batch * n * d);
        let shape = BandShape { batch, n, heads, half, global_first, scale: 0.5 };
        let (qt, kt, vt) = (tensor(&[batch * n, d], &q), tensor(&[batch * n, d], &k), tensor(&[batch * n, d], &v));
        let (band, _) = band_forward(&qt, &kt, &vt, &shape).unwrap();
        let m1 = band_mask(n, half, global_first);
        let dense_mask = tensor(&[n, n], &m1);
        let dense = AttnShape { batch, nq: n, nk: n, heads, scale: 0.5 };
        let (full, _) = attention_forward(&qt, &kt, &vt, &dense, None, Some(&dense_mask)).unwrap();
        prop_assert!(band.max_abs_diff(&full) <= 1e-5);
    }
}

#[test]
fn softmax_rows_are_distributions_and_masked_rows_vanish() {
    let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, f32::NEG_INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY]).unwrap();
    let y = kernels::softmax_rows(&x).unwrap();
    let want = softmax_rows(&[1.0, 2.0, 3.0], 3, 1.0);
    assert!(max_diff(&to64(&y)[..3], &want) < 1e-6);
    assert_eq!(&y.data()[3..], &[0.0, 0.0, 0.0]);
    let big = Tensor::from_vec(&[1, 2], vec![1000.0, 1000.0]).unwrap();
    assert_eq!(kernels::softmax_rows(&big).unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn layernorm_and_gelu_match_reference() {
    let mut r = rng(2);
    let x = rand_vec(&mut r, 35);
    let g = rand_vec(&mut r, 7);
    let b = rand_vec(&mut r, 7);
    let (y, _) = kernels::layernorm(&tensor(&[5, 7], &x), &tensor(&[7], &g), &tensor(&[7], &b)).unwrap();
    assert!(max_diff(&to64(&y), &norm_rows(&x, 7, &g, &b, 0, 1e-5)) < 1e-5);
    let y = kernels::gelu(&tensor(&[35], &x));
    assert!(max_diff(&to64(&y), &gelu(&x)) < 1e-6);
    assert_eq!(kernels::gelu(&tensor(&[1], &[0.0])).data(), &[0.0]);
}

#[test]
fn conv_too_short_reports_empty_output() {
    let x = Tensor::zeros(&[1, 5]);
    let w = Tensor::zeros(&[4, 1, 10]);
    let err = kernels::conv1d(&x, &w, None, Conv1dSpec { stride: 5, ..Default::default() }, 1).unwrap_err();
    assert!(matches!(err, Error::EmptyOutput { .. }));
}

#[test]
fn shape_errors_name_the_operation() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    let e = kernels::matmul(&a, &b).unwrap_err();
    assert!(e.to_string().contains("matmul"), "{e}");
    assert!(kernels::add(&a, &b).is_err());
    assert!(kernels::linear(&a, &b, None).is_err());
}

#[test]
fn segment_mean_and_layout_ops() {
    let x = Tensor::from_fn(&[7, 2], |i| i as f32);
    let y = kernels::segment_mean(&x, 3).unwrap();
    // segments [0,2), [2,4), [4,7)
    assert_eq!(y.data(), &[1.0, 2.0, 5.0, 6.0, 10.0, 11.0]);
    assert!(kernels::segment_mean(&x, 8).is_err());

    let img = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f32);
    let p = kernels::patchify(&img, 2).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert!(kernels::patchify(&img, 3).is_err());

    let g = kernels::gather_rows(&x, &[Some(6), None, Some(0), Some(1)], 2).unwrap();
    assert_eq!(g.data(), &[12.0, 13.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);

    let t = kernels::transpose_blocks(&Tensor::from_fn(&[4, 3], |i| i as f32), 2).unwrap();
    assert_eq!(t.shape(), &[6, 2]);
    assert_eq!(t.row(0), &[0.0, 3.0]);
    assert_eq!(t.row(3), &[6.0, 9.0]);
}

#[test]
fn kernels_charge_tally_to_active_tag() {
    use attnprof_core::numkernel::with_tag;
    use attnprof_core::LayerTag;
    let a = Tensor::zeros(&[4, 8]);
    let w = Tensor::zeros(&[8, 3]);
    let (_, tally) = tally_ops(|| {
        with_tag(LayerTag::intermediate(2), || {
            let h = kernels::linear(&a, &w, None).unwrap();
            kernels::gelu(&h)
        })
    });
    assert_eq!(tally.macs[&LayerTag::intermediate(2)], 96);
    assert_eq!(tally.elementwise[&LayerTag::other(2)], 12);
}
