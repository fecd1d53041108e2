use liaf_core::tensor::{self, Tensor};
use proptest::prelude::*;

fn matmul_operands() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)>
{
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, k, l)| {
        (
            Just(m),
            Just(k),
            Just(l),
            prop::collection::vec(-1.0f64..1.0, m * k),
            prop::collection::vec(-1.0f64..1.0, k * l),
            prop::collection::vec(-1.0f64..1.0, k * l),
        )
    })
}

fn conv_operands() -> impl Strategy<Value = (usize, usize, usize, usize, usize, Vec<f64>, Vec<f64>)>
{
    (1usize..3, 1usize..5, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(b, h, w, c, f)| {
        (
            Just(b),
            Just(h),
            Just(w),
            Just(c),
            Just(f),
            prop::collection::vec(-1.0f64..1.0, b * h * w * c),
            prop::collection::vec(-1.0f64..1.0, c * f),
        )
    })
}

fn pool_operands() -> impl Strategy<Value = (usize, usize, usize, usize, usize, Vec<f64>)> {
    (1usize..3, 1usize..4, 1usize..3, 1usize..3, 1usize..3).prop_flat_map(|(b, t, hb, wb, c)| {
        let (h, w) = (2 * hb, 2 * wb);
        (
            Just(b),
            Just(t),
            Just(h),
            Just(w),
            Just(c),
            prop::collection::vec(-1.0f64..1.0, b * t * h * w * c),
        )
    })
}

proptest! {
    #[test]
    fn matmul_distributes_over_addition((m, k, l, a, b, c) in matmul_operands()) {
        let a = Tensor::new(&[m, k], a).unwrap();
        let b = Tensor::new(&[k, l], b).unwrap();
        let c = Tensor::new(&[k, l], c).unwrap();
        let bc = tensor::add(&b, &c, None).unwrap();
        let joint = tensor::matmul(&a, &bc, None).unwrap();
        let split = tensor::add(
            &tensor::matmul(&a, &b, None).unwrap(),
            &tensor::matmul(&a, &c, None).unwrap(),
            None,
        )
        .unwrap();
        prop_assert!(joint.max_abs_diff(&split) <= 1e-12);
    }

    #[test]
    fn matmul_scales_homogeneously((m, k, l, a, b, _) in matmul_operands()) {
        let a = Tensor::new(&[m, k], a).unwrap();
        let b = Tensor::new(&[k, l], b).unwrap();
        let scaled_in = tensor::matmul(&a, &tensor::scale(&b, 3.0, None).unwrap(), None).unwrap();
        let scaled_out = tensor::scale(&tensor::matmul(&a, &b, None).unwrap(), 3.0, None).unwrap();
        prop_assert!(scaled_in.max_abs_diff(&scaled_out) <= 1e-12);
    }

    #[test]
    fn pointwise_conv_is_a_matmul((b, h, w, c, f, x, k) in conv_operands()) {
        let xt = Tensor::new(&[b, h, w, c], x.clone()).unwrap();
        let kernel = Tensor::new(&[1, 1, c, f], k.clone()).unwrap();
        let conv = tensor::conv2d(&xt, &kernel, 0, None).unwrap();
        let flat = Tensor::new(&[b * h * w, c], x).unwrap();
        let weight = Tensor::new(&[c, f], k).unwrap();
        let mm = tensor::matmul(&flat, &weight, None).unwrap();
        prop_assert_eq!(conv.data(), mm.data());
    }

    #[test]
    fn pooling_commutes_with_time_mean((b, t, h, w, c, x) in pool_operands()) {
        let xt = Tensor::new(&[b, t, h, w, c], x).unwrap();
        let pooled_first = tensor::reduce_mean_time(
            &tensor::avg_pool2d(&xt, 2, 2, None).unwrap(),
            None,
        )
        .unwrap();
        let meaned_first = tensor::avg_pool2d(
            &tensor::reduce_mean_time(&xt, None).unwrap(),
            2,
            2,
            None,
        )
        .unwrap();
        prop_assert_eq!(pooled_first.shape(), meaned_first.shape());
        prop_assert!(pooled_first.max_abs_diff(&meaned_first) <= 1e-12);
    }
}
