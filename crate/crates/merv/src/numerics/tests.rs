use super::*;
use crate::rng::{randn_tensor, seeded_rng};
use proptest::prelude::*;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "index {i}: {x} vs {y} (tol {tol})"
        );
    }
}

fn f64s(t: &Tensor<f64>) -> &[f64] {
    t.data()
}

#[test]
fn tensor_rejects_shape_mismatch_and_nonfinite() {
    assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::<f32>::new_checked(vec![2], vec![1.0, f32::NAN]).is_err());
    assert!(Tensor::<f32>::new_checked(vec![2], vec![1.0, f32::INFINITY]).is_err());
}

#[test]
fn matmul_identity() {
    let i2 = tensor2::<f64>(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let a = tensor2::<f64>(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(matmul(&i2, &a).unwrap(), a);
}

#[test]
fn matmul_zero() {
    let a = tensor2::<f64>(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let z = Tensor::<f64>::zeros(vec![2, 1]);
    assert_eq!(matmul(&a, &z).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn matmul_hand_case() {
    // 1*5+2*6 = 17, 3*5+4*6 = 39
    let a = tensor2::<f64>(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = tensor2::<f64>(&[&[5.0], &[6.0]]);
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error() {
    let a = Tensor::<f64>::zeros(vec![2, 3]);
    let b = Tensor::<f64>::zeros(vec![2, 3]);
    assert!(matmul(&a, &b).is_err());
}

#[test]
fn softmax_symmetry_and_single() {
    let c = Tensor::<f64>::full(vec![3], 2.5);
    let s = softmax(&c, 0).unwrap();
    assert_close(s.data(), &[1.0 / 3.0; 3], 1e-12);
    let one = Tensor::<f64>::full(vec![1], -4.0);
    assert_close(softmax(&one, 0).unwrap().data(), &[1.0], 0.0);
}

#[test]
fn softmax_closed_form() {
    // e^0 / (e^0 + 3) = 0.25
    let v = Tensor::<f64>::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
    let s = softmax(&v, 0).unwrap();
    assert_close(s.data(), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_invalid_axis() {
    let v = Tensor::<f64>::zeros(vec![2]);
    assert!(softmax(&v, 1).is_err());
}

#[test]
fn pool2d_identity_and_constant() {
    let x = randn_tensor::<f64>(vec![2, 3, 4, 5], 1.0, &mut seeded_rng(1, "pool"));
    assert_eq!(adaptive_avg_pool2d(&x, 3, 4).unwrap(), x);
    let c = Tensor::<f64>::full(vec![2, 4, 4, 3], 0.7);
    let p = adaptive_avg_pool2d(&c, 2, 2).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn pool2d_block_means() {
    // 4x4 grid holding 1..16 pooled to 2x2: direct means of each 2x2 window
    let x = Tensor::<f64>::from_fn(vec![1, 4, 4, 1], |i| (i + 1) as f64);
    let p = adaptive_avg_pool2d(&x, 2, 2).unwrap();
    assert_close(p.data(), &[3.5, 5.5, 11.5, 13.5], 1e-12);
}

#[test]
fn pool2d_rejects_upsampling() {
    let x = Tensor::<f64>::zeros(vec![1, 2, 2, 1]);
    assert!(adaptive_avg_pool2d(&x, 3, 2).is_err());
}

#[test]
fn pool3d_matches_pool2d_when_t_kept() {
    let x = randn_tensor::<f64>(vec![3, 5, 4, 2], 1.0, &mut seeded_rng(2, "pool3d"));
    let a = adaptive_avg_pool3d(&x, 3, 2, 2).unwrap();
    let b = adaptive_avg_pool2d(&x, 2, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pool3d_frame_mean() {
    // two constant planes F and 3F pooled to one frame give 2F
    let f = 1.25f64;
    let mut data = vec![f; 2 * 2 * 1];
    data.extend(vec![3.0 * f; 2 * 2 * 1]);
    let x = Tensor::<f64>::new(vec![2, 2, 2, 1], data).unwrap();
    let p = adaptive_avg_pool3d(&x, 1, 2, 2).unwrap();
    assert!(p.data().iter().all(|&v| (v - 2.0 * f).abs() < 1e-12));
}

#[test]
fn mean_over_axis_cases() {
    let x = Tensor::<f64>::new(vec![1, 3], vec![5.0, 6.0, 7.0]).unwrap();
    let m = mean_over_axis(&x, 0).unwrap();
    assert_eq!(m.shape(), &[3]);
    assert_close(m.data(), &[5.0, 6.0, 7.0], 0.0);

    let v = Tensor::<f64>::new(vec![2], vec![1.0, 3.0]).unwrap();
    assert_close(mean_over_axis(&v, 0).unwrap().data(), &[2.0], 1e-15);

    // summation oracle on a random 5x4 matrix
    let x = randn_tensor::<f64>(vec![5, 4], 1.0, &mut seeded_rng(3, "mean"));
    let m = mean_over_axis(&x, 0).unwrap();
    for j in 0..4 {
        let sum: f64 = (0..5).map(|i| x.data()[i * 4 + j]).sum();
        assert!((m.data()[j] - sum / 5.0).abs() < 1e-12);
    }
}

#[test]
fn linear_cases() {
    let x = tensor2::<f64>(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let id = tensor2::<f64>(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert_eq!(linear(&x, &id, None).unwrap(), x);

    let zero = Tensor::<f64>::zeros(vec![2, 2]);
    let bias = Tensor::<f64>::new(vec![2], vec![0.5, -0.5]).unwrap();
    let out = linear(&x, &zero, Some(&bias)).unwrap();
    assert_close(out.data(), &[0.5, -0.5, 0.5, -0.5], 0.0);

    // 1x2 . 2x1 hand expansion
    let a = tensor2::<f64>(&[&[2.0, 3.0]]);
    let w = tensor2::<f64>(&[&[10.0], &[100.0]]);
    assert_close(linear(&a, &w, None).unwrap().data(), &[320.0], 0.0);
}

#[test]
fn conv3d_identity_kernel() {
    let x = randn_tensor::<f64>(vec![2, 3, 3, 2], 1.0, &mut seeded_rng(4, "conv"));
    // 1x1x1 kernel carrying the identity over channels
    let k = Tensor::<f64>::new(
        vec![1, 1, 1, 2, 2],
        vec![1.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let y = conv3d_simple(&x, &k, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv3d_ones_kernel_on_constant() {
    let c = 0.3f64;
    let x = Tensor::<f64>::full(vec![3, 4, 4, 1], c);
    let k = Tensor::<f64>::full(vec![2, 3, 3, 1, 1], 1.0);
    let y = conv3d_simple(&x, &k, [1, 1, 1], [0, 0, 0]).unwrap();
    // interior cells see the full kernel volume
    assert_eq!(y.shape(), &[2, 2, 2, 1]);
    assert!(y.data().iter().all(|&v| (v - c * 18.0).abs() < 1e-12));
}

#[test]
fn conv3d_matches_sliding_window_oracle() {
    let mut r = seeded_rng(5, "conv-oracle");
    let x = randn_tensor::<f64>(vec![1, 4, 4, 2], 1.0, &mut r);
    let k = randn_tensor::<f64>(vec![1, 2, 2, 2, 3], 1.0, &mut r);
    let y = conv3d_simple(&x, &k, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    // independent direct evaluation
    for oy in 0..3 {
        for ox in 0..3 {
            for co in 0..3 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        for ci in 0..2 {
                            acc += x.at(&[0, oy + dy, ox + dx, ci])
                                * k.at(&[0, dy, dx, ci, co]);
                        }
                    }
                }
                assert!((y.at(&[0, oy, ox, co]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn finite_diff_of_sum_and_norm() {
    let x = randn_tensor::<f64>(vec![3, 2], 1.0, &mut seeded_rng(6, "fd"));
    let ones = finite_diff_grad(&mut |t| t.data().iter().sum(), &x, 1e-5);
    assert_close(ones.data(), &vec![1.0; 6], 1e-9);
    let grad = finite_diff_grad(
        &mut |t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(),
        &x,
        1e-5,
    );
    assert_close(grad.data(), f64s(&x), 1e-9);
}

#[test]
fn finite_diff_matches_analytic_softmax_jacobian() {
    // f(x) = softmax(x) . a ; analytic grad = J^T a with
    // J = diag(s) - s s^T
    let mut r = seeded_rng(7, "softmax-jac");
    let x = randn_tensor::<f64>(vec![5], 1.0, &mut r);
    let a = randn_tensor::<f64>(vec![5], 1.0, &mut r);
    let fd = finite_diff_grad(
        &mut |t| {
            let s = softmax(t, 0).unwrap();
            s.data().iter().zip(a.data()).map(|(x, y)| x * y).sum()
        },
        &x,
        1e-5,
    );
    let s = softmax(&x, 0).unwrap();
    let dot: f64 = s.data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
    let analytic: Vec<f64> = s
        .data()
        .iter()
        .zip(a.data())
        .map(|(&si, &ai)| si * (ai - dot))
        .collect();
    assert_close(fd.data(), &analytic, 1e-8);
}

// Backward implementations against central differences (f64, eps 1e-5,
// 1e-4 relative tolerance).

fn check_backward(
    forward: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    cograd: &Tensor<f64>,
) {
    let analytic = backward(x, cograd);
    let fd = finite_diff_grad(
        &mut |t| {
            let y = forward(t);
            y.data().iter().zip(cograd.data()).map(|(a, b)| a * b).sum()
        },
        x,
        1e-5,
    );
    let err = max_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "backward mismatch: {err}");
}

#[test]
fn matmul_backward_matches_fd() {
    let mut r = seeded_rng(8, "mm-bwd");
    let a = randn_tensor::<f64>(vec![3, 4], 1.0, &mut r);
    let b = randn_tensor::<f64>(vec![4, 2], 1.0, &mut r);
    let g = randn_tensor::<f64>(vec![3, 2], 1.0, &mut r);
    check_backward(
        |t| matmul(t, &b).unwrap(),
        |t, g| matmul_backward(g, t, &b).unwrap().0,
        &a,
        &g,
    );
    check_backward(
        |t| matmul(&a, t).unwrap(),
        |t, g| matmul_backward(g, &a, t).unwrap().1,
        &b,
        &g,
    );
}

#[test]
fn pool_backward_matches_fd() {
    let mut r = seeded_rng(9, "pool-bwd");
    let x = randn_tensor::<f64>(vec![2, 5, 4, 3], 1.0, &mut r);
    let g = randn_tensor::<f64>(vec![1, 2, 2, 3], 1.0, &mut r);
    check_backward(
        |t| adaptive_avg_pool3d(t, 1, 2, 2).unwrap(),
        |t, g| adaptive_avg_pool3d_backward(g, t.shape()).unwrap(),
        &x,
        &g,
    );
}

#[test]
fn softmax_backward_matches_fd() {
    let mut r = seeded_rng(10, "sm-bwd");
    let x = randn_tensor::<f64>(vec![3, 4], 1.0, &mut r);
    let g = randn_tensor::<f64>(vec![3, 4], 1.0, &mut r);
    check_backward(
        |t| softmax(t, 1).unwrap(),
        |t, g| {
            let y = softmax(t, 1).unwrap();
            softmax_backward(g, &y, 1).unwrap()
        },
        &x,
        &g,
    );
}

#[test]
fn gelu_backward_matches_fd() {
    let mut r = seeded_rng(11, "gelu-bwd");
    let x = randn_tensor::<f64>(vec![4, 3], 1.0, &mut r);
    let g = randn_tensor::<f64>(vec![4, 3], 1.0, &mut r);
    check_backward(|t| gelu(t), |t, g| gelu_backward(g, t).unwrap(), &x, &g);
}

#[test]
fn layer_norm_backward_matches_fd() {
    let mut r = seeded_rng(12, "ln-bwd");
    let x = randn_tensor::<f64>(vec![3, 6], 1.0, &mut r);
    let gamma = randn_tensor::<f64>(vec![6], 0.3, &mut r).map(|v| v + 1.0);
    let beta = randn_tensor::<f64>(vec![6], 0.3, &mut r);
    let g = randn_tensor::<f64>(vec![3, 6], 1.0, &mut r);
    // input gradient
    check_backward(
        |t| layer_norm(t, &gamma, &beta, 1e-5).unwrap().0,
        |t, g| {
            let (_, cache) = layer_norm(t, &gamma, &beta, 1e-5).unwrap();
            layer_norm_backward(g, t, &gamma, &cache).unwrap().0
        },
        &x,
        &g,
    );
    // parameter gradients
    check_backward(
        |gm| layer_norm(&x, gm, &beta, 1e-5).unwrap().0,
        |gm, g| {
            let (_, cache) = layer_norm(&x, gm, &beta, 1e-5).unwrap();
            layer_norm_backward(g, &x, gm, &cache).unwrap().1
        },
        &gamma,
        &g,
    );
}

#[test]
fn conv3d_backward_matches_fd() {
    let mut r = seeded_rng(13, "conv-bwd");
    let x = randn_tensor::<f64>(vec![2, 4, 4, 2], 1.0, &mut r);
    let k = randn_tensor::<f64>(vec![2, 3, 3, 2, 2], 0.5, &mut r);
    let g = randn_tensor::<f64>(vec![1, 4, 4, 2], 1.0, &mut r);
    check_backward(
        |t| conv3d_simple(t, &k, [1, 1, 1], [0, 1, 1]).unwrap(),
        |t, g| {
            conv3d_simple_backward(g, t, &k, [1, 1, 1], [0, 1, 1])
                .unwrap()
                .0
        },
        &x,
        &g,
    );
    check_backward(
        |kk| conv3d_simple(&x, kk, [1, 1, 1], [0, 1, 1]).unwrap(),
        |kk, g| {
            conv3d_simple_backward(g, &x, kk, [1, 1, 1], [0, 1, 1])
                .unwrap()
                .1
        },
        &k,
        &g,
    );
}

#[test]
fn mean_backward_matches_fd() {
    let mut r = seeded_rng(14, "mean-bwd");
    let x = randn_tensor::<f64>(vec![4, 3], 1.0, &mut r);
    let g = randn_tensor::<f64>(vec![3], 1.0, &mut r);
    check_backward(
        |t| mean_over_axis(t, 0).unwrap(),
        |t, g| mean_over_axis_backward(g, t.shape(), 0).unwrap(),
        &x,
        &g,
    );
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-80.0f64..80.0, 1..24)) {
        let n = values.len();
        let t = Tensor::<f64>::new(vec![n], values).unwrap();
        let s = softmax(&t, 0).unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pool_preserves_global_mean_when_divisible(
        seed in 0u64..1000,
        th in 1usize..4,
        tw in 1usize..4,
        fh in 1usize..4,
        fw in 1usize..4,
    ) {
        let (oh, ow) = (th, tw);
        let (h, w) = (th * fh, tw * fw);
        let x = randn_tensor::<f64>(vec![2, h, w, 3], 1.0, &mut seeded_rng(seed, "pool-mean"));
        let p = adaptive_avg_pool2d(&x, oh, ow).unwrap();
        let mean_in: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
        let mean_out: f64 = p.data().iter().sum::<f64>() / p.numel() as f64;
        prop_assert!((mean_in - mean_out).abs() < 1e-10);
    }

    #[test]
    fn matmul_associative_within_tolerance(seed in 0u64..1000) {
        let mut r = seeded_rng(seed, "assoc");
        let a = randn_tensor::<f64>(vec![3, 4], 1.0, &mut r);
        let b = randn_tensor::<f64>(vec![4, 5], 1.0, &mut r);
        let c = randn_tensor::<f64>(vec![5, 2], 1.0, &mut r);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let err = max_rel_err(&left, &right);
        prop_assert!(err < 1e-4, "associativity violated: {err}");
    }
}
