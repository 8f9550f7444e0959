use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, random_projection, CheckOptions};
use crate::tensor::pixel_unshuffle;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand32(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn assert_grad_ok(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let report = check_gradients(name, inputs, CheckOptions::default(), build).unwrap();
    assert!(report.passed(), "{report:?}");
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv_full_overlap_center_is_nine() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 1, 1).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(t.value(y).data()[4], 9.0);
    // corners see four taps
    assert_eq!(t.value(y).data()[0], 4.0);
}

#[test]
fn conv_dilated_ramp_matches_nine_term_sum() {
    // Oracle: taps at rows/cols {0,2,4} of the 1..25 ramp.
    let oracle: f32 = [0usize, 2, 4]
        .iter()
        .flat_map(|&r| [0usize, 2, 4].map(move |c| (r * 5 + c + 1) as f32))
        .sum();
    assert_eq!(oracle, 117.0);

    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| (i + 1) as f32));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 0, 2).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data()[0], oracle);
}

#[test]
fn conv_zero_weight_annihilates() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(rand32(&[2, 3, 6, 7], 1, -1.0, 1.0));
    let w = t.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.conv2d(x, w, b, 2, 1, 1).unwrap();
    // H' = (6 + 2 - 2 - 1)/2 + 1 = 3, W' = (7 + 2 - 2 - 1)/2 + 1 = 4
    assert_eq!(t.value(y).shape(), &[2, 4, 3, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_rejects_bad_arguments() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.conv2d(x, w, b, 1, 1, 1), Err(Error::InvalidArgument(_))));
    let w2 = t.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(t.conv2d(x, w2, b, 1, 1, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(t.conv2d(x, w2, b, 0, 1, 1), Err(Error::InvalidArgument(_))));
}

/// Zero-inflates a k×k kernel to the footprint of dilation `d`.
fn inflate(w: &Tensor<f32>, d: usize) -> Tensor<f32> {
    let (co, ci, k, _) = w.dims4().unwrap();
    let kd = d * (k - 1) + 1;
    let mut out = Tensor::zeros(&[co, ci, kd, kd]);
    for o in 0..co {
        for i in 0..ci {
            for y in 0..k {
                for x in 0..k {
                    out.data_mut()[((o * ci + i) * kd + y * d) * kd + x * d] =
                        w.data()[((o * ci + i) * k + y) * k + x];
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dilated_conv_equals_inflated_kernel(seed in any::<u64>(), d in 1usize..5, h in 3usize..10, w in 3usize..10) {
        let x = rand32(&[1, 2, h, w], seed, -1.0, 1.0);
        let k = rand32(&[3, 2, 3, 3], seed ^ 7, -1.0, 1.0);
        let bias = rand32(&[3], seed ^ 9, -1.0, 1.0);
        let mut t = Tape::<f32>::new();
        let (xv, kv, bv) = (t.constant(x), t.constant(k.clone()), t.constant(bias));
        let ki = t.constant(inflate(&k, d));
        let a = t.conv2d_same(xv, kv, bv, d).unwrap();
        let b = t.conv2d(xv, ki, bv, 1, d, 1).unwrap();
        let diff = t.value(a).max_abs_diff(t.value(b)).unwrap();
        prop_assert!(diff <= 1e-6, "diff {diff}");
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, n in 1usize..12) {
        let x = rand32(&[rows, n], seed, -50.0, 50.0);
        let mut t = Tape::<f32>::new();
        let xv = t.constant(x);
        let y = t.softmax_last_axis(xv).unwrap();
        for row in t.value(y).data().chunks(n) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-5, "row sum {s}");
        }
    }

    #[test]
    fn pixel_shuffle_inverts(seed in any::<u64>(), s in 1usize..5, c in 1usize..3, h in 1usize..4, w in 1usize..4) {
        let x = rand32(&[2, c * s * s, h, w], seed, -1.0, 1.0);
        let mut t = Tape::<f32>::new();
        let xv = t.constant(x.clone());
        let y = t.pixel_shuffle(xv, s).unwrap();
        prop_assert_eq!(t.value(y).shape(), &[2, c, h * s, w * s][..]);
        prop_assert_eq!(pixel_unshuffle(t.value(y), s).unwrap(), x);
    }
}

// --------------------------------------------------------------- pooling

#[test]
fn global_pool_examples() {
    let mut t = Tape::<f32>::new();
    let c = t.constant(Tensor::full(&[1, 2, 3, 3], 7.0));
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let y = t.global_pool_spatial(c, mode).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 2, 1, 1]);
        assert!(t.value(y).data().iter().all(|&v| v == 7.0));
    }
    let x = t.constant(t32(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mx = t.global_pool_spatial(x, PoolMode::Max).unwrap();
    let mn = t.global_pool_spatial(x, PoolMode::Mean).unwrap();
    assert_eq!(t.value(mx).data(), &[4.0]);
    assert_eq!(t.value(mn).data(), &[2.5]);

    let img = t32(&[1, 1, 2, 3], &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
    let flipped = t32(&[1, 1, 2, 3], &[4.0, 2.0, 1.0, 32.0, 16.0, 8.0]);
    let a = t.constant(img);
    let b = t.constant(flipped);
    let ma = t.global_pool_spatial(a, PoolMode::Mean).unwrap();
    let mb = t.global_pool_spatial(b, PoolMode::Mean).unwrap();
    assert_eq!(t.value(ma).data(), t.value(mb).data());
}

#[test]
fn max_pool_ties_route_to_lowest_index() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![3.0, 5.0, 5.0, 1.0]).unwrap());
    let y = t.global_pool_spatial(x, PoolMode::Max).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(&[1, 3, 1, 1], vec![2.0, 2.0, 1.0]).unwrap());
    let y = t.pool_across_channels(x, PoolMode::Max).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn channel_pool_examples() {
    let mut t = Tape::<f32>::new();
    let single = rand32(&[2, 1, 3, 4], 3, -1.0, 1.0);
    let x = t.constant(single.clone());
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let y = t.pool_across_channels(x, mode).unwrap();
        assert_eq!(t.value(y), &single);
    }
    let mut two = Tensor::full(&[1, 2, 2, 2], 2.0f32);
    two.data_mut()[4..].fill(4.0);
    let x = t.constant(two);
    let mx = t.pool_across_channels(x, PoolMode::Max).unwrap();
    let mn = t.pool_across_channels(x, PoolMode::Mean).unwrap();
    assert!(t.value(mx).data().iter().all(|&v| v == 4.0));
    assert!(t.value(mn).data().iter().all(|&v| v == 3.0));
    let z = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let mz = t.pool_across_channels(z, PoolMode::Max).unwrap();
    assert!(t.value(mz).data().iter().all(|&v| v == 0.0));
}

// ---------------------------------------------------- elementwise, struct

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f32>::new();
    let z = t.constant(Tensor::zeros(&[3]));
    let s = t.sigmoid(z).unwrap();
    assert!(t.value(s).data().iter().all(|&v| v == 0.5));

    let x = t.constant(rand32(&[2, 3, 4, 4], 4, -3.0, 3.0));
    let ones = t.constant(Tensor::full(&[2, 3, 1, 1], 1.0));
    let y = t.mul(x, ones).unwrap();
    assert_eq!(t.value(y), t.value(x));
    let ones_c = t.constant(Tensor::full(&[2, 1, 4, 4], 1.0));
    let y = t.mul(x, ones_c).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let a = t.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.value(c).shape(), &[1, 5, 3, 3]);

    let bad = t.constant(Tensor::zeros(&[2, 2, 4, 4]));
    assert!(matches!(t.mul(x, bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn sigmoid_stays_in_open_interval() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(rand32(&[1000], 5, -15.0, 15.0));
    let s = t.sigmoid(x).unwrap();
    assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn width_scores_examples() {
    let mut t = Tape::<f32>::new();
    // one-hot channel per width position: q = k = identity pattern
    let w = 3;
    let onehot = Tensor::from_fn(&[1, w, 1, w], |i| if i / w == i % w { 1.0 } else { 0.0 });
    let q = t.constant(onehot);
    let s = t.batched_width_scores(q, q).unwrap();
    let eye: Vec<f32> = (0..w * w).map(|i| if i / w == i % w { 1.0 } else { 0.0 }).collect();
    assert_eq!(t.value(s).data(), &eye[..]);

    let q = t.constant(t32(&[1, 1, 1, 2], &[1.0, 2.0]));
    let k = t.constant(t32(&[1, 1, 1, 2], &[3.0, 4.0]));
    let s = t.batched_width_scores(q, k).unwrap();
    // hand multiplication: [[1*3, 1*4], [2*3, 2*4]]
    assert_eq!(t.value(s).shape(), &[1, 1, 2, 2]);
    assert_eq!(t.value(s).data(), &[3.0, 4.0, 6.0, 8.0]);

    let z = t.constant(Tensor::zeros(&[1, 1, 1, 2]));
    let s = t.batched_width_scores(q, z).unwrap();
    assert!(t.value(s).data().iter().all(|&v| v == 0.0));

    let other = t.constant(Tensor::zeros(&[1, 2, 1, 2]));
    assert!(t.batched_width_scores(q, other).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    let y = t.softmax_last_axis(x).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let base = 0.7;
    let x = t.constant(Tensor::new(&[1, 2], vec![base, base + 3f64.ln()]).unwrap());
    let y = t.softmax_last_axis(x).unwrap();
    // closed form: e^0 / (e^0 + 3) = 0.25
    assert!((t.value(y).data()[0] - 0.25).abs() < 1e-12);
    assert!((t.value(y).data()[1] - 0.75).abs() < 1e-12);

    let r = rand64(&[2, 5], 11);
    let shifted = r.map(|v| v + 13.5);
    let a = t.constant(r);
    let b = t.constant(shifted);
    let ya = t.softmax_last_axis(a).unwrap();
    let yb = t.softmax_last_axis(b).unwrap();
    assert!(t.value(ya).max_abs_diff(t.value(yb)).unwrap() < 1e-12);
}

#[test]
fn pixel_shuffle_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(t32(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = t.pixel_shuffle(x, 2).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let r = t.constant(rand32(&[1, 3, 2, 2], 2, 0.0, 1.0));
    let y = t.pixel_shuffle(r, 1).unwrap();
    assert_eq!(t.value(y), t.value(r));
    assert!(t.pixel_shuffle(r, 2).is_err());
}

#[test]
fn transpose_examples() {
    let mut t = Tape::<f32>::new();
    let eye = t.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = t.transpose_last_two(eye).unwrap();
    assert_eq!(t.value(y), t.value(eye));
    let m = t.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = t.transpose_last_two(m).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    let r = t.constant(rand32(&[2, 3, 4], 8, -1.0, 1.0));
    let y = t.transpose_last_two(r).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 4, 3]);
    let z = t.transpose_last_two(y).unwrap();
    assert_eq!(t.value(z), t.value(r));
    let v = t.constant(Tensor::zeros(&[3]));
    assert!(t.transpose_last_two(v).is_err());
}

// -------------------------------------------------------------- backward

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(rand64(&[2, 3], 1));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_square_sum_is_two_x() {
    let mut t = Tape::<f64>::new();
    let data = rand64(&[4, 2], 2);
    let x = t.leaf(data.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    for (g, v) in t.grad(x).unwrap().data().iter().zip(data.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_accumulates_until_reset() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::full(&[3], 1.0));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    let mut other = Tape::<f64>::new();
    let y = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(t.backward(y), Err(Error::InvalidState(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::full(&[2], 3.0));
    let c = t.constant(Tensor::full(&[2], 2.0));
    let p = t.mul(x, c).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn operations_are_pure_and_repeatable() {
    let x = rand32(&[1, 2, 6, 6], 4, -1.0, 1.0);
    let w = rand32(&[3, 2, 3, 3], 5, -1.0, 1.0);
    let run = || {
        let mut t = Tape::<f32>::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.conv2d_same(xv, wv, b, 2).unwrap();
        let s = t.softmax_last_axis(y).unwrap();
        assert_eq!(t.value(xv), &x);
        t.value(s).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

// ----------------------------------------- finite-difference per operator

#[test]
fn fd_conv2d_all_geometries() {
    for (i, &(stride, pad, dil)) in [(1, 1, 1), (1, 4, 4), (2, 1, 1), (1, 0, 2), (2, 2, 2)].iter().enumerate() {
        let inputs = [rand64(&[2, 2, 5, 5], i as u64), rand64(&[3, 2, 3, 3], 10 + i as u64), rand64(&[3], 20)];
        assert_grad_ok("conv2d", &inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad, dil)?;
            random_projection(t, y, 1)
        });
    }
}

#[test]
fn fd_linear() {
    let inputs = [rand64(&[2, 4], 1), rand64(&[3, 4], 2), rand64(&[3], 3)];
    assert_grad_ok("linear", &inputs, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        random_projection(t, y, 2)
    });
}

#[test]
fn fd_pooling() {
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let inputs = [rand64(&[2, 3, 4, 5], 3)];
        assert_grad_ok("global_pool", &inputs, |t, v| {
            let y = t.global_pool_spatial(v[0], mode)?;
            random_projection(t, y, 3)
        });
        assert_grad_ok("channel_pool", &inputs, |t, v| {
            let y = t.pool_across_channels(v[0], mode)?;
            random_projection(t, y, 4)
        });
    }
}

#[test]
fn fd_elementwise_and_broadcast() {
    let a = rand64(&[2, 3, 4, 4], 1);
    let gate_c = rand64(&[2, 3, 1, 1], 2);
    let gate_s = rand64(&[2, 1, 4, 4], 3);
    assert_grad_ok("mul_c", &[a.clone(), gate_c.clone()], |t, v| {
        let s = t.sigmoid(v[1])?;
        let y = t.mul(v[0], s)?;
        random_projection(t, y, 5)
    });
    assert_grad_ok("mul_s_add_sub", &[a.clone(), gate_s.clone(), gate_c], |t, v| {
        let y = t.mul(v[0], v[1])?;
        let y = t.add(y, v[2])?;
        let y = t.sub(y, v[1])?;
        let y = t.leaky_relu(y, 0.1)?;
        let y = t.relu(y)?;
        let y = t.scale(y, 0.7)?;
        random_projection(t, y, 6)
    });
    assert_grad_ok("abs_square_mean", &[a], |t, v| {
        let y = t.abs(v[0])?;
        let y = t.square(y)?;
        t.mean(y)
    });
}

#[test]
fn fd_structural() {
    let a = rand64(&[1, 2, 3, 2], 1);
    let b = rand64(&[1, 3, 3, 2], 2);
    assert_grad_ok("concat", &[a, b], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        random_projection(t, y, 7)
    });
    let x = rand64(&[1, 8, 2, 3], 3);
    assert_grad_ok("pixel_shuffle", std::slice::from_ref(&x), |t, v| {
        let y = t.pixel_shuffle(v[0], 2)?;
        random_projection(t, y, 8)
    });
    assert_grad_ok("transpose_reshape_diff", &[x], |t, v| {
        let y = t.transpose_last_two(v[0])?;
        let y = t.reshape(y, &[2, 4, 3, 2])?;
        let y = t.diff(y, 1)?;
        let y = t.diff(y, 3)?;
        random_projection(t, y, 9)
    });
    let m = rand64(&[2, 2, 4, 3], 4);
    assert_grad_ok("diag_diff", &[m], |t, v| {
        let y = t.diag_diff(v[0])?;
        random_projection(t, y, 12)
    });
}

#[test]
fn diag_diff_examples() {
    let mut t = Tape::<f32>::new();
    let eye = t.constant(Tensor::from_fn(&[1, 2, 3, 3], |e| if (e % 9) / 3 == e % 3 { 1.0 } else { 0.0 }));
    let y = t.diag_diff(eye).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 2, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let ramp = t.constant(Tensor::from_fn(&[2, 3], |e| e as f32));
    let y = t.diag_diff(ramp).unwrap();
    // (r+1)·3 + (c+1) − (r·3 + c) = 4.
    assert_eq!(t.value(y).data(), &[4.0, 4.0]);
    let bad = t.constant(Tensor::zeros(&[3, 1]));
    assert!(t.diag_diff(bad).is_err());
}

#[test]
fn fd_attention_primitives() {
    let q = rand64(&[2, 3, 2, 4], 1);
    let k = rand64(&[2, 3, 2, 4], 2);
    assert_grad_ok("width_scores_softmax", &[q, k], |t, v| {
        let s = t.batched_width_scores(v[0], v[1])?;
        let m = t.softmax_last_axis(s)?;
        random_projection(t, m, 10)
    });
    let m = rand64(&[2, 2, 4, 4], 3);
    let f = rand64(&[2, 3, 2, 4], 4);
    assert_grad_ok("warp", &[m.clone(), f], |t, v| {
        let y = t.warp(v[0], v[1])?;
        random_projection(t, y, 11)
    });
    let m2 = rand64(&[2, 2, 4, 4], 5);
    assert_grad_ok("bmm", &[m.clone(), m2], |t, v| {
        let y = t.bmm(v[0], v[1])?;
        random_projection(t, y, 12)
    });
    assert_grad_ok("upscale_attention", &[m], |t, v| {
        let y = t.upscale_attention(v[0], 2)?;
        random_projection(t, y, 13)
    });
}

#[test]
fn fd_detects_corrupted_adjoint() {
    let inputs = [rand64(&[1, 2, 4, 4], 1), rand64(&[2, 2, 3, 3], 2), rand64(&[2], 3)];
    let opts = CheckOptions {
        fault: Some("conv2d"),
        ..CheckOptions::default()
    };
    let report = check_gradients("conv2d", &inputs, opts, |t, v| {
        let y = t.conv2d_same(v[0], v[1], v[2], 1)?;
        random_projection(t, y, 1)
    })
    .unwrap();
    assert!(!report.passed());
}

#[test]
fn fd_resize_bicubic() {
    for (oh, ow) in [(8, 10), (3, 5), (4, 4)] {
        let x = rand64(&[1, 2, 4, 5], 40 + oh as u64);
        assert_grad_ok("resize_bicubic", &[x], |t, v| {
            let y = t.resize_bicubic(v[0], oh, ow)?;
            random_projection(t, y, 13)
        });
    }
}

#[test]
fn resize_bicubic_matches_resampler() {
    let x = rand32(&[2, 3, 5, 7], 41, 0.0, 1.0);
    let mut t = Tape::<f32>::new();
    let v = t.constant(x.clone());
    let y = t.resize_bicubic(v, 10, 14).unwrap();
    let y = t.value(y).clone();
    for b in 0..2 {
        let want = crate::data::bicubic_resample(&x.index_first(b).unwrap(), 10, 14).unwrap();
        let got = y.index_first(b).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }
    let small = t.constant(Tensor::zeros(&[1, 1, 3, 8]));
    assert!(t.resize_bicubic(small, 6, 16).is_err());
}
