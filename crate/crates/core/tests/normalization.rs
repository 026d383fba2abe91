use mixnorm::norm::{
    bn_forward_train, dmn_backward, dmn_forward_train, dmn_forward_with_partition,
    norm_forward_eval, Mode, NormLayerState,
};
use mixnorm::numerics::{finite_diff_grad, RngStream, Tensor};
use mixnorm::partition::{Partition, PartitionPolicy};

/// Batch with `per_domain` samples of each of `domains` domains, offset and
/// scaled per domain.
fn domain_batch(domains: usize, per_domain: usize, shape_tail: &[usize], rng: &mut RngStream) -> (Tensor<f64>, Vec<usize>) {
    let ids: Vec<usize> = (0..domains).flat_map(|d| vec![d; per_domain]).collect();
    let mut shape = vec![ids.len()];
    shape.extend_from_slice(shape_tail);
    let per: usize = shape_tail.iter().product();
    let mut x = Tensor::from_fn(&shape, |_| rng.normal());
    for (i, &d) in ids.iter().enumerate() {
        for v in &mut x.data_mut()[i * per..(i + 1) * per] {
            *v = *v * (1.0 + d as f64) + 3.0 * d as f64;
        }
    }
    (x, ids)
}

fn random_state(channels: usize, rng: &mut RngStream) -> NormLayerState<f64> {
    let mut st = NormLayerState::new(channels);
    st.gamma = (0..channels).map(|_| 0.5 + rng.uniform()).collect();
    st.beta = (0..channels).map(|_| rng.normal()).collect();
    st
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn two_domain_worked_example() {
    let x = Tensor::new(vec![4, 1], vec![1.0, 3.0, 10.0, 14.0]).unwrap();
    let mut st = NormLayerState::<f64>::new(1).with_eps(1e-14);
    let p = Partition::singletons(2);
    let (y, _) = dmn_forward_with_partition(&x, &[0, 0, 1, 1], &mut st, &p).unwrap();
    assert!(max_abs_diff(y.data(), &[-1.0, 1.0, -1.0, 1.0]) < 1e-9);
}

#[test]
fn single_group_equals_batch_norm() {
    let mut rng = RngStream::new(1);
    for domains in 2..=4 {
        let (x, ids) = domain_batch(domains, 3, &[4, 2, 2], &mut rng);
        let st = random_state(4, &mut rng);
        let (dmn, _) = dmn_forward_with_partition(&x, &ids, &mut st.clone(), &Partition::single_group(domains)).unwrap();
        let (bn, _) = bn_forward_train(&x, &mut st.clone()).unwrap();
        assert!(max_abs_diff(dmn.data(), bn.data()) <= 1e-6);
    }
}

#[test]
fn fixed_c1_equals_independent_domain_norms() {
    let mut rng = RngStream::new(2);
    for domains in 2..=4 {
        let (x, ids) = domain_batch(domains, 4, &[3], &mut rng);
        let st = random_state(3, &mut rng);
        let policy = PartitionPolicy::new(domains, domains, Some(1)).unwrap();
        let (y, _) = dmn_forward_train(&x, &ids, &mut st.clone(), &policy, &mut rng).unwrap();
        for d in 0..domains {
            let rows: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == d).collect();
            let (yd, _) = bn_forward_train(&x.select_rows(&rows).unwrap(), &mut st.clone()).unwrap();
            let got = y.select_rows(&rows).unwrap();
            assert!(max_abs_diff(got.data(), yd.data()) <= 1e-6);
        }
    }
}

#[test]
fn running_stats_match_batch_norm_over_100_batches() {
    let mut rng = RngStream::new(3);
    let policy = PartitionPolicy::d_minus_one(3).unwrap();
    let mut dmn = NormLayerState::<f32>::new(5);
    let mut bn = NormLayerState::<f32>::new(5);
    for _ in 0..100 {
        let (x, ids) = domain_batch(3, 6, &[5], &mut rng);
        let x = x.cast::<f32>();
        dmn_forward_train(&x, &ids, &mut dmn, &policy, &mut rng).unwrap();
        bn_forward_train(&x, &mut bn).unwrap();
    }
    for (a, b) in dmn.running_mean.iter().zip(&bn.running_mean) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    for (a, b) in dmn.running_var.iter().zip(&bn.running_var) {
        assert!((a - b).abs() / b.abs().max(1.0) <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn normalized_values_are_standardized_within_each_group() {
    let mut rng = RngStream::new(4);
    for domains in 2..=4 {
        let policy = PartitionPolicy::d_minus_one(domains).unwrap();
        for _ in 0..25 {
            let (x, ids) = domain_batch(domains, 5, &[3, 2, 1], &mut rng);
            let mut st = NormLayerState::<f64>::new(3);
            let (_, cache) = dmn_forward_train(&x, &ids, &mut st, &policy, &mut rng).unwrap();
            let (c, s) = (3, 2);
            for g in &cache.groups {
                for ch in 0..c {
                    let vals: Vec<f64> = g
                        .samples
                        .iter()
                        .flat_map(|&n| (0..s).map(move |k| (n * c + ch) * s + k))
                        .map(|i| cache.xhat.data()[i])
                        .collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                    assert!(m.abs() <= 1e-5);
                    assert!((v - 1.0).abs() <= 1e-3 && v <= 1.0 + 1e-12, "var {v}");
                }
            }
        }
    }
}

#[test]
fn backward_matches_finite_differences_on_20_configs() {
    let mut rng = RngStream::new(5);
    for cfg in 0..24 {
        let domains = 2 + cfg % 3;
        let tail: Vec<usize> = if cfg % 2 == 0 { vec![2, 2, 2] } else { vec![3] };
        // Two-sample scalar groups have x̂ = ±1 for any x: nothing to check.
        let (x, ids) = domain_batch(domains, 3 + cfg % 3, &tail, &mut rng);
        let channels = tail[0];
        let st = random_state(channels, &mut rng);
        let policy = PartitionPolicy::d_minus_one(domains).unwrap();
        let (_, cache) = dmn_forward_train(&x, &ids, &mut st.clone(), &policy, &mut rng).unwrap();
        let partition = cache.partition.clone().unwrap();
        let w = Tensor::from_fn(x.shape(), |_| rng.normal());
        let f = |x: &Tensor<f64>, st: &NormLayerState<f64>| -> f64 {
            let (y, _) = dmn_forward_with_partition(x, &ids, &mut st.clone(), &partition).unwrap();
            y.dot(&w).unwrap()
        };
        let (gx, gg, gb) = dmn_backward(&w, &cache, &st).unwrap();
        let nx = finite_diff_grad(|x| f(x, &st), &x, 1e-5).unwrap();
        let vec_t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        let ng = finite_diff_grad(
            |g| {
                let mut s = st.clone();
                s.gamma = g.data().to_vec();
                f(&x, &s)
            },
            &vec_t(&st.gamma),
            1e-5,
        )
        .unwrap();
        let nb = finite_diff_grad(
            |b| {
                let mut s = st.clone();
                s.beta = b.data().to_vec();
                f(&x, &s)
            },
            &vec_t(&st.beta),
            1e-5,
        )
        .unwrap();
        for (a, n) in [(gx.data(), nx.data()), (&gg[..], ng.data()), (&gb[..], nb.data())] {
            let err = mixnorm::diagnostics::gradient_error(a, n);
            assert!(err <= 1e-6, "config {cfg}: {err}");
        }
    }
}

#[test]
fn all_ones_upstream_gradient() {
    let mut rng = RngStream::new(6);
    let (x, ids) = domain_batch(3, 4, &[2, 2, 2], &mut rng);
    let st = random_state(2, &mut rng);
    let (_, cache) = dmn_forward_with_partition(&x, &ids, &mut st.clone(), &Partition::singletons(3)).unwrap();
    let (gx, gg, gb) = dmn_backward(&Tensor::full(x.shape(), 1.0), &cache, &st).unwrap();
    assert!(gg.iter().all(|g| g.abs() < 1e-9));
    assert!(gb.iter().all(|&b| b == 12.0 * 4.0));
    assert!(gx.data().iter().all(|g| g.abs() < 1e-9));
}

#[test]
fn eval_is_a_per_sample_map() {
    let mut rng = RngStream::new(7);
    let mut st = random_state(3, &mut rng);
    st.running_mean = vec![0.5, -1.0, 2.0];
    st.running_var = vec![2.0, 0.5, 1.5];
    st.mode = Mode::Eval;
    let x = Tensor::from_fn(&[8, 3], |_| rng.normal());
    let y = norm_forward_eval(&x, &st).unwrap();
    let mut perm: Vec<usize> = (0..8).collect();
    rng.shuffle(&mut perm);
    let yp = norm_forward_eval(&x.select_rows(&perm).unwrap(), &st).unwrap();
    assert_eq!(yp, y.select_rows(&perm).unwrap());
    for i in 0..8 {
        let single = norm_forward_eval(&x.select_rows(&[i]).unwrap(), &st).unwrap();
        assert_eq!(single.data(), y.row(i));
    }
}

#[test]
fn running_stats_converge_to_population() {
    let mut rng = RngStream::new(8);
    let policy = PartitionPolicy::d_minus_one(3).unwrap();
    let mut st = NormLayerState::<f32>::new(2);
    st.beta = vec![0.7, -0.3];
    // Domain d draws every channel from N(d, 1); the population mean is 1.
    let ids: Vec<usize> = (0..3).flat_map(|d| vec![d; 64]).collect();
    for _ in 0..200 {
        let x = Tensor::from_fn(&[ids.len(), 2], |i| (ids[i / 2] as f64 + rng.normal()) as f32);
        dmn_forward_train(&x, &ids, &mut st, &policy, &mut rng).unwrap();
    }
    st.mode = Mode::Eval;
    let y = norm_forward_eval(&Tensor::full(&[1, 2], 1.0f32), &st).unwrap();
    for (out, beta) in y.data().iter().zip(&st.beta) {
        assert!((out - beta).abs() < 0.05, "{out} vs {beta}");
    }
}
