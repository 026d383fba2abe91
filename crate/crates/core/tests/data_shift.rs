use std::collections::HashSet;

use mixnorm::data::{DataConfig, LabeledDataset, RsSampler, UsSampler};
use mixnorm::numerics::RngStream;

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features; returns training accuracy.
fn linear_probe(x: &[Vec<f64>], y: &[usize], classes: usize) -> f64 {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..dim).map(|j| (r[j] - mean[j]) / sd[j]).collect())
        .collect();
    let mut w = vec![vec![0.0; dim + 1]; classes];
    let scores = |w: &[Vec<f64>], r: &[f64]| -> Vec<f64> {
        w.iter().map(|wc| wc[dim] + wc[..dim].iter().zip(r).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        for (r, &label) in z.iter().zip(y) {
            let s = scores(&w, r);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / total - if c == label { 1.0 } else { 0.0 };
                for j in 0..dim {
                    grad[c][j] += g * r[j] / n;
                }
                grad[c][dim] += g / n;
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, b) in wc.iter_mut().zip(gc) {
                *a -= 0.5 * b;
            }
        }
    }
    let correct = z
        .iter()
        .zip(y)
        .filter(|(r, &label)| {
            let s = scores(&w, r);
            let best = (0..classes).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            best == label
        })
        .count();
    correct as f64 / n
}

fn rows(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    (0..ds.len()).map(|i| ds.features.row(i).iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn domain_id_is_linearly_decodable() {
    let suite = DataConfig::default().build().unwrap();
    let refs: Vec<&LabeledDataset> = suite.sources.iter().collect();
    let pooled = LabeledDataset::concat(&refs).unwrap();
    let acc = linear_probe(&rows(&pooled), &pooled.domain_ids, 3);
    assert!(acc > 0.9, "domain probe accuracy {acc}");
}

#[test]
fn target_never_enters_training_batches() {
    let suite = DataConfig::default().build().unwrap();
    let key = |r: &[f32]| r.iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let mut held_out = HashSet::new();
    for ds in [&suite.target, &suite.query, &suite.gallery] {
        for i in 0..ds.len() {
            held_out.insert(key(ds.features.row(i)));
        }
    }
    let mut us = UsSampler::new(&suite.sources, 8, 4, RngStream::new(1)).unwrap();
    let mut rs = RsSampler::new(&suite.sources, 96, 4, RngStream::new(1)).unwrap();
    for _ in 0..200 {
        for batch in [us.next_batch(), rs.next_batch()] {
            for i in 0..batch.len() {
                assert!(!held_out.contains(&key(batch.features.row(i))));
            }
        }
    }
    for spec in &suite.source_specs {
        assert_ne!(spec.style_shift, suite.target_spec.style_shift);
    }
}

#[test]
fn us_batches_are_balanced() {
    let suite = DataConfig::default().build().unwrap();
    let mut us = UsSampler::new(&suite.sources, 4, 2, RngStream::new(2)).unwrap();
    for _ in 0..100 {
        let b = us.next_batch();
        assert_eq!(b.len(), 24);
        assert_eq!(b.domain_counts(3), vec![8, 8, 8]);
    }
}

#[test]
fn rs_domain_counts_follow_binomial() {
    let cfg = DataConfig {
        samples_per_id: 5,
        ..DataConfig::default()
    };
    let mut suite = cfg.build().unwrap();
    // Unequal domain sizes: 100, 60 and 40 samples.
    suite.sources[1] = suite.sources[1].subset(&(0..60).collect::<Vec<_>>()).unwrap();
    suite.sources[2] = suite.sources[2].subset(&(0..40).collect::<Vec<_>>()).unwrap();
    let mut rs = RsSampler::new(&suite.sources, 24, 1, RngStream::new(3)).unwrap();
    let batches = 1000;
    let mut totals = [0usize; 3];
    for _ in 0..batches {
        let b = rs.next_batch();
        assert_eq!(b.domain_counts(3).iter().sum::<usize>(), 24);
        for (t, c) in totals.iter_mut().zip(b.domain_counts(3)) {
            *t += c;
        }
    }
    for (d, size) in [100.0, 60.0, 40.0].into_iter().enumerate() {
        let p = size / 200.0;
        let expected = 24.0 * p;
        let mean = totals[d] as f64 / batches as f64;
        let sd = (24.0 * p * (1.0 - p) / batches as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sd, "domain {d}: {mean} vs {expected}");
    }
}

#[test]
fn generation_is_deterministic() {
    let a = DataConfig::default().build().unwrap();
    let b = DataConfig::default().build().unwrap();
    assert_eq!(a.sources, b.sources);
    assert_eq!(a.target, b.target);
    let mut other = DataConfig::default();
    other.seed += 1;
    assert_ne!(other.build().unwrap().sources, a.sources);
}
