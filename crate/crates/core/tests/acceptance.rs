//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion.
//!
//! Criteria 1-5, 9 and 10 are properties of the implementation and fail the
//! test when violated. Criteria 6-8 are empirical orderings of trained
//! models; their outcome is reported but does not fail the build.

use std::time::Instant;

use mixnorm::diagnostics::{run_gradcheck, DEFAULT_CONFIGS};
use mixnorm::eval::{cosine_distances, retrieval_metrics};
use mixnorm::experiment::{run_ablation, run_experiment, AblationResult, ExperimentConfig, Suite};
use mixnorm::norm::{bn_forward_train, dmn_forward_train, dmn_forward_with_partition, NormLayerState};
use mixnorm::numerics::{RngStream, Tensor};
use mixnorm::partition::{partition_distribution, sample_partition, Partition, PartitionPolicy};
use mixnorm::train::metrics_csv;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn report(id: usize, passed: bool, detail: String) -> Outcome {
    println!("criterion {id}: {} {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, detail }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn domain_batch(domains: usize, per_domain: usize, channels: usize, rng: &mut RngStream) -> (Tensor<f64>, Vec<usize>) {
    let ids: Vec<usize> = (0..domains).flat_map(|d| vec![d; per_domain]).collect();
    let x = Tensor::from_fn(&[ids.len(), channels], |i| {
        let d = ids[i / channels] as f64;
        rng.normal() * (1.0 + d) + 3.0 * d
    });
    (x, ids)
}

fn random_state(channels: usize, rng: &mut RngStream) -> NormLayerState<f64> {
    let mut st = NormLayerState::new(channels);
    st.gamma = (0..channels).map(|_| 0.5 + rng.uniform()).collect();
    st.beta = (0..channels).map(|_| rng.normal()).collect();
    st
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let r = run_gradcheck(0, DEFAULT_CONFIGS, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst: Vec<String> = r
        .components
        .iter()
        .map(|c| format!("{}={:.1e}", c.name, c.worst_relative_error))
        .collect();
    report(1, r.passed() && secs < 60.0, format!("({}; {secs:.1}s)", worst.join(" ")))
}

fn equivalences() -> Outcome {
    let mut rng = RngStream::new(2);
    let (mut single, mut per_domain) = (0.0f64, 0.0f64);
    for domains in 2..=4 {
        let (x, ids) = domain_batch(domains, 5, 4, &mut rng);
        let st = random_state(4, &mut rng);
        let (a, _) = dmn_forward_with_partition(&x, &ids, &mut st.clone(), &Partition::single_group(domains)).unwrap();
        let (b, _) = bn_forward_train(&x, &mut st.clone()).unwrap();
        single = single.max(max_abs_diff(a.data(), b.data()));

        let policy = PartitionPolicy::new(domains, domains, Some(1)).unwrap();
        let (y, _) = dmn_forward_train(&x, &ids, &mut st.clone(), &policy, &mut rng).unwrap();
        for d in 0..domains {
            let rows: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == d).collect();
            let (yd, _) = bn_forward_train(&x.select_rows(&rows).unwrap(), &mut st.clone()).unwrap();
            per_domain = per_domain.max(max_abs_diff(y.select_rows(&rows).unwrap().data(), yd.data()));
        }
    }
    let policy = PartitionPolicy::d_minus_one(3).unwrap();
    let mut dmn = NormLayerState::<f32>::new(5);
    let mut bn = NormLayerState::<f32>::new(5);
    for _ in 0..100 {
        let (x, ids) = domain_batch(3, 6, 5, &mut rng);
        let x = x.cast::<f32>();
        dmn_forward_train(&x, &ids, &mut dmn, &policy, &mut rng).unwrap();
        bn_forward_train(&x, &mut bn).unwrap();
    }
    let running = dmn
        .running_mean
        .iter()
        .zip(&bn.running_mean)
        .chain(dmn.running_var.iter().zip(&bn.running_var))
        .map(|(a, b)| ((a - b).abs() / b.abs().max(1.0)) as f64)
        .fold(0.0, f64::max);
    report(
        2,
        single <= 1e-6 && per_domain <= 1e-6 && running <= 1e-6,
        format!("(single group {single:.1e}, fixed_c=1 {per_domain:.1e}, running stats {running:.1e})"),
    )
}

fn invariant() -> Outcome {
    let mut rng = RngStream::new(3);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for domains in 2..=4 {
        let policy = PartitionPolicy::d_minus_one(domains).unwrap();
        for _ in 0..50 {
            let (x, ids) = domain_batch(domains, 6, 3, &mut rng);
            let (_, cache) = dmn_forward_train(&x, &ids, &mut NormLayerState::new(3), &policy, &mut rng).unwrap();
            for g in &cache.groups {
                for ch in 0..3 {
                    let vals: Vec<f64> = g.samples.iter().map(|&n| cache.xhat.data()[n * 3 + ch]).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                    worst_mean = worst_mean.max(m.abs());
                    worst_var = worst_var.max((v - 1.0).abs());
                }
            }
        }
    }
    report(
        3,
        worst_mean <= 1e-5 && worst_var <= 1e-3,
        format!("(max |mean| {worst_mean:.1e}, max |var - 1| {worst_var:.1e})"),
    )
}

fn partitions() -> Outcome {
    let policy = PartitionPolicy::new(3, 2, None).unwrap();
    let hist = partition_distribution(&policy, &mut RngStream::new(4), 10_000).unwrap();
    let singleton = hist.frequency(&[1, 1, 1]);
    let mut rng = RngStream::new(44);
    let violations = (0..10_000)
        .filter(|_| {
            let p = sample_partition(&policy, &mut rng);
            let mut seen = [0; 3];
            p.groups().iter().flatten().for_each(|&d| seen[d] += 1);
            seen != [1, 1, 1] || p.groups().iter().any(Vec::is_empty)
        })
        .count();
    report(
        4,
        (singleton - 0.5).abs() <= 0.02 && violations == 0,
        format!("(singleton frequency {singleton:.4}, {violations} violations)"),
    )
}

fn brute_force(dist: &[Vec<f64>], q: &[usize], g: &[usize]) -> (f64, [f64; 3]) {
    let rank = |d: &[f64], j: usize| (0..d.len()).filter(|&h| d[h] < d[j] || (d[h] == d[j] && h < j)).count();
    let (mut ap_sum, mut cmc) = (0.0, [0.0; 3]);
    for (qi, &id) in q.iter().enumerate() {
        let ranks: Vec<usize> = (0..g.len()).filter(|&j| g[j] == id).map(|j| rank(&dist[qi], j)).collect();
        ap_sum += ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&s| s <= r).count() as f64 / (r + 1) as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        let best = *ranks.iter().min().unwrap();
        for (k, cut) in [1, 5, 10].into_iter().enumerate() {
            if best < cut {
                cmc[k] += 1.0;
            }
        }
    }
    (ap_sum / q.len() as f64, cmc.map(|c| c / q.len() as f64))
}

fn retrieval() -> Outcome {
    let mut rng = RngStream::new(5);
    let (mut map_err, mut cmc_equal) = (0.0f64, true);
    for _ in 0..10 {
        let q = Tensor::from_fn(&[30, 8], |_| rng.normal() as f32);
        let g = Tensor::from_fn(&[100, 8], |_| rng.normal() as f32);
        let gallery_ids: Vec<usize> = (0..100).map(|j| j % 15).collect();
        let query_ids: Vec<usize> = (0..30).map(|_| rng.index(15)).collect();
        let dist = cosine_distances(&q, &g);
        let got = retrieval_metrics(&dist, &query_ids, &gallery_ids).unwrap();
        let (map, cmc) = brute_force(&dist, &query_ids, &gallery_ids);
        map_err = map_err.max((got.map - map).abs());
        cmc_equal &= got.cmc == cmc;
    }
    report(5, map_err <= 1e-9 && cmc_equal, format!("(mAP error {map_err:.1e}, CMC identical: {cmc_equal})"))
}

fn acc(r: &AblationResult, config: &str) -> f64 {
    r.mean(config, |row| row.target_acc)
}

fn beats(r: &AblationResult, a: &str, b: &str) -> usize {
    SEEDS
        .iter()
        .filter(|&&s| r.row(a, s).unwrap().target_acc > r.row(b, s).unwrap().target_acc)
        .count()
}

fn components(r: &AblationResult, secs_per_run: f64) -> Outcome {
    let (base, dmn, full) = (acc(r, "baseline"), acc(r, "baseline+dmn"), acc(r, "baseline+dmn+dcr"));
    let wins = beats(r, "baseline+dmn", "baseline");
    report(
        6,
        base < dmn && dmn < full && wins >= 4 && secs_per_run < 180.0,
        format!(
            "(baseline {base:.4}, +dmn {dmn:.4}, +dmn+dcr {full:.4}; dmn beats baseline {wins}/5; {secs_per_run:.1}s/run)"
        ),
    )
}

fn dcr_effect(r: &AblationResult) -> Outcome {
    let (base, base_dcr) = (acc(r, "baseline"), acc(r, "baseline+dcr"));
    let (dmn, dmn_dcr) = (acc(r, "baseline+dmn"), acc(r, "baseline+dmn+dcr"));
    report(
        7,
        base_dcr <= base && dmn_dcr > dmn,
        format!("(bn {base:.4} -> +dcr {base_dcr:.4}; dmn {dmn:.4} -> +dcr {dmn_dcr:.4})"),
    )
}

fn sampling(r: &AblationResult) -> Outcome {
    let (rs, us, mix) = (acc(r, "rs_baseline"), acc(r, "us_baseline"), acc(r, "us_mixnorm"));
    report(
        8,
        mix >= rs && mix >= us,
        format!("(rs baseline {rs:.4}, us baseline {us:.4}, us mixnorm {mix:.4})"),
    )
}

fn center_distances(r: &AblationResult) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (with, without) in [("baseline+dcr", "baseline"), ("baseline+dmn+dcr", "baseline+dmn")] {
        let smaller = SEEDS
            .iter()
            .filter(|&&s| r.row(with, s).unwrap().center_dist < r.row(without, s).unwrap().center_dist)
            .count();
        ok &= smaller == SEEDS.len();
        lines.push(format!(
            "{with} {:.4} vs {without} {:.4}, smaller on {smaller}/5",
            r.mean(with, |row| row.center_dist),
            r.mean(without, |row| row.center_dist)
        ));
    }
    report(9, ok, format!("({})", lines.join("; ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::preset("mixnorm_full").unwrap();
    let bytes: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let run = run_experiment(&cfg).unwrap();
            let path = dir.path().join(format!("{name}.csv"));
            std::fs::write(&path, metrics_csv(&run.metrics)).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect();
    report(10, bytes[0] == bytes[1], format!("({} bytes)", bytes[0].len()))
}

fn main() {
    let base = ExperimentConfig::default();
    let mut outcomes = vec![gradients(), equivalences(), invariant(), partitions(), retrieval()];

    let start = Instant::now();
    let dcr = run_ablation(&base, Suite::DcrBaseline, &SEEDS, None).unwrap();
    let per_run = start.elapsed().as_secs_f64() / dcr.rows.len() as f64;
    let sampled = run_ablation(&base, Suite::Sampling, &SEEDS, None).unwrap();
    outcomes.push(components(&dcr, per_run));
    outcomes.push(dcr_effect(&dcr));
    outcomes.push(sampling(&sampled));
    outcomes.push(center_distances(&dcr));
    outcomes.push(determinism());

    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    let broken: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed && !(6..=8).contains(&o.id))
        .map(|o| format!("criterion {} {}", o.id, o.detail))
        .collect();
    if !broken.is_empty() {
        eprintln!("broken properties:\n{}", broken.join("\n"));
        std::process::exit(1);
    }
}
