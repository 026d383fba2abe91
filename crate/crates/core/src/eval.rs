//! Evaluation: unseen-domain accuracy, retrieval CMC/mAP, domain-center
//! diagnostics and a 2-D PCA projection.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// Ranks reported for CMC.
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Top-1 accuracy of the classifier head.
pub fn evaluate_classification(model: &Model<f32>, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (_, logits) = model.forward_eval(&dataset.features)?;
    Ok(accuracy(&logits, &dataset.class_ids))
}

pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Eval-mode embeddings of a dataset.
pub fn embed(model: &Model<f32>, dataset: &LabeledDataset) -> Result<Tensor<f32>> {
    Ok(model.forward_eval(&dataset.features)?.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    /// CMC at ranks 1, 5, 10.
    pub cmc: [f64; 3],
}

fn normalized(x: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..x.batch())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Cosine distance matrix, `queries × gallery`.
pub fn cosine_distances(query: &Tensor<f32>, gallery: &Tensor<f32>) -> Vec<Vec<f64>> {
    let q = normalized(query);
    let g = normalized(gallery);
    q.iter()
        .map(|qr| {
            g.iter()
                .map(|gr| 1.0 - qr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect()
}

/// mAP and CMC from a distance matrix. Gallery items are ranked by
/// ascending distance, ties by gallery index.
pub fn retrieval_metrics(
    dist: &[Vec<f64>],
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<RetrievalReport> {
    if query_ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut ap_sum = 0.0;
    let mut cmc_hits = [0usize; 3];
    for (qi, &qid) in query_ids.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
        order.sort_by(|&a, &b| dist[qi][a].total_cmp(&dist[qi][b]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank, &g) in order.iter().enumerate() {
            if gallery_ids[g] == qid {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first_hit.get_or_insert(rank);
            }
        }
        let first = first_hit.ok_or(Error::QueryNotInGallery(qid))?;
        ap_sum += precision_sum / hits as f64;
        for (k, &r) in CMC_RANKS.iter().enumerate() {
            if first < r {
                cmc_hits[k] += 1;
            }
        }
    }
    let nq = query_ids.len() as f64;
    Ok(RetrievalReport {
        map: ap_sum / nq,
        cmc: cmc_hits.map(|h| h as f64 / nq),
    })
}

/// Cosine-distance retrieval of query embeddings against the gallery.
pub fn evaluate_retrieval(
    model: &Model<f32>,
    query: &LabeledDataset,
    gallery: &LabeledDataset,
) -> Result<RetrievalReport> {
    let q = embed(model, query)?;
    let g = embed(model, gallery)?;
    retrieval_metrics(&cosine_distances(&q, &g), &query.class_ids, &gallery.class_ids)
}

/// `‖mean(domain) − mean(all)‖` per domain id `0..=max`.
pub fn domain_center_stats(features: &Tensor<f32>, domain_ids: &[usize]) -> Result<Vec<f64>> {
    let (n, dim) = features.dims2()?;
    if domain_ids.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} domain ids for {n} features",
            domain_ids.len()
        )));
    }
    let domains = domain_ids.iter().max().map_or(0, |&d| d + 1);
    let mut sums = vec![vec![0.0f64; dim]; domains];
    let mut counts = vec![0usize; domains];
    let mut global = vec![0.0f64; dim];
    for (i, &d) in domain_ids.iter().enumerate() {
        counts[d] += 1;
        for (k, &v) in features.row(i).iter().enumerate() {
            sums[d][k] += v as f64;
            global[k] += v as f64;
        }
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidArgument("need samples from >= 2 domains".into()));
    }
    for g in &mut global {
        *g /= n as f64;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c == 0 {
                return 0.0;
            }
            s.iter()
                .zip(&global)
                .map(|(&v, &g)| (v / c as f64 - g).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Top-2 principal-component coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `N × 2`, first column along the leading component.
    pub coords: Tensor<f64>,
    /// Variance captured by each component.
    pub variances: [f64; 2],
    /// Set when the input has (numerically) zero variance.
    pub degenerate: bool,
}

/// Projects onto the two leading principal components found by power
/// iteration with deflation. Each component's sign is fixed so its largest
/// entry is positive.
pub fn pca_project_2d(features: &Tensor<f64>) -> Result<Projection> {
    let (n, dim) = features.dims2()?;
    if n < 3 {
        return Err(Error::InvalidArgument("PCA needs at least 3 points".into()));
    }
    let mean = features.mean_axes(&[0])?;
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            features
                .row(i)
                .iter()
                .zip(mean.data())
                .map(|(v, m)| v - m)
                .collect()
        })
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in &centered {
        for a in 0..dim {
            for b in 0..dim {
                cov[a][b] += row[a] * row[b] / n as f64;
            }
        }
    }
    let trace: f64 = (0..dim).map(|a| cov[a][a]).sum();
    if trace <= 1e-300 {
        return Ok(Projection {
            coords: Tensor::zeros(&[n, 2]),
            variances: [0.0; 2],
            degenerate: true,
        });
    }
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut variances = [0.0; 2];
    for (k, var) in variances.iter_mut().enumerate() {
        // Deterministic start with weight on every axis.
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * i as f64 + k as f64 * 0.37 * (i % 3) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut w: Vec<f64> = (0..dim)
                .map(|a| (0..dim).map(|b| cov[a][b] * v[b]).sum())
                .collect();
            for c in &components {
                let d: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-15 * trace {
                lambda = 0.0;
                v = vec![0.0; dim];
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-13 {
                break;
            }
        }
        if let Some(big) = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        {
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        *var = lambda;
        components.push(v);
    }
    let mut coords = Tensor::zeros(&[n, 2]);
    for (i, row) in centered.iter().enumerate() {
        for k in 0..2 {
            coords.row_mut(i)[k] = row.iter().zip(&components[k]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Projection {
        coords,
        variances,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn single_correct_item() {
        let r = retrieval_metrics(&[vec![0.3]], &[4], &[4]).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn ap_of_second_rank() {
        let r = retrieval_metrics(&[vec![0.1, 0.5]], &[1], &[2, 1]).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(r.cmc[0], 0.0);
        assert_eq!(r.cmc[1], 1.0);
    }

    #[test]
    fn missing_identity_is_named() {
        let err = retrieval_metrics(&[vec![0.1]], &[7], &[2]).unwrap_err();
        assert!(matches!(err, Error::QueryNotInGallery(7)));
    }

    #[test]
    fn center_stats_examples() {
        let x = Tensor::<f32>::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
        let d = domain_center_stats(&x, &[0, 0, 1, 1]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
        assert!(domain_center_stats(&x, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn pca_of_line_and_degenerate() {
        let x = Tensor::from_fn(&[10, 3], |i| {
            let t = (i / 3) as f64;
            [1.0, 2.0, -1.0][i % 3] * t
        });
        let p = pca_project_2d(&x).unwrap();
        assert!(p.coords.data().chunks(2).all(|c| c[1].abs() < 1e-9));
        let z = pca_project_2d(&Tensor::full(&[5, 3], 2.0)).unwrap();
        assert!(z.degenerate);
        assert!(z.coords.data().iter().all(|&v| v == 0.0));
        assert!(pca_project_2d(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn pca_isotropic_and_rotation() {
        let mut rng = RngStream::new(12);
        let iso = Tensor::from_fn(&[1000, 2], |_| rng.normal());
        let p = pca_project_2d(&iso).unwrap();
        assert!(p.variances[0] >= p.variances[1]);
        assert!(p.variances[1] / p.variances[0] > 0.8);
        // 2-D input: projection is a rigid motion.
        let pts = Tensor::from_fn(&[20, 2], |i| ((i * 7919) % 23) as f64 * if i % 2 == 0 { 1.0 } else { 0.3 });
        let q = pca_project_2d(&pts).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let d0 = ((pts.row(i)[0] - pts.row(j)[0]).powi(2) + (pts.row(i)[1] - pts.row(j)[1]).powi(2)).sqrt();
                let d1 = ((q.coords.row(i)[0] - q.coords.row(j)[0]).powi(2) + (q.coords.row(i)[1] - q.coords.row(j)[1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-8);
            }
        }
    }
}
