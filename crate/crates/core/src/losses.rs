//! Training objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const CENTER_LOSS_LAMBDA: f64 = 5e-4;
pub const DEFAULT_CENTER_RATE: f64 = 0.5;

/// A loss value and its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossValue<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(&[n, k]);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label];
        let g = grad.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            g[j] = (z - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok(LossValue {
        value: total * inv_n,
        grad,
    })
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HardPair {
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard triplet loss with Euclidean distances, averaged over anchors.
///
/// Ties resolve to the lowest sample index.
pub fn batch_hard_triplet<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    margin: T,
) -> Result<LossValue<T>> {
    let (value, grad, _) = batch_hard_triplet_detailed(embeddings, labels, margin)?;
    Ok(LossValue { value, grad })
}

pub fn batch_hard_triplet_detailed<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    margin: T,
) -> Result<(T, Tensor<T>, Vec<HardPair>)> {
    let (n, dim) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &m)| j != i && m == l) {
            return Err(Error::TripletPrecondition(format!(
                "label {l} has a single sample"
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::TripletPrecondition("batch holds a single label".into()));
    }

    let mut dist = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(embeddings.row(i), embeddings.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut total = T::zero();
    let mut grad = Tensor::zeros(&[n, dim]);
    let mut pairs = Vec::with_capacity(n);
    let inv_n = T::one() / T::from_usize_lossy(n);
    let tiny = T::lit(1e-12);
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        let (p, q) = (pos.expect("positive exists"), neg.expect("negative exists"));
        pairs.push(HardPair {
            positive: p,
            negative: q,
        });
        let hinge = dist[a * n + p] - dist[a * n + q] + margin;
        if hinge <= T::zero() {
            continue;
        }
        total += hinge;
        // d(d_ap)/d e_a = (e_a − e_p)/d_ap ; zero distance contributes no direction.
        for (other, sign) in [(p, T::one()), (q, -T::one())] {
            let d = dist[a * n + other];
            if d <= tiny {
                continue;
            }
            let coef = sign * inv_n / d;
            for k in 0..dim {
                let diff = embeddings.row(a)[k] - embeddings.row(other)[k];
                grad.row_mut(a)[k] += coef * diff;
                grad.row_mut(other)[k] -= coef * diff;
            }
        }
    }
    Ok((total * inv_n, grad, pairs))
}

/// Sum of squared distances of every sample to the batch mean.
pub fn dcr_loss<T: Scalar>(features: &Tensor<T>) -> Result<LossValue<T>> {
    let (n, dim) = features.dims2()?;
    let center = features.mean_axes(&[0])?;
    let c = center.data();
    let mut value = T::zero();
    let mut grad = Tensor::zeros(&[n, dim]);
    let two = T::lit(2.0);
    for i in 0..n {
        let row = features.row(i);
        let g = grad.row_mut(i);
        for k in 0..dim {
            let d = row[k] - c[k];
            value += d * d;
            g[k] = two * d;
        }
    }
    Ok(LossValue { value, grad })
}

/// Variant that pulls each domain's mean toward the batch mean:
/// `Σ_d ‖mean_d − mean‖²`.
pub fn dcr_domain_center_loss<T: Scalar>(
    features: &Tensor<T>,
    domain_ids: &[usize],
) -> Result<LossValue<T>> {
    let (n, dim) = features.dims2()?;
    if domain_ids.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} domain ids for {n} features",
            domain_ids.len()
        )));
    }
    let domains = domain_ids.iter().max().map_or(0, |&d| d + 1);
    let center = features.mean_axes(&[0])?;
    let mut sums = vec![T::zero(); domains * dim];
    let mut counts = vec![0usize; domains];
    for (i, &d) in domain_ids.iter().enumerate() {
        counts[d] += 1;
        for (s, &v) in sums[d * dim..(d + 1) * dim].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let two = T::lit(2.0);
    let mut value = T::zero();
    // offsets[d] = 2 (mean_d − mean); absent domains contribute nothing.
    let mut offsets = vec![T::zero(); domains * dim];
    let mut offset_sum = vec![T::zero(); dim];
    for d in 0..domains {
        if counts[d] == 0 {
            continue;
        }
        let k = T::from_usize_lossy(counts[d]);
        for j in 0..dim {
            let diff = sums[d * dim + j] / k - center.data()[j];
            value += diff * diff;
            offsets[d * dim + j] = two * diff;
            offset_sum[j] += two * diff;
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = Tensor::zeros(&[n, dim]);
    for (i, &d) in domain_ids.iter().enumerate() {
        let k = T::from_usize_lossy(counts[d]);
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = offsets[d * dim + j] / k - offset_sum[j] * inv_n;
        }
    }
    Ok(LossValue { value, grad })
}

/// Per-class feature centers for the center-loss baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters<T> {
    pub centers: Vec<Vec<T>>,
    pub update_rate: T,
}

impl<T: Scalar> ClassCenters<T> {
    pub fn zeros(classes: usize, dim: usize, update_rate: f64) -> Self {
        Self {
            centers: vec![vec![T::zero(); dim]; classes],
            update_rate: T::lit(update_rate),
        }
    }

    /// Moves each class center present in the batch toward that class's
    /// batch mean by `update_rate`.
    pub fn update(&mut self, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
        let (_, dim) = features.dims2()?;
        let classes = self.centers.len();
        let mut sums = vec![vec![T::zero(); dim]; classes];
        let mut counts = vec![0usize; classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for l in 0..classes {
            if counts[l] == 0 {
                continue;
            }
            let k = T::from_usize_lossy(counts[l]);
            for (c, &s) in self.centers[l].iter_mut().zip(&sums[l]) {
                *c += self.update_rate * (s / k - *c);
            }
        }
        Ok(())
    }
}

/// `Σ_i ‖r_i − c_{y_i}‖² / 2` with centers held fixed.
pub fn center_loss_value<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    centers: &ClassCenters<T>,
) -> Result<LossValue<T>> {
    let (n, dim) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} features",
            labels.len()
        )));
    }
    let classes = centers.centers.len();
    let mut value = T::zero();
    let mut grad = Tensor::zeros(&[n, dim]);
    let half = T::lit(0.5);
    for (i, &l) in labels.iter().enumerate() {
        let center = centers
            .centers
            .get(l)
            .ok_or(Error::LabelOutOfRange { label: l, classes })?;
        let row = features.row(i);
        let g = grad.row_mut(i);
        for k in 0..dim {
            let d = row[k] - center[k];
            value += half * d * d;
            g[k] = d;
        }
    }
    Ok(LossValue { value, grad })
}

/// Center loss followed by the damped center update.
pub fn center_loss<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    centers: &mut ClassCenters<T>,
) -> Result<LossValue<T>> {
    let loss = center_loss_value(features, labels, centers)?;
    centers.update(features, labels)?;
    Ok(loss)
}

/// `l_cls + l_tri + λ·l_reg`.
pub fn overall_loss<T: Scalar>(l_cls: T, l_tri: T, l_reg: T, lambda: T) -> T {
    l_cls + l_tri + lambda * l_reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, RngStream};

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn ce_uniform_logits() {
        let l = cross_entropy(&Tensor::<f64>::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-6);
        assert!((l.value - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn ce_saturates_to_zero() {
        let l = cross_entropy(&t2(1, 3, &[200.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(l.value >= 0.0 && l.value < 1e-12);
    }

    #[test]
    fn ce_gradient_and_rows() {
        let x = random(&[5, 3], 4);
        let labels = [0, 2, 1, 1, 0];
        let l = cross_entropy(&x, &labels).unwrap();
        let fd = finite_diff_grad(|z| cross_entropy(z, &labels).unwrap().value, &x, 1e-5).unwrap();
        assert!(max_relative_error(l.grad.data(), fd.data(), 1e-6) < 1e-6);
        for i in 0..5 {
            assert!(l.grad.row(i).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(matches!(
            cross_entropy(&x, &[0, 1, 2, 3, 0]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn triplet_identical_embeddings() {
        let x = Tensor::<f64>::full(&[4, 3], 0.5);
        let l = batch_hard_triplet(&x, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((l.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_separated_clusters() {
        let x = t2(4, 2, &[0.0, 0.0, 0.1, 0.0, 5.0, 0.0, 5.1, 0.0]);
        let l = batch_hard_triplet(&x, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_preconditions() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(
            batch_hard_triplet(&x, &[0, 0, 1], 0.3),
            Err(Error::TripletPrecondition(_))
        ));
        assert!(matches!(
            batch_hard_triplet(&x, &[2, 2, 2], 0.3),
            Err(Error::TripletPrecondition(_))
        ));
    }

    #[test]
    fn triplet_tie_break_lowest_index() {
        let x = t2(4, 1, &[0.0, 1.0, -1.0, 1.0]);
        // Anchor 0 with label 0: positives {1} ; negatives 2 and 3 both at distance 1.
        let (_, _, pairs) = batch_hard_triplet_detailed(&x, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(pairs[0].negative, 2);
    }

    #[test]
    fn dcr_examples() {
        assert_eq!(dcr_loss(&Tensor::<f64>::full(&[3, 2], 1.5)).unwrap().value, 0.0);
        let l = dcr_loss(&t2(2, 2, &[0.0, 0.0, 2.0, 0.0])).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);
        assert_eq!(l.grad.data(), &[-2.0, 0.0, 2.0, 0.0]);
        let x = random(&[6, 3], 8);
        let base = dcr_loss(&x).unwrap().value;
        let scaled = dcr_loss(&x.scale(3.0)).unwrap().value;
        assert!((scaled - 9.0 * base).abs() < 1e-10 * scaled);
    }

    #[test]
    fn dcr_domain_centers_gradient() {
        let x = random(&[7, 3], 2);
        let ids = [0, 1, 2, 0, 1, 2, 2];
        let l = dcr_domain_center_loss(&x, &ids).unwrap();
        let fd = finite_diff_grad(|z| dcr_domain_center_loss(z, &ids).unwrap().value, &x, 1e-5)
            .unwrap();
        assert!(max_relative_error(l.grad.data(), fd.data(), 1e-6) < 1e-6);
    }

    #[test]
    fn center_loss_examples() {
        let mut centers = ClassCenters::<f64>::zeros(2, 2, 0.5);
        centers.centers[1] = vec![1.0, 1.0];
        let at_center = t2(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(center_loss_value(&at_center, &[0, 1], &centers).unwrap().value, 0.0);
        let off = t2(1, 2, &[2.0, 0.0]);
        assert!((center_loss_value(&off, &[0], &centers).unwrap().value - 2.0).abs() < 1e-15);
        assert!(matches!(
            center_loss_value(&off, &[5], &centers),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
        center_loss(&off, &[0], &mut centers).unwrap();
        assert_eq!(centers.centers[0], vec![1.0, 0.0]);
        assert_eq!(centers.centers[1], vec![1.0, 1.0]);
    }

    #[test]
    fn overall_combination() {
        assert!((overall_loss(1.0, 0.5, 2.0, DEFAULT_LAMBDA) - 1.9f64).abs() < 1e-12);
        assert_eq!(overall_loss(1.0, 0.5, 7.0, 0.0), 1.5);
        assert!((overall_loss(0.0, 0.0, 3.0, 0.2) - 0.6f64).abs() < 1e-15);
    }
}
