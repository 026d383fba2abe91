//! Batch normalization and domain-aware mix-normalization.
//!
//! Both layers share one kernel: the batch is split into sample groups, each
//! group is standardized with its own per-channel mean and standard deviation
//! `sqrt(var + eps)`, and a single `gamma`/`beta` pair is applied on top.
//! Plain BN is the one-group case. Mix-normalization derives the groups from
//! a random [`Partition`] of the source domains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::partition::{sample_partition, Partition, PartitionPolicy};
use crate::scalar::Scalar;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// How training-time statistics fold into the evaluation pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningUpdate {
    /// One update per forward with the whole-batch mean and the
    /// total-variance combination of the group statistics.
    #[default]
    GlobalBatch,
    /// One update per group, with momentum scaled by the group's share of
    /// the batch.
    PerGroup,
}

/// Affine parameters and running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayerState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: Mode,
    pub running_update: RunningUpdate,
}

impl<T: Scalar> NormLayerState<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(DEFAULT_MOMENTUM),
            eps: T::lit(DEFAULT_EPS),
            mode: Mode::Train,
            running_update: RunningUpdate::GlobalBatch,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = T::lit(momentum);
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = T::lit(eps);
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c
        {
            return Err(Error::ShapeMismatch(
                "gamma/beta/running vectors differ in length".into(),
            ));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("negative running variance".into()));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        if !(self.momentum > T::zero() && self.momentum <= T::one()) {
            return Err(Error::InvalidArgument("momentum outside (0, 1]".into()));
        }
        Ok(())
    }

    /// Exponential update of the running pair toward a batch estimate.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = self.momentum;
        blend(&mut self.running_mean, batch_mean, m);
        blend(&mut self.running_var, batch_var, m);
    }

    pub fn cast<U: Scalar>(&self) -> NormLayerState<U> {
        let cv = |v: &[T]| v.iter().map(|&x| crate::scalar::cast(x)).collect();
        NormLayerState {
            gamma: cv(&self.gamma),
            beta: cv(&self.beta),
            running_mean: cv(&self.running_mean),
            running_var: cv(&self.running_var),
            momentum: crate::scalar::cast(self.momentum),
            eps: crate::scalar::cast(self.eps),
            mode: self.mode,
            running_update: self.running_update,
        }
    }
}

fn blend<T: Scalar>(running: &mut [T], target: &[T], m: T) {
    for (r, &t) in running.iter_mut().zip(target) {
        *r = (T::one() - m) * *r + m * t;
    }
}

/// Statistics of one normalization group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats<T> {
    /// Batch indices normalized by this group.
    pub samples: Vec<usize>,
    pub mean: Vec<T>,
    /// Biased variance (without `eps`).
    pub var: Vec<T>,
    /// `sqrt(var + eps)`.
    pub std: Vec<T>,
}

/// Everything the backward pass needs from a training forward.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub groups: Vec<GroupStats<T>>,
    /// Domain partition behind the groups; `None` for plain BN.
    pub partition: Option<Partition>,
    pub xhat: Tensor<T>,
}

impl<T: Scalar> NormCache<T> {
    pub fn shape(&self) -> &[usize] {
        self.xhat.shape()
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, state: &NormLayerState<T>, mode: Mode) -> Result<()> {
    if state.mode != mode {
        return Err(Error::InvalidArgument(format!(
            "layer is in {:?} mode, expected {mode:?}",
            state.mode
        )));
    }
    if x.rank() != 2 && x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "normalization expects rank 2 or 4, got {:?}",
            x.shape()
        )));
    }
    if x.channels() != state.channels() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, layer has {}",
            x.channels(),
            state.channels()
        )));
    }
    Ok(())
}

/// Standardizes each sample group with its own statistics and applies the
/// shared affine. Groups must be non-empty and jointly cover the batch.
pub fn normalize_groups<T: Scalar>(
    x: &Tensor<T>,
    sample_groups: Vec<Vec<usize>>,
    state: &NormLayerState<T>,
) -> Result<(Tensor<T>, Vec<GroupStats<T>>, Tensor<T>)> {
    let (n, c, s) = (x.batch(), x.channels(), x.spatial());
    let mut covered = vec![false; n];
    for g in &sample_groups {
        if g.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for &i in g {
            if i >= n || std::mem::replace(&mut covered[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} duplicated or out of range"
                )));
            }
        }
    }
    if covered.iter().any(|v| !v) {
        return Err(Error::InvalidArgument("groups do not cover the batch".into()));
    }

    let xd = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut stats = Vec::with_capacity(sample_groups.len());
    for samples in sample_groups {
        let count = T::from_usize_lossy(samples.len() * s);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for &i in &samples {
                let base = (i * c + ch) * s;
                for &v in &xd[base..base + s] {
                    sum += v;
                }
            }
            let mu = sum / count;
            let mut sq = T::zero();
            for &i in &samples {
                let base = (i * c + ch) * s;
                for &v in &xd[base..base + s] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            let v = sq / count;
            let sd = (v + state.eps).sqrt();
            for &i in &samples {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    let h = (xd[k] - mu) / sd;
                    xhat.data_mut()[k] = h;
                    y.data_mut()[k] = state.gamma[ch] * h + state.beta[ch];
                }
            }
            mean[ch] = mu;
            var[ch] = v;
            std[ch] = sd;
        }
        stats.push(GroupStats {
            samples,
            mean,
            var,
            std,
        });
    }
    Ok((y, stats, xhat))
}

/// Whole-batch mean and variance recovered from group statistics by the law
/// of total variance.
pub fn pooled_moments<T: Scalar>(groups: &[GroupStats<T>], channels: usize) -> (Vec<T>, Vec<T>) {
    let total: usize = groups.iter().map(|g| g.samples.len()).sum();
    let total = T::from_usize_lossy(total);
    let mut mean = vec![T::zero(); channels];
    for g in groups {
        let w = T::from_usize_lossy(g.samples.len()) / total;
        for (m, &gm) in mean.iter_mut().zip(&g.mean) {
            *m += w * gm;
        }
    }
    let mut var = vec![T::zero(); channels];
    for g in groups {
        let w = T::from_usize_lossy(g.samples.len()) / total;
        for ch in 0..channels {
            let d = g.mean[ch] - mean[ch];
            var[ch] += w * (g.var[ch] + d * d);
        }
    }
    (mean, var)
}

fn accumulate<T: Scalar>(state: &mut NormLayerState<T>, groups: &[GroupStats<T>]) {
    match state.running_update {
        RunningUpdate::GlobalBatch => {
            let (m, v) = pooled_moments(groups, state.channels());
            state.update_running(&m, &v);
        }
        RunningUpdate::PerGroup => {
            let total: usize = groups.iter().map(|g| g.samples.len()).sum();
            for g in groups {
                let share = T::from_usize_lossy(g.samples.len()) / T::from_usize_lossy(total);
                let m = state.momentum * share;
                blend(&mut state.running_mean, &g.mean, m);
                blend(&mut state.running_var, &g.var, m);
            }
        }
    }
}

/// Plain batch normalization in training mode.
pub fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    state: &mut NormLayerState<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    check_input(x, state, Mode::Train)?;
    let (y, groups, xhat) = normalize_groups(x, vec![(0..x.batch()).collect()], state)?;
    accumulate(state, &groups);
    Ok((
        y,
        NormCache {
            groups,
            partition: None,
            xhat,
        },
    ))
}

/// Mix-normalization with a freshly sampled partition.
pub fn dmn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    domain_ids: &[usize],
    state: &mut NormLayerState<T>,
    policy: &PartitionPolicy,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let partition = sample_partition(policy, rng);
    dmn_forward_with_partition(x, domain_ids, state, &partition)
}

/// Mix-normalization with a caller-supplied partition (shared across layers
/// or forced by a test).
pub fn dmn_forward_with_partition<T: Scalar>(
    x: &Tensor<T>,
    domain_ids: &[usize],
    state: &mut NormLayerState<T>,
    partition: &Partition,
) -> Result<(Tensor<T>, NormCache<T>)> {
    check_input(x, state, Mode::Train)?;
    if domain_ids.len() != x.batch() {
        return Err(Error::ShapeMismatch(format!(
            "{} domain ids for a batch of {}",
            domain_ids.len(),
            x.batch()
        )));
    }
    let domains = partition.domains();
    let mut per_domain = vec![0usize; domains];
    for &d in domain_ids {
        if d >= domains {
            return Err(Error::DomainOutOfRange { domain: d, domains });
        }
        per_domain[d] += 1;
    }
    if let Some(d) = per_domain.iter().position(|&k| k == 0) {
        return Err(Error::MissingDomain(d));
    }
    let lookup = partition.group_lookup();
    let mut sample_groups = vec![Vec::new(); partition.groups().len()];
    for (i, &d) in domain_ids.iter().enumerate() {
        sample_groups[lookup[d]].push(i);
    }
    let (y, groups, xhat) = normalize_groups(x, sample_groups, state)?;
    accumulate(state, &groups);
    Ok((
        y,
        NormCache {
            groups,
            partition: Some(partition.clone()),
            xhat,
        },
    ))
}

/// Gradients of a grouped normalization. Each group's statistics depend only
/// on its own members, so the usual BN backward is applied per group.
pub fn dmn_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    cache: &NormCache<T>,
    state: &NormLayerState<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    grad_y.expect_shape(cache.shape())?;
    let (c, s) = (grad_y.channels(), grad_y.spatial());
    if c != state.channels() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {c} channels, layer has {}",
            state.channels()
        )));
    }
    let gy = grad_y.data();
    let xh = cache.xhat.data();
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_x = Tensor::zeros(grad_y.shape());
    for g in &cache.groups {
        let count = T::from_usize_lossy(g.samples.len() * s);
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for &i in &g.samples {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    sum_g += gy[k];
                    sum_gx += gy[k] * xh[k];
                }
            }
            grad_beta[ch] += sum_g;
            grad_gamma[ch] += sum_gx;
            let mean_g = sum_g / count;
            let mean_gx = sum_gx / count;
            let scale = state.gamma[ch] / g.std[ch];
            for &i in &g.samples {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    grad_x.data_mut()[k] = scale * (gy[k] - mean_g - xh[k] * mean_gx);
                }
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Evaluation-mode normalization with the running pair; a per-sample map.
pub fn norm_forward_eval<T: Scalar>(x: &Tensor<T>, state: &NormLayerState<T>) -> Result<Tensor<T>> {
    check_input(x, state, Mode::Eval)?;
    let (c, s) = (x.channels(), x.spatial());
    let scale: Vec<T> = (0..c)
        .map(|ch| state.gamma[ch] / (state.running_var[ch] + state.eps).sqrt())
        .collect();
    let mut y = x.clone();
    for (k, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (k / s) % c;
        *v = scale[ch] * (*v - state.running_mean[ch]) + state.beta[ch];
    }
    Ok(y)
}
