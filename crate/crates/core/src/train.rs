//! Objective assembly, Adam and the training loop.

use serde::{Deserialize, Serialize};

use crate::data::{DomainBatch, LabeledDataset, RsSampler, UsSampler};
use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet, center_loss_value, cross_entropy, dcr_domain_center_loss, dcr_loss,
    overall_loss, ClassCenters, DEFAULT_CENTER_RATE, DEFAULT_LAMBDA, DEFAULT_MARGIN,
};
use crate::model::{DmnContext, Grads, Model};
use crate::norm::Mode;
use crate::numerics::{RngStream, Tensor};
use crate::partition::{sample_partition, PartitionPolicy};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub base_lr: f64,
    /// Epochs (0-based) at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 60,
            iters_per_epoch: 20,
            base_lr: 3.5e-4,
            decay_epochs: vec![30, 50],
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("schedule.{field}"), reason));
        if self.epochs == 0 || self.iters_per_epoch == 0 {
            return bad("epochs", "epochs and iters_per_epoch must be >= 1");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be finite and >= 0");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs", "must be strictly increasing");
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay_epochs", "must be < epochs");
        }
        if !(self.decay_factor > 0.0) {
            return bad("decay_factor", "must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1", "Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.decay_factor.powi(drops as i32)
    }
}

/// Adam with bias correction over a flat parameter list.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(schedule: &TrainSchedule, shapes: &[usize]) -> Self {
        Self {
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            eps: schedule.adam_eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// Every sample toward the batch mean.
    Dcr,
    /// Every domain mean toward the batch mean.
    DcrDomainCenters,
    /// Class-center loss baseline.
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub margin: f64,
    pub regularizer: Regularizer,
    pub center_rate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            margin: DEFAULT_MARGIN,
            regularizer: Regularizer::Dcr,
            center_rate: DEFAULT_CENTER_RATE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be finite and >= 0"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("loss.margin", "must be >= 0"));
        }
        if !(self.center_rate > 0.0 && self.center_rate <= 1.0) {
            return Err(Error::config("loss.center_rate", "must lie in (0, 1]"));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.regularizer == Regularizer::None {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub tri: f64,
    /// Regularizer value before weighting.
    pub reg: f64,
    pub total: f64,
}

/// Total loss of a forward cache and the gradients it sends into the model.
pub fn batch_objective<T: Scalar>(
    logits: &Tensor<T>,
    embedding: &Tensor<T>,
    class_ids: &[usize],
    domain_ids: &[usize],
    loss: &LossConfig,
    centers: Option<&ClassCenters<T>>,
) -> Result<(LossBreakdown, Tensor<T>, Tensor<T>)> {
    let ce = cross_entropy(logits, class_ids)?;
    let tri = batch_hard_triplet(embedding, class_ids, T::lit(loss.margin))?;
    let lambda = loss.effective_lambda();
    let reg = match loss.regularizer {
        Regularizer::None => None,
        Regularizer::Dcr => Some(dcr_loss(embedding)?),
        Regularizer::DcrDomainCenters => Some(dcr_domain_center_loss(embedding, domain_ids)?),
        Regularizer::Center => Some(center_loss_value(
            embedding,
            class_ids,
            centers.ok_or_else(|| Error::InvalidArgument("center loss needs class centers".into()))?,
        )?),
    };
    let mut grad_emb = tri.grad;
    let reg_value = match reg {
        Some(r) => {
            let l = T::lit(lambda);
            for (g, &rg) in grad_emb.data_mut().iter_mut().zip(r.grad.data()) {
                *g += l * rg;
            }
            r.value.as_f64()
        }
        None => 0.0,
    };
    let total = overall_loss(ce.value.as_f64(), tri.value.as_f64(), reg_value, lambda);
    Ok((
        LossBreakdown {
            cls: ce.value.as_f64(),
            tri: tri.value.as_f64(),
            reg: reg_value,
            total,
        },
        ce.grad,
        grad_emb,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxGroup {
    DMinus1,
    D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmnConfig {
    pub max_group: MaxGroup,
    pub fixed_c: Option<usize>,
    /// One partition per iteration for every slot instead of one per slot.
    pub shared_partition: bool,
}

impl Default for DmnConfig {
    fn default() -> Self {
        Self {
            max_group: MaxGroup::DMinus1,
            fixed_c: None,
            shared_partition: false,
        }
    }
}

impl DmnConfig {
    pub fn policy(&self, domains: usize) -> Result<PartitionPolicy> {
        let max_group = match self.max_group {
            MaxGroup::DMinus1 => domains.saturating_sub(1).max(1),
            MaxGroup::D => domains,
        };
        PartitionPolicy::new(domains, max_group, self.fixed_c)
            .map_err(|e| Error::config("dmn", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerConfig {
    /// Uniform per domain: `p_ids × k_per_id` samples from every domain.
    Us { p_ids: usize, k_per_id: usize },
    /// Pooled random sampling, `batch_size` samples in identities of `k_per_id`.
    Rs { batch_size: usize, k_per_id: usize },
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig::Us {
            p_ids: 8,
            k_per_id: 4,
        }
    }
}

enum Sampler<'a> {
    Us(UsSampler<'a>),
    Rs(RsSampler<'a>),
}

impl Sampler<'_> {
    fn next_batch(&mut self) -> DomainBatch {
        match self {
            Sampler::Us(s) => s.next_batch(),
            Sampler::Rs(s) => s.next_batch(),
        }
    }
}

/// Evaluation numbers recorded after each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub target_acc: f64,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_tri: f64,
    pub loss_dcr: f64,
    pub loss_total: f64,
    pub eval: EvalSnapshot,
}

pub const METRICS_HEADER: &str =
    "epoch,loss_cls,loss_tri,loss_dcr,loss_total,target_acc,map,cmc1,cmc5,cmc10";

/// Fixed-precision CSV so reruns compare byte for byte.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch,
            r.loss_cls,
            r.loss_tri,
            r.loss_dcr,
            r.loss_total,
            r.eval.target_acc,
            r.eval.map,
            r.eval.cmc1,
            r.eval.cmc5,
            r.eval.cmc10
        ));
    }
    out
}

/// Everything the loop needs besides the model and the data.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub dmn: DmnConfig,
    pub seed: u64,
}

/// State carried through training.
pub struct Trainer<'a> {
    setup: &'a TrainSetup,
    sampler: Sampler<'a>,
    policy: Option<PartitionPolicy>,
    partition_rng: RngStream,
    adam: Adam<f32>,
    centers: Option<ClassCenters<f32>>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &Model<f32>,
        sources: &'a [LabeledDataset],
        setup: &'a TrainSetup,
    ) -> Result<Self> {
        setup.schedule.validate()?;
        setup.loss.validate()?;
        let root = RngStream::new(setup.seed);
        let sampler = match setup.sampler {
            SamplerConfig::Us { p_ids, k_per_id } => {
                Sampler::Us(UsSampler::new(sources, p_ids, k_per_id, root.split("sampler"))?)
            }
            SamplerConfig::Rs {
                batch_size,
                k_per_id,
            } => {
                if model.config.uses_dmn() {
                    return Err(Error::config(
                        "sampler",
                        "random sampling cannot feed mix-normalization",
                    ));
                }
                Sampler::Rs(RsSampler::new(sources, batch_size, k_per_id, root.split("sampler"))?)
            }
        };
        let policy = if model.config.uses_dmn() {
            Some(setup.dmn.policy(sources.len())?)
        } else {
            None
        };
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        let centers = (setup.loss.regularizer == crate::train::Regularizer::Center).then(|| {
            ClassCenters::zeros(
                model.config.classes,
                model.config.embedding_dim,
                setup.loss.center_rate,
            )
        });
        Ok(Self {
            setup,
            sampler,
            policy,
            partition_rng: root.split("partitions"),
            adam: Adam::new(&setup.schedule, &shapes),
            centers,
            iteration: 0,
        })
    }

    /// One forward/backward/update on the next batch.
    pub fn step(&mut self, model: &mut Model<f32>, lr: f64) -> Result<LossBreakdown> {
        let batch = self.sampler.next_batch();
        self.step_on(model, &batch, lr)
    }

    pub fn step_on(
        &mut self,
        model: &mut Model<f32>,
        batch: &DomainBatch,
        lr: f64,
    ) -> Result<LossBreakdown> {
        model.set_mode(Mode::Train);
        let cache = match self.policy {
            Some(policy) => {
                let shared = self
                    .setup
                    .dmn
                    .shared_partition
                    .then(|| sample_partition(&policy, &mut self.partition_rng));
                let mut ctx = DmnContext {
                    domain_ids: &batch.domain_ids,
                    policy,
                    shared,
                    rng: &mut self.partition_rng,
                };
                model.forward_train(&batch.features, Some(&mut ctx))?
            }
            None => model.forward_train(&batch.features, None)?,
        };
        let (losses, g_logits, g_emb) = batch_objective(
            &cache.logits,
            &cache.embedding,
            &batch.class_ids,
            &batch.domain_ids,
            &self.setup.loss,
            self.centers.as_ref(),
        )?;
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        let grads = model.backward(&cache, &g_logits, &g_emb)?;
        self.adam.step(model.params_mut(), &grads, lr);
        if let Some(c) = &mut self.centers {
            c.update(&cache.embedding, &batch.class_ids)?;
        }
        self.iteration += 1;
        Ok(losses)
    }
}

/// Runs the full schedule; `evaluate` is called after every epoch with the
/// model in eval mode.
pub fn train<F>(
    model: &mut Model<f32>,
    sources: &[LabeledDataset],
    setup: &TrainSetup,
    mut evaluate: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&Model<f32>) -> Result<EvalSnapshot>,
{
    let mut trainer = Trainer::new(model, sources, setup)?;
    let mut rows = Vec::with_capacity(setup.schedule.epochs);
    for epoch in 0..setup.schedule.epochs {
        let lr = setup.schedule.lr_at(epoch);
        let mut acc = LossBreakdown::default();
        for _ in 0..setup.schedule.iters_per_epoch {
            let l = trainer.step(model, lr)?;
            acc.cls += l.cls;
            acc.tri += l.tri;
            acc.reg += l.reg;
            acc.total += l.total;
        }
        let k = setup.schedule.iters_per_epoch as f64;
        model.set_mode(Mode::Eval);
        let eval = evaluate(model)?;
        model.set_mode(Mode::Train);
        rows.push(EpochMetrics {
            epoch: epoch + 1,
            loss_cls: acc.cls / k,
            loss_tri: acc.tri / k,
            loss_dcr: acc.reg / k,
            loss_total: acc.total / k,
            eval,
        });
        log::debug!(
            "epoch {} loss {:.4} target_acc {:.4}",
            epoch + 1,
            acc.total / k,
            eval.target_acc
        );
    }
    model.set_mode(Mode::Eval);
    Ok(rows)
}
