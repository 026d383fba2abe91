//! Fully-connected embedding network with pluggable normalization slots.
//!
//! Layout: `[linear → norm → relu] × hidden → linear (embedding) → [bn
//! neck] → linear (classifier)`. Every layer carries its own explicit
//! backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{
    bn_forward_train, dmn_backward, dmn_forward_train, dmn_forward_with_partition,
    norm_forward_eval, Mode, NormCache, NormLayerState, RunningUpdate,
};
use crate::numerics::{RngStream, Tensor};
use crate::partition::{Partition, PartitionPolicy};
use crate::scalar::{cast, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Bn,
    Dmn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub classes: usize,
    /// Normalization kind per hidden slot.
    pub norms: Vec<NormKind>,
    #[serde(default)]
    pub running_update: RunningUpdate,
    /// Batch normalization between the embedding and the classifier. The
    /// embedding itself stays unnormalized.
    #[serde(default)]
    pub neck: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, classes: usize, norm: NormKind) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            embedding_dim: 32,
            classes,
            norms: vec![norm; 2],
            running_update: RunningUpdate::GlobalBatch,
            neck: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(format!("model.{field}"), reason));
        if self.input_dim == 0 {
            return bad("input_dim", "must be >= 1".into());
        }
        if self.hidden.is_empty() {
            return bad("hidden", "need at least one normalization slot".into());
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return bad(&format!("hidden[{i}]"), "width must be >= 1".into());
        }
        if self.norms.len() != self.hidden.len() {
            return bad(
                "norms",
                format!("{} entries for {} hidden layers", self.norms.len(), self.hidden.len()),
            );
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim", "must be >= 2".into());
        }
        if self.classes < 2 {
            return bad("classes", "must be >= 2".into());
        }
        Ok(())
    }

    pub fn uses_dmn(&self) -> bool {
        self.norms.contains(&NormKind::Dmn)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `out × in`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform fan-in initialization, bound `sqrt(6 / fan_in)`; zero bias.
    pub fn init(input: usize, output: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[output, input], |_| T::lit(rng.uniform_range(-bound, bound))),
            bias: vec![T::zero(); output],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul_bt(&self.weight)?;
        let out = self.bias.len();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias[k % out];
        }
        Ok(y)
    }

    /// Returns `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(&self, x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let grad_w = grad_y.matmul_at(x)?;
        let (n, out) = grad_y.dims2()?;
        let mut grad_b = vec![T::zero(); out];
        for i in 0..n {
            for (b, &g) in grad_b.iter_mut().zip(grad_y.row(i)) {
                *b += g;
            }
        }
        Ok((grad_y.matmul(&self.weight)?, grad_w, grad_b))
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| cast(b)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer<T> {
    pub linear: Linear<T>,
    pub kind: NormKind,
    /// Present unless `kind` is [`NormKind::None`].
    pub norm: Option<NormLayerState<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub hidden: Vec<HiddenLayer<T>>,
    pub embed: Linear<T>,
    pub neck: Option<NormLayerState<T>>,
    pub classifier: Linear<T>,
}

/// Where mix-normalization slots get their partitions during a forward.
#[derive(Debug)]
pub struct DmnContext<'a> {
    pub domain_ids: &'a [usize],
    pub policy: PartitionPolicy,
    /// One partition reused by every slot; `None` samples per slot.
    pub shared: Option<Partition>,
    pub rng: &'a mut RngStream,
}

#[derive(Clone, Debug)]
struct HiddenCache<T> {
    input: Tensor<T>,
    norm: Option<NormCache<T>>,
    // Post-activation output; ReLU mask is `out > 0`.
    out: Tensor<T>,
}

/// Activations kept by a training forward.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    hidden: Vec<HiddenCache<T>>,
    embed_input: Tensor<T>,
    pub embedding: Tensor<T>,
    neck: Option<(NormCache<T>, Tensor<T>)>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Partitions drawn by each mix-normalization slot, in slot order.
    pub fn partitions(&self) -> Vec<Option<&Partition>> {
        self.hidden
            .iter()
            .map(|h| h.norm.as_ref().and_then(|c| c.partition.as_ref()))
            .collect()
    }
}

/// Gradients in parameter order (see [`Model::params`]).
pub type Grads<T> = Vec<Vec<T>>;

fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim;
        for (&w, &kind) in config.hidden.iter().zip(&config.norms) {
            let norm = match kind {
                NormKind::None => None,
                NormKind::Bn | NormKind::Dmn => {
                    let mut st = NormLayerState::new(w);
                    st.running_update = config.running_update;
                    Some(st)
                }
            };
            hidden.push(HiddenLayer {
                linear: Linear::init(width, w, rng),
                kind,
                norm,
            });
            width = w;
        }
        let embed = Linear::init(width, config.embedding_dim, rng);
        let classifier = Linear::init(config.embedding_dim, config.classes, rng);
        let neck = config.neck.then(|| {
            let mut st = NormLayerState::new(config.embedding_dim);
            st.running_update = config.running_update;
            st
        });
        Ok(Self {
            config: config.clone(),
            hidden,
            embed,
            neck,
            classifier,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for h in &mut self.hidden {
            if let Some(n) = &mut h.norm {
                n.mode = mode;
            }
        }
        if let Some(n) = &mut self.neck {
            n.mode = mode;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenLayer {
                    linear: h.linear.cast(),
                    kind: h.kind,
                    norm: h.norm.as_ref().map(|n| n.cast()),
                })
                .collect(),
            embed: self.embed.cast(),
            neck: self.neck.as_ref().map(|n| n.cast()),
            classifier: self.classifier.cast(),
        }
    }

    /// Trainable parameters in a fixed order: per hidden layer weight, bias,
    /// then gamma and beta when normalized; embedding weight and bias; neck
    /// gamma and beta when present; classifier weight and bias.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for h in &self.hidden {
            out.push(h.linear.weight.data());
            out.push(&h.linear.bias);
            if let Some(n) = &h.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out.push(self.embed.weight.data());
        out.push(&self.embed.bias);
        if let Some(n) = &self.neck {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out.push(self.classifier.weight.data());
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for h in &mut self.hidden {
            out.push(h.linear.weight.data_mut());
            out.push(&mut h.linear.bias);
            if let Some(n) = &mut h.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out.push(self.embed.weight.data_mut());
        out.push(&mut self.embed.bias);
        if let Some(n) = &mut self.neck {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out.push(self.classifier.weight.data_mut());
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Training-mode forward. Mix-normalization slots need `ctx`.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        mut ctx: Option<&mut DmnContext<'_>>,
    ) -> Result<ForwardCache<T>> {
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for layer in &mut self.hidden {
            let z = layer.linear.forward(&h)?;
            let (normed, cache) = match (layer.kind, layer.norm.as_mut()) {
                (NormKind::Bn, Some(st)) => {
                    let (y, c) = bn_forward_train(&z, st)?;
                    (y, Some(c))
                }
                (NormKind::Dmn, Some(st)) => {
                    let ctx = ctx.as_deref_mut().ok_or_else(|| {
                        Error::InvalidArgument("mix-normalization needs domain ids".into())
                    })?;
                    let (y, c) = match &ctx.shared {
                        Some(p) => dmn_forward_with_partition(&z, ctx.domain_ids, st, p)?,
                        None => dmn_forward_train(&z, ctx.domain_ids, st, &ctx.policy, ctx.rng)?,
                    };
                    (y, Some(c))
                }
                _ => (z, None),
            };
            let out = relu(&normed);
            caches.push(HiddenCache {
                input: std::mem::replace(&mut h, out.clone()),
                norm: cache,
                out,
            });
        }
        let embedding = self.embed.forward(&h)?;
        let (logits, neck) = match self.neck.as_mut() {
            Some(st) => {
                let (y, c) = bn_forward_train(&embedding, st)?;
                (self.classifier.forward(&y)?, Some((c, y)))
            }
            None => (self.classifier.forward(&embedding)?, None),
        };
        Ok(ForwardCache {
            hidden: caches,
            embed_input: h,
            embedding,
            neck,
            logits,
        })
    }

    /// Backpropagates loss gradients on the logits and on the embedding.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
        grad_embedding: &Tensor<T>,
    ) -> Result<Grads<T>> {
        let cls_input = cache.neck.as_ref().map_or(&cache.embedding, |(_, y)| y);
        let (g_cls_in, g_cw, g_cb) = self.classifier.backward(cls_input, grad_logits)?;
        let (g_emb_cls, neck_grads) = match (&self.neck, &cache.neck) {
            (Some(st), Some((nc, _))) => {
                let (gx, gg, gb) = dmn_backward(&g_cls_in, nc, st)?;
                (gx, Some((gg, gb)))
            }
            _ => (g_cls_in, None),
        };
        let g_emb = g_emb_cls.zip_map(grad_embedding, |a, b| a + b)?;
        let (mut g, g_ew, g_eb) = self.embed.backward(&cache.embed_input, &g_emb)?;
        let mut per_layer: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.hidden.len());
        for (layer, hc) in self.hidden.iter().zip(&cache.hidden).rev() {
            let g_norm = g.zip_map(&hc.out, |gv, o| if o > T::zero() { gv } else { T::zero() })?;
            let (g_z, norm_grads) = match (&layer.norm, &hc.norm) {
                (Some(st), Some(nc)) => {
                    let (gx, gg, gb) = dmn_backward(&g_norm, nc, st)?;
                    (gx, Some((gg, gb)))
                }
                _ => (g_norm, None),
            };
            let (g_in, gw, gb) = layer.linear.backward(&hc.input, &g_z)?;
            let mut entry = vec![gw.into_data(), gb];
            if let Some((gg, gbeta)) = norm_grads {
                entry.push(gg);
                entry.push(gbeta);
            }
            per_layer.push(entry);
            g = g_in;
        }
        let mut grads: Grads<T> = per_layer.into_iter().rev().flatten().collect();
        grads.push(g_ew.into_data());
        grads.push(g_eb);
        if let Some((gg, gbeta)) = neck_grads {
            grads.push(gg);
            grads.push(gbeta);
        }
        grads.push(g_cw.into_data());
        grads.push(g_cb);
        Ok(grads)
    }

    /// Evaluation-mode forward: `(embedding, logits)`. A per-sample map.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = x.clone();
        for layer in &self.hidden {
            let z = layer.linear.forward(&h)?;
            let normed = match &layer.norm {
                Some(st) => {
                    if st.mode != Mode::Eval {
                        return Err(Error::InvalidArgument("model is not in eval mode".into()));
                    }
                    norm_forward_eval(&z, st)?
                }
                None => z,
            };
            h = relu(&normed);
        }
        let embedding = self.embed.forward(&h)?;
        let logits = match &self.neck {
            Some(st) => self.classifier.forward(&norm_forward_eval(&embedding, st)?)?,
            None => self.classifier.forward(&embedding)?,
        };
        Ok((embedding, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bn_and_dmn_models_share_parameter_counts() {
        let bn = Model::<f32>::build(&ModelConfig::new(16, 20, NormKind::Bn), &mut RngStream::new(1)).unwrap();
        let dmn = Model::<f32>::build(&ModelConfig::new(16, 20, NormKind::Dmn), &mut RngStream::new(1)).unwrap();
        assert_eq!(bn.param_count(), dmn.param_count());
        assert_eq!(bn.params(), dmn.params());
        let plain = Model::<f32>::build(&ModelConfig::new(16, 20, NormKind::None), &mut RngStream::new(1)).unwrap();
        assert_eq!(bn.param_count(), plain.param_count() + 2 * (64 + 64));
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = ModelConfig::new(8, 4, NormKind::Dmn);
        let a = Model::<f32>::build(&cfg, &mut RngStream::new(3)).unwrap();
        let b = Model::<f32>::build(&cfg, &mut RngStream::new(3)).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(&cfg, &mut RngStream::new(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_input_yields_classifier_bias() {
        let cfg = ModelConfig::new(8, 5, NormKind::Bn);
        let mut m = Model::<f64>::build(&cfg, &mut RngStream::new(2)).unwrap();
        m.classifier.bias = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let x = Tensor::zeros(&[3, 8]);
        let cache = m.forward_train(&x, None).unwrap();
        for i in 0..3 {
            assert_eq!(cache.logits.row(i), &m.classifier.bias[..]);
        }
        m.set_mode(Mode::Eval);
        let (_, logits) = m.forward_eval(&x).unwrap();
        for i in 0..3 {
            assert_eq!(logits.row(i), &m.classifier.bias[..]);
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = ModelConfig::new(8, 5, NormKind::Bn);
        cfg.norms.pop();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.norms"), "{err}");
        let mut cfg = ModelConfig::new(8, 5, NormKind::Bn);
        cfg.embedding_dim = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(8, 5, NormKind::Bn);
        cfg.hidden.clear();
        cfg.norms.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dmn_without_context_errors() {
        let cfg = ModelConfig::new(4, 3, NormKind::Dmn);
        let mut m = Model::<f32>::build(&cfg, &mut RngStream::new(0)).unwrap();
        assert!(m.forward_train(&Tensor::zeros(&[4, 4]), None).is_err());
    }
}
