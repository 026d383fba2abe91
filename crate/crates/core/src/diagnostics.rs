//! Gradient-check suite: every analytic backward against 64-bit central
//! differences on random configurations.

use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    batch_hard_triplet, center_loss_value, cross_entropy, dcr_domain_center_loss, dcr_loss,
    ClassCenters, LossValue,
};
use crate::model::{DmnContext, Model, ModelConfig, NormKind};
use crate::norm::{bn_forward_train, dmn_backward, dmn_forward_with_partition, NormLayerState};
use crate::numerics::{finite_diff_grad, RngStream, Tensor};
use crate::partition::{sample_partition, Partition, PartitionPolicy};
use crate::train::{batch_objective, LossConfig, Regularizer};

pub const COMPONENT_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_CONFIGS: usize = 20;

const STEP: f64 = 1e-5;
// Denominator floor, relative to the largest entry of either gradient.
const FLOOR_FRACTION: f64 = 1e-3;

/// Deliberate corruptions used to prove the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the analytic gamma gradient of the normalization layers.
    GradGammaSign,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub configs: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.worst_relative_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentCheck::passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.components
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name)
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            writeln!(
                f,
                "{:<12} {:>3} configs  worst {:.3e}  tol {:.0e}  {}",
                c.name,
                c.configs,
                c.worst_relative_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Coordinate-wise relative error with a floor scaled to the gradients.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = max_abs(analytic).max(max_abs(numeric));
    gradient_error_scaled(analytic, numeric, scale)
}

/// As [`gradient_error`], with the floor scaled to an external magnitude
/// (a whole model's gradient, where some slots are exactly zero).
pub fn gradient_error_scaled(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let floor = (FLOOR_FRACTION * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn gaussian(shape: &[usize], sd: f64, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| sd * rng.normal())
}

fn weighted_sum(w: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

struct NormCase {
    x: Tensor<f64>,
    domain_ids: Vec<usize>,
    partition: Option<Partition>,
    state: NormLayerState<f64>,
    weights: Tensor<f64>,
}

impl NormCase {
    fn random(rng: &mut RngStream, dmn: bool) -> Self {
        let domains = rng.uniform_int(2, 4);
        let channels = rng.uniform_int(1, 4);
        let spatial = rng.uniform_int(1, 2);
        let mut domain_ids = Vec::new();
        // Two-sample scalar groups pin x̂ to ±1 and have no gradient to check.
        for d in 0..domains {
            domain_ids.extend(std::iter::repeat_n(d, rng.uniform_int(3, 5)));
        }
        let n = domain_ids.len();
        let shape: Vec<usize> = if spatial == 1 {
            vec![n, channels]
        } else {
            vec![n, channels, 1, spatial]
        };
        // Per-domain offsets make the group statistics differ.
        let mut x = gaussian(&shape, 1.0, rng);
        let per = x.len() / n;
        for (i, &d) in domain_ids.iter().enumerate() {
            for v in &mut x.data_mut()[i * per..(i + 1) * per] {
                *v += d as f64;
            }
        }
        let mut state = NormLayerState::new(channels);
        state.gamma = (0..channels).map(|_| 0.5 + rng.uniform()).collect();
        state.beta = (0..channels).map(|_| rng.normal()).collect();
        let partition = dmn.then(|| {
            let policy = PartitionPolicy::d_minus_one(domains).expect("domains >= 2");
            sample_partition(&policy, rng)
        });
        let weights = gaussian(&shape, 1.0, rng);
        Self {
            x,
            domain_ids,
            partition,
            state,
            weights,
        }
    }

    fn forward(&self, x: &Tensor<f64>, state: &NormLayerState<f64>) -> Result<(Tensor<f64>, crate::norm::NormCache<f64>)> {
        let mut st = state.clone();
        match &self.partition {
            Some(p) => dmn_forward_with_partition(x, &self.domain_ids, &mut st, p),
            None => bn_forward_train(x, &mut st),
        }
    }

    fn objective(&self, x: &Tensor<f64>, state: &NormLayerState<f64>) -> f64 {
        self.forward(x, state)
            .map_or(f64::NAN, |(y, _)| weighted_sum(&self.weights, &y))
    }

    fn error(&self, fault: Option<Fault>) -> Result<f64> {
        let (_, cache) = self.forward(&self.x, &self.state)?;
        let (gx, mut gg, gb) = dmn_backward(&self.weights, &cache, &self.state)?;
        if fault == Some(Fault::GradGammaSign) {
            gg.iter_mut().for_each(|g| *g = -*g);
        }
        let nx = finite_diff_grad(|x| self.objective(x, &self.state), &self.x, STEP)?;
        let c = self.state.gamma.len();
        let as_tensor = |v: &[f64]| Tensor::from_vec(vec![c], v.to_vec()).expect("vector");
        let ng = finite_diff_grad(
            |g| {
                let mut st = self.state.clone();
                st.gamma = g.data().to_vec();
                self.objective(&self.x, &st)
            },
            &as_tensor(&self.state.gamma),
            STEP,
        )?;
        let nb = finite_diff_grad(
            |b| {
                let mut st = self.state.clone();
                st.beta = b.data().to_vec();
                self.objective(&self.x, &st)
            },
            &as_tensor(&self.state.beta),
            STEP,
        )?;
        Ok(gradient_error(gx.data(), nx.data())
            .max(gradient_error(&gg, ng.data()))
            .max(gradient_error(&gb, nb.data())))
    }
}

fn check_normlayers(rng: &mut RngStream, configs: usize, fault: Option<Fault>) -> Result<ComponentCheck> {
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        // Alternate plain and mixed normalization.
        worst = worst.max(NormCase::random(rng, i % 2 == 1).error(fault)?);
    }
    Ok(ComponentCheck {
        name: "normlayers",
        configs,
        worst_relative_error: worst,
        tolerance: COMPONENT_TOLERANCE,
    })
}

/// Labels with every class drawn at least twice.
fn paired_labels(classes: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat_n(c, rng.uniform_int(2, 3)))
        .collect();
    rng.shuffle(&mut labels);
    labels
}

fn check_loss<F>(name: &'static str, rng: &mut RngStream, configs: usize, mut case: F) -> Result<ComponentCheck>
where
    F: FnMut(&mut RngStream) -> Result<(Tensor<f64>, Box<dyn Fn(&Tensor<f64>) -> Result<LossValue<f64>>>)>,
{
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (x, loss) = case(rng)?;
        let analytic = loss(&x)?.grad;
        let numeric = finite_diff_grad(|p| loss(p).map_or(f64::NAN, |l| l.value), &x, STEP)?;
        worst = worst.max(gradient_error(analytic.data(), numeric.data()));
    }
    Ok(ComponentCheck {
        name,
        configs,
        worst_relative_error: worst,
        tolerance: COMPONENT_TOLERANCE,
    })
}

type LossFn = Box<dyn Fn(&Tensor<f64>) -> Result<LossValue<f64>>>;

fn cross_entropy_case(rng: &mut RngStream) -> Result<(Tensor<f64>, LossFn)> {
    let n = rng.uniform_int(2, 8);
    let k = rng.uniform_int(2, 6);
    let labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
    let logits = gaussian(&[n, k], 2.0, rng);
    Ok((logits, Box::new(move |x| cross_entropy(x, &labels))))
}

fn triplet_case(rng: &mut RngStream) -> Result<(Tensor<f64>, LossFn)> {
    let labels = paired_labels(rng.uniform_int(2, 4), rng);
    let dim = rng.uniform_int(2, 5);
    // Unit-scale features keep a mix of active and inactive hinges at 0.3.
    let emb = gaussian(&[labels.len(), dim], 0.4, rng);
    Ok((emb, Box::new(move |x| batch_hard_triplet(x, &labels, 0.3))))
}

fn dcr_case(rng: &mut RngStream) -> Result<(Tensor<f64>, LossFn)> {
    let n = rng.uniform_int(2, 10);
    let dim = rng.uniform_int(1, 5);
    let feats = gaussian(&[n, dim], 1.5, rng);
    if rng.uniform() < 0.5 {
        Ok((feats, Box::new(dcr_loss)))
    } else {
        let domains: Vec<usize> = (0..n).map(|i| i % 3).collect();
        Ok((feats, Box::new(move |x| dcr_domain_center_loss(x, &domains))))
    }
}

fn center_case(rng: &mut RngStream) -> Result<(Tensor<f64>, LossFn)> {
    let classes = rng.uniform_int(2, 4);
    let dim = rng.uniform_int(1, 5);
    let labels = paired_labels(classes, rng);
    let mut centers = ClassCenters::zeros(classes, dim, 0.5);
    for c in &mut centers.centers {
        c.iter_mut().for_each(|v| *v = rng.normal());
    }
    let feats = gaussian(&[labels.len(), dim], 1.0, rng);
    Ok((feats, Box::new(move |x| center_loss_value(x, &labels, &centers))))
}

struct ModelCase {
    model: Model<f64>,
    x: Tensor<f64>,
    class_ids: Vec<usize>,
    domain_ids: Vec<usize>,
    loss: LossConfig,
    seed: u64,
}

impl ModelCase {
    fn random(rng: &mut RngStream, norm: NormKind, neck: bool) -> Result<Self> {
        let domains = 3;
        let classes = 3;
        let mut cfg = ModelConfig::new(5, classes, norm);
        cfg.hidden = vec![6, 5];
        cfg.norms = vec![norm; 2];
        cfg.embedding_dim = 4;
        cfg.neck = neck;
        let mut model = Model::<f64>::build(&cfg, rng)?;
        // Non-trivial affine parameters exercise every gradient path.
        for h in &mut model.hidden {
            if let Some(n) = &mut h.norm {
                n.gamma.iter_mut().for_each(|g| *g = 0.5 + rng.uniform());
                n.beta.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
            }
        }
        let mut class_ids = Vec::new();
        let mut domain_ids = Vec::new();
        for d in 0..domains {
            for c in 0..classes {
                class_ids.extend([c, c]);
                domain_ids.extend([d, d]);
            }
        }
        let x = gaussian(&[class_ids.len(), 5], 1.0, rng);
        let loss = LossConfig {
            lambda: 0.2,
            regularizer: Regularizer::Dcr,
            ..LossConfig::default()
        };
        Ok(Self {
            model,
            x,
            class_ids,
            domain_ids,
            loss,
            seed: rng.next_u64(),
        })
    }

    // Each evaluation replays the same partition stream.
    fn loss_and_grads(&self, model: &mut Model<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut rng = RngStream::new(self.seed);
        let mut ctx = DmnContext {
            domain_ids: &self.domain_ids,
            policy: PartitionPolicy::d_minus_one(3)?,
            shared: None,
            rng: &mut rng,
        };
        let cache = model.forward_train(&self.x, Some(&mut ctx))?;
        let (parts, g_logits, g_emb) = batch_objective(
            &cache.logits,
            &cache.embedding,
            &self.class_ids,
            &self.domain_ids,
            &self.loss,
            None,
        )?;
        let grads = model.backward(&cache, &g_logits, &g_emb)?;
        Ok((parts.total, grads))
    }

    fn error(&self) -> Result<f64> {
        let (_, analytic) = self.loss_and_grads(&mut self.model.clone())?;
        let mut numerics = Vec::with_capacity(analytic.len());
        for slot in 0..analytic.len() {
            let values = self.model.params()[slot].to_vec();
            let point = Tensor::from_vec(vec![values.len()], values)?;
            let numeric = finite_diff_grad(
                |p| {
                    let mut m = self.model.clone();
                    m.params_mut()[slot].copy_from_slice(p.data());
                    self.loss_and_grads(&mut m).map_or(f64::NAN, |(l, _)| l)
                },
                &point,
                STEP,
            )?;
            numerics.push(numeric.into_data());
        }
        // Biases feeding a normalization have exactly zero gradient, so the
        // floor comes from the whole model.
        let scale = analytic
            .iter()
            .chain(&numerics)
            .fold(0.0f64, |m, g| m.max(max_abs(g)));
        Ok(analytic
            .iter()
            .zip(&numerics)
            .map(|(a, n)| gradient_error_scaled(a, n, scale))
            .fold(0.0, f64::max))
    }
}

fn check_end_to_end(rng: &mut RngStream) -> Result<ComponentCheck> {
    let cases = [
        (NormKind::Bn, false),
        (NormKind::Dmn, false),
        (NormKind::Bn, true),
        (NormKind::Dmn, true),
    ];
    let mut worst: f64 = 0.0;
    for (norm, neck) in cases {
        worst = worst.max(ModelCase::random(rng, norm, neck)?.error()?);
    }
    Ok(ComponentCheck {
        name: "end_to_end",
        configs: cases.len(),
        worst_relative_error: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// Runs every component check with `configs` random configurations each.
pub fn run_gradcheck(seed: u64, configs: usize, fault: Option<Fault>) -> Result<GradcheckReport> {
    let root = RngStream::new(seed);
    let components = vec![
        check_normlayers(&mut root.split("normlayers"), configs, fault)?,
        check_loss("cross_entropy", &mut root.split("cross_entropy"), configs, cross_entropy_case)?,
        check_loss("triplet", &mut root.split("triplet"), configs, triplet_case)?,
        check_loss("dcr", &mut root.split("dcr"), configs, dcr_case)?,
        check_loss("center", &mut root.split("center"), configs, center_case)?,
        check_end_to_end(&mut root.split("end_to_end"))?,
    ];
    Ok(GradcheckReport { components })
}
