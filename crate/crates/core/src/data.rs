//! Synthetic multi-domain data and the two batch builders.
//!
//! Every domain renders the same class prototypes through its own "style":
//! a per-feature scale and shift followed by an orthogonal feature mixing.
//! Only the style differs between domains that share identities.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Rendering parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub style_scale: Vec<f64>,
    pub style_shift: Vec<f64>,
    /// Row-major `dim × dim` orthogonal matrix.
    pub mixing: Vec<f64>,
    pub noise_sigma: f64,
}

/// Spread of randomly drawn domain styles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpread {
    /// Log-scale standard deviation of the per-feature scale.
    pub scale: f64,
    /// Standard deviation of the per-feature shift.
    pub shift: f64,
    /// Size of the random rotation away from the identity.
    pub mixing: f64,
}

/// How the held-out target style is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetStyle {
    /// Fresh draw from the same spread as the sources.
    #[default]
    Independent,
    /// Random convex blend of the source styles plus a fresh draw at
    /// `jitter` times the configured spread.
    Interpolated { jitter: f64 },
}

impl DomainSpec {
    /// Identity style: unit scale, zero shift, identity mixing.
    pub fn identity(domain_id: usize, dim: usize, noise_sigma: f64) -> Self {
        let mut mixing = vec![0.0; dim * dim];
        for i in 0..dim {
            mixing[i * dim + i] = 1.0;
        }
        Self {
            domain_id,
            style_scale: vec![1.0; dim],
            style_shift: vec![0.0; dim],
            mixing,
            noise_sigma,
        }
    }

    pub fn random(
        domain_id: usize,
        dim: usize,
        spread: StyleSpread,
        noise_sigma: f64,
        rng: &mut RngStream,
    ) -> Self {
        let style_scale = (0..dim).map(|_| (spread.scale * rng.normal()).exp()).collect();
        let style_shift = (0..dim).map(|_| spread.shift * rng.normal()).collect();
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                m[i * dim + j] = if i == j { 1.0 } else { 0.0 } + spread.mixing * rng.normal();
            }
        }
        Self {
            domain_id,
            style_scale,
            style_shift,
            mixing: orthonormalize_rows(m, dim),
            noise_sigma,
        }
    }

    /// Convex blend of `specs` (log-scales, shifts and mixing matrices
    /// averaged with `weights`, mixing re-orthonormalized), perturbed by a
    /// fresh random style drawn with `jitter`.
    pub fn blend(
        domain_id: usize,
        specs: &[DomainSpec],
        weights: &[f64],
        jitter: StyleSpread,
        noise_sigma: f64,
        rng: &mut RngStream,
    ) -> Self {
        let dim = specs[0].dim();
        let fresh = Self::random(domain_id, dim, jitter, noise_sigma, rng);
        let mix = |get: &dyn Fn(&DomainSpec, usize) -> f64, i: usize| -> f64 {
            specs.iter().zip(weights).map(|(sp, w)| w * get(sp, i)).sum()
        };
        let style_scale = (0..dim)
            .map(|i| (mix(&|sp, i| sp.style_scale[i].ln(), i) + fresh.style_scale[i].ln()).exp())
            .collect();
        let style_shift = (0..dim)
            .map(|i| mix(&|sp, i| sp.style_shift[i], i) + fresh.style_shift[i])
            .collect();
        let eye = |i: usize| if i / dim == i % dim { 1.0 } else { 0.0 };
        let m = (0..dim * dim)
            .map(|i| mix(&|sp, i| sp.mixing[i], i) + fresh.mixing[i] - eye(i))
            .collect();
        Self {
            domain_id,
            style_scale,
            style_shift,
            mixing: orthonormalize_rows(m, dim),
            noise_sigma,
        }
    }

    pub fn dim(&self) -> usize {
        self.style_scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.style_shift.len() != dim || self.mixing.len() != dim * dim {
            return Err(Error::ShapeMismatch("domain style dimensions disagree".into()));
        }
        if self.style_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("style_scale must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if orthogonality_error(&self.mixing, dim) > 1e-6 {
            return Err(Error::InvalidArgument("mixing matrix is not orthogonal".into()));
        }
        Ok(())
    }

    /// `mixing · (scale ⊙ v + shift)`.
    pub fn render(&self, v: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let styled: Vec<f64> = (0..dim)
            .map(|k| self.style_scale[k] * v[k] + self.style_shift[k])
            .collect();
        (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| self.mixing[i * dim + j] * styled[j])
                    .sum()
            })
            .collect()
    }
}

fn orthonormalize_rows(mut m: Vec<f64>, dim: usize) -> Vec<f64> {
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = (0..dim).map(|k| m[i * dim + k] * m[j * dim + k]).sum();
            for k in 0..dim {
                m[i * dim + k] -= dot * m[j * dim + k];
            }
        }
        let norm = (0..dim).map(|k| m[i * dim + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..dim {
            m[i * dim + k] /= norm;
        }
    }
    m
}

/// `max |M Mᵀ − I|`.
pub fn orthogonality_error(m: &[f64], dim: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let dot: f64 = (0..dim).map(|k| m[i * dim + k] * m[j * dim + k]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Class prototypes shared by every domain rendering the same identities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub class_ids: Vec<usize>,
    pub vectors: Tensor<f64>,
}

impl Prototypes {
    /// Gaussian prototypes for classes `first_id..first_id + count`.
    pub fn random(first_id: usize, count: usize, dim: usize, scale: f64, rng: &mut RngStream) -> Self {
        Self {
            class_ids: (first_id..first_id + count).collect(),
            vectors: Tensor::from_fn(&[count, dim], |_| scale * rng.normal()),
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Labeled samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor<f32>,
    pub class_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Sample indices per class id.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.class_ids.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        map
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(rows)?,
            class_ids: rows.iter().map(|&r| self.class_ids[r]).collect(),
            domain_ids: rows.iter().map(|&r| self.domain_ids[r]).collect(),
        })
    }

    /// Concatenates datasets in order.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let dim = first.dim();
        let mut data = Vec::new();
        let mut class_ids = Vec::new();
        let mut domain_ids = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(Error::ShapeMismatch("feature dims differ".into()));
            }
            data.extend_from_slice(p.features.data());
            class_ids.extend_from_slice(&p.class_ids);
            domain_ids.extend_from_slice(&p.domain_ids);
        }
        Ok(Self {
            features: Tensor::from_vec(vec![class_ids.len(), dim], data)?,
            class_ids,
            domain_ids,
        })
    }
}

/// Renders `k_per_id` noisy samples for each of the first `ids` prototypes.
pub fn generate_domain_dataset(
    protos: &Prototypes,
    spec: &DomainSpec,
    ids: usize,
    k_per_id: usize,
    rng: &mut RngStream,
) -> Result<LabeledDataset> {
    if ids < 2 || k_per_id < 2 {
        return Err(Error::InvalidArgument(format!(
            "need ids >= 2 and k_per_id >= 2, got {ids} and {k_per_id}"
        )));
    }
    if ids > protos.len() {
        return Err(Error::InvalidArgument(format!(
            "{ids} identities requested, {} prototypes available",
            protos.len()
        )));
    }
    spec.validate()?;
    let dim = protos.dim();
    if spec.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "style has dim {}, prototypes {dim}",
            spec.dim()
        )));
    }
    let mut data = Vec::with_capacity(ids * k_per_id * dim);
    let mut class_ids = Vec::with_capacity(ids * k_per_id);
    for (p, &class) in protos.class_ids.iter().enumerate().take(ids) {
        let proto = protos.vectors.row(p);
        for _ in 0..k_per_id {
            let noisy: Vec<f64> = proto
                .iter()
                .map(|&v| v + spec.noise_sigma * rng.normal())
                .collect();
            data.extend(spec.render(&noisy).into_iter().map(|v| v as f32));
            class_ids.push(class);
        }
    }
    let n = class_ids.len();
    Ok(LabeledDataset {
        features: Tensor::new(vec![n, dim], data)?,
        class_ids,
        domain_ids: vec![spec.domain_id; n],
    })
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub features: Tensor<f32>,
    pub class_ids: Vec<usize>,
    /// Position of the source dataset each sample came from.
    pub domain_ids: Vec<usize>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn domain_counts(&self, domains: usize) -> Vec<usize> {
        let mut counts = vec![0; domains];
        for &d in &self.domain_ids {
            counts[d] += 1;
        }
        counts
    }
}

// (dataset position, row) pairs gathered into a batch.
fn assemble(datasets: &[LabeledDataset], picks: &[(usize, usize)]) -> DomainBatch {
    let dim = datasets[0].dim();
    let mut data = Vec::with_capacity(picks.len() * dim);
    let mut class_ids = Vec::with_capacity(picks.len());
    let mut domain_ids = Vec::with_capacity(picks.len());
    for &(d, r) in picks {
        data.extend_from_slice(datasets[d].features.row(r));
        class_ids.push(datasets[d].class_ids[r]);
        domain_ids.push(d);
    }
    DomainBatch {
        features: Tensor::from_vec(vec![picks.len(), dim], data).expect("batch shape"),
        class_ids,
        domain_ids,
    }
}

/// Uniform-per-domain sampler: every batch holds `p_ids × k_per_id` samples
/// from every domain, identities drawn without replacement per domain.
#[derive(Debug)]
pub struct UsSampler<'a> {
    datasets: &'a [LabeledDataset],
    // Per domain: class-sample index lists with at least k_per_id entries.
    eligible: Vec<Vec<Vec<usize>>>,
    p_ids: usize,
    k_per_id: usize,
    rng: RngStream,
}

impl<'a> UsSampler<'a> {
    pub fn new(
        datasets: &'a [LabeledDataset],
        p_ids: usize,
        k_per_id: usize,
        rng: RngStream,
    ) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::NoDomains);
        }
        if p_ids == 0 || k_per_id == 0 {
            return Err(Error::InvalidArgument("p_ids and k_per_id must be >= 1".into()));
        }
        let mut eligible = Vec::with_capacity(datasets.len());
        for (d, ds) in datasets.iter().enumerate() {
            let classes: Vec<Vec<usize>> = ds
                .by_class()
                .into_values()
                .filter(|rows| rows.len() >= k_per_id)
                .collect();
            if classes.len() < p_ids {
                return Err(Error::InsufficientData {
                    domain: d,
                    reason: format!(
                        "{} identities with >= {k_per_id} samples, {p_ids} needed",
                        classes.len()
                    ),
                });
            }
            eligible.push(classes);
        }
        Ok(Self {
            datasets,
            eligible,
            p_ids,
            k_per_id,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.datasets.len() * self.p_ids * self.k_per_id
    }

    pub fn next_batch(&mut self) -> DomainBatch {
        let mut picks = Vec::with_capacity(self.batch_size());
        for (d, classes) in self.eligible.iter().enumerate() {
            let mut order: Vec<usize> = (0..classes.len()).collect();
            self.rng.shuffle(&mut order);
            for &c in &order[..self.p_ids] {
                let mut rows = classes[c].clone();
                self.rng.shuffle(&mut rows);
                picks.extend(rows[..self.k_per_id].iter().map(|&r| (d, r)));
            }
        }
        assemble(self.datasets, &picks)
    }
}

impl Iterator for UsSampler<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        Some(self.next_batch())
    }
}

/// Random sampler over the pooled source data.
///
/// With `k_per_id = 1` each batch is `batch_size` samples drawn uniformly
/// without replacement from the pool. With `k_per_id > 1` it draws
/// `batch_size / k_per_id` pooled identities and `k_per_id` pooled samples
/// of each, so triplet mining always finds positives; domains are ignored
/// either way.
#[derive(Debug)]
pub struct RsSampler<'a> {
    datasets: &'a [LabeledDataset],
    pool: Vec<(usize, usize)>,
    by_class: Vec<Vec<(usize, usize)>>,
    batch_size: usize,
    k_per_id: usize,
    rng: RngStream,
}

impl<'a> RsSampler<'a> {
    pub fn new(
        datasets: &'a [LabeledDataset],
        batch_size: usize,
        k_per_id: usize,
        rng: RngStream,
    ) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::NoDomains);
        }
        if batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
        }
        if k_per_id == 0 || batch_size % k_per_id != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch_size {batch_size} is not a multiple of k_per_id {k_per_id}"
            )));
        }
        let mut pool = Vec::new();
        // Identity groups are (domain, class) pairs, as in pooled datasets
        // whose identities never cross domains.
        let mut classes: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (d, ds) in datasets.iter().enumerate() {
            for (r, &c) in ds.class_ids.iter().enumerate() {
                pool.push((d, r));
                classes.entry((d, c)).or_default().push((d, r));
            }
        }
        if pool.len() < batch_size {
            return Err(Error::InvalidArgument(format!(
                "pool of {} samples is smaller than batch_size {batch_size}",
                pool.len()
            )));
        }
        let by_class: Vec<_> = classes
            .into_values()
            .filter(|rows| rows.len() >= k_per_id)
            .collect();
        if k_per_id > 1 && by_class.len() < batch_size / k_per_id {
            return Err(Error::InvalidArgument(format!(
                "{} pooled identities with >= {k_per_id} samples, {} needed",
                by_class.len(),
                batch_size / k_per_id
            )));
        }
        Ok(Self {
            datasets,
            pool,
            by_class,
            batch_size,
            k_per_id,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self) -> DomainBatch {
        let picks: Vec<(usize, usize)> = if self.k_per_id == 1 {
            let mut idx: Vec<usize> = (0..self.pool.len()).collect();
            self.rng.shuffle(&mut idx);
            idx[..self.batch_size].iter().map(|&i| self.pool[i]).collect()
        } else {
            let mut order: Vec<usize> = (0..self.by_class.len()).collect();
            self.rng.shuffle(&mut order);
            let mut picks = Vec::with_capacity(self.batch_size);
            for &c in &order[..self.batch_size / self.k_per_id] {
                let mut rows = self.by_class[c].clone();
                self.rng.shuffle(&mut rows);
                picks.extend_from_slice(&rows[..self.k_per_id]);
            }
            picks
        };
        assemble(self.datasets, &picks)
    }
}

impl Iterator for RsSampler<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        Some(self.next_batch())
    }
}

/// Writes datasets as `domain_id,class_id,f0..f{C−1}` rows.
pub fn write_datasets_csv<W: Write>(datasets: &[&LabeledDataset], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dim = datasets.first().map_or(0, |d| d.dim());
    let mut header = vec!["domain_id".to_string(), "class_id".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    out.write_record(&header)?;
    for ds in datasets {
        for i in 0..ds.len() {
            let mut rec = vec![ds.domain_ids[i].to_string(), ds.class_ids[i].to_string()];
            rec.extend(ds.features.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads the CSV layout of [`write_datasets_csv`] into one dataset per
/// domain id, ordered by domain id.
pub fn read_datasets_csv<R: Read>(r: R) -> Result<Vec<LabeledDataset>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "domain_id" || &headers[1] != "class_id" {
        return Err(Error::Format(
            "expected header domain_id,class_id,f0,...".into(),
        ));
    }
    let dim = headers.len() - 2;
    let mut per_domain: BTreeMap<usize, (Vec<f32>, Vec<usize>)> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_id = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("row {}: {e}", line + 1)))
        };
        let d = parse_id(&rec[0])?;
        let c = parse_id(&rec[1])?;
        let entry = per_domain.entry(d).or_default();
        for k in 0..dim {
            let v: f32 = rec[k + 2]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("row {}: {e}", line + 1)))?;
            entry.0.push(v);
        }
        entry.1.push(c);
    }
    per_domain
        .into_iter()
        .map(|(d, (data, class_ids))| {
            let n = class_ids.len();
            Ok(LabeledDataset {
                features: Tensor::new(vec![n, dim], data)?,
                class_ids,
                domain_ids: vec![d; n],
            })
        })
        .collect()
}

/// Geometry of the synthetic domain-generalization problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub feature_dim: usize,
    pub source_domains: usize,
    /// Identities shared by every source domain and the target.
    pub classes: usize,
    /// Training samples per identity per source domain.
    pub samples_per_id: usize,
    /// Target-domain samples per shared identity (classification test set).
    pub target_samples_per_id: usize,
    /// Unseen identities rendered in the target style for retrieval.
    pub retrieval_ids: usize,
    pub retrieval_samples_per_id: usize,
    /// Fraction of each retrieval identity's samples used as queries.
    pub query_fraction: f64,
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    pub style: StyleSpread,
    pub target_style: TargetStyle,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            source_domains: 3,
            classes: 20,
            samples_per_id: 16,
            target_samples_per_id: 10,
            retrieval_ids: 20,
            retrieval_samples_per_id: 10,
            query_fraction: 0.3,
            prototype_scale: 1.0,
            noise_sigma: 0.6,
            style: StyleSpread {
                scale: 0.5,
                shift: 1.0,
                mixing: 0.15,
            },
            target_style: TargetStyle::Interpolated { jitter: 0.5 },
            seed: 7,
        }
    }
}

/// Source training sets plus the held-out target splits.
#[derive(Clone, Debug)]
pub struct DomainSuite {
    pub source_specs: Vec<DomainSpec>,
    pub target_spec: DomainSpec,
    pub sources: Vec<LabeledDataset>,
    /// Shared identities rendered in the target style.
    pub target: LabeledDataset,
    pub query: LabeledDataset,
    pub gallery: LabeledDataset,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("data.{field}"), reason));
        if self.feature_dim < 2 {
            return bad("feature_dim", "must be >= 2");
        }
        if self.source_domains == 0 {
            return bad("source_domains", "must be >= 1");
        }
        if self.classes < 2 {
            return bad("classes", "must be >= 2");
        }
        if self.samples_per_id < 2 || self.target_samples_per_id < 2 {
            return bad("samples_per_id", "must be >= 2");
        }
        if self.retrieval_ids < 2 || self.retrieval_samples_per_id < 2 {
            return bad("retrieval_ids", "need >= 2 identities with >= 2 samples");
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return bad("query_fraction", "must lie in (0, 1)");
        }
        if let TargetStyle::Interpolated { jitter } = self.target_style {
            if !(jitter >= 0.0) {
                return bad("target_style.jitter", "must be >= 0");
            }
        }
        if !(self.noise_sigma >= 0.0 && self.prototype_scale > 0.0) {
            return bad("noise_sigma", "noise must be >= 0 and prototype_scale > 0");
        }
        Ok(())
    }

    /// Generates every split. Target styles and retrieval identities come from
    /// streams disjoint from the source streams.
    pub fn build(&self) -> Result<DomainSuite> {
        self.validate()?;
        let root = RngStream::new(self.seed);
        let dim = self.feature_dim;
        let protos = Prototypes::random(
            0,
            self.classes,
            dim,
            self.prototype_scale,
            &mut root.split("prototypes"),
        );
        let mut source_specs = Vec::new();
        let mut sources = Vec::new();
        for d in 0..self.source_domains {
            let mut rng = root.split(&format!("source/{d}"));
            let spec = DomainSpec::random(d, dim, self.style, self.noise_sigma, &mut rng);
            sources.push(generate_domain_dataset(
                &protos,
                &spec,
                self.classes,
                self.samples_per_id,
                &mut rng,
            )?);
            source_specs.push(spec);
        }
        let mut trng = root.split("target");
        let target_spec = match self.target_style {
            TargetStyle::Independent => {
                DomainSpec::random(self.source_domains, dim, self.style, self.noise_sigma, &mut trng)
            }
            TargetStyle::Interpolated { jitter } => {
                let raw: Vec<f64> = (0..self.source_domains)
                    .map(|_| trng.sample::<f64, _>(Exp1))
                    .collect();
                let total: f64 = raw.iter().sum();
                let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
                DomainSpec::blend(
                    self.source_domains,
                    &source_specs,
                    &weights,
                    StyleSpread {
                        scale: jitter * self.style.scale,
                        shift: jitter * self.style.shift,
                        mixing: jitter * self.style.mixing,
                    },
                    self.noise_sigma,
                    &mut trng,
                )
            }
        };
        let target = generate_domain_dataset(
            &protos,
            &target_spec,
            self.classes,
            self.target_samples_per_id,
            &mut trng,
        )?;
        let unseen = Prototypes::random(
            self.classes,
            self.retrieval_ids,
            dim,
            self.prototype_scale,
            &mut root.split("unseen-prototypes"),
        );
        let retrieval = generate_domain_dataset(
            &unseen,
            &target_spec,
            self.retrieval_ids,
            self.retrieval_samples_per_id,
            &mut root.split("target/retrieval"),
        )?;
        let (mut q_rows, mut g_rows) = (Vec::new(), Vec::new());
        let per_query = ((self.retrieval_samples_per_id as f64 * self.query_fraction).round()
            as usize)
            .clamp(1, self.retrieval_samples_per_id - 1);
        for rows in retrieval.by_class().into_values() {
            q_rows.extend_from_slice(&rows[..per_query]);
            g_rows.extend_from_slice(&rows[per_query..]);
        }
        Ok(DomainSuite {
            source_specs,
            target_spec,
            sources,
            target,
            query: retrieval.subset(&q_rows)?,
            gallery: retrieval.subset(&g_rows)?,
        })
    }
}
