//! Experiment configuration, single runs, output files and ablation suites.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{DataConfig, DomainSuite, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{
    domain_center_stats, embed, evaluate_classification, evaluate_retrieval, RetrievalReport,
};
use crate::losses::CENTER_LOSS_LAMBDA;
use crate::model::{Model, ModelConfig, NormKind};
use crate::norm::RunningUpdate;
use crate::numerics::RngStream;
use crate::train::{
    metrics_csv, train, DmnConfig, EpochMetrics, EvalSnapshot, LossConfig, MaxGroup, Regularizer,
    SamplerConfig, TrainSchedule, TrainSetup,
};

/// DCR weight used by experiment configs: the library default spread over a
/// 96-sample batch, since the regularizer sums over samples while the other
/// losses average.
pub const DESK_DCR_LAMBDA: f64 = crate::losses::DEFAULT_LAMBDA / 96.0;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "MIXNORM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Kind used by every slot unless `slots` overrides it.
    pub norm: NormKind,
    pub slots: Option<Vec<NormKind>>,
    pub running_update: RunningUpdate,
    pub neck: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embedding_dim: 32,
            norm: NormKind::Dmn,
            slots: None,
            running_update: RunningUpdate::GlobalBatch,
            neck: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Drives initialization, sampling and partitions; the data generator is
    /// seeded from `data.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub model: ModelSpec,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub dmn: DmnConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "mixnorm_full".into(),
            seed: 1,
            data: DataConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelSpec::default(),
            schedule: TrainSchedule::default(),
            loss: LossConfig {
                lambda: DESK_DCR_LAMBDA,
                ..LossConfig::default()
            },
            dmn: DmnConfig::default(),
            output_dir: None,
        }
    }
}

pub const PRESETS: &[&str] = &[
    "baseline_bn",
    "baseline_dcr",
    "baseline_dmn",
    "mixnorm_full",
    "rs_baseline",
    "mixnorm_center",
];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            name: name.into(),
            ..Default::default()
        };
        let (norm, reg) = match name {
            "baseline_bn" => (NormKind::Bn, Regularizer::None),
            "baseline_dcr" => (NormKind::Bn, Regularizer::Dcr),
            "baseline_dmn" => (NormKind::Dmn, Regularizer::None),
            "mixnorm_full" => (NormKind::Dmn, Regularizer::Dcr),
            "rs_baseline" => {
                cfg.sampler = SamplerConfig::Rs {
                    batch_size: 96,
                    k_per_id: 4,
                };
                (NormKind::Bn, Regularizer::None)
            }
            "mixnorm_center" => {
                cfg.loss.lambda = CENTER_LOSS_LAMBDA;
                (NormKind::Dmn, Regularizer::Center)
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")),
                ))
            }
        };
        cfg.model.norm = norm;
        cfg.loss.regularizer = reg;
        if reg == Regularizer::None {
            cfg.loss.lambda = 0.0;
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.feature_dim,
            hidden: self.model.hidden.clone(),
            embedding_dim: self.model.embedding_dim,
            classes: self.data.classes,
            norms: self
                .model
                .slots
                .clone()
                .unwrap_or_else(|| vec![self.model.norm; self.model.hidden.len()]),
            running_update: self.model.running_update,
            neck: self.model.neck,
        }
    }

    /// Checks every cross-field invariant; errors carry the offending path.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        let model = self.model_config();
        model.validate()?;
        match &self.sampler {
            SamplerConfig::Us { p_ids, k_per_id } => {
                if *p_ids == 0 || *k_per_id < 2 {
                    return Err(Error::config("sampler", "need p_ids >= 1 and k_per_id >= 2"));
                }
                if *p_ids > self.data.classes || *k_per_id > self.data.samples_per_id {
                    return Err(Error::config("sampler", "batch exceeds available identities"));
                }
            }
            SamplerConfig::Rs {
                batch_size,
                k_per_id,
            } => {
                if model.uses_dmn() {
                    return Err(Error::config(
                        "sampler.kind",
                        "rs sampling cannot be combined with dmn normalization",
                    ));
                }
                if *k_per_id < 2 || batch_size % k_per_id != 0 {
                    return Err(Error::config(
                        "sampler.batch_size",
                        "must be a multiple of k_per_id >= 2",
                    ));
                }
            }
        }
        if model.uses_dmn() {
            self.dmn.policy(self.data.source_domains)?;
        }
        Ok(())
    }

    /// Replaces both the training and the data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    /// Applies [`SEED_ENV`] when set.
    pub fn apply_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(SEED_ENV, format!("not an integer: {v:?}")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn setup(&self) -> TrainSetup {
        TrainSetup {
            schedule: self.schedule.clone(),
            loss: self.loss.clone(),
            sampler: self.sampler.clone(),
            dmn: self.dmn.clone(),
            seed: self.seed,
        }
    }
}

/// Final evaluation written to `eval_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub seed: u64,
    pub target_acc: f64,
    pub source_acc: f64,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    /// Distance of each source domain's embedding mean to the pooled
    /// source mean.
    pub center_distances: Vec<f64>,
    pub mean_center_distance: f64,
    pub loss_curve: Vec<f64>,
}

fn snapshot(model: &Model<f32>, suite: &DomainSuite) -> Result<EvalSnapshot> {
    let target_acc = evaluate_classification(model, &suite.target)?;
    let RetrievalReport { map, cmc } = evaluate_retrieval(model, &suite.query, &suite.gallery)?;
    Ok(EvalSnapshot {
        target_acc,
        map,
        cmc1: cmc[0],
        cmc5: cmc[1],
        cmc10: cmc[2],
    })
}

/// Per-source-domain center distances of eval-mode embeddings.
pub fn source_center_distances(model: &Model<f32>, sources: &[LabeledDataset]) -> Result<Vec<f64>> {
    let refs: Vec<&LabeledDataset> = sources.iter().collect();
    let pooled = LabeledDataset::concat(&refs)?;
    let emb = embed(model, &pooled)?;
    domain_center_stats(&emb, &pooled.domain_ids)
}

/// Builds an [`EvalReport`] for a trained model.
pub fn evaluate_model(
    name: &str,
    seed: u64,
    model: &Model<f32>,
    suite: &DomainSuite,
    metrics: &[EpochMetrics],
) -> Result<EvalReport> {
    let snap = snapshot(model, suite)?;
    let refs: Vec<&LabeledDataset> = suite.sources.iter().collect();
    let source_acc = evaluate_classification(model, &LabeledDataset::concat(&refs)?)?;
    let center_distances = source_center_distances(model, &suite.sources)?;
    let mean_center_distance =
        center_distances.iter().sum::<f64>() / center_distances.len() as f64;
    Ok(EvalReport {
        name: name.into(),
        seed,
        target_acc: snap.target_acc,
        source_acc,
        map: snap.map,
        cmc1: snap.cmc1,
        cmc5: snap.cmc5,
        cmc10: snap.cmc10,
        center_distances,
        mean_center_distance,
        loss_curve: metrics.iter().map(|m| m.loss_total).collect(),
    })
}

pub struct ExperimentOutcome {
    pub model: Model<f32>,
    pub suite: DomainSuite,
    pub metrics: Vec<EpochMetrics>,
    pub report: EvalReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let suite = cfg.data.build()?;
    let root = RngStream::new(cfg.seed);
    let mut model = Model::<f32>::build(&cfg.model_config(), &mut root.split("init"))?;
    let metrics = train(&mut model, &suite.sources, &cfg.setup(), |m| snapshot(m, &suite))?;
    let report = evaluate_model(&cfg.name, cfg.seed, &model, &suite, &metrics)?;
    Ok(ExperimentOutcome {
        model,
        suite,
        metrics,
        report,
    })
}

/// Writes `(name, contents)` pairs into `dir` through a staging directory
/// that replaces `dir` only once every file is written.
pub fn write_atomically(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let base = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let staging = parent.join(format!(".{base}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (name, contents) in files {
        let path = staging.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Writes `checkpoint.json`, `metrics.csv`, `eval_report.json` and the
/// resolved `config.json`.
pub fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutcome) -> Result<()> {
    let ck = Checkpoint::from_model(&out.model, &cfg.schedule);
    write_atomically(
        dir,
        &[
            ("checkpoint.json", ck.to_json()?),
            ("metrics.csv", metrics_csv(&out.metrics)),
            ("eval_report.json", serde_json::to_string_pretty(&out.report)?),
            ("config.json", cfg.to_json()),
        ],
    )
}

/// Named ablation protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Components,
    Ddc,
    MaxGroup,
    Sampling,
    DcrVsCl,
    Layers,
    FixedC1,
    DcrBaseline,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Components,
        Suite::Ddc,
        Suite::MaxGroup,
        Suite::Sampling,
        Suite::DcrVsCl,
        Suite::Layers,
        Suite::FixedC1,
        Suite::DcrBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::Ddc => "ddc",
            Suite::MaxGroup => "max_group",
            Suite::Sampling => "sampling",
            Suite::DcrVsCl => "dcr_vs_cl",
            Suite::Layers => "layers",
            Suite::FixedC1 => "fixed_c1",
            Suite::DcrBaseline => "dcr_baseline",
        }
    }

    /// `(label, config)` cells for one seed, derived from `base`.
    pub fn cells(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let variant = |label: &str, norm: NormKind, reg: Regularizer| {
            let mut c = base.clone();
            c.name = label.to_string();
            c.model.norm = norm;
            c.model.slots = None;
            // DCR cells keep the base's DCR flavour.
            c.loss.regularizer = match (reg, base.loss.regularizer) {
                (Regularizer::Dcr, Regularizer::DcrDomainCenters) => Regularizer::DcrDomainCenters,
                _ => reg,
            };
            c.loss.lambda = match reg {
                Regularizer::None => 0.0,
                Regularizer::Center => CENTER_LOSS_LAMBDA,
                _ => base.loss.lambda.max(f64::MIN_POSITIVE),
            };
            c
        };
        let full = || variant("mixnorm", NormKind::Dmn, Regularizer::Dcr);
        let mut cells = match self {
            Suite::Components => vec![
                variant("baseline", NormKind::Bn, Regularizer::None),
                variant("baseline+dmn", NormKind::Dmn, Regularizer::None),
                variant("baseline+dmn+dcr", NormKind::Dmn, Regularizer::Dcr),
            ],
            Suite::Ddc => {
                let mut shared = full();
                shared.name = "shared_partition".into();
                shared.dmn.shared_partition = true;
                let mut ddc = full();
                ddc.name = "independent_partitions".into();
                ddc.dmn.shared_partition = false;
                vec![ddc, shared]
            }
            Suite::MaxGroup => {
                let mut d = full();
                d.name = "max_group_d".into();
                d.dmn.max_group = MaxGroup::D;
                let mut d1 = full();
                d1.name = "max_group_d_minus_1".into();
                d1.dmn.max_group = MaxGroup::DMinus1;
                vec![d, d1]
            }
            Suite::Sampling => {
                let mut rs = variant("rs_baseline", NormKind::Bn, Regularizer::None);
                let (p, k) = match base.sampler {
                    SamplerConfig::Us { p_ids, k_per_id } => (p_ids, k_per_id),
                    SamplerConfig::Rs { batch_size, k_per_id } => {
                        (batch_size / k_per_id / base.data.source_domains, k_per_id)
                    }
                };
                rs.sampler = SamplerConfig::Rs {
                    batch_size: p * k * base.data.source_domains,
                    k_per_id: k,
                };
                let mut us = variant("us_baseline", NormKind::Bn, Regularizer::None);
                us.sampler = SamplerConfig::Us { p_ids: p, k_per_id: k };
                let mut mix = full();
                mix.name = "us_mixnorm".into();
                mix.sampler = us.sampler.clone();
                vec![rs, us, mix]
            }
            Suite::DcrVsCl => {
                let cl = variant("dmn+center_loss", NormKind::Dmn, Regularizer::Center);
                let mut dcr = full();
                dcr.name = "dmn+dcr".into();
                vec![cl, dcr]
            }
            Suite::Layers => {
                let slots = base.model.hidden.len();
                let mut cells = Vec::new();
                for mask in 0..(1usize << slots) {
                    let kinds: Vec<NormKind> = (0..slots)
                        .map(|s| if mask >> s & 1 == 1 { NormKind::Dmn } else { NormKind::Bn })
                        .collect();
                    let label: Vec<&str> = kinds
                        .iter()
                        .map(|k| if *k == NormKind::Dmn { "dmn" } else { "bn" })
                        .collect();
                    let mut c = full();
                    c.name = format!("slots={}", label.join("/"));
                    c.model.slots = Some(kinds);
                    cells.push(c);
                }
                cells
            }
            Suite::FixedC1 => {
                let mut c1 = full();
                c1.name = "fixed_c1".into();
                c1.dmn.fixed_c = Some(1);
                vec![
                    variant("baseline", NormKind::Bn, Regularizer::None),
                    c1,
                    full(),
                ]
            }
            Suite::DcrBaseline => vec![
                variant("baseline", NormKind::Bn, Regularizer::None),
                variant("baseline+dcr", NormKind::Bn, Regularizer::Dcr),
                variant("baseline+dmn", NormKind::Dmn, Regularizer::None),
                variant("baseline+dmn+dcr", NormKind::Dmn, Regularizer::Dcr),
            ],
        };
        for c in &mut cells {
            if matches!(c.loss.regularizer, Regularizer::Dcr | Regularizer::DcrDomainCenters) {
                c.loss.lambda = base_dcr_lambda(base);
            }
        }
        cells.into_iter().map(|c| (c.name.clone(), c)).collect()
    }
}

// The base config's DCR weight, or the default when the base disables it.
fn base_dcr_lambda(base: &ExperimentConfig) -> f64 {
    match base.loss.regularizer {
        Regularizer::Dcr | Regularizer::DcrDomainCenters if base.loss.lambda > 0.0 => base.loss.lambda,
        _ => DESK_DCR_LAMBDA,
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
                Error::config("suite", format!("unknown suite {s:?}; known: {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub target_acc: f64,
    pub source_acc: f64,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub center_dist: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    /// Config labels in suite order.
    pub configs: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, config: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == config && r.seed == seed)
    }

    pub fn mean(&self, config: &str, metric: impl Fn(&AblationRow) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.config == config)
            .map(metric)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Seeds on which `config` has the (possibly shared) best target accuracy.
    pub fn wins(&self, config: &str) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| {
                let best = self
                    .rows
                    .iter()
                    .filter(|r| r.seed == s)
                    .map(|r| r.target_acc)
                    .fold(f64::NEG_INFINITY, f64::max);
                self.row(config, s).is_some_and(|r| r.target_acc == best)
            })
            .count()
    }

    pub fn comparison_csv(&self) -> String {
        let mut out =
            String::from("config,seed,target_acc,source_acc,map,cmc1,cmc5,cmc10,center_dist\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.config, r.seed, r.target_acc, r.source_acc, r.map, r.cmc1, r.cmc5, r.cmc10,
                r.center_dist
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "config,mean_target_acc,mean_map,mean_cmc1,mean_center_dist,wins,seeds\n",
        );
        for c in &self.configs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                c,
                self.mean(c, |r| r.target_acc),
                self.mean(c, |r| r.map),
                self.mean(c, |r| r.cmc1),
                self.mean(c, |r| r.center_dist),
                self.wins(c),
                self.seeds.len()
            ));
        }
        out
    }
}

/// Directory name of one ablation cell.
pub fn cell_dir_name(config: &str, seed: u64) -> String {
    let clean: String = config
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    format!("{clean}_seed{seed}")
}

/// Runs every `(config, seed)` cell of a suite in parallel. With `out`, each
/// cell writes its run outputs to `out/<cell>`, and the comparison and
/// summary tables land in `out`.
pub fn run_ablation(
    base: &ExperimentConfig,
    suite: Suite,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let configs: Vec<String> = suite.cells(base).into_iter().map(|(l, _)| l).collect();
    let jobs: Vec<(u64, String, ExperimentConfig)> = seeds
        .iter()
        .flat_map(|&seed| {
            let seeded = base.clone().with_seed(seed);
            suite
                .cells(&seeded)
                .into_iter()
                .map(move |(label, cfg)| (seed, label, cfg))
        })
        .collect();
    let rows = jobs
        .into_par_iter()
        .map(|(seed, label, cfg)| {
            let run = run_experiment(&cfg)?;
            if let Some(dir) = out {
                write_run_outputs(&dir.join(cell_dir_name(&label, seed)), &cfg, &run)?;
            }
            let r = &run.report;
            Ok(AblationRow {
                config: label,
                seed,
                target_acc: r.target_acc,
                source_acc: r.source_acc,
                map: r.map,
                cmc1: r.cmc1,
                cmc5: r.cmc5,
                cmc10: r.cmc10,
                center_dist: r.mean_center_distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let result = AblationResult {
        suite,
        seeds: seeds.to_vec(),
        configs,
        rows,
    };
    if let Some(dir) = out {
        for (name, text) in [
            ("comparison.csv", result.comparison_csv()),
            ("summary.csv", result.summary_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(result)
}
