//! End-to-end runs: the level-wise semi-supervised procedure and the two
//! baselines (fully supervised, plain self-training).
//!
//! Run directory layout:
//!
//! ```text
//! <run_dir>/manifest.json        RunManifest, rewritten after every stage
//! <run_dir>/config.json          the ExperimentConfig the run was started with
//! <run_dir>/plan.json            LevelPlan
//! <run_dir>/split.json           SplitManifest
//! <run_dir>/checkpoints/<id>.ckpt (+ .ckpt.json)
//! <run_dir>/pseudo/level_<n>/<image id>.pmap and weights.json
//! <run_dir>/curves/<id>.csv
//! <run_dir>/reports/<method>.json and <method>.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, preprocess_sample, split, synth_generate, DatasetSplit, SplitManifest, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::{generate_pseudo_labels, PseudoLabel, WeightVector};
use crate::io::{read_json, write_bytes, write_json, write_pmap};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{copy_model, Backbone, BackboneConfig, CombinedLoss, Lineage, ModelCheckpoint, TrainingMeta};
use crate::schedule::{assign_subsets, derive_seed, plan_levels, seeded_rng, select_parents, LevelPlan, SeedStream, SubsetAssignment};
use crate::training::{train, write_curve, EpochRecord, TrainConfig, TrainOutcome};
use crate::types::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Directory {
        images: PathBuf,
        masks: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_s1")]
    pub s1: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::initial")]
    pub initial: TrainConfig,
    #[serde(default = "TrainConfig::submodel")]
    pub submodel: TrainConfig,
    #[serde(default = "TrainConfig::fully_supervised")]
    pub fully_supervised: TrainConfig,
    #[serde(default = "TrainConfig::self_training")]
    pub self_training: TrainConfig,
    #[serde(default = "default_self_training_iterations")]
    pub self_training_iterations: usize,
    #[serde(default)]
    pub loss: CombinedLoss,
    /// Binarization threshold for fusion agreement and evaluation.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Sub-models of one level trained concurrently. Results do not depend on it.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Write every pseudo-label map under `pseudo/`.
    #[serde(default = "default_true")]
    pub save_pseudo_labels: bool,
}

fn default_s1() -> usize {
    16
}
fn default_self_training_iterations() -> usize {
    3
}
fn default_threshold() -> f64 {
    0.5
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Full-scale settings: 128x128 inputs, 16 initial sub-models, long schedules.
    pub fn new(data: DataSource, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            data,
            run_dir: run_dir.into(),
            split: SplitSpec::default(),
            backbone: BackboneConfig::default(),
            s1: default_s1(),
            seed: 0,
            initial: TrainConfig::initial(),
            submodel: TrainConfig::submodel(),
            fully_supervised: TrainConfig::fully_supervised(),
            self_training: TrainConfig::self_training(),
            self_training_iterations: default_self_training_iterations(),
            loss: CombinedLoss::default(),
            threshold: default_threshold(),
            workers: default_workers(),
            save_pseudo_labels: true,
        }
    }

    /// Synthetic 64x64 blobs, 20 labeled / 200 unlabeled / 10 validation /
    /// 50 test images, four initial sub-models, a small network and short
    /// training schedules. Finishes in minutes on one CPU core.
    pub fn desk_scale(seed: u64, run_dir: impl Into<PathBuf>) -> Self {
        let synthetic = SyntheticSpec {
            count: 280,
            image_size: 64,
            seed,
            ..Default::default()
        };
        let backbone = BackboneConfig {
            depth: 4,
            root_features: 8,
            input_size: 64,
            ..Default::default()
        };
        let fast = |cfg: TrainConfig, epochs: usize, batch: usize| TrainConfig {
            max_epochs: epochs,
            batch_size: batch,
            learning_rate: 1e-3,
            ..cfg
        };
        Self {
            split: SplitSpec {
                test_fraction: 50.0 / 280.0,
                labeled_count: 20,
                validation_count: 10,
                seed,
            },
            backbone,
            s1: 4,
            seed,
            initial: fast(TrainConfig::initial(), 40, 4),
            submodel: TrainConfig {
                early_stop_patience: Some(3),
                ..fast(TrainConfig::submodel(), 8, 4)
            },
            fully_supervised: fast(TrainConfig::fully_supervised(), 40, 4),
            self_training: fast(TrainConfig::self_training(), 4, 4),
            ..Self::new(DataSource::Synthetic(synthetic), run_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        plan_levels(self.s1, 0).map_err(|e| Error::Config(e.to_string()))?;
        for (name, cfg) in [
            ("initial", &self.initial),
            ("submodel", &self.submodel),
            ("fully_supervised", &self.fully_supervised),
            ("self_training", &self.self_training),
        ] {
            cfg.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.loss.foreground_class >= self.backbone.classes {
            return Err(Error::Config("loss foreground_class exceeds the class count".into()));
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config("split test_fraction must lie in (0, 1)".into()));
        }
        match &self.data {
            DataSource::Directory { images, masks } => {
                for dir in [images, masks] {
                    if !dir.is_dir() {
                        return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
                    }
                }
            }
            DataSource::Synthetic(spec) => {
                spec.validate(self.backbone.size_multiple())?;
                if spec.channels != self.backbone.in_channels {
                    return Err(Error::Config(format!(
                        "synthetic data has {} channels but the backbone expects {}",
                        spec.channels, self.backbone.in_channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Settings that change results; `run_dir` and `workers` do not.
    fn fingerprint(&self) -> Self {
        Self {
            run_dir: PathBuf::new(),
            workers: 1,
            ..self.clone()
        }
    }
}

/// Loads or generates the samples, splits them and preprocesses every image
/// to `backbone.input_size`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let samples = match &cfg.data {
        DataSource::Directory { images, masks } => load_dataset(images, Some(masks))?,
        DataSource::Synthetic(spec) => synth_generate(spec)?,
    };
    let size = cfg.backbone.input_size;
    Ok(split(samples, &cfg.split)?.map_samples(|s| preprocess_sample(s, size)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Semi,
    FullySupervised,
    SelfTraining,
}

impl RunMode {
    pub fn method_name(self) -> &'static str {
        match self {
            RunMode::Semi => "semi",
            RunMode::FullySupervised => "fs",
            RunMode::SelfTraining => "self_train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoInventory {
    /// Level whose models produced the labels.
    pub source_level: usize,
    pub count: usize,
    /// Relative to the run directory; absent when maps were not written.
    pub directory: Option<PathBuf>,
}

/// One completed stage: level 0 is the initial model, levels 1.. hold
/// sub-models; self-training rounds reuse the same record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level_index: usize,
    pub checkpoints: Vec<String>,
    pub parents: Vec<Option<String>>,
    pub subsets: Option<SubsetAssignment>,
    /// Pseudo labels the level trained on.
    pub pseudo_labels: Option<PseudoInventory>,
    pub histories: Vec<Vec<EpochRecord>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: RunMode,
    pub plan: Option<LevelPlan>,
    pub levels: Vec<LevelRecord>,
    pub final_checkpoint: Option<String>,
    pub training_seconds: f64,
    pub metrics: Option<MetricsReport>,
}

impl RunManifest {
    fn new(mode: RunMode, plan: Option<LevelPlan>) -> Self {
        Self {
            mode,
            plan,
            levels: Vec::new(),
            final_checkpoint: None,
            training_seconds: 0.0,
            metrics: None,
        }
    }

    /// Checkpoint digests and epoch records, without timings.
    pub fn deterministic_view(&self) -> Vec<(usize, Vec<String>, Option<SubsetAssignment>, Vec<Vec<EpochRecord>>)> {
        self.levels
            .iter()
            .map(|l| (l.level_index, l.checkpoints.clone(), l.subsets.clone(), l.histories.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Return after this level has been written (used to interrupt runs).
    pub stop_after_level: Option<usize>,
    /// Continue from the manifest in `run_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// `None` when the run stopped early on request.
    pub final_checkpoint: Option<ModelCheckpoint>,
    pub report: Option<MetricsReport>,
}

pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn checkpoint(&self, id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{id}.ckpt"))
    }
    pub fn curve(&self, id: &str) -> PathBuf {
        self.root.join("curves").join(format!("{id}.csv"))
    }
    pub fn pseudo_dir_relative(level: usize) -> PathBuf {
        PathBuf::from("pseudo").join(format!("level_{level}"))
    }
    pub fn report(&self, method: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{method}.{ext}"))
    }
    fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

/// Exclusive ownership of a run directory, released on drop. A lock left by
/// a process that no longer exists is taken over.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(layout: &RunLayout) -> Result<Self> {
        fs::create_dir_all(layout.root()).map_err(|e| Error::io(layout.root(), e))?;
        let path = layout.lock();
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    let alive = holder
                        .trim()
                        .parse::<u32>()
                        .is_ok_and(|pid| Path::new("/proc").join(pid.to_string()).exists());
                    if alive {
                        return Err(Error::Config(format!(
                            "run directory {} is locked by process {}",
                            layout.root().display(),
                            holder.trim()
                        )));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Config(format!("could not lock {}", layout.root().display())))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Shared state of one run invocation.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    layout: RunLayout,
    data: DatasetSplit,
    manifest: RunManifest,
    _lock: RunLock,
}

impl<'a> Run<'a> {
    fn open(cfg: &'a ExperimentConfig, mode: RunMode, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let layout = RunLayout::new(&cfg.run_dir);
        let lock = RunLock::acquire(&layout)?;
        let data = prepare_data(cfg)?;
        let plan = match mode {
            RunMode::Semi => Some(plan_levels(cfg.s1, data.unlabeled.len())?),
            _ => None,
        };
        let manifest = if resume {
            Self::check_resumable(cfg, &layout, mode, &data)?
        } else {
            if layout.manifest().exists() {
                return Err(Error::Config(format!(
                    "{} already holds a run; resume it or choose a fresh run_dir",
                    layout.root().display()
                )));
            }
            write_json(&layout.config(), cfg)?;
            write_json(&layout.split(), &data.manifest())?;
            if let Some(p) = &plan {
                write_json(&layout.plan(), p)?;
            }
            let m = RunManifest::new(mode, plan);
            write_json(&layout.manifest(), &m)?;
            m
        };
        Ok(Self {
            cfg,
            layout,
            data,
            manifest,
            _lock: lock,
        })
    }

    fn check_resumable(cfg: &ExperimentConfig, layout: &RunLayout, mode: RunMode, data: &DatasetSplit) -> Result<RunManifest> {
        if !layout.manifest().exists() {
            return Err(Error::Config(format!("no manifest to resume in {}", layout.root().display())));
        }
        let manifest: RunManifest = read_json(&layout.manifest())?;
        if manifest.mode != mode {
            return Err(Error::Config(format!(
                "run directory holds a {:?} run, not {mode:?}",
                manifest.mode
            )));
        }
        let stored: ExperimentConfig = read_json(&layout.config())?;
        if stored.fingerprint() != cfg.fingerprint() {
            return Err(Error::Config("configuration differs from the one the run was started with".into()));
        }
        let split: SplitManifest = read_json(&layout.split())?;
        if split != data.manifest() {
            return Err(Error::Integrity("data split differs from the recorded split".into()));
        }
        Ok(manifest)
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.layout.manifest(), &self.manifest)
    }

    fn record(&mut self, level: LevelRecord) -> Result<()> {
        self.manifest.training_seconds += level.seconds;
        self.manifest.levels.push(level);
        self.save_manifest()
    }

    fn load_checkpoints(&self, ids: &[String]) -> Result<Vec<ModelCheckpoint>> {
        ids.iter().map(|id| ModelCheckpoint::load(&self.layout.checkpoint(id))).collect()
    }

    fn save_trained(&self, outcome: &TrainOutcome, lineage: Lineage) -> Result<ModelCheckpoint> {
        let meta = TrainingMeta {
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            final_val_loss: outcome.final_val_loss(),
        };
        let ckpt = ModelCheckpoint::from_model(&outcome.model, lineage, meta);
        ckpt.save(&self.layout.checkpoint(&ckpt.id()))?;
        write_curve(&self.layout.curve(&ckpt.id()), &outcome.history)?;
        Ok(ckpt)
    }

    /// Level 0: a fresh model trained on the labeled images under `train_cfg`.
    fn train_initial(&mut self, train_cfg: &TrainConfig) -> Result<ModelCheckpoint> {
        if let Some(level) = self.manifest.levels.first() {
            return Ok(self.load_checkpoints(&level.checkpoints)?.remove(0));
        }
        let started = Instant::now();
        let base = self.cfg.seed;
        let model = Backbone::new(self.cfg.backbone, &mut seeded_rng(derive_seed(base, 0, 0, SeedStream::Init)))?;
        log::info!("training the initial model on {} labeled images", self.data.labeled.len());
        let outcome = train(
            model,
            &self.data.labeled,
            &[],
            &self.data.validation,
            &train_cfg.with_seed(derive_seed(base, 0, 0, SeedStream::Training)),
            &self.cfg.loss,
        )?;
        let ckpt = self.save_trained(&outcome, Lineage::root())?;
        self.record(LevelRecord {
            level_index: 0,
            checkpoints: vec![ckpt.id()],
            parents: vec![None],
            subsets: None,
            pseudo_labels: None,
            histories: vec![outcome.history],
            seconds: started.elapsed().as_secs_f64(),
        })?;
        Ok(ckpt)
    }

    fn pseudo_label(&self, models: &[Backbone], source_level: usize) -> Result<(Vec<PseudoLabel>, PseudoInventory)> {
        let labels = generate_pseudo_labels(
            models,
            &self.data.unlabeled,
            self.cfg.loss.foreground_class,
            self.cfg.threshold,
            source_level,
        )?;
        let directory = if self.cfg.save_pseudo_labels {
            let rel = RunLayout::pseudo_dir_relative(source_level);
            let dir = self.layout.root().join(&rel);
            let mut weights: BTreeMap<&str, &WeightVector> = BTreeMap::new();
            for (s, label) in self.data.unlabeled.iter().zip(&labels) {
                write_pmap(&dir.join(format!("{}.pmap", s.id)), &label.map)?;
                weights.insert(&s.id, &label.weights_used);
            }
            write_json(&dir.join("weights.json"), &weights)?;
            Some(rel)
        } else {
            None
        };
        let inventory = PseudoInventory {
            source_level,
            count: labels.len(),
            directory,
        };
        Ok((labels, inventory))
    }

    fn pseudo_samples(&self, labels: &[PseudoLabel], ids: Option<&[String]>) -> Vec<Sample> {
        let by_id: HashMap<&str, (&Sample, &PseudoLabel)> = self
            .data
            .unlabeled
            .iter()
            .zip(labels)
            .map(|(s, l)| (s.id.as_str(), (s, l)))
            .collect();
        let attach = |(s, l): (&Sample, &PseudoLabel)| Sample {
            pseudo: Some(l.map.clone()),
            ..s.clone()
        };
        match ids {
            Some(ids) => ids.iter().map(|id| attach(by_id[id.as_str()])).collect(),
            None => self.data.unlabeled.iter().zip(labels).map(attach).collect(),
        }
    }

    fn finish(&mut self, final_ckpt: ModelCheckpoint) -> Result<RunOutcome> {
        let model = final_ckpt.to_model()?;
        let per_image = evaluate(&model, &self.data.test, self.cfg.threshold, self.cfg.loss.foreground_class)?;
        let method = self.manifest.mode.method_name();
        let report = MetricsReport::from_per_image(method, per_image, self.manifest.training_seconds);
        write_json(&self.layout.report(method, "json"), &report)?;
        write_bytes(&self.layout.report(method, "csv"), report.to_csv().as_bytes())?;
        log::info!("{method}: test dice {:.4} ± {:.4}", report.dice.mean, report.dice.std);
        self.manifest.final_checkpoint = Some(final_ckpt.id());
        self.manifest.metrics = Some(report.clone());
        self.save_manifest()?;
        Ok(RunOutcome {
            manifest: self.manifest.clone(),
            final_checkpoint: Some(final_ckpt),
            report: Some(report),
        })
    }

    fn interrupted(&self) -> RunOutcome {
        RunOutcome {
            manifest: self.manifest.clone(),
            final_checkpoint: None,
            report: None,
        }
    }
}

struct SubmodelJob {
    parent: ModelCheckpoint,
    lineage: Lineage,
    pseudo: Vec<Sample>,
    seed: u64,
}

/// Trains independent jobs, `workers` at a time, keeping job order.
fn train_jobs(
    jobs: Vec<SubmodelJob>,
    workers: usize,
    labeled: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    loss: &CombinedLoss,
) -> Result<Vec<(Lineage, TrainOutcome)>> {
    let run = |job: SubmodelJob| -> Result<(Lineage, TrainOutcome)> {
        log::info!(
            "training sub-model {} on {} pseudo-labeled + {} labeled images",
            job.lineage.id(),
            job.pseudo.len(),
            labeled.len()
        );
        let model = copy_model(&job.parent, job.lineage.clone())?.to_model()?;
        let outcome = train(model, labeled, &job.pseudo, validation, &cfg.with_seed(job.seed), loss)?;
        Ok((job.lineage, outcome))
    };
    if workers <= 1 {
        return jobs.into_iter().map(run).collect();
    }
    let mut results = Vec::new();
    let mut pending = jobs.into_iter().peekable();
    while pending.peek().is_some() {
        let batch: Vec<SubmodelJob> = pending.by_ref().take(workers).collect();
        let finished: Vec<Result<(Lineage, TrainOutcome)>> = thread::scope(|scope| {
            let handles: Vec<_> = batch.into_iter().map(|job| scope.spawn(|| run(job))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("sub-model training thread panicked"))))
                .collect()
        });
        for r in finished {
            results.push(r?);
        }
    }
    Ok(results)
}

/// The full level-wise procedure: initial model, then levels of sub-models
/// trained on pseudo labels fused from the previous level, down to one model.
pub fn run_semi_supervised(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    let mut run = Run::open(cfg, RunMode::Semi, opts.resume)?;
    let plan = run.manifest.plan.clone().expect("semi runs carry a plan");
    let m0 = run.train_initial(&cfg.initial)?;
    if opts.stop_after_level == Some(0) {
        return Ok(run.interrupted());
    }

    let last = run.manifest.levels.last().expect("level 0 recorded");
    let mut current = run.load_checkpoints(&last.checkpoints)?;
    if current.is_empty() {
        current = vec![m0];
    }
    let start = run.manifest.levels.len();
    let base = cfg.seed;
    for spec in plan.levels.iter().filter(|l| l.level_index >= start) {
        let n = spec.level_index;
        let started = Instant::now();
        let models = current.iter().map(ModelCheckpoint::to_model).collect::<Result<Vec<_>>>()?;
        log::info!("level {n}: pseudo-labeling {} images with {} model(s)", run.data.unlabeled.len(), models.len());
        let (labels, inventory) = run.pseudo_label(&models, n - 1)?;
        drop(models);

        let parents: Vec<usize> = if n == 1 {
            vec![0; spec.submodel_count]
        } else {
            select_parents(current.len(), spec.submodel_count, &mut seeded_rng(derive_seed(base, n, 0, SeedStream::Parents)))?
        };
        let ids: Vec<String> = run.data.unlabeled.iter().map(|s| s.id.clone()).collect();
        let subsets = assign_subsets(
            n,
            &ids,
            spec.subset_size,
            spec.submodel_count,
            &mut seeded_rng(derive_seed(base, n, 0, SeedStream::Subsets)),
        )?;
        let jobs = parents
            .iter()
            .zip(&subsets.subsets)
            .enumerate()
            .map(|(i, (&p, subset))| SubmodelJob {
                parent: current[p].clone(),
                lineage: Lineage {
                    level_index: n,
                    submodel_index: i,
                    parent: Some(current[p].id()),
                },
                pseudo: run.pseudo_samples(&labels, Some(subset)),
                seed: derive_seed(base, n, i, SeedStream::Training),
            })
            .collect();
        drop(labels);
        let trained = train_jobs(jobs, cfg.workers, &run.data.labeled, &run.data.validation, &cfg.submodel, &cfg.loss)?;

        let mut next = Vec::with_capacity(trained.len());
        let mut histories = Vec::with_capacity(trained.len());
        for (lineage, outcome) in trained {
            next.push(run.save_trained(&outcome, lineage)?);
            histories.push(outcome.history);
        }
        run.record(LevelRecord {
            level_index: n,
            checkpoints: next.iter().map(ModelCheckpoint::id).collect(),
            parents: next.iter().map(|c| c.lineage.parent.clone()).collect(),
            subsets: Some(subsets),
            pseudo_labels: Some(inventory),
            histories,
            seconds: started.elapsed().as_secs_f64(),
        })?;
        current = next;
        if opts.stop_after_level == Some(n) && n < plan.final_level() {
            return Ok(run.interrupted());
        }
    }
    let final_ckpt = current.into_iter().next().expect("final level has one model");
    run.finish(final_ckpt)
}

/// One model trained on the labeled images only.
pub fn run_fully_supervised(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut run = Run::open(cfg, RunMode::FullySupervised, false)?;
    let ckpt = run.train_initial(&cfg.fully_supervised)?;
    run.finish(ckpt)
}

/// Initial model, then rounds of pseudo-labeling every unlabeled image with
/// the current model and continuing its training on labeled + pseudo data.
pub fn run_self_training_baseline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut run = Run::open(cfg, RunMode::SelfTraining, false)?;
    let mut current = run.train_initial(&cfg.initial)?;
    if run.data.unlabeled.is_empty() {
        return run.finish(current);
    }
    for round in 1..=cfg.self_training_iterations {
        let started = Instant::now();
        let model = current.to_model()?;
        let (labels, inventory) = run.pseudo_label(std::slice::from_ref(&model), round - 1)?;
        let pseudo = run.pseudo_samples(&labels, None);
        drop(labels);
        log::info!("self-training round {round}");
        let outcome = train(
            model,
            &run.data.labeled,
            &pseudo,
            &run.data.validation,
            &cfg.self_training.with_seed(derive_seed(cfg.seed, round, 0, SeedStream::Training)),
            &cfg.loss,
        )?;
        let lineage = Lineage {
            level_index: round,
            submodel_index: 0,
            parent: Some(current.id()),
        };
        current = run.save_trained(&outcome, lineage)?;
        run.record(LevelRecord {
            level_index: round,
            checkpoints: vec![current.id()],
            parents: vec![current.lineage.parent.clone()],
            subsets: None,
            pseudo_labels: Some(inventory),
            histories: vec![outcome.history],
            seconds: started.elapsed().as_secs_f64(),
        })?;
    }
    run.finish(current)
}
