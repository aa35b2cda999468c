//! Run directories, manifests and the stage-by-stage pipeline driven by the
//! CLI: pretrain, depth and width calibration, one-for-all fine-tuning,
//! then extraction, search and profiling of the trained elastic model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, sequential_batches, Corpus, CorpusConfig, FactSet, LmBatch};
use crate::depth::{build_dp, grid_shapes, DpTable};
use crate::error::{Error, Result};
use crate::eval::{fact_accuracy, perplexity, EvalCache, Evaluator, FactEvaluator, FactProbes, MetricKind, PplEvaluator};
use crate::model::checkpoint::write_atomic;
use crate::model::{pretrain, ModelConfig, PretrainConfig, PretrainReport, TokenBatch};
use crate::rng::Rng;
use crate::search::{profile, profile_csv, search, ProfileConfig, ProfileRow, SearchResult, SearchSpec};
use crate::shape::{ShapeGrid, SubnetShape};
use crate::smol::{SmolBank, SmolConfig};
use crate::train::{finetune, OfaConfig, OfaReport};
use crate::width::WidthPlan;
use crate::ModelF32;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub facts: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSettings {
    pub metric: MetricKind,
    /// Facts probed by the fact-accuracy evaluator (a prefix of the fact file).
    #[serde(default = "default_calib_facts")]
    pub calib_facts: usize,
    /// Validation tokens scored by the perplexity evaluator.
    #[serde(default = "default_tokens")]
    pub ppl_tokens: usize,
    /// Largest number of removed layers; defaults to what the grid needs.
    #[serde(default)]
    pub max_remove: Option<usize>,
}

fn default_calib_facts() -> usize {
    40
}
fn default_tokens() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSettings {
    #[serde(default = "default_tokens")]
    pub calib_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_valid_tokens")]
    pub valid_tokens: usize,
}

fn default_valid_tokens() -> usize {
    8192
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seed: u64,
    pub model: ModelConfig,
    pub grid: ShapeGrid,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub depth: DepthSettings,
    pub width: WidthSettings,
    pub adapter: SmolConfig,
    pub finetune: OfaConfig,
    pub eval: EvalSettings,
    #[serde(default)]
    pub search: Option<SearchSpec>,
    #[serde(default)]
    pub profile: ProfileConfig,
}

/// Environment variables that may override the config's paths.
pub const ENV_CORPUS: &str = "ELASTIC_CORPUS";
pub const ENV_FACTS: &str = "ELASTIC_FACTS";
pub const ENV_OUT: &str = "ELASTIC_OUT";

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads and validates a config file. Relative data paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.facts, &mut cfg.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        for (var, p) in [
            (ENV_CORPUS, &mut self.paths.corpus),
            (ENV_FACTS, &mut self.paths.facts),
            (ENV_OUT, &mut self.paths.output_dir),
        ] {
            if let Some(v) = std::env::var_os(var) {
                *p = PathBuf::from(v);
            }
        }
    }

    pub fn max_remove(&self) -> usize {
        self.depth.max_remove.unwrap_or_else(|| self.grid.max_remove(self.model.n_layers))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grid
            .validate(Some(self.model.n_layers))
            .map_err(|e| Error::config("grid", e.to_string()))?;
        self.pretrain.validate(&self.model)?;
        self.adapter.validate()?;
        self.finetune.validate(self.model.max_seq_len)?;
        let m = self.max_remove();
        if m >= self.model.n_layers {
            return Err(Error::config(
                "depth.max_remove",
                format!("must be below the layer count {}", self.model.n_layers),
            ));
        }
        if m < self.grid.max_remove(self.model.n_layers) {
            return Err(Error::config("depth.max_remove", "too small for the smallest grid depth"));
        }
        if self.depth.calib_facts == 0 {
            return Err(Error::config("depth.calib_facts", "must be positive"));
        }
        if self.depth.ppl_tokens < self.pretrain.seq_len {
            return Err(Error::config("depth.ppl_tokens", "must cover one sequence"));
        }
        if self.width.calib_tokens < self.pretrain.seq_len {
            return Err(Error::config("width.calib_tokens", "must cover one sequence"));
        }
        if self.eval.valid_tokens < self.pretrain.seq_len {
            return Err(Error::config("eval.valid_tokens", "must cover one sequence"));
        }
        if !(self.corpus.valid_fraction > 0.0 && self.corpus.valid_fraction < 1.0) {
            return Err(Error::config("corpus.valid_fraction", "must lie in (0, 1)"));
        }
        if let Some(s) = &self.search {
            s.validate()?;
        }
        if self.profile.runs == 0 || self.profile.seq_len == 0 || self.profile.seq_len > self.model.max_seq_len {
            return Err(Error::config("profile", "runs must be positive and seq_len within the model"));
        }
        Ok(())
    }

    /// Hash of everything except file locations.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    CalibrateDepth,
    CalibrateWidth,
    Finetune,
    Extract,
    Search,
    Profile,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::CalibrateDepth => "calibrate-depth",
            Stage::CalibrateWidth => "calibrate-width",
            Stage::Finetune => "finetune",
            Stage::Extract => "extract",
            Stage::Search => "search",
            Stage::Profile => "profile",
        }
    }

    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Pretrain => &[],
            Stage::CalibrateDepth | Stage::CalibrateWidth => &[Stage::Pretrain],
            Stage::Finetune => &[Stage::Pretrain, Stage::CalibrateDepth, Stage::CalibrateWidth],
            Stage::Extract | Stage::Search | Stage::Profile => {
                &[Stage::Pretrain, Stage::CalibrateDepth, Stage::CalibrateWidth, Stage::Finetune]
            }
        }
    }

    fn depends_on(self, other: Stage) -> bool {
        self.requires().contains(&other)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Artifact file name to sha256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub corpus_sha256: String,
    pub facts_sha256: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

pub const MANIFEST: &str = "manifest.json";
pub const BASE_CKPT: &str = "base.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_loss.csv";
pub const DP_TABLE: &str = "dp_table.json";
pub const WIDTH_PLAN: &str = "width_plan.json";
pub const ELASTIC_CKPT: &str = "elastic.ckpt";
pub const OFA_LOG: &str = "ofa_loss.csv";
pub const SEARCH_JSON: &str = "search.json";
pub const PROFILE_CSV: &str = "profile.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEval {
    pub shape_id: String,
    pub retained_layers: String,
    pub ppl: f64,
    pub fact_accuracy: f64,
}

/// One output directory with its manifest.
#[derive(Debug)]
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Validates `config`, then opens (or creates) `<output_dir>/<hash>`.
    /// An existing manifest is kept only if it was written for the same
    /// config and data.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        let dir = config.paths.output_dir.join(&hash[..16]);
        fs::create_dir_all(&dir)?;
        let corpus_sha256 = sha256_hex(&read(&config.paths.corpus)?);
        let facts_sha256 = sha256_hex(&read(&config.paths.facts)?);
        let fresh = RunManifest {
            tool_version: TOOL_VERSION.into(),
            config_hash: hash,
            corpus_sha256,
            facts_sha256,
            stages: BTreeMap::new(),
        };
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let old: RunManifest = serde_json::from_slice(&read(&path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            if old.config_hash != fresh.config_hash
                || old.corpus_sha256 != fresh.corpus_sha256
                || old.facts_sha256 != fresh.facts_sha256
            {
                return Err(Error::ArtifactMismatch { path });
            }
            old
        } else {
            fresh
        };
        let run = Self { config, dir, manifest };
        write_atomic(&run.dir.join("config.json"), serde_json::to_string_pretty(&run.config)?.as_bytes())?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.manifest.stages.contains_key(&stage)
    }

    fn save_manifest(&self) -> Result<()> {
        write_atomic(&self.dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }

    /// Fails unless every prerequisite stage is recorded and its artifacts
    /// still hash to the recorded values.
    pub fn require(&self, stage: Stage) -> Result<()> {
        for &pre in stage.requires() {
            let rec = self
                .manifest
                .stages
                .get(&pre)
                .ok_or_else(|| Error::MissingStage(pre.name().into()))?;
            for (name, hash) in &rec.artifacts {
                let path = self.path(name);
                let bytes = fs::read(&path).map_err(|_| Error::ArtifactMismatch { path: path.clone() })?;
                if &sha256_hex(&bytes) != hash {
                    return Err(Error::ArtifactMismatch { path });
                }
            }
        }
        Ok(())
    }

    /// Reads a registered artifact, checking its hash.
    fn read_artifact(&self, stage: Stage, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        let rec = self
            .manifest
            .stages
            .get(&stage)
            .ok_or_else(|| Error::MissingStage(stage.name().into()))?;
        let expected = rec.artifacts.get(name).ok_or_else(|| Error::ArtifactMismatch { path: path.clone() })?;
        let bytes = fs::read(&path).map_err(|_| Error::ArtifactMismatch { path: path.clone() })?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::ArtifactMismatch { path });
        }
        Ok(bytes)
    }

    /// Writes artifacts atomically, then registers them. Stages that
    /// consumed an older version of this stage's output are dropped.
    fn commit(&mut self, stage: Stage, files: Vec<(String, Vec<u8>)>) -> Result<()> {
        self.manifest.stages.retain(|s, _| !s.depends_on(stage));
        // a re-run stage stays unregistered until all its files are in place
        let mut rec = self.manifest.stages.remove(&stage).unwrap_or_default();
        self.save_manifest()?;
        for (name, bytes) in files {
            let path = self.path(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_atomic(&path, &bytes)?;
            rec.artifacts.insert(name, sha256_hex(&bytes));
        }
        self.manifest.stages.insert(stage, rec);
        self.save_manifest()
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.config.paths.corpus, &self.config.paths.facts, &self.config.corpus, self.config.seed)
    }

    fn rng(&self, label: u64) -> Rng {
        Rng::new(self.config.seed).fork(label)
    }

    fn seq_len(&self) -> usize {
        self.config.pretrain.seq_len
    }

    fn valid_batches(&self, corpus: &Corpus, tokens: usize) -> Result<Vec<LmBatch>> {
        sequential_batches(&corpus.valid, self.seq_len(), 16, tokens)
    }

    pub fn pretrain(&mut self) -> Result<PretrainReport> {
        let corpus = self.corpus()?;
        let mut model = ModelF32::init(self.config.model.clone(), &mut self.rng(1))?;
        let report = pretrain(&mut model, &corpus.train, &self.config.pretrain, &mut self.rng(2))?;
        let mut csv = String::from("step,loss\n");
        for (s, l) in &report.losses {
            let _ = writeln!(csv, "{s},{l}");
        }
        self.commit(
            Stage::Pretrain,
            vec![(BASE_CKPT.into(), model.to_bytes()?), (PRETRAIN_LOG.into(), csv.into_bytes())],
        )?;
        Ok(report)
    }

    pub fn base_model(&self) -> Result<ModelF32> {
        ModelF32::from_bytes(&self.read_artifact(Stage::Pretrain, BASE_CKPT)?)
    }

    /// Evaluator used for depth calibration and search.
    pub fn evaluator(&self, metric: MetricKind, corpus: &Corpus) -> Result<Box<dyn Evaluator<f32>>> {
        Ok(match metric {
            MetricKind::Ppl => Box::new(PplEvaluator {
                batches: self.valid_batches(corpus, self.config.depth.ppl_tokens)?,
            }),
            MetricKind::FactAccuracy => Box::new(FactEvaluator {
                probes: FactProbes::new(&corpus.facts.take(self.config.depth.calib_facts))?,
            }),
        })
    }

    pub fn calibrate_depth(&mut self, metric: Option<MetricKind>) -> Result<DpTable> {
        self.require(Stage::CalibrateDepth)?;
        let model = self.base_model()?;
        let corpus = self.corpus()?;
        let evaluator = self.evaluator(metric.unwrap_or(self.config.depth.metric), &corpus)?;
        let table = build_dp(&model, evaluator.as_ref(), &EvalCache::new(), self.config.max_remove())?;
        self.commit(Stage::CalibrateDepth, vec![(DP_TABLE.into(), table.to_json()?.into_bytes())])?;
        Ok(table)
    }

    pub fn calibrate_width(&mut self) -> Result<WidthPlan> {
        self.require(Stage::CalibrateWidth)?;
        let model = self.base_model()?;
        let corpus = self.corpus()?;
        let calib: Vec<TokenBatch> = sequential_batches(&corpus.train, self.seq_len(), 16, self.config.width.calib_tokens)?
            .into_iter()
            .map(|b| b.inputs)
            .collect();
        let plan = WidthPlan::calibrate(&model, &calib, &self.config.grid.widths)?;
        self.commit(Stage::CalibrateWidth, vec![(WIDTH_PLAN.into(), serde_json::to_vec_pretty(&plan)?)])?;
        Ok(plan)
    }

    pub fn dp_table(&self) -> Result<DpTable> {
        let bytes = self.read_artifact(Stage::CalibrateDepth, DP_TABLE)?;
        DpTable::from_json(std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?)
    }

    pub fn width_plan(&self) -> Result<WidthPlan> {
        Ok(serde_json::from_slice(&self.read_artifact(Stage::CalibrateWidth, WIDTH_PLAN)?)?)
    }

    pub fn shapes(&self) -> Result<Vec<SubnetShape>> {
        grid_shapes(&self.config.grid, &self.dp_table()?)
    }

    pub fn finetune(&mut self) -> Result<OfaReport> {
        self.require(Stage::Finetune)?;
        let corpus = self.corpus()?;
        let shapes = self.shapes()?;
        let model = self.base_model()?.with_width_plan(self.width_plan()?)?;
        let bank = SmolBank::init(
            self.config.adapter.clone(),
            &model.weights,
            self.config.grid.mask_dim(),
            &mut self.rng(3),
        )?;
        let mut model = model.with_adapter(bank)?;
        let report = finetune(
            &mut model,
            &self.config.grid,
            &shapes,
            &corpus.train,
            &self.config.finetune,
            &mut self.rng(4),
        )?;
        self.commit(
            Stage::Finetune,
            vec![
                (ELASTIC_CKPT.into(), model.to_bytes()?),
                (OFA_LOG.into(), report.loss_csv.clone().into_bytes()),
            ],
        )?;
        Ok(report)
    }

    /// The fine-tuned model with its width plan.
    pub fn elastic_model(&self) -> Result<ModelF32> {
        ModelF32::from_bytes(&self.read_artifact(Stage::Finetune, ELASTIC_CKPT)?)?.with_width_plan(self.width_plan()?)
    }

    /// Grid shape for `(depth, width_ratio)`; `None` picks the largest.
    pub fn find_shape(&self, which: Option<(usize, f64)>) -> Result<SubnetShape> {
        let grid = &self.config.grid;
        let (d, w) = match which {
            None => grid.largest(),
            Some((depth, ratio)) => (
                grid.depth_index_of(depth)
                    .ok_or_else(|| Error::config("--depth", format!("{depth} is not a grid depth {:?}", grid.depths)))?,
                grid.width_index_of(ratio).ok_or_else(|| {
                    Error::config("--width-ratio", format!("{ratio} is not a grid ratio {:?}", grid.widths))
                })?,
            ),
        };
        Ok(self.shapes()?.swap_remove(d * grid.widths.len() + w))
    }

    /// Writes standalone checkpoints for one shape or for the whole grid.
    pub fn extract(&mut self, which: Option<(usize, f64)>) -> Result<Vec<PathBuf>> {
        self.require(Stage::Extract)?;
        let model = self.elastic_model()?;
        let shapes = match which {
            Some(_) => vec![self.find_shape(which)?],
            None => self.shapes()?,
        };
        let mut files = Vec::new();
        for s in &shapes {
            let dense = model.extract(s)?;
            files.push((format!("subnets/{}.ckpt", s.id()), dense.to_bytes()?));
        }
        let paths = files.iter().map(|(n, _)| self.path(n)).collect();
        // extraction accumulates: keep previously extracted subnets registered
        let mut rec = self.manifest.stages.remove(&Stage::Extract).unwrap_or_default();
        for (name, bytes) in files {
            let path = self.path(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_atomic(&path, &bytes)?;
            rec.artifacts.insert(name, sha256_hex(&bytes));
        }
        self.manifest.stages.insert(Stage::Extract, rec);
        self.save_manifest()?;
        Ok(paths)
    }

    pub fn search(&mut self, budget: Option<f64>) -> Result<SearchResult> {
        self.require(Stage::Search)?;
        let mut spec = self
            .config
            .search
            .clone()
            .ok_or_else(|| Error::config("search", "no search section in the config"))?;
        if let Some(b) = budget {
            spec.budget = b;
        }
        spec.validate()?;
        let model = self.elastic_model()?;
        let corpus = self.corpus()?;
        let evaluator = self.evaluator(self.config.depth.metric, &corpus)?;
        let shapes = self.shapes()?;
        let prof = self.config.profile;
        let latency = |s: &SubnetShape| crate::search::measure_latency(&model.extract(s)?, &prof);
        let result = search(
            &model,
            &self.config.grid,
            &shapes,
            evaluator.as_ref(),
            &EvalCache::new(),
            &spec,
            &latency,
        )?;
        self.commit(Stage::Search, vec![(SEARCH_JSON.into(), serde_json::to_vec_pretty(&result)?)])?;
        Ok(result)
    }

    pub fn profile(&mut self) -> Result<Vec<ProfileRow>> {
        self.require(Stage::Profile)?;
        let model = self.elastic_model()?;
        let rows = profile(&model, &self.shapes()?, &self.config.profile)?;
        self.commit(Stage::Profile, vec![(PROFILE_CSV.into(), profile_csv(&rows).into_bytes())])?;
        Ok(rows)
    }

    /// Validation perplexity and fact accuracy of one grid shape, on the
    /// fine-tuned model when available and on base weights plus width plan
    /// otherwise.
    pub fn eval(&self, which: Option<(usize, f64)>) -> Result<ShapeEval> {
        for s in [Stage::Pretrain, Stage::CalibrateDepth, Stage::CalibrateWidth] {
            if !self.is_done(s) {
                return Err(Error::MissingStage(s.name().into()));
            }
        }
        let shape = self.find_shape(which)?;
        let (model, exec) = if self.is_done(Stage::Finetune) {
            (self.elastic_model()?, shape.exec())
        } else {
            (self.base_model()?.with_width_plan(self.width_plan()?)?, shape.exec_base())
        };
        let corpus = self.corpus()?;
        let valid = self.valid_batches(&corpus, self.config.eval.valid_tokens)?;
        let probes = FactProbes::new(&corpus.facts)?;
        Ok(ShapeEval {
            shape_id: shape.id(),
            retained_layers: shape.retained_layers.to_string(),
            ppl: perplexity(&model, &exec, &valid)?,
            fact_accuracy: fact_accuracy(&model, &exec, &probes)?,
        })
    }

    /// Stage 1 and stage 2 in order, then grid extraction.
    pub fn run_all(&mut self) -> Result<()> {
        self.pretrain()?;
        self.calibrate_depth(None)?;
        self.calibrate_width()?;
        self.finetune()?;
        self.extract(None)?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Writes a procedural corpus of `n_chars` characters and `n_facts` facts.
pub fn generate_data(corpus: &Path, facts: &Path, n_chars: usize, n_facts: usize, seed: u64) -> Result<()> {
    let root = Rng::new(seed);
    let text = data::generate_text(n_chars, &mut root.fork(1));
    let set = FactSet::generate(n_facts, &mut root.fork(2));
    for p in [corpus, facts] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    write_atomic(corpus, text.as_bytes())?;
    write_atomic(facts, set.to_tsv().as_bytes())
}
