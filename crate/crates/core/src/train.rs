//! Class-balanced batching, hand-rolled AdamW, checkpoints, and the fit loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::conditioning::soft_penalty;
use crate::dataset::{DatasetManifest, Role, SplitSpec};
use crate::encoders::{Captioner, ClipEncoder, Modality};
use crate::error::{Error, Result};
use crate::imaging::load_image;
use crate::model::{prepare, Model, ModelConfig, PreparedImage};
use crate::nn::scalar;
use crate::objectives::{circle_t_batch, view_cls_loss, LossConfig, CLS_TEMPERATURE, CLS_WEIGHT};
use crate::params::{Blob, Decay, ParamStore};
use crate::util::{rng, stable_hash};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub name: String,
    pub run_dir: PathBuf,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Categories per batch; sketches and shapes per category follow from `batch_size`.
    pub classes_per_batch: usize,
    /// Selected views pooled into each shape embedding.
    pub views_per_shape: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
    pub backbone: String,
    pub clip: String,
    pub captioner: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            run_dir: PathBuf::from("runs"),
            learning_rate: 1e-4,
            weight_decay: 0.09,
            batch_size: 50,
            epochs: 100,
            max_steps: None,
            seed: 0,
            classes_per_batch: 5,
            views_per_shape: crate::select::DEFAULT_TOP_K,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
            checkpoint_every: 500,
            backbone: "mock".into(),
            clip: "mock".into(),
            captioner: "stub".into(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn per_class(&self) -> usize {
        (self.batch_size / (2 * self.classes_per_batch.max(1))).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("learning rate and weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.classes_per_batch < 2 || self.views_per_shape == 0 {
            return Err(Error::InvalidArgument(
                "need batch_size > 0, classes_per_batch >= 2, views_per_shape > 0".into(),
            ));
        }
        self.loss.circle.validate()
    }

    pub fn run_path(&self) -> PathBuf {
        self.run_dir.join(&self.name)
    }
}

/// Indices into the manifest's sketch and shape lists, with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub sketches: Vec<usize>,
    pub sketch_labels: Vec<usize>,
    pub shapes: Vec<usize>,
    pub shape_labels: Vec<usize>,
}

/// Seen categories that have training sketches, in manifest order.
pub fn training_classes(manifest: &DatasetManifest, split: &SplitSpec) -> Vec<String> {
    manifest
        .categories
        .iter()
        .filter(|c| split.is_seen(c))
        .filter(|c| manifest.sketches.iter().any(|s| &s.category == *c && s.role == Role::Train))
        .cloned()
        .collect()
}

/// Samples `classes_per_batch` categories, then `per_class` sketches and
/// `per_class` shapes from each. Sampling is without replacement when a
/// category has enough items.
pub fn build_batch(
    manifest: &DatasetManifest,
    split: &SplitSpec,
    classes: &[String],
    classes_per_batch: usize,
    per_class: usize,
    rng: &mut impl rand::Rng,
) -> Result<TrainBatch> {
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least two seen categories with training sketches, have {}",
            classes.len()
        )));
    }
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(rng);
    order.truncate(classes_per_batch.min(classes.len()));
    order.sort_unstable();
    let mut batch = TrainBatch {
        sketches: Vec::new(),
        sketch_labels: Vec::new(),
        shapes: Vec::new(),
        shape_labels: Vec::new(),
    };
    for label in order {
        let cat = &classes[label];
        if !split.is_seen(cat) {
            return Err(Error::InvalidArgument(format!("{cat} is not a seen category")));
        }
        let sketches: Vec<usize> = (0..manifest.sketches.len())
            .filter(|&i| manifest.sketches[i].category == *cat && manifest.sketches[i].role == Role::Train)
            .collect();
        let shapes: Vec<usize> = (0..manifest.shapes.len())
            .filter(|&i| manifest.shapes[i].category == *cat)
            .collect();
        if shapes.is_empty() {
            return Err(Error::InsufficientData(format!("category {cat} has no shapes")));
        }
        if sketches.is_empty() {
            return Err(Error::InsufficientData(format!("category {cat} has no training sketches")));
        }
        for (pool, out, labels) in [
            (&sketches, &mut batch.sketches, &mut batch.sketch_labels),
            (&shapes, &mut batch.shapes, &mut batch.shape_labels),
        ] {
            let picked: Vec<usize> = if pool.len() >= per_class {
                pool.choose_multiple(rng, per_class).copied().collect()
            } else {
                (0..per_class).map(|_| *pool.choose(rng).unwrap()).collect()
            };
            out.extend(picked);
            labels.extend(std::iter::repeat_n(label, per_class));
        }
    }
    Ok(batch)
}

/// Preprocessed images keyed by manifest index, loaded on demand.
pub struct Corpus<'a> {
    manifest: &'a DatasetManifest,
    clip: &'a dyn ClipEncoder,
    captioner: &'a dyn Captioner,
    size: u32,
    views_per_shape: usize,
    sketches: HashMap<usize, PreparedImage>,
    shapes: HashMap<usize, Vec<PreparedImage>>,
}

impl<'a> Corpus<'a> {
    pub fn new(
        manifest: &'a DatasetManifest,
        clip: &'a dyn ClipEncoder,
        captioner: &'a dyn Captioner,
        size: u32,
        views_per_shape: usize,
    ) -> Self {
        Self {
            manifest,
            clip,
            captioner,
            size,
            views_per_shape,
            sketches: HashMap::new(),
            shapes: HashMap::new(),
        }
    }

    pub fn views_per_shape(&self) -> usize {
        self.views_per_shape
    }

    /// Queries never see their label: sketch captions get no category hint.
    pub fn sketch(&mut self, i: usize) -> Result<&PreparedImage> {
        if !self.sketches.contains_key(&i) {
            let rec = &self.manifest.sketches[i];
            let raw = load_image(&rec.uri)?;
            let p = prepare(
                &rec.id,
                &raw,
                self.size,
                Modality::Sketch,
                rec.caption.as_deref(),
                None,
                self.clip,
                self.captioner,
            )?;
            self.sketches.insert(i, p);
        }
        Ok(&self.sketches[&i])
    }

    /// Selected views of a shape, cycled to exactly `views_per_shape`.
    pub fn shape(&mut self, i: usize) -> Result<&[PreparedImage]> {
        if !self.shapes.contains_key(&i) {
            let rec = &self.manifest.shapes[i];
            let uris = if rec.view_uris.is_empty() {
                &rec.candidate_uris
            } else {
                &rec.view_uris
            };
            if uris.is_empty() {
                return Err(Error::EmptyViewSet(format!(
                    "{} has no rendered views; run render and select-views first",
                    rec.id
                )));
            }
            let mut views = Vec::with_capacity(self.views_per_shape);
            for v in 0..self.views_per_shape {
                let k = v % uris.len();
                let raw = load_image(&uris[k])?;
                let id = format!("{}#view{}", rec.id, rec.view_indices.get(k).copied().unwrap_or(k));
                views.push(prepare(
                    &id,
                    &raw,
                    self.size,
                    Modality::Render,
                    rec.captions.get(k).map(String::as_str),
                    Some(&rec.category),
                    self.clip,
                    self.captioner,
                )?);
            }
            self.shapes.insert(i, views);
        }
        Ok(&self.shapes[&i])
    }

    pub fn warm(&mut self, batch: &TrainBatch) -> Result<()> {
        for &i in &batch.sketches {
            self.sketch(i)?;
        }
        for &i in &batch.shapes {
            self.shape(i)?;
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over the trainable entries of a [`ParamStore`].
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.trainable() {
            let Some(g) = grads.get(param.var.as_tensor()) else {
                continue;
            };
            let theta = param.var.as_tensor();
            let m = match self.first.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.second.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let step = (m.affine(1.0 / c1, 0.0)? / (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?)?;
            let decay = match param.decay {
                Decay::Apply => 1.0 - self.lr * self.weight_decay,
                Decay::Exempt => 1.0,
            };
            let next = (theta.affine(decay, 0.0)? - step.affine(self.lr, 0.0)?)?;
            param.var.set(&next.detach())?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

/// Scales all trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0f64;
    let vars: Vec<&Var> = store.trainable().map(|(_, p)| &p.var).collect();
    for var in &vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)? as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for var in vars {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), g.affine(s, 0.0)?);
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub ske: f64,
    pub view: f64,
    pub view_cls: f64,
    pub soft_l2: f64,
    pub total: f64,
    pub grad_norm: f64,
}

fn noise_seed(seed: u64, step: u64, branch: &[u8], slot: usize) -> u64 {
    stable_hash(&[b"train-noise", &seed.to_le_bytes(), &step.to_le_bytes(), branch, &(slot as u64).to_le_bytes()])
}

fn batch_seed(seed: u64, step: u64) -> u64 {
    stable_hash(&[b"train-batch", &seed.to_le_bytes(), &step.to_le_bytes()])
}

/// Forward pass of the total objective for one batch; returns the graph root and components.
pub fn compute_loss(
    model: &Model,
    backbone: &dyn Backbone,
    corpus: &mut Corpus,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Tensor, LossRecord)> {
    corpus.warm(batch)?;
    let k = corpus.views_per_shape();
    let sketches: Vec<PreparedImage> = batch
        .sketches
        .iter()
        .map(|&i| corpus.sketch(i).cloned())
        .collect::<Result<_>>()?;
    let mut views = Vec::with_capacity(batch.shapes.len() * k);
    for &i in &batch.shapes {
        views.extend(corpus.shape(i)?.iter().cloned());
    }
    let sketch_refs: Vec<&PreparedImage> = sketches.iter().collect();
    let view_refs: Vec<&PreparedImage> = views.iter().collect();
    let sketch_seeds: Vec<u64> = (0..sketches.len()).map(|j| noise_seed(cfg.seed, step, b"sketch", j)).collect();
    let view_seeds: Vec<u64> = (0..views.len()).map(|j| noise_seed(cfg.seed, step, b"view", j)).collect();

    let f_sketch = model.embed_images(backbone, &sketch_refs, &sketch_seeds)?;
    let f_shape = model.embed_shapes(backbone, &view_refs, k, &view_seeds)?;

    let loss_cfg = &cfg.loss;
    let zero = || Tensor::new(0f32, &candle_core::Device::Cpu);
    let ske = if loss_cfg.use_ske_circle {
        circle_t_batch(&f_sketch, &batch.sketch_labels, &f_shape, &batch.shape_labels, &loss_cfg.circle)?
    } else {
        zero()?
    };
    let view = if loss_cfg.use_view_circle {
        circle_t_batch(&f_shape, &batch.shape_labels, &f_sketch, &batch.sketch_labels, &loss_cfg.circle)?
    } else {
        zero()?
    };
    let weight = model.store.var(CLS_WEIGHT)?.as_tensor();
    let temperature = model.store.var(CLS_TEMPERATURE)?.as_tensor();
    let mut cls = if loss_cfg.use_view_cls {
        view_cls_loss(&f_shape, &batch.shape_labels, weight, temperature)?
    } else {
        zero()?
    };
    if loss_cfg.use_ske_cls {
        cls = (cls + view_cls_loss(&f_sketch, &batch.sketch_labels, weight, temperature)?)?;
    }
    let penalty = soft_penalty(&model.store, &model.config.conditioning)?;
    let total = ((ske.clone() + view.clone())? + cls.affine(loss_cfg.eta, 0.0)?)?;
    let total = (total + penalty.clone())?;
    let record = LossRecord {
        step,
        ske: scalar(&ske)? as f64,
        view: scalar(&view)? as f64,
        view_cls: scalar(&cls)? as f64,
        soft_l2: scalar(&penalty)? as f64,
        total: scalar(&total)? as f64,
        grad_norm: 0.0,
    };
    Ok((total, record))
}

/// One optimizer update. Parameters are left untouched when the loss is not finite.
pub fn train_step(
    model: &Model,
    backbone: &dyn Backbone,
    corpus: &mut Corpus,
    batch: &TrainBatch,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossRecord> {
    let (total, mut record) = compute_loss(model, backbone, corpus, batch, cfg, step)?;
    if !record.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: format!("{record:?}"),
        });
    }
    let mut grads = total.backward()?;
    record.grad_norm = match cfg.grad_clip {
        Some(max) => clip_gradients(&model.store, &mut grads, max)?,
        None => clip_gradients(&model.store, &mut grads, f64::INFINITY)?,
    };
    if !record.grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: format!("gradient norm {}", record.grad_norm),
        });
    }
    opt.update(&model.store, &grads)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub adam_step: u64,
    pub manifest_hash: String,
    pub classes: Vec<String>,
    pub config: TrainConfig,
}

/// Parameters, optimizer moments, and metadata. Never contains backbone weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Blob>,
    pub first: BTreeMap<String, Blob>,
    pub second: BTreeMap<String, Blob>,
}

impl Checkpoint {
    pub fn capture(model: &Model, opt: &AdamW, step: u64, manifest_hash: &str, cfg: &TrainConfig) -> Result<Self> {
        let moments = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Blob>> {
            m.iter().map(|(k, t)| Ok((k.clone(), Blob::from_tensor(t)?))).collect()
        };
        Ok(Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                step,
                adam_step: opt.step,
                manifest_hash: manifest_hash.to_string(),
                classes: model.classes.names.clone(),
                config: cfg.clone(),
            },
            params: model.store.snapshot()?,
            first: moments(&opt.first)?,
            second: moments(&opt.second)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [("param", &self.params), ("adam_m", &self.first), ("adam_v", &self.second)] {
            for (name, blob) in map {
                let bytes = blob.values.iter().flat_map(|v| v.to_le_bytes()).collect();
                raw.push((format!("{prefix}/{name}"), blob.shape.clone(), bytes));
            }
        }
        let views = raw
            .iter()
            .map(|(n, shape, bytes)| Ok((n.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(st_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut info = std::collections::HashMap::new();
        info.insert("meta".to_string(), serde_json::to_string(&self.meta)?);
        safetensors::tensor::serialize(views, Some(info)).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("meta"))
            .ok_or_else(|| Error::CheckpointCorrupt("missing metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointCorrupt(format!("checkpoint version {}", meta.version)));
        }
        let mut out = Self {
            meta,
            params: BTreeMap::new(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        };
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::CheckpointCorrupt(format!("{name}: dtype {:?}", view.dtype())));
            }
            let blob = Blob {
                shape: view.shape().to_vec(),
                values: view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let (prefix, key) = name
                .split_once('/')
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor name {name}")))?;
            let map = match prefix {
                "param" => &mut out.params,
                "adam_m" => &mut out.first,
                "adam_v" => &mut out.second,
                _ => return Err(Error::CheckpointCorrupt(format!("tensor name {name}"))),
            };
            map.insert(key.to_string(), blob);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io_at(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model from this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let cfg = &self.meta.config;
        let model = Model::new(
            cfg.model.clone(),
            self.meta.classes.clone(),
            cfg.loss.cls_temperature,
            cfg.seed,
        )?;
        model.store.restore(&self.params)?;
        Ok(model)
    }

    pub fn optimizer(&self) -> Result<AdamW> {
        let mut opt = AdamW::new(&self.meta.config);
        opt.step = self.meta.adam_step;
        for (src, dst) in [(&self.first, &mut opt.first), (&self.second, &mut opt.second)] {
            for (k, b) in src {
                dst.insert(k.clone(), b.to_tensor()?);
            }
        }
        Ok(opt)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(crate::util::sha256_hex(&self.to_bytes()?))
    }
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::CheckpointCorrupt(e.to_string())
}

pub fn checkpoint_path(cfg: &TrainConfig, step: u64) -> PathBuf {
    cfg.run_path().join(format!("ckpt-{step}.bin"))
}

pub struct FitOutcome {
    pub model: Model,
    pub checkpoint: PathBuf,
    pub trace: Vec<LossRecord>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
}

pub fn steps_per_epoch(manifest: &DatasetManifest, classes: &[String], cfg: &TrainConfig) -> u64 {
    let sketches = manifest
        .sketches
        .iter()
        .filter(|s| s.role == Role::Train && classes.contains(&s.category))
        .count();
    let per_batch = cfg.classes_per_batch.min(classes.len()).max(1) * cfg.per_class();
    sketches.div_ceil(per_batch).max(1) as u64
}

/// Trains from scratch or from `resume`, writing periodic checkpoints, a
/// final checkpoint, and an append-only loss trace under the run directory.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    manifest: &DatasetManifest,
    split: &SplitSpec,
    cfg: &TrainConfig,
    backbone: &dyn Backbone,
    clip: &dyn ClipEncoder,
    captioner: &dyn Captioner,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let manifest_hash = manifest.content_hash()?;
    let classes = training_classes(manifest, split);
    let (model, mut opt, start) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta.manifest_hash != manifest_hash {
                return Err(Error::CheckpointCorrupt(format!(
                    "{} was trained on a different manifest",
                    path.display()
                )));
            }
            if ckpt.meta.classes != classes {
                return Err(Error::CheckpointCorrupt("class list differs from the split".into()));
            }
            (ckpt.model()?, ckpt.optimizer()?, ckpt.meta.step)
        }
        None => {
            let model = Model::new(cfg.model.clone(), classes.clone(), cfg.loss.cls_temperature, cfg.seed)?;
            (model, AdamW::new(cfg), 0)
        }
    };
    model.check_backbone(backbone)?;
    opt.lr = cfg.learning_rate;
    opt.weight_decay = cfg.weight_decay;

    let checksum_before = backbone.checksum();
    let total_steps = {
        let by_epochs = cfg.epochs as u64 * steps_per_epoch(manifest, &classes, cfg);
        cfg.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    };
    let run = cfg.run_path();
    fs::create_dir_all(&run).map_err(|e| Error::io_at(&run, e))?;
    let trace_path = run.join("loss.jsonl");
    let mut trace_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&trace_path)
        .map_err(|e| Error::io_at(&trace_path, e))?;

    let mut corpus = Corpus::new(manifest, clip, captioner, cfg.model.image_size, cfg.views_per_shape);
    let mut trace = Vec::new();
    for step in start + 1..=total_steps {
        let mut r = rng(batch_seed(cfg.seed, step));
        let batch = build_batch(manifest, split, &classes, cfg.classes_per_batch, cfg.per_class(), &mut r)?;
        let record = train_step(&model, backbone, &mut corpus, &batch, &mut opt, cfg, step)?;
        log::info!(
            "step {step}/{total_steps} total {:.5} ske {:.5} view {:.5} cls {:.5}",
            record.total,
            record.ske,
            record.view,
            record.view_cls
        );
        writeln!(trace_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io_at(&trace_path, e))?;
        trace.push(record);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != total_steps {
            Checkpoint::capture(&model, &opt, step, &manifest_hash, cfg)?.save(&checkpoint_path(cfg, step))?;
        }
    }
    let final_step = total_steps.max(start);
    let checkpoint = checkpoint_path(cfg, final_step);
    Checkpoint::capture(&model, &opt, final_step, &manifest_hash, cfg)?.save(&checkpoint)?;
    Ok(FitOutcome {
        model,
        checkpoint,
        trace,
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: backbone.checksum(),
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
