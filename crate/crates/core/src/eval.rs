//! Gallery index, cosine ranking, retrieval metrics, and report artifacts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, DynamicImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::aggregation::{pool_views, EmbeddingKind, EmbeddingSet};
use crate::backbone::FeatureCache;
use crate::backbone::Backbone;
use crate::dataset::{DatasetManifest, Role, SplitSpec};
use crate::encoders::{Captioner, ClipEncoder, Modality};
use crate::error::{Error, Result};
use crate::model::{prepare, Model, PreparedImage};
use crate::train::{Checkpoint, Corpus};
use crate::util::{dot, l2_norm, normalize_in_place, sha256_hex};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const E_CUTOFF: usize = 32;
pub const DEFINITIONS_VERSION: &str =
    "v1: C=class gallery size; FT=hits@C/C; ST=hits@2C/C; ST2=ST/2; E=F1@min(32,N); DCG=log2 gain/ideal; nDCG=DCG; MRR; AP over all relevant";

const UNIT_TOLERANCE: f64 = 1e-3;

/// Immutable gallery of unit-norm shape embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub dim: usize,
    pub matrix: Vec<f32>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, labels: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::ShapeMismatch("index rows differ in width".into()));
            }
            matrix.extend_from_slice(r);
        }
        Self::from_parts(ids, labels, dim, matrix)
    }

    fn from_parts(ids: Vec<String>, labels: Vec<String>, dim: usize, matrix: Vec<f32>) -> Result<Self> {
        if ids.len() != labels.len() || matrix.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} labels, {} values of width {dim}",
                ids.len(),
                labels.len(),
                matrix.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let index = Self { ids, labels, dim, matrix };
        for i in 0..index.len() {
            let n = l2_norm(index.row(i)) as f64;
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!("row {} has norm {n}", index.ids[i])));
            }
        }
        Ok(index)
    }

    pub fn from_set(set: EmbeddingSet) -> Result<Self> {
        let labels = set
            .labels
            .iter()
            .zip(&set.ids)
            .map(|(l, id)| l.clone().ok_or_else(|| Error::UnknownLabel(format!("{id} has no label"))))
            .collect::<Result<_>>()?;
        Self::from_parts(set.ids, labels, set.dim, set.matrix)
    }

    pub fn to_set(&self) -> EmbeddingSet {
        EmbeddingSet {
            kind: EmbeddingKind::Shape,
            dim: self.dim,
            ids: self.ids.clone(),
            labels: self.labels.iter().cloned().map(Some).collect(),
            matrix: self.matrix.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.ids.iter().position(|x| x == id).map(|i| self.labels[i].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

/// Orders gallery items by descending score, ties by ascending id.
pub fn rank_scores(query_id: &str, index: &EmbeddingIndex, scores: &[f64]) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if scores.len() != index.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} items", scores.len(), index.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFiniteSimilarity(*bad));
    }
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| index.ids[a].cmp(&index.ids[b])));
    Ok(RankedList {
        query_id: query_id.to_string(),
        entries: order
            .into_iter()
            .map(|i| RankedEntry {
                id: index.ids[i].clone(),
                label: index.labels[i].clone(),
                score: scores[i],
            })
            .collect(),
    })
}

pub fn rank(query_id: &str, query: &[f32], index: &EmbeddingIndex) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.len() != index.dim {
        return Err(Error::ShapeMismatch(format!("query width {} vs index {}", query.len(), index.dim)));
    }
    let n = l2_norm(query) as f64;
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!("query {query_id} has norm {n}")));
    }
    let scores: Vec<f64> = (0..index.len()).map(|i| dot(query, index.row(i))).collect();
    rank_scores(query_id, index, &scores)
}

/// Ranks every row of `queries`, spreading queries over the available cores.
pub fn rank_all(queries: &EmbeddingSet, index: &EmbeddingIndex) -> Result<Vec<RankedList>> {
    let n = queries.len();
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let per = n.div_ceil(workers.max(1)).max(1);
    let chunks: Vec<Result<Vec<RankedList>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(per)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + per).min(n))
                        .map(|i| rank(&queries.ids[i], queries.row(i), index))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ranking worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Per-query values; `None` from [`query_metrics`] when nothing is relevant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
    pub e: f64,
    pub dcg: f64,
    pub rr: f64,
    pub ap: f64,
}

/// Metrics for one ranking given the relevance of each rank position.
pub fn query_metrics(relevant: &[bool]) -> Option<QueryMetrics> {
    let n = relevant.len();
    let c = relevant.iter().filter(|r| **r).count();
    if c == 0 {
        return None;
    }
    let hits_at = |k: usize| relevant[..k.min(n)].iter().filter(|r| **r).count() as f64;
    let cf = c as f64;
    let cutoff = E_CUTOFF.min(n);
    let hits_e = hits_at(cutoff);
    let e = if hits_e == 0.0 {
        0.0
    } else {
        let p = hits_e / cutoff as f64;
        let r = hits_e / cf;
        2.0 * p * r / (p + r)
    };
    let gain = |rank: usize| if rank == 1 { 1.0 } else { 1.0 / (rank as f64).log2() };
    let mut dcg = 0.0;
    let mut ap = 0.0;
    let mut found = 0.0;
    let mut first = None;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            found += 1.0;
            dcg += gain(i + 1);
            ap += found / (i + 1) as f64;
            first.get_or_insert(i + 1);
        }
    }
    let ideal: f64 = (1..=c).map(gain).sum();
    Some(QueryMetrics {
        nn: if relevant[0] { 1.0 } else { 0.0 },
        ft: hits_at(c) / cf,
        st: hits_at(2 * c) / cf,
        e,
        dcg: dcg / ideal,
        rr: 1.0 / first.unwrap() as f64,
        ap: ap / cf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub queries: usize,
    pub nn: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub definitions_version: String,
    pub e_cutoff: usize,
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
    pub st2: f64,
    pub e: f64,
    pub one_minus_e: f64,
    pub dcg: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub map: f64,
    pub query_count: usize,
    /// Queries dropped because no gallery item shares their label.
    pub excluded_queries: usize,
    pub gallery_size: usize,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Averages per-query metrics. `query_labels[i]` belongs to `rankings[i]`.
pub fn compute_metrics(rankings: &[RankedList], query_labels: &[String]) -> Result<MetricsReport> {
    if rankings.len() != query_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rankings for {} labels",
            rankings.len(),
            query_labels.len()
        )));
    }
    let gallery_size = rankings.first().map_or(0, |r| r.entries.len());
    if let Some(r) = rankings.iter().find(|r| r.entries.len() != gallery_size) {
        return Err(Error::InvalidArgument(format!("ranking for {} is not a full permutation", r.query_id)));
    }
    let mut sums = [0f64; 7];
    let mut used = 0usize;
    let mut excluded = 0usize;
    let mut per: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (list, label) in rankings.iter().zip(query_labels) {
        let relevant: Vec<bool> = list.entries.iter().map(|e| e.label == *label).collect();
        let Some(m) = query_metrics(&relevant) else {
            log::warn!("query {} ({label}) has no relevant gallery items; excluded", list.query_id);
            excluded += 1;
            continue;
        };
        used += 1;
        for (s, v) in sums.iter_mut().zip([m.nn, m.ft, m.st, m.e, m.dcg, m.rr, m.ap]) {
            *s += v;
        }
        let slot = per.entry(label.clone()).or_default();
        slot.0 += 1;
        slot.1 += m.nn;
        slot.2 += m.ap;
    }
    let avg = |s: f64| if used == 0 { 0.0 } else { s / used as f64 };
    let [nn, ft, st, e, dcg, mrr, map] = sums.map(avg);
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        definitions_version: DEFINITIONS_VERSION.to_string(),
        e_cutoff: E_CUTOFF,
        nn,
        ft,
        st,
        st2: st / 2.0,
        e,
        one_minus_e: 1.0 - e,
        dcg,
        ndcg: dcg,
        mrr,
        map,
        query_count: used,
        excluded_queries: excluded,
        gallery_size,
        per_category: per
            .into_iter()
            .map(|(k, (q, nn, ap))| {
                (
                    k,
                    CategoryMetrics {
                        queries: q,
                        nn: nn / q as f64,
                        map: ap / q as f64,
                    },
                )
            })
            .collect(),
        meta: BTreeMap::new(),
    })
}

/// Query category versus top-1 retrieved category. Row and column order is `classes`.
pub fn confusion_matrix(rankings: &[RankedList], query_labels: &[String]) -> (Vec<String>, Vec<Vec<usize>>) {
    let mut classes: BTreeSet<String> = query_labels.iter().cloned().collect();
    for r in rankings {
        if let Some(top) = r.entries.first() {
            classes.insert(top.label.clone());
        }
    }
    let classes: Vec<String> = classes.into_iter().collect();
    let pos = |c: &str| classes.iter().position(|x| x == c).unwrap();
    let mut m = vec![vec![0usize; classes.len()]; classes.len()];
    for (r, label) in rankings.iter().zip(query_labels) {
        if let Some(top) = r.entries.first() {
            m[pos(label)][pos(&top.label)] += 1;
        }
    }
    (classes, m)
}

/// Row-normalized confusion rendered as a grayscale heatmap, darker = more mass.
pub fn heatmap_image(matrix: &[Vec<usize>], cell: u32) -> RgbImage {
    let n = matrix.len() as u32;
    let mut img = RgbImage::from_pixel((n * cell).max(1), (n * cell).max(1), Rgb([255, 255, 255]));
    for (i, row) in matrix.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, Rgb([shade, shade, 255]));
                }
            }
        }
    }
    img
}

pub const MONTAGE_GAP: u32 = 4;

/// One row per query: the query thumbnail, a gap column, then `k` gallery thumbnails.
/// Missing images are drawn as grey tiles so every row keeps `k` slots.
pub fn montage(rows: &[(Option<DynamicImage>, Vec<Option<DynamicImage>>)], k: usize, thumb: u32) -> RgbImage {
    let step = thumb + MONTAGE_GAP;
    let width = (k as u32 + 1) * step + MONTAGE_GAP;
    let height = rows.len() as u32 * step + MONTAGE_GAP;
    let mut img = RgbImage::from_pixel(width, height.max(1), Rgb([255, 255, 255]));
    let tile = |src: &Option<DynamicImage>| match src {
        Some(i) => imageops::resize(&i.to_rgb8(), thumb, thumb, imageops::FilterType::Triangle),
        None => RgbImage::from_pixel(thumb, thumb, Rgb([200, 200, 200])),
    };
    for (r, (query, gallery)) in rows.iter().enumerate() {
        let y = MONTAGE_GAP + r as u32 * step;
        imageops::replace(&mut img, &tile(query), MONTAGE_GAP as i64, y as i64);
        for slot in 0..k {
            let x = MONTAGE_GAP + (slot as u32 + 1) * step;
            imageops::replace(&mut img, &tile(gallery.get(slot).unwrap_or(&None)), x as i64, y as i64);
        }
    }
    img
}

/// Number of filled gallery slots per montage row, for layout checks.
pub fn montage_slots(width: u32, thumb: u32) -> usize {
    ((width - MONTAGE_GAP) / (thumb + MONTAGE_GAP)) as usize - 1
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub heatmap: bool,
    /// Gallery thumbnails per montage row; `None` skips the montage.
    pub montage_k: Option<usize>,
    pub montage_rows: usize,
    pub thumb: u32,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            heatmap: true,
            montage_k: Some(5),
            montage_rows: 12,
            thumb: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub rankings: PathBuf,
    pub heatmap: Option<PathBuf>,
    pub montage: Option<PathBuf>,
}

/// Writes `report.json`, `rankings.jsonl`, and the optional images into `dir`.
/// `image_for` resolves query and gallery ids to thumbnails.
pub fn emit_report(
    dir: &Path,
    report: &MetricsReport,
    rankings: &[RankedList],
    query_labels: &[String],
    opts: &ReportOptions,
    image_for: &dyn Fn(&str) -> Option<DynamicImage>,
) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut files = ReportFiles {
        report: dir.join("report.json"),
        rankings: dir.join("rankings.jsonl"),
        ..Default::default()
    };
    report.save(&files.report)?;
    write_rankings(&files.rankings, rankings, query_labels)?;
    if opts.heatmap {
        let (_, m) = confusion_matrix(rankings, query_labels);
        let path = dir.join("confusion.png");
        heatmap_image(&m, 16).save(&path)?;
        files.heatmap = Some(path);
    }
    if let Some(k) = opts.montage_k {
        let rows: Vec<_> = rankings
            .iter()
            .take(opts.montage_rows)
            .map(|r| {
                let gallery = r.entries.iter().take(k).map(|e| image_for(&e.id)).collect();
                (image_for(&r.query_id), gallery)
            })
            .collect();
        let path = dir.join("montage.png");
        montage(&rows, k, opts.thumb).save(&path)?;
        files.montage = Some(path);
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RankingLine {
    query_label: String,
    #[serde(flatten)]
    list: RankedList,
}

pub fn write_rankings(path: &Path, rankings: &[RankedList], query_labels: &[String]) -> Result<()> {
    let mut text = String::new();
    for (list, label) in rankings.iter().zip(query_labels) {
        text.push_str(&serde_json::to_string(&RankingLine {
            query_label: label.clone(),
            list: list.clone(),
        })?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

pub fn read_rankings(path: &Path) -> Result<(Vec<RankedList>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut lists = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: RankingLine = serde_json::from_str(line)?;
        labels.push(row.query_label);
        lists.push(row.list);
    }
    Ok((lists, labels))
}

/// Gallery shapes and query sketches of the zero-shot protocol, as manifest indices.
pub fn zero_shot_sets(manifest: &DatasetManifest, split: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let gallery = (0..manifest.shapes.len())
        .filter(|&i| split.is_unseen(&manifest.shapes[i].category))
        .collect();
    let queries = (0..manifest.sketches.len())
        .filter(|&i| split.is_unseen(&manifest.sketches[i].category) && manifest.sketches[i].role == Role::Test)
        .collect();
    (gallery, queries)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub chunk: usize,
    pub cache_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub report: ReportOptions,
}

/// Shape embeddings: each shape's selected views are fused, max-pooled, and normalized.
pub fn embed_gallery(
    model: &Model,
    backbone: &dyn Backbone,
    corpus: &mut Corpus,
    manifest: &DatasetManifest,
    shapes: &[usize],
    opts: &EvalOptions,
) -> Result<EmbeddingSet> {
    let cache = opts.cache_dir.as_ref().map(FeatureCache::new);
    let k = corpus.views_per_shape();
    let mut views: Vec<PreparedImage> = Vec::with_capacity(shapes.len() * k);
    for &i in shapes {
        views.extend(corpus.shape(i)?.iter().cloned());
    }
    let refs: Vec<&PreparedImage> = views.iter().collect();
    let fused = model.fused_cached(backbone, &refs, opts.chunk.max(1), cache.as_ref())?;
    let mut set = EmbeddingSet::new(EmbeddingKind::Shape, model.dims.embed_dim);
    for (n, &i) in shapes.iter().enumerate() {
        let pooled = pool_views(&fused[n * k..(n + 1) * k])?;
        let rec = &manifest.shapes[i];
        set.push(rec.id.clone(), Some(rec.category.clone()), &pooled)?;
    }
    Ok(set)
}

pub fn embed_sketches(
    model: &Model,
    backbone: &dyn Backbone,
    corpus: &mut Corpus,
    manifest: &DatasetManifest,
    sketches: &[usize],
    opts: &EvalOptions,
) -> Result<EmbeddingSet> {
    let cache = opts.cache_dir.as_ref().map(FeatureCache::new);
    let items: Vec<PreparedImage> = sketches
        .iter()
        .map(|&i| corpus.sketch(i).cloned())
        .collect::<Result<_>>()?;
    let refs: Vec<&PreparedImage> = items.iter().collect();
    let fused = model.fused_cached(backbone, &refs, opts.chunk.max(1), cache.as_ref())?;
    let mut set = EmbeddingSet::new(EmbeddingKind::Sketch, model.dims.embed_dim);
    for (mut v, &i) in fused.into_iter().zip(sketches) {
        normalize_in_place(&mut v);
        let rec = &manifest.sketches[i];
        set.push(rec.id.clone(), Some(rec.category.clone()), &v)?;
    }
    Ok(set)
}

/// Provenance stored next to a saved index; checked by [`check_index_compat`].
pub fn index_meta(ckpt: &Checkpoint, manifest_hash: &str, params_checksum: &str) -> serde_json::Value {
    serde_json::json!({
        "manifest_hash": manifest_hash,
        "checkpoint_manifest_hash": ckpt.meta.manifest_hash,
        "params_checksum": params_checksum,
        "step": ckpt.meta.step,
        "profile": ckpt.meta.config.model.profile,
        "views_per_shape": ckpt.meta.config.views_per_shape,
    })
}

/// Refuses an index built from a different manifest or different parameters.
pub fn check_index_compat(meta: &serde_json::Value, ckpt: &Checkpoint, manifest_hash: &str, params_checksum: &str) -> Result<()> {
    let field = |k: &str| meta.get(k).and_then(|v| v.as_str()).unwrap_or("");
    if ckpt.meta.manifest_hash != manifest_hash {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained on manifest {}, loaded manifest is {manifest_hash}",
            ckpt.meta.manifest_hash
        )));
    }
    if field("manifest_hash") != manifest_hash {
        return Err(Error::Incompatible(format!(
            "index was built from manifest {:?}, loaded manifest is {manifest_hash}",
            field("manifest_hash")
        )));
    }
    if field("params_checksum") != params_checksum {
        return Err(Error::Incompatible(format!(
            "index was built with parameters {:?}, checkpoint has {params_checksum}",
            field("params_checksum")
        )));
    }
    Ok(())
}

/// Embeds the given shapes into an index plus its provenance record.
#[allow(clippy::too_many_arguments)]
pub fn build_index(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    shapes: &[usize],
    backbone: &dyn Backbone,
    clip: &dyn ClipEncoder,
    captioner: &dyn Captioner,
    opts: &EvalOptions,
) -> Result<(EmbeddingIndex, serde_json::Value)> {
    let model = ckpt.model()?;
    model.check_backbone(backbone)?;
    let cfg = &ckpt.meta.config;
    let mut corpus = Corpus::new(manifest, clip, captioner, cfg.model.image_size, cfg.views_per_shape);
    let set = embed_gallery(&model, backbone, &mut corpus, manifest, shapes, opts)?;
    let meta = index_meta(ckpt, &manifest.content_hash()?, &model.params_checksum()?);
    Ok((EmbeddingIndex::from_set(set)?, meta))
}

/// Id used for an ad-hoc query image; identical pixels always get the same id.
pub fn query_id_for(image: &RgbImage) -> String {
    format!("query:{}", &sha256_hex(image.as_raw())[..16])
}

/// Embeds one raw sketch exactly as an evaluation query would be.
pub fn embed_query(
    model: &Model,
    backbone: &dyn Backbone,
    raw: &DynamicImage,
    clip: &dyn ClipEncoder,
    captioner: &dyn Captioner,
) -> Result<(String, Vec<f32>)> {
    let size = model.config.image_size;
    let probe = crate::imaging::preprocess(raw, size)?;
    let id = query_id_for(&probe);
    let item = prepare(&id, raw, size, Modality::Sketch, None, None, clip, captioner)?;
    let mut v = model
        .fused_detached(backbone, &[&item], 1)?
        .pop()
        .ok_or_else(|| Error::EmptyIndex)?;
    normalize_in_place(&mut v);
    Ok((id, v))
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub rankings: Vec<RankedList>,
    pub query_labels: Vec<String>,
    pub queries: EmbeddingSet,
    pub index: EmbeddingIndex,
    pub files: Option<ReportFiles>,
}

/// Zero-shot evaluation: unseen-category test sketches against all unseen-category shapes.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    backbone: &dyn Backbone,
    clip: &dyn ClipEncoder,
    captioner: &dyn Captioner,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let model = ckpt.model()?;
    model.check_backbone(backbone)?;
    let (gallery, queries) = zero_shot_sets(manifest, split);
    if gallery.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if queries.is_empty() {
        return Err(Error::InsufficientData("no test sketches in unseen categories".into()));
    }
    let cfg = &ckpt.meta.config;
    let mut corpus = Corpus::new(manifest, clip, captioner, cfg.model.image_size, cfg.views_per_shape);
    let index = EmbeddingIndex::from_set(embed_gallery(&model, backbone, &mut corpus, manifest, &gallery, opts)?)?;
    let query_set = embed_sketches(&model, backbone, &mut corpus, manifest, &queries, opts)?;
    let rankings = rank_all(&query_set, &index)?;
    let query_labels: Vec<String> = query_set.labels.iter().map(|l| l.clone().unwrap_or_default()).collect();
    let mut report = compute_metrics(&rankings, &query_labels)?;
    report.meta.insert("protocol".into(), split.protocol.to_string());
    report.meta.insert("manifest_hash".into(), manifest.content_hash()?);
    report.meta.insert("params_checksum".into(), model.params_checksum()?);
    report.meta.insert("step".into(), ckpt.meta.step.to_string());
    let files = match &opts.report_dir {
        Some(dir) => {
            let lookup = |id: &str| thumbnail_for(manifest, id);
            Some(emit_report(dir, &report, &rankings, &query_labels, &opts.report, &lookup)?)
        }
        None => None,
    };
    Ok(Evaluation {
        report,
        rankings,
        query_labels,
        queries: query_set,
        index,
        files,
    })
}

/// First selected view of a shape, or the sketch image itself.
pub fn thumbnail_for(manifest: &DatasetManifest, id: &str) -> Option<DynamicImage> {
    let path = match manifest.shape(id) {
        Some(s) => s.view_uris.first().or(s.candidate_uris.first())?.clone(),
        None => manifest.sketches.iter().find(|s| s.id == id)?.uri.clone(),
    };
    crate::imaging::load_image(&path).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: &[(&str, &str, [f32; 2])]) -> EmbeddingIndex {
        EmbeddingIndex::new(
            rows.iter().map(|r| r.0.to_string()).collect(),
            rows.iter().map(|r| r.1.to_string()).collect(),
            &rows.iter().map(|r| r.2.to_vec()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn self_match_ranks_first() {
        let idx = index(&[("a", "x", [1.0, 0.0]), ("b", "y", [0.0, 1.0]), ("c", "y", [0.6, 0.8])]);
        let r = rank("q", &[0.0, 1.0], &idx).unwrap();
        assert_eq!(r.entries[0].id, "b");
        assert_eq!(r.entries[0].score, 1.0);
        assert_eq!(r.entries.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["b", "c", "a"]);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = index(&[("z", "x", [1.0, 0.0]), ("m", "x", [1.0, 0.0]), ("a", "x", [1.0, 0.0])]);
        let r = rank("q", &[1.0, 0.0], &idx).unwrap();
        assert_eq!(r.entries.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["a", "m", "z"]);
    }

    #[test]
    fn empty_index_is_an_error() {
        let idx = EmbeddingIndex::new(vec![], vec![], &[]).unwrap();
        assert!(matches!(rank("q", &[], &idx), Err(Error::EmptyIndex)));
    }

    #[test]
    fn hand_enumerated_mrr_and_ap() {
        let m = query_metrics(&[false, true, true]).unwrap();
        assert!((m.rr - 0.5).abs() < 1e-12);
        assert!((m.ap - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(m.nn, 0.0);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let m = query_metrics(&[true, true, true, false, false]).unwrap();
        for v in [m.nn, m.ft, m.st, m.dcg, m.rr, m.ap] {
            assert_eq!(v, 1.0);
        }
        assert!(query_metrics(&[false, false]).is_none());
    }

    #[test]
    fn report_bounds_and_exclusions() {
        let idx = index(&[("a", "x", [1.0, 0.0]), ("b", "y", [0.0, 1.0])]);
        let lists = vec![rank("q1", &[1.0, 0.0], &idx).unwrap(), rank("q2", &[1.0, 0.0], &idx).unwrap()];
        let r = compute_metrics(&lists, &["x".into(), "w".into()]).unwrap();
        assert_eq!((r.query_count, r.excluded_queries), (1, 1));
        assert_eq!(r.st2, r.st / 2.0);
        assert_eq!(r.one_minus_e + r.e, 1.0);
    }

    fn relevance() -> impl proptest::strategy::Strategy<Value = Vec<bool>> {
        proptest::collection::vec(proptest::bool::weighted(0.3), 1..80)
    }

    proptest::proptest! {
        #[test]
        fn metrics_lie_in_unit_interval(rel in relevance()) {
            if let Some(m) = query_metrics(&rel) {
                for v in [m.nn, m.ft, m.st, m.e, m.dcg, m.rr, m.ap] {
                    proptest::prop_assert!((0.0..=1.0).contains(&v), "{m:?}");
                }
            }
        }

        #[test]
        fn promoting_a_relevant_item_never_hurts(mut rel in relevance(), a in 0usize..80, b in 0usize..80) {
            proptest::prop_assume!(rel.len() >= 2);
            // a relevant item at j and an irrelevant one ahead of it at i
            let j = 1 + a % (rel.len() - 1);
            let i = b % j;
            rel[j] = true;
            rel[i] = false;
            let before = query_metrics(&rel).unwrap();
            let mut swapped = rel.clone();
            swapped.swap(i, j);
            let after = query_metrics(&swapped).unwrap();
            proptest::prop_assert!(after.ap >= before.ap - 1e-12);
            proptest::prop_assert!(after.rr >= before.rr);
            proptest::prop_assert!(after.dcg >= before.dcg - 1e-12);
        }

        #[test]
        fn positive_rescaling_keeps_rankings(levels in proptest::collection::vec(0u8..32, 2..60), c in 0.01f64..100.0) {
            let n = levels.len();
            let rows: Vec<Vec<f32>> = (0..n).map(|_| vec![1.0]).collect();
            let idx = EmbeddingIndex::new(
                (0..n).map(|i| format!("g{:02}", n - 1 - i)).collect(),
                (0..n).map(|i| format!("c{}", i % 3)).collect(),
                &rows,
            ).unwrap();
            let scores: Vec<f64> = levels.iter().map(|&l| f64::from(l) / 32.0 - 0.5).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            let a = rank_scores("q", &idx, &scores).unwrap();
            let b = rank_scores("q", &idx, &scaled).unwrap();
            let order = |r: &RankedList| r.entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
            proptest::prop_assert_eq!(order(&a), order(&b));
            let labels = vec!["c0".to_string()];
            let (ma, mb) = (compute_metrics(&[a], &labels).unwrap(), compute_metrics(&[b], &labels).unwrap());
            proptest::prop_assert_eq!(ma.map, mb.map);
            proptest::prop_assert_eq!(mb.st2, mb.st / 2.0);
            proptest::prop_assert!((mb.one_minus_e + mb.e - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn confusion_is_diagonal_for_perfect_top1() {
        let idx = index(&[("a", "x", [1.0, 0.0]), ("b", "y", [0.0, 1.0])]);
        let lists = vec![rank("q1", &[1.0, 0.0], &idx).unwrap(), rank("q2", &[0.0, 1.0], &idx).unwrap()];
        let (classes, m) = confusion_matrix(&lists, &["x".into(), "y".into()]);
        assert_eq!(classes, ["x", "y"]);
        assert_eq!(m, vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn montage_has_k_slots_per_row() {
        let rows = vec![(None, vec![None; 5]), (None, vec![None; 2])];
        let img = montage(&rows, 5, 32);
        assert_eq!(montage_slots(img.width(), 32), 5);
        assert_eq!(img.height(), 2 * (32 + MONTAGE_GAP) + MONTAGE_GAP);
    }
}
