//! Retrieval MAP, triplet prediction, rankings and attention export.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSpace, DatasetSplit, Triplet};
use crate::error::{AgmanError, Result};
use crate::loss::{cosine_similarity, triplet_loss, TripletMode};
use crate::model::AgmanModel;
use crate::train::PixelCache;

/// Average precision of one ranked relevance list; `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// A labeled, L2-normalized embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub label: usize,
    pub embedding: Array1<f64>,
}

impl Item {
    pub fn new(id: impl Into<String>, label: usize, embedding: Array1<f64>) -> Result<Self> {
        let norm = embedding.dot(&embedding).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(AgmanError::Degenerate(format!(
                "embedding norm is {norm}, cannot rank by cosine similarity"
            )));
        }
        Ok(Self {
            id: id.into(),
            label,
            embedding: embedding / norm,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub id: String,
    pub score: f64,
    pub relevant: bool,
}

/// Candidates by descending cosine score, ties broken by ascending id. The
/// query itself is never ranked.
pub fn rank(query: &Item, candidates: &[Item]) -> Vec<RankedCandidate> {
    let mut ranked: Vec<RankedCandidate> = candidates
        .iter()
        .filter(|c| c.id != query.id)
        .map(|c| RankedCandidate {
            id: c.id.clone(),
            score: query.embedding.dot(&c.embedding),
            relevant: c.label == query.label,
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    ranked
}

/// AP summary of one attribute.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MapSummary {
    pub ap_sum: f64,
    pub scored: usize,
    /// Queries without any relevant candidate.
    pub excluded: usize,
}

impl MapSummary {
    pub fn map(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.ap_sum / self.scored as f64)
    }
}

/// Per-query AP summed in ascending query-id order, so the result does not
/// depend on the order of either input.
pub fn map_summary(queries: &[Item], candidates: &[Item]) -> MapSummary {
    let mut aps: Vec<(&str, Option<f64>)> = queries
        .par_iter()
        .map(|q| {
            let relevance: Vec<bool> = rank(q, candidates).iter().map(|r| r.relevant).collect();
            (q.id.as_str(), average_precision(&relevance))
        })
        .collect();
    aps.sort_by(|a, b| a.0.cmp(b.0));
    let mut s = MapSummary::default();
    for (_, ap) in aps {
        match ap {
            Some(v) => {
                s.ap_sum += v;
                s.scored += 1;
            }
            None => s.excluded += 1,
        }
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub queries: usize,
    pub candidates: usize,
    pub triplets: usize,
    pub excluded_queries: usize,
    pub skipped_attributes: Vec<String>,
}

/// Evaluation summary; fields a command does not compute are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_attribute: BTreeMap<String, Option<f64>>,
    /// Mean AP over all scored queries of all attributes.
    pub overall_map: Option<f64>,
    /// Mean of the per-attribute MAPs.
    pub attribute_mean_map: Option<f64>,
    pub triplet_accuracy: Option<f64>,
    pub triplet_avg_loss: Option<f64>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| AgmanError::io(path, e))
    }
}

/// Embeds every record of `ids` that carries a label for `attribute`.
fn embed_items(
    model: &AgmanModel,
    pixels: &PixelCache,
    split: &DatasetSplit,
    ids: &[String],
    attribute: usize,
) -> Result<Vec<Item>> {
    let index = split.id_index();
    let labeled: Vec<(&String, usize)> = ids
        .iter()
        .filter_map(|id| {
            let record = &split.records[*index.get(id.as_str())?];
            record.label(attribute).map(|l| (id, l))
        })
        .collect();
    labeled
        .par_iter()
        .map(|(id, label)| {
            let (e, _) = model.embed(pixels.get(id)?.view(), attribute)?;
            Item::new(id.as_str(), *label, e)
        })
        .collect()
}

fn candidate_ids(split: &DatasetSplit) -> Vec<String> {
    if split.candidate_ids.is_empty() {
        split.records.iter().map(|r| r.id.clone()).collect()
    } else {
        split.candidate_ids.clone()
    }
}

fn query_ids(split: &DatasetSplit) -> Vec<String> {
    if split.query_ids.is_empty() {
        split.records.iter().map(|r| r.id.clone()).collect()
    } else {
        split.query_ids.clone()
    }
}

/// Per-attribute and overall MAP of the query partition against the
/// candidate partition. Without a partition every record queries all others.
pub fn evaluate_map(model: &AgmanModel, split: &DatasetSplit, space: &AttributeSpace) -> Result<EvalReport> {
    let pixels = PixelCache::load(split, space, model.spec().input_size)?;
    evaluate_map_with_pixels(model, split, space, &pixels)
}

pub fn evaluate_map_with_pixels(
    model: &AgmanModel,
    split: &DatasetSplit,
    space: &AttributeSpace,
    pixels: &PixelCache,
) -> Result<EvalReport> {
    let (qids, cids) = (query_ids(split), candidate_ids(split));
    let mut report = EvalReport::default();
    let (mut ap_sum, mut scored) = (0.0, 0usize);
    let mut attribute_maps = Vec::new();
    for a in 0..space.n() {
        let queries = embed_items(model, pixels, split, &qids, a)?;
        let candidates = embed_items(model, pixels, split, &cids, a)?;
        report.counts.queries += queries.len();
        report.counts.candidates += candidates.len();
        let summary = map_summary(&queries, &candidates);
        report.counts.excluded_queries += summary.excluded;
        let map = summary.map();
        match map {
            Some(m) => attribute_maps.push(m),
            None => report.counts.skipped_attributes.push(space.name(a).to_string()),
        }
        report.per_attribute.insert(space.name(a).to_string(), map);
        ap_sum += summary.ap_sum;
        scored += summary.scored;
    }
    report.overall_map = (scored > 0).then(|| ap_sum / scored as f64);
    report.attribute_mean_map =
        (!attribute_maps.is_empty()).then(|| attribute_maps.iter().sum::<f64>() / attribute_maps.len() as f64);
    Ok(report)
}

/// `true` when the anchor is strictly more similar to the positive than to
/// the negative; ties count as wrong. Also returns `s_p - s_n`.
pub fn predict_triplet_embeddings(anchor: ArrayView1<f64>, positive: ArrayView1<f64>, negative: ArrayView1<f64>) -> Result<(bool, f64)> {
    let gap = cosine_similarity(anchor, positive)? - cosine_similarity(anchor, negative)?;
    Ok((gap > 0.0, gap))
}

pub fn predict_triplet(model: &AgmanModel, pixels: &PixelCache, triplet: &Triplet) -> Result<(bool, f64)> {
    let [a, p, n] = triplet_embeddings(model, pixels, triplet)?;
    predict_triplet_embeddings(a.view(), p.view(), n.view())
}

fn triplet_embeddings(model: &AgmanModel, pixels: &PixelCache, t: &Triplet) -> Result<[Array1<f64>; 3]> {
    let e = |id: &str| model.embed(pixels.get(id)?.view(), t.attribute).map(|(e, _)| e);
    Ok([e(&t.anchor)?, e(&t.positive)?, e(&t.negative)?])
}

/// Accuracy and mean triplet loss over `triplets`.
pub fn evaluate_triplets(
    model: &AgmanModel,
    pixels: &PixelCache,
    triplets: &[Triplet],
    margin: f64,
    mode: TripletMode,
) -> Result<EvalReport> {
    if triplets.is_empty() {
        return Err(AgmanError::Argument("no triplets to evaluate".into()));
    }
    let embedded = triplets
        .par_iter()
        .map(|t| triplet_embeddings(model, pixels, t))
        .collect::<Result<Vec<_>>>()?;
    let (accuracy, avg_loss) = score_triplets(&embedded, margin, mode)?;
    Ok(EvalReport {
        triplet_accuracy: Some(accuracy),
        triplet_avg_loss: Some(avg_loss),
        counts: EvalCounts {
            triplets: embedded.len(),
            ..EvalCounts::default()
        },
        ..EvalReport::default()
    })
}

/// Accuracy and mean triplet loss of embedded `[anchor, positive, negative]` triples.
pub fn score_triplets(embedded: &[[Array1<f64>; 3]], margin: f64, mode: TripletMode) -> Result<(f64, f64)> {
    if embedded.is_empty() {
        return Err(AgmanError::Argument("no triplets to evaluate".into()));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for [a, p, n] in embedded {
        correct += usize::from(predict_triplet_embeddings(a.view(), p.view(), n.view())?.0);
        loss += triplet_loss(a.view(), p.view(), n.view(), margin, mode)?;
    }
    let k = embedded.len() as f64;
    Ok((correct as f64 / k, loss / k))
}

/// Top-`k` ranking of one query under one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query_id: String,
    pub attribute: String,
    pub entries: Vec<RankedCandidate>,
    /// Set when fewer than `k` candidates exist.
    pub note: Option<String>,
}

impl RankingResult {
    /// Columns `query_id,rank,candidate_id,score,relevant`, rank starting at 1.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut rows = || -> std::result::Result<(), csv::Error> {
            w.write_record(["query_id", "rank", "candidate_id", "score", "relevant"])?;
            for (i, e) in self.entries.iter().enumerate() {
                w.write_record([
                    self.query_id.clone(),
                    (i + 1).to_string(),
                    e.id.clone(),
                    e.score.to_string(),
                    e.relevant.to_string(),
                ])?;
            }
            Ok(())
        };
        rows().map_err(|e| AgmanError::Argument(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| AgmanError::Argument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

pub fn retrieve(
    model: &AgmanModel,
    split: &DatasetSplit,
    space: &AttributeSpace,
    pixels: &PixelCache,
    query_id: &str,
    attribute: usize,
    k: usize,
) -> Result<RankingResult> {
    space.check_index(attribute)?;
    let record = split
        .get(query_id)
        .ok_or_else(|| AgmanError::Argument(format!("unknown query id `{query_id}`")))?;
    let label = record.label(attribute).ok_or_else(|| {
        AgmanError::Argument(format!(
            "query `{query_id}` has no label for attribute `{}`",
            space.name(attribute)
        ))
    })?;
    let (e, _) = model.embed(pixels.get(query_id)?.view(), attribute)?;
    let query = Item::new(query_id, label, e)?;
    let candidates = embed_items(model, pixels, split, &candidate_ids(split), attribute)?;
    let mut entries = rank(&query, &candidates);
    let note = (entries.len() < k).then(|| format!("only {} candidates available, fewer than k = {k}", entries.len()));
    entries.truncate(k);
    Ok(RankingResult {
        query_id: query_id.to_string(),
        attribute: space.name(attribute).to_string(),
        entries,
        note,
    })
}

/// Sidecar of an exported attention map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub image_id: String,
    pub attribute: String,
    pub h: usize,
    pub w: usize,
}

/// Softmax map of the attribute-aware spatial attention stage.
pub fn attention_map(model: &AgmanModel, image: ArrayView3<f64>, attribute: usize) -> Result<Array2<f64>> {
    if !model.aga().toggles().asa {
        return Err(AgmanError::Unavailable(
            "attribute-aware spatial attention (ASA) is disabled in this model, so no spatial map exists".into(),
        ));
    }
    let (_, trace) = model.embed(image, attribute)?;
    Ok(trace.spatial_softmax_map.expect("enabled stage records its map"))
}

/// Writes `h` rows of `w` comma-separated values to `csv_path` and the
/// sidecar next to it with a `.json` extension.
pub fn write_attention(csv_path: &Path, map: &Array2<f64>, meta: &AttentionMeta) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in map.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| AgmanError::Argument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| AgmanError::Argument(e.to_string()))?;
    std::fs::write(csv_path, bytes).map_err(|e| AgmanError::io(csv_path, e))?;
    let json_path = csv_path.with_extension("json");
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&json_path, json + "\n").map_err(|e| AgmanError::io(&json_path, e))
}

/// Reads a map written by [`write_attention`].
pub fn read_attention(csv_path: &Path) -> Result<(Array2<f64>, AttentionMeta)> {
    let json_path = csv_path.with_extension("json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| AgmanError::io(&json_path, e))?;
    let meta: AttentionMeta = serde_json::from_str(&text).map_err(|e| AgmanError::Parse {
        path: json_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(csv_path)
        .map_err(|e| AgmanError::Io {
            path: csv_path.to_path_buf(),
            source: e.into(),
        })?;
    let mut values = Vec::with_capacity(meta.h * meta.w);
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| AgmanError::Parse {
            path: csv_path.to_path_buf(),
            line: line + 1,
            message: e.to_string(),
        })?;
        for v in row.iter() {
            values.push(v.parse::<f64>().map_err(|e| AgmanError::Parse {
                path: csv_path.to_path_buf(),
                line: line + 1,
                message: e.to_string(),
            })?);
        }
    }
    let map = Array2::from_shape_vec((meta.h, meta.w), values).map_err(|e| AgmanError::Parse {
        path: csv_path.to_path_buf(),
        line: 0,
        message: format!("expected {}x{} values: {e}", meta.h, meta.w),
    })?;
    Ok((map, meta))
}
