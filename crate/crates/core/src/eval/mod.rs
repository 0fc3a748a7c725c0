//! Leave-one-out retrieval evaluation: ranking, average precision, CMC.

mod sheet;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::InferenceModel;
use crate::raster::Raster;
use crate::trainer::crop_to_box;

pub use sheet::{render_ranking_sheet, SheetStyle, TileLabel};

/// Unit-length copy of `v` in f64.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Validation("cannot normalize a zero or non-finite embedding".into()));
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sorts by ascending distance; equal distances keep ascending index order.
fn order_by_distance(distances: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    idx
}

/// Gallery indices by ascending distance to `query`, after normalizing both
/// sides. Ties go to the lower index.
pub fn rank_gallery(query: &[f32], gallery: &[Vec<f32>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery is empty".into()));
    }
    let q = l2_normalize(query)?;
    let d = gallery
        .iter()
        .map(|g| Ok(euclidean(&q, &l2_normalize(g)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(order_by_distance(&d))
}

/// Mean over positives of precision at each positive's rank.
pub fn average_precision(ranking: &[usize], positives: &BTreeSet<usize>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Validation("average precision needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, idx) in ranking.iter().enumerate() {
        if positives.contains(idx) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits != positives.len() {
        return Err(Error::Validation("positive set is not contained in the ranking".into()));
    }
    Ok(sum / positives.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub metric: String,
    pub gallery: String,
    pub exclusions: String,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            metric: "euclidean-on-normalized".into(),
            gallery: "leave-one-out".into(),
            exclusions: "self-match".into(),
        }
    }
}

/// One image to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedItem {
    pub id: String,
    pub entity: String,
    pub image_path: PathBuf,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub gallery_id: String,
    pub entity: String,
    pub image_path: PathBuf,
    pub distance: f64,
    pub is_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub entity: String,
    pub image_path: PathBuf,
    /// `None` when the query has no positive in its gallery.
    pub average_precision: Option<f64>,
    pub ranking: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub protocol: EvalProtocol,
    pub map: f64,
    pub rank1: f64,
    /// `cmc[k - 1]`: fraction of valid queries with a positive in the top k.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    pub rank1_hits: usize,
    pub per_query: Vec<QueryResult>,
}

/// Scores every item against all others. Items are put in a canonical order
/// first, so the result does not depend on how the input was ordered.
pub fn evaluate_embeddings(items: &[EmbeddedItem], model_id: &str) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&items[a], &items[b]);
        x.id.cmp(&y.id).then_with(|| x.entity.cmp(&y.entity)).then_with(|| {
            let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            bits(&x.embedding).cmp(&bits(&y.embedding))
        })
    });
    let items: Vec<&EmbeddedItem> = order.iter().map(|&i| &items[i]).collect();
    let normed = items
        .iter()
        .map(|it| l2_normalize(&it.embedding))
        .collect::<Result<Vec<_>>>()?;
    let n = items.len();
    let depth = n.saturating_sub(1);
    let mut cmc_hits = vec![0usize; depth];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    let mut rank1_hits = 0;
    let mut per_query = Vec::with_capacity(n);
    for q in 0..n {
        let gallery: Vec<usize> = (0..n).filter(|&g| g != q).collect();
        let dist: Vec<f64> = gallery.iter().map(|&g| euclidean(&normed[q], &normed[g])).collect();
        let ranking = order_by_distance(&dist);
        let positives: BTreeSet<usize> = (0..gallery.len())
            .filter(|&j| items[gallery[j]].entity == items[q].entity)
            .collect();
        let ap = if positives.is_empty() {
            None
        } else {
            let ap = average_precision(&ranking, &positives)?;
            valid += 1;
            ap_sum += ap;
            let first = ranking.iter().position(|j| positives.contains(j)).expect("positive present");
            if first == 0 {
                rank1_hits += 1;
            }
            for hit in cmc_hits.iter_mut().skip(first) {
                *hit += 1;
            }
            Some(ap)
        };
        per_query.push(QueryResult {
            query_id: items[q].id.clone(),
            entity: items[q].entity.clone(),
            image_path: items[q].image_path.clone(),
            average_precision: ap,
            ranking: ranking
                .iter()
                .map(|&j| {
                    let g = items[gallery[j]];
                    RankEntry {
                        gallery_id: g.id.clone(),
                        entity: g.entity.clone(),
                        image_path: g.image_path.clone(),
                        distance: dist[j],
                        is_match: positives.contains(&j),
                    }
                })
                .collect(),
        });
    }
    let frac = |x: usize| if valid == 0 { 0.0 } else { x as f64 / valid as f64 };
    if valid == 0 {
        log::warn!("no query has a positive in its gallery; metrics are zero");
    }
    Ok(EvalReport {
        model_id: model_id.to_string(),
        protocol: EvalProtocol::default(),
        map: if valid == 0 { 0.0 } else { ap_sum / valid as f64 },
        rank1: frac(rank1_hits),
        cmc: cmc_hits.into_iter().map(frac).collect(),
        num_queries: n,
        valid_queries: valid,
        skipped_queries: n - valid,
        rank1_hits,
        per_query,
    })
}

/// Box crop resized to the model input, as used for every embedding.
pub fn load_model_input(dataset: &Dataset, index: usize, size: [usize; 2]) -> Result<Raster> {
    let image = Raster::load(&dataset.image_path(index))?;
    let (crop, _) = crop_to_box(&image, &dataset.records[index])?;
    Ok(crop.resize(size[0], size[1]))
}

/// Full-stream embeddings of every record, in dataset order.
pub fn embed_dataset(model: &InferenceModel, dataset: &Dataset, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let size = model.config().full_input;
    let mut out = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .par_iter()
            .map(|&i| load_model_input(dataset, i, size))
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.embed(&images, images.len())?);
    }
    Ok(out)
}

pub fn items_for(dataset: &Dataset, embeddings: Vec<Vec<f32>>) -> Vec<EmbeddedItem> {
    embeddings
        .into_iter()
        .enumerate()
        .map(|(i, embedding)| EmbeddedItem {
            id: dataset.records[i].record_id(),
            entity: dataset.entity_of[i].to_string(),
            image_path: dataset.image_path(i),
            embedding,
        })
        .collect()
}

/// Embeds `dataset` with `model` and scores it.
pub fn evaluate(model: &InferenceModel, dataset: &Dataset, model_id: &str) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let embeddings = embed_dataset(model, dataset, 32)?;
    evaluate_embeddings(&items_for(dataset, embeddings), model_id)
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `query_id, rank, gallery_id, distance, is_match`, ranks from 1.
    pub fn write_rankings_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
        w.write_record(["query_id", "rank", "gallery_id", "distance", "is_match"])?;
        for q in &self.per_query {
            for (r, e) in q.ranking.iter().enumerate() {
                w.write_record([
                    q.query_id.as_str(),
                    &(r + 1).to_string(),
                    &e.gallery_id,
                    &e.distance.to_string(),
                    if e.is_match { "true" } else { "false" },
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Position of the query with this id.
    pub fn query_index(&self, query_id: &str) -> Option<usize> {
        self.per_query.iter().position(|q| q.query_id == query_id)
    }
}
