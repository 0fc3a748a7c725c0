//! ID (cross-entropy), batch-hard triplet and additive angular margin losses.
//!
//! All functions work on any float dtype; training uses f32, the gradient
//! checks run in f64.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Head, StreamOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadWeights {
    pub id: f64,
    pub triplet: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        HeadWeights { id: 1.0, triplet: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadWeightMap {
    pub d_full: HeadWeights,
    pub z_ft: HeadWeights,
    pub z_fl: HeadWeights,
}

impl HeadWeightMap {
    pub fn get(&self, head: Head) -> HeadWeights {
        match head {
            Head::DFull => self.d_full,
            Head::ZFt => self.z_ft,
            Head::ZFl => self.z_fl,
        }
    }

    pub fn zero() -> Self {
        let z = HeadWeights { id: 0.0, triplet: 0.0 };
        HeadWeightMap {
            d_full: z,
            z_ft: z,
            z_fl: z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub triplet_margin: f64,
    pub arcface_scale: f64,
    /// Radians.
    pub arcface_margin: f64,
    pub use_arcface: bool,
    pub head_weights: HeadWeightMap,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            triplet_margin: 0.3,
            arcface_scale: 30.0,
            arcface_margin: 0.5,
            use_arcface: false,
            head_weights: HeadWeightMap::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.arcface_scale > 0.0) {
            return Err(Error::Config("arcface_scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arcface_margin) {
            return Err(Error::Config("arcface_margin must lie in [0, pi/2)".into()));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config("triplet_margin must be non-negative".into()));
        }
        for h in Head::ALL {
            let w = self.head_weights.get(h);
            if !(w.id >= 0.0 && w.triplet >= 0.0 && w.id.is_finite() && w.triplet.is_finite()) {
                return Err(Error::Config(format!("weights of head {} must be finite and >= 0", h.name())));
            }
        }
        Ok(())
    }
}

fn label_tensor(labels: &[u32], classes: usize, like: &Tensor) -> Result<Tensor> {
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Loss(format!("label {bad} outside [0, {classes})")));
    }
    Ok(Tensor::new(labels, like.device())?)
}

fn check_rows(t: &Tensor, labels: &[u32], what: &str) -> Result<(usize, usize)> {
    let (b, n) = t.dims2()?;
    if b != labels.len() {
        return Err(Error::Loss(format!("{what} has {b} rows but {} labels", labels.len())));
    }
    if b == 0 {
        return Err(Error::Loss(format!("{what} is empty")));
    }
    Ok((b, n))
}

/// Mean negative log-probability of the true class.
pub fn id_loss(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (_, c) = check_rows(logits, labels, "logits")?;
    let idx = label_tensor(labels, c, logits)?;
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_p.gather(&idx.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// `[B, B]` Euclidean distances, kept away from zero so the square root
/// stays differentiable.
pub fn pairwise_distances(x: &Tensor) -> Result<Tensor> {
    let diff = x.unsqueeze(1)?.broadcast_sub(&x.unsqueeze(0)?)?;
    let d2 = diff.sqr()?.sum(D::Minus1)?;
    Ok(d2.maximum(1e-12)?.sqrt()?)
}

/// Batch-hard triplet loss: for every anchor the farthest positive and the
/// nearest negative, hinged at `margin`.
pub fn triplet_batch_hard(embeddings: &Tensor, labels: &[u32], margin: f64) -> Result<Tensor> {
    let (b, _) = check_rows(embeddings, labels, "embeddings")?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Loss(format!("label {l} appears once in the batch; triplets need a positive")));
    }
    if counts.len() < 2 {
        let l = labels[0];
        return Err(Error::Loss(format!("label {l} is the only label in the batch; triplets need a negative")));
    }

    let dist = pairwise_distances(embeddings)?;
    let values: Vec<Vec<f64>> = dist.to_dtype(DType::F64)?.to_vec2()?;
    let mut hardest_pos = Vec::with_capacity(b);
    let mut hardest_neg = Vec::with_capacity(b);
    for i in 0..b {
        let mut pos = (f64::NEG_INFINITY, 0u32);
        let mut neg = (f64::INFINITY, 0u32);
        for j in 0..b {
            let d = values[i][j];
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                if d > pos.0 {
                    pos = (d, j as u32);
                }
            } else if d < neg.0 {
                neg = (d, j as u32);
            }
        }
        hardest_pos.push(pos.1);
        hardest_neg.push(neg.1);
    }
    let dev = embeddings.device();
    let dp = dist.gather(&Tensor::new(hardest_pos, dev)?.unsqueeze(1)?, 1)?;
    let dn = dist.gather(&Tensor::new(hardest_neg, dev)?.unsqueeze(1)?, 1)?;
    Ok(((dp - dn)? + margin)?.relu()?.mean_all()?)
}

fn l2_normalize_rows(x: &Tensor, what: &str) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let norms: Vec<f64> = norm.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Loss(format!("{what} row {i} has zero or non-finite norm")));
    }
    Ok(x.broadcast_div(&norm)?)
}

/// Scaled cosine logits with an additive angular margin on the true class.
///
/// Once `theta + m` would pass pi the true-class logit falls back to
/// `cos(theta) - m sin(m)`, which keeps it monotone in the angle.
pub fn arcface_logits(embeddings: &Tensor, class_weights: &Tensor, labels: &[u32], s: f64, m: f64) -> Result<Tensor> {
    let (_, e) = check_rows(embeddings, labels, "embeddings")?;
    let (c, e2) = class_weights.dims2()?;
    if e != e2 {
        return Err(Error::Loss(format!("embedding width {e} != class weight width {e2}")));
    }
    let idx = label_tensor(labels, c, embeddings)?;
    let en = l2_normalize_rows(embeddings, "embedding")?;
    let wn = l2_normalize_rows(class_weights, "class weight")?;
    let cos = en.matmul(&wn.t()?)?;
    if m == 0.0 {
        return Ok((cos * s)?);
    }
    // floor on sin^2 keeps the square root differentiable at alignment
    let sin = (cos.sqr()?.neg()? + 1.0)?.clamp(1e-12, 1.0)?.sqrt()?;
    let phi = ((&cos * m.cos())? - (sin * m.sin())?)?;
    let threshold = (std::f64::consts::PI - m).cos();
    let fallback = (&cos - m * m.sin())?;
    let phi = cos.gt(threshold)?.where_cond(&phi, &fallback)?;
    let one_hot = candle_nn::encoding::one_hot(idx, c, 1f64, 0f64)?.to_dtype(cos.dtype())?;
    let blended = ((&one_hot * phi)? + ((one_hot.neg()? + 1.0)? * &cos)?)?;
    Ok((blended * s)?)
}

/// Per-term values of one batch and the differentiable weighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    /// Keys `"<head>.id"` and `"<head>.triplet"`; zero-weight terms are
    /// reported as 0 and not computed.
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar()?)
    }
}

pub fn term_names() -> Vec<String> {
    Head::ALL
        .iter()
        .flat_map(|h| [format!("{}.id", h.name()), format!("{}.triplet", h.name())])
        .collect()
}

/// Weighted sum over the three heads of ID and triplet terms.
/// `classifier(head)` supplies the `[C, E]` class weights of each head.
pub fn total_loss<'a>(
    heads: impl Fn(Head) -> &'a Tensor,
    classifier: impl Fn(Head) -> &'a Tensor,
    labels: &[u32],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let mut total: Option<Tensor> = None;
    let mut terms = BTreeMap::new();
    let mut add = |t: Tensor, w: f64| -> Result<()> {
        let scaled = (t * w)?;
        total = Some(match total.take() {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
        Ok(())
    };
    for head in Head::ALL {
        let w = config.head_weights.get(head);
        let emb = heads(head);
        let mut id_value = 0.0;
        if w.id != 0.0 {
            let weights = classifier(head);
            let logits = if config.use_arcface {
                arcface_logits(emb, weights, labels, config.arcface_scale, config.arcface_margin)?
            } else {
                emb.matmul(&weights.t()?)?
            };
            let l = id_loss(&logits, labels)?;
            id_value = l.to_dtype(DType::F64)?.to_scalar()?;
            add(l, w.id)?;
        }
        let mut tri_value = 0.0;
        if w.triplet != 0.0 {
            let l = triplet_batch_hard(emb, labels, config.triplet_margin)?;
            tri_value = l.to_dtype(DType::F64)?.to_scalar()?;
            add(l, w.triplet)?;
        }
        terms.insert(format!("{}.id", head.name()), id_value);
        terms.insert(format!("{}.triplet", head.name()), tri_value);
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), heads(Head::DFull).dtype(), heads(Head::DFull).device())?,
    };
    Ok(LossBreakdown { total, terms })
}

/// [`total_loss`] over the outputs of a forward pass.
pub fn total_loss_for(
    outputs: &StreamOutputs,
    classifier: impl Fn(Head) -> Tensor,
    labels: &[u32],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let weights: Vec<Tensor> = Head::ALL.iter().map(|&h| classifier(h)).collect();
    total_loss(|h| outputs.head(h), |h| &weights[h as usize], labels, config)
}

/// Distinct labels in order of first appearance; helper for diagnostics.
pub fn distinct_labels(labels: &[u32]) -> Vec<u32> {
    let mut seen = BTreeSet::new();
    labels.iter().copied().filter(|l| seen.insert(*l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = id_loss(&t(&[&[0.3, 0.3, 0.3], &[1.0, 1.0, 1.0]]), &[0, 2]).unwrap();
        assert!((scalar(&l) - 3f64.ln()).abs() < 1e-12);
        let l = id_loss(&t(&[&[50.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(scalar(&l) < 1e-20);
        assert!(id_loss(&t(&[&[1.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn triplet_trivial_cases() {
        let far = t(&[&[0.0, 0.0], &[0.0, 0.0], &[5.0, 0.0], &[5.0, 0.0]]);
        assert!(scalar(&triplet_batch_hard(&far, &[0, 0, 1, 1], 0.3).unwrap()).abs() < 1e-9);
        let same = t(&[&[1.0, 2.0][..]; 4]);
        let l = scalar(&triplet_batch_hard(&same, &[0, 0, 1, 1], 0.3).unwrap());
        assert!((l - 0.3).abs() < 1e-5);
        let err = triplet_batch_hard(&same, &[0, 0, 1, 2], 0.3).unwrap_err();
        assert!(err.to_string().contains("label 1"), "{err}");
        assert!(triplet_batch_hard(&same, &[4, 4, 4, 4], 0.3).unwrap_err().to_string().contains("label 4"));
    }

    #[test]
    fn arcface_margin_free_and_aligned() {
        let e = t(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let w = t(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let l: Vec<Vec<f64>> = arcface_logits(&e, &w, &[0, 1], 30.0, 0.0).unwrap().to_vec2().unwrap();
        assert_eq!(l, vec![vec![30.0, 0.0], vec![30.0 * 0.6, 30.0 * 0.8]]);
        let l: Vec<Vec<f64>> = arcface_logits(&e, &w, &[0, 1], 30.0, 0.5).unwrap().to_vec2().unwrap();
        assert!((l[0][0] - 30.0 * 0.5f64.cos()).abs() < 1e-4);
        assert_eq!(l[0][1], 0.0);
        let zero = t(&[&[0.0, 0.0]]);
        assert!(arcface_logits(&zero, &w, &[0], 30.0, 0.5).is_err());
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let e = t(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0], &[0.1, 0.9]]);
        let w = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = LossConfig {
            head_weights: HeadWeightMap::zero(),
            ..LossConfig::default()
        };
        let out = total_loss(|_| &e, |_| &w, &[0, 0, 1, 1], &cfg).unwrap();
        assert_eq!(out.total_value().unwrap(), 0.0);
        assert_eq!(out.terms.len(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            arcface_margin: 2.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
