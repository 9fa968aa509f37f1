use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average precision of one class: the mean, over positives, of precision at
/// the rank where each positive is reached. Items are ranked by descending
/// score with ties in ascending id order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool], ids: &[&str]) -> Result<Option<f64>> {
    if scores.len() != positives.len() || scores.len() != ids.len() {
        return Err(Error::contract(format!(
            "average precision over {} scores, {} labels, {} ids",
            scores.len(),
            positives.len(),
            ids.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN clip score".into()));
    }
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per class; `None` for classes without an evaluation positive.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Mean AP over classes that have at least one positive among the clips.
/// `scores[i][c]` and `labels[i][c]` belong to clip `ids[i]`.
pub fn mean_average_precision(ids: &[String], scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapReport> {
    if ids.is_empty() || ids.len() != scores.len() || ids.len() != labels.len() {
        return Err(Error::contract(format!(
            "mAP over {} ids, {} score rows, {} label rows",
            ids.len(),
            scores.len(),
            labels.len()
        )));
    }
    let c = scores[0].len();
    if scores.iter().any(|s| s.len() != c) || labels.iter().any(|l| l.len() != c) {
        return Err(Error::shape("mAP rows disagree in class count"));
    }
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let p: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        let ap = average_precision(&s, &p, &id_refs)?;
        if ap.is_none() {
            log::warn!("class {k} has no positive evaluation clip; excluded from mAP");
            excluded.push(k);
        }
        per_class.push(ap);
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::contract("no class has a positive evaluation clip"));
    }
    Ok(MapReport {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
        excluded,
    })
}
