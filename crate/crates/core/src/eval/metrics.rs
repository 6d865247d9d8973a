use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::cosine_distance;

/// Gallery positions of one query ordered by ascending cosine distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingList {
    /// Indices into the evaluated gallery.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankingList {
    /// Builds a ranking from precomputed distances. Ties keep gallery order.
    pub fn from_distances(distances: &[f64], relevant: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..distances.len()).collect();
        order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
        RankingList {
            distances: order.iter().map(|&i| distances[i]).collect(),
            relevant: order.iter().map(|&i| relevant[i]).collect(),
            order,
        }
    }

    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based position of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    /// 1-based position of the last relevant item.
    pub fn last_hit(&self) -> Option<usize> {
        self.relevant.iter().rposition(|&r| r).map(|p| p + 1)
    }
}

/// Ranks the gallery for one query. Returns `None` (and logs a warning)
/// when no gallery item shares the query identity; such queries are left
/// out of every metric.
pub fn rank_gallery(query_f: &[f64], gallery_fs: &[Vec<f64>], query_id: usize, gallery_ids: &[usize]) -> Result<Option<RankingList>> {
    ensure!(
        gallery_fs.len() == gallery_ids.len(),
        "rank_gallery: {} gallery features but {} labels",
        gallery_fs.len(),
        gallery_ids.len()
    );
    for g in gallery_fs {
        ensure!(g.len() == query_f.len(), "rank_gallery: feature dim {} vs query dim {}", g.len(), query_f.len());
    }
    let relevant: Vec<bool> = gallery_ids.iter().map(|&g| g == query_id).collect();
    if !relevant.contains(&true) {
        log::warn!("query identity {} has no relevant gallery item; skipped", query_id);
        return Ok(None);
    }
    let distances: Vec<f64> = gallery_fs.iter().map(|g| cosine_distance(query_f, g)).collect();
    Ok(Some(RankingList::from_distances(&distances, &relevant)))
}

/// Rank-k for each `k`: the fraction of queries whose first relevant item
/// sits at position `<= k`.
pub fn cmc(rankings: &[RankingList], ks: &[usize]) -> Result<Vec<f64>> {
    ensure!(!rankings.is_empty(), "cmc: no rankings");
    let hits: Vec<usize> = rankings.iter().map(|r| r.first_hit().unwrap_or(usize::MAX)).collect();
    Ok(ks.iter().map(|&k| hits.iter().filter(|&&h| h <= k).count() as f64 / rankings.len() as f64).collect())
}

/// Mean over relevant positions `r` of precision at `r`.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Inverse negative penalty: relevant count divided by the position of the
/// last relevant item.
pub fn inverse_negative_penalty(relevant: &[bool]) -> f64 {
    let n = relevant.iter().filter(|&&r| r).count();
    match relevant.iter().rposition(|&r| r) {
        Some(p) => n as f64 / (p + 1) as f64,
        None => 0.0,
    }
}

pub fn mean_ap(rankings: &[RankingList]) -> Result<f64> {
    mean_of(rankings, |r| average_precision(&r.relevant))
}

pub fn mean_inp(rankings: &[RankingList]) -> Result<f64> {
    mean_of(rankings, |r| inverse_negative_penalty(&r.relevant))
}

fn mean_of(rankings: &[RankingList], f: impl Fn(&RankingList) -> f64) -> Result<f64> {
    ensure!(!rankings.is_empty(), "no rankings to average");
    for r in rankings {
        ensure!(r.num_relevant() > 0, "ranking without a relevant item");
    }
    Ok(rankings.iter().map(f).sum::<f64>() / rankings.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(rel: &[bool]) -> RankingList {
        let d: Vec<f64> = (0..rel.len()).map(|i| i as f64).collect();
        RankingList::from_distances(&d, rel)
    }

    #[test]
    fn self_match_ranks_first() {
        let q = vec![1.0, 0.0];
        let r = rank_gallery(&q, &[vec![0.0, 1.0], q.clone()], 3, &[4, 3]).unwrap().unwrap();
        assert_eq!(r.order, vec![1, 0]);
        assert_eq!(r.relevant, vec![true, false]);
    }

    #[test]
    fn ties_keep_gallery_order() {
        let r = RankingList::from_distances(&[0.5; 5], &[false, false, true, false, false]);
        assert_eq!(r.order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sorts_by_distance() {
        let r = RankingList::from_distances(&[0.4, 0.1, 0.7], &[true, false, false]);
        assert_eq!(r.order, vec![1, 0, 2]);
        assert_eq!(r.distances, vec![0.1, 0.4, 0.7]);
    }

    #[test]
    fn query_without_match_is_skipped() {
        assert!(rank_gallery(&[1.0], &[vec![1.0]], 0, &[1]).unwrap().is_none());
        assert!(rank_gallery(&[1.0], &[vec![1.0, 2.0]], 0, &[0]).is_err());
    }

    #[test]
    fn cmc_examples() {
        let second = ranking(&[false, true, false]);
        assert_eq!(cmc(&[second], &[1, 10]).unwrap(), vec![0.0, 1.0]);
        let perfect = ranking(&[true, false]);
        assert_eq!(cmc(&[perfect.clone()], &[1]).unwrap(), vec![1.0]);
        let third = ranking(&[false, false, true]);
        assert_eq!(cmc(&[perfect, third], &[1, 2, 3]).unwrap(), vec![0.5, 0.5, 1.0]);
        assert!(cmc(&[], &[1]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false, true]), (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(average_precision(&[true, true, false]), 1.0);
        assert_eq!(average_precision(&[false, false, false, true]), 0.25);
    }

    #[test]
    fn inp_examples() {
        assert_eq!(inverse_negative_penalty(&[true, false, true]), 2.0 / 3.0);
        assert_eq!(inverse_negative_penalty(&[true, true, false, false]), 1.0);
        assert_eq!(inverse_negative_penalty(&[false, false, false, false, true]), 0.2);
    }
}
