//! Mean average precision and precision-at-N over ranked id lists.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// What evaluation needs to know about one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryInfo {
    /// The query's own item id, if it could appear in the database.
    pub id: Option<u64>,
    pub label: u32,
}

/// Label lookup and per-class counts over the database side.
#[derive(Debug, Clone)]
pub struct EvalDatabase {
    labels_by_id: HashMap<u64, u32>,
    class_counts: HashMap<u32, usize>,
}

impl EvalDatabase {
    pub fn new(ids: &[u64], labels: &[u32]) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} ids vs {} labels",
                ids.len(),
                labels.len()
            )));
        }
        let mut labels_by_id = HashMap::with_capacity(ids.len());
        let mut class_counts: HashMap<u32, usize> = HashMap::new();
        for (&id, &label) in ids.iter().zip(labels) {
            if labels_by_id.insert(id, label).is_some() {
                return Err(Error::Input(format!("duplicate database id {id}")));
            }
            *class_counts.entry(label).or_default() += 1;
        }
        Ok(Self {
            labels_by_id,
            class_counts,
        })
    }

    pub fn from_index(index: &super::RetrievalIndex) -> Result<Self> {
        Self::new(index.ids(), index.labels())
    }

    pub fn len(&self) -> usize {
        self.labels_by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels_by_id.is_empty()
    }

    pub fn label_of(&self, id: u64) -> Option<u32> {
        self.labels_by_id.get(&id).copied()
    }

    /// Database items relevant to this query, discounting the query itself
    /// when it is part of the database.
    pub fn relevant_total(&self, query: &QueryInfo) -> usize {
        let mut n = self.class_counts.get(&query.label).copied().unwrap_or(0);
        if let Some(id) = query.id {
            if self.labels_by_id.get(&id) == Some(&query.label) {
                n = n.saturating_sub(1);
            }
        }
        n
    }
}

/// Average precision of one ranked id list:
/// `(1/N_rel) * sum over relevant ranks r of precision@r`.
/// Returns `None` when the database holds nothing relevant to the query.
pub fn average_precision(ranking: &[u64], query: &QueryInfo, db: &EvalDatabase) -> Option<f64> {
    let n_rel = db.relevant_total(query);
    if n_rel == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &id) in ranking.iter().enumerate() {
        if db.label_of(id) == Some(query.label) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / n_rel as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    /// Queries that entered the mean.
    pub evaluated: usize,
    /// Queries skipped because no relevant database item exists.
    pub skipped: usize,
}

/// Mean average precision over the queries; queries without a single
/// relevant database item are excluded (and counted as skipped).
pub fn map_eval(
    rankings: &[Vec<u64>],
    queries: &[QueryInfo],
    db: &EvalDatabase,
) -> Result<MapSummary> {
    if rankings.len() != queries.len() {
        return Err(Error::Shape(format!(
            "{} rankings vs {} queries",
            rankings.len(),
            queries.len()
        )));
    }
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (ranking, query) in rankings.iter().zip(queries) {
        match average_precision(ranking, query, db) {
            Some(ap) => {
                sum += ap;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Eval(
            "no query has a relevant database item".into(),
        ));
    }
    Ok(MapSummary {
        map: sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Precision among the top `n` returned items, averaged over the evaluable
/// queries, for each requested `n`.
pub fn p_at_n(
    rankings: &[Vec<u64>],
    queries: &[QueryInfo],
    db: &EvalDatabase,
    ns: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if rankings.len() != queries.len() {
        return Err(Error::Shape(format!(
            "{} rankings vs {} queries",
            rankings.len(),
            queries.len()
        )));
    }
    for &n in ns {
        if n == 0 || n > db.len() {
            return Err(Error::Param(format!(
                "P@{n} outside 1..={} database items",
                db.len()
            )));
        }
        if let Some(short) = rankings.iter().find(|r| r.len() < n) {
            return Err(Error::Param(format!(
                "P@{n} needs rankings of length >= {n}, found {}",
                short.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut sum = 0.0;
        let mut evaluated = 0usize;
        for (ranking, query) in rankings.iter().zip(queries) {
            if db.relevant_total(query) == 0 {
                continue;
            }
            let rel = ranking[..n]
                .iter()
                .filter(|&&id| db.label_of(id) == Some(query.label))
                .count();
            sum += rel as f64 / n as f64;
            evaluated += 1;
        }
        if evaluated == 0 {
            return Err(Error::Eval(
                "no query has a relevant database item".into(),
            ));
        }
        out.push((n, sum / evaluated as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(labels: &[u32]) -> EvalDatabase {
        let ids: Vec<u64> = (0..labels.len() as u64).collect();
        EvalDatabase::new(&ids, labels).unwrap()
    }

    #[test]
    fn all_relevant_gives_map_one() {
        let d = db(&[1, 1, 1]);
        let q = QueryInfo { id: None, label: 1 };
        let s = map_eval(&[vec![0, 1, 2]], &[q], &d).unwrap();
        assert_eq!(s.map, 1.0);
        assert_eq!(s.evaluated, 1);
    }

    #[test]
    fn nothing_relevant_returned_contributes_zero() {
        let d = db(&[1, 0, 0]);
        let q = QueryInfo { id: None, label: 1 };
        // item 0 is relevant but the ranking only surfaces 1 and 2
        let s = map_eval(&[vec![1, 2]], &[q], &d).unwrap();
        assert_eq!(s.map, 0.0);
    }

    #[test]
    fn hand_case_relevant_at_ranks_one_and_three() {
        let d = db(&[1, 0, 1, 0]);
        let q = QueryInfo { id: None, label: 1 };
        let ap = average_precision(&[0, 1, 2, 3], &q, &d).unwrap();
        let want = 0.5 * (1.0 / 1.0 + 2.0 / 3.0);
        assert!((ap - want).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ap_is_one_iff_relevant_precede_irrelevant() {
        let d = db(&[1, 1, 0, 0]);
        let q = QueryInfo { id: None, label: 1 };
        assert_eq!(average_precision(&[0, 1, 2, 3], &q, &d).unwrap(), 1.0);
        assert!(average_precision(&[0, 2, 1, 3], &q, &d).unwrap() < 1.0);
    }

    #[test]
    fn self_exclusion_discounts_the_relevant_total() {
        let d = db(&[1, 1, 0]);
        let q = QueryInfo {
            id: Some(0),
            label: 1,
        };
        assert_eq!(d.relevant_total(&q), 1);
        // ranking without the query itself: item 1 at rank 1
        let ap = average_precision(&[1, 2], &q, &d).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn queries_without_relevant_items_are_skipped() {
        let d = db(&[0, 0]);
        let qs = [
            QueryInfo { id: None, label: 0 },
            QueryInfo { id: None, label: 9 },
        ];
        let s = map_eval(&[vec![0, 1], vec![0, 1]], &qs, &d).unwrap();
        assert_eq!(s.evaluated, 1);
        assert_eq!(s.skipped, 1);
        let only_bad = [QueryInfo { id: None, label: 9 }];
        assert!(map_eval(&[vec![0, 1]], &only_bad, &d).is_err());
    }

    #[test]
    fn precision_at_n_cases() {
        let d = db(&[1, 0, 1, 0]);
        let q = QueryInfo { id: None, label: 1 };
        // alternating relevant/irrelevant
        let p = p_at_n(&[vec![0, 1, 2, 3]], &[q], &d, &[1, 2, 4]).unwrap();
        assert_eq!(p[0], (1, 1.0));
        assert_eq!(p[1], (2, 0.5));
        // N = N_D returns the class prior
        assert_eq!(p[2], (4, 0.5));
        // all relevant
        let d_all = db(&[1, 1]);
        let p = p_at_n(&[vec![0, 1]], &[q], &d_all, &[1, 2]).unwrap();
        assert_eq!(p, vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn p_at_n_rejects_out_of_range_and_short_rankings() {
        let d = db(&[1, 0]);
        let q = QueryInfo { id: None, label: 1 };
        assert!(p_at_n(&[vec![0, 1]], &[q], &d, &[3]).is_err());
        assert!(p_at_n(&[vec![0]], &[q], &d, &[2]).is_err());
    }

    #[test]
    fn map_matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n_db = rng.random_range(5..60);
            let labels: Vec<u32> = (0..n_db).map(|_| rng.random_range(0..4)).collect();
            let d = db(&labels);
            let n_q = rng.random_range(1..6);
            let queries: Vec<QueryInfo> = (0..n_q)
                .map(|_| QueryInfo {
                    id: None,
                    label: rng.random_range(0..4),
                })
                .collect();
            let rankings: Vec<Vec<u64>> = (0..n_q)
                .map(|_| {
                    let mut ids: Vec<u64> = (0..n_db as u64).collect();
                    for i in (1..ids.len()).rev() {
                        ids.swap(i, rng.random_range(0..=i));
                    }
                    ids
                })
                .collect();

            // naive oracle
            let mut total = 0.0;
            let mut m = 0usize;
            for (r, q) in rankings.iter().zip(&queries) {
                let n_rel = labels.iter().filter(|&&l| l == q.label).count();
                if n_rel == 0 {
                    continue;
                }
                let mut hits = 0;
                let mut ap = 0.0;
                for (pos, &id) in r.iter().enumerate() {
                    if labels[id as usize] == q.label {
                        hits += 1;
                        ap += hits as f64 / (pos + 1) as f64;
                    }
                }
                total += ap / n_rel as f64;
                m += 1;
            }
            match map_eval(&rankings, &queries, &d) {
                Ok(s) => {
                    assert_eq!(s.evaluated, m);
                    assert!((s.map - total / m as f64).abs() < 1e-12);
                }
                Err(_) => assert_eq!(m, 0),
            }
        }
    }
}
