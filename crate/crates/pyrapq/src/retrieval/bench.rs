//! Desk benchmark: median wall time of AQD lookup search vs exact
//! inner-product search over the same query batch, plus their MAP values.
//!
//! The timed scans run in f32 by default (the search path's 32-bit fast
//! mode); correctness suites use the f64 path elsewhere.

use std::time::Instant;

use super::{
    map_eval, select_top, EvalDatabase, FlatIndex, QueryEmbedding, QueryInfo, RetrievalIndex,
    SearchHit,
};
use crate::bits::index_width;
use crate::error::Result;
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedConfig {
    pub top_n: usize,
    pub repetitions: usize,
    /// Scan in f32 (fast mode) instead of f64.
    pub use_f32: bool,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            top_n: 100,
            repetitions: 3,
            use_f32: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SpeedReport {
    pub queries: usize,
    pub database: usize,
    pub code_bits: usize,
    /// Seconds per 1e3 queries, one entry per repetition.
    pub aqd_runs: Vec<f64>,
    pub exact_runs: Vec<f64>,
    pub aqd_median_per_1k: Option<f64>,
    pub exact_median_per_1k: Option<f64>,
    pub speedup: Option<f64>,
    pub aqd_map: Option<f64>,
    pub exact_map: Option<f64>,
}

impl SpeedReport {
    pub fn summary(&self) -> String {
        match (self.aqd_median_per_1k, self.exact_median_per_1k) {
            (Some(a), Some(e)) => format!(
                "db={} queries={} bits={}: aqd {:.4}s/1k, exact {:.4}s/1k, speedup {:.2}x{}",
                self.database,
                self.queries,
                self.code_bits,
                a,
                e,
                e / a,
                match (self.aqd_map, self.exact_map) {
                    (Some(am), Some(em)) => format!(", map aqd {am:.4} vs exact {em:.4}"),
                    _ => String::new(),
                }
            ),
            _ => "empty report (no repetitions)".to_string(),
        }
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(v[v.len() / 2])
}

fn f32_scores_aqd(
    codes: &[u16],
    m: usize,
    k: usize,
    lut: &[f32],
    scores: &mut Vec<f64>,
) {
    scores.clear();
    scores.extend(codes.chunks_exact(m).map(|code| {
        let mut s = 0.0f32;
        for (sub, &idx) in code.iter().enumerate() {
            s += lut[sub * k + idx as usize];
        }
        s as f64
    }));
}

fn f32_scores_exact(db: &[f32], dim: usize, query: &[f32], scores: &mut Vec<f64>) {
    scores.clear();
    scores.extend(db.chunks_exact(dim).map(|e| {
        let s: f32 = e.iter().zip(query).map(|(&a, &b)| a * b).sum();
        s as f64
    }));
}

/// Runs both searches `repetitions` times over the full query batch and
/// reports medians normalized to seconds per 1e3 queries. `repetitions = 0`
/// produces an empty report. MAPs come from the last repetition's rankings
/// when labels allow.
pub fn speed_benchmark(
    index: &RetrievalIndex,
    flat: &FlatIndex,
    queries: &[QueryEmbedding],
    query_labels: &[u32],
    cfg: &SpeedConfig,
) -> Result<SpeedReport> {
    let mut report = SpeedReport {
        queries: queries.len(),
        database: index.len(),
        code_bits: index.m() * index_width(index.k()),
        ..SpeedReport::default()
    };
    if cfg.repetitions == 0 || queries.is_empty() {
        return Ok(report);
    }

    let (m, k, d) = (index.m(), index.k(), index.sub_dim());
    let dim = flat.dim();
    let scale = 1000.0 / queries.len() as f64;

    // f32 snapshots for the fast mode (built once, outside the timing)
    let words32: Vec<f32> = index.codebook().words().iter().map(|&w| w as f32).collect();
    let flat32: Vec<f32> = flat.embeddings().iter().map(|&v| v as f32).collect();
    let queries32: Vec<Vec<f32>> = queries
        .iter()
        .map(|q| (0..m).flat_map(|s| q.sub(s).iter().map(|&v| v as f32)).collect())
        .collect();

    let mut aqd_rankings: Vec<Vec<SearchHit>> = Vec::new();
    let mut exact_rankings: Vec<Vec<SearchHit>> = Vec::new();

    for _ in 0..cfg.repetitions {
        let started = Instant::now();
        let hits: Vec<Vec<SearchHit>> = if cfg.use_f32 {
            exec::map_range(queries.len(), |qi| {
                let q32 = &queries32[qi];
                let mut lut = vec![0.0f32; m * k];
                for sub in 0..m {
                    let v = &q32[sub * d..(sub + 1) * d];
                    for idx in 0..k {
                        let off = (sub * k + idx) * d;
                        lut[sub * k + idx] = words32[off..off + d]
                            .iter()
                            .zip(v)
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                }
                let mut scores = Vec::new();
                f32_scores_aqd(index.codes(), m, k, &lut, &mut scores);
                select_top(&scores, index.ids(), queries[qi].id, cfg.top_n)
            })
        } else {
            exec::map_slice(queries, |q| {
                super::aqd_search(q, index, cfg.top_n).expect("validated sizes")
            })
        };
        report.aqd_runs.push(started.elapsed().as_secs_f64() * scale);
        aqd_rankings = hits;
    }

    for _ in 0..cfg.repetitions {
        let started = Instant::now();
        let hits: Vec<Vec<SearchHit>> = if cfg.use_f32 {
            exec::map_range(queries.len(), |qi| {
                let q32 = &queries32[qi];
                let mut scores = Vec::new();
                f32_scores_exact(&flat32, dim, q32, &mut scores);
                select_top(&scores, flat.ids(), queries[qi].id, cfg.top_n)
            })
        } else {
            exec::map_range(queries.len(), |qi| {
                let q: Vec<f64> = queries32[qi].iter().map(|&v| v as f64).collect();
                super::exact_search(&q, flat, cfg.top_n, queries[qi].id).expect("validated sizes")
            })
        };
        report
            .exact_runs
            .push(started.elapsed().as_secs_f64() * scale);
        exact_rankings = hits;
    }

    report.aqd_median_per_1k = median(&report.aqd_runs);
    report.exact_median_per_1k = median(&report.exact_runs);
    report.speedup = match (report.aqd_median_per_1k, report.exact_median_per_1k) {
        (Some(a), Some(e)) if a > 0.0 => Some(e / a),
        _ => None,
    };

    // MAPs from the final rankings, when label information is usable
    if query_labels.len() == queries.len() {
        let db = EvalDatabase::from_index(index)?;
        let infos: Vec<QueryInfo> = queries
            .iter()
            .zip(query_labels)
            .map(|(q, &label)| QueryInfo { id: q.id, label })
            .collect();
        let ids_of = |rankings: &[Vec<SearchHit>]| -> Vec<Vec<u64>> {
            rankings
                .iter()
                .map(|r| r.iter().map(|h| h.id).collect())
                .collect()
        };
        if let Ok(s) = map_eval(&ids_of(&aqd_rankings), &infos, &db) {
            report.aqd_map = Some(s.map);
        }
        if let Ok(s) = map_eval(&ids_of(&exact_rankings), &infos, &db) {
            report.exact_map = Some(s.map);
        }
    }
    Ok(report)
}
