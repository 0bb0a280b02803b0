//! Database encoding, asymmetric-quantizer-distance search over precomputed
//! lookup tables, the exact-embedding baseline, and the index file format.
//!
//! An index is immutable once built; searches over distinct queries run in
//! parallel with no coordination. Scores are per-subspace inner products of
//! unit vectors, so an AQD score is bounded by `m` in absolute value.

mod bench;
mod metrics;

pub use bench::{speed_benchmark, SpeedConfig, SpeedReport};
pub use metrics::{map_eval, p_at_n, EvalDatabase, MapSummary, QueryInfo};

use std::path::Path;

use crate::bits::{index_width, pack_indices, unpack_indices};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{dot, l2_normalize};
use crate::pooling::FeatureMapSet;
use crate::quantization::{hard_encode, split_embedding, EffectiveCodebook};
use crate::training::ModelParams;

/// Encoded database: codebook snapshot, one code row per item, labels, ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    codebook: EffectiveCodebook,
    codes: Vec<u16>, // [n, m] row-major
    labels: Vec<u32>,
    ids: Vec<u64>,
}

impl RetrievalIndex {
    pub fn from_codes(
        codebook: EffectiveCodebook,
        codes: Vec<u16>,
        labels: Vec<u32>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        let m = codebook.m();
        if codes.len() % m != 0 {
            return Err(Error::Shape(format!(
                "{} code entries for m = {m}",
                codes.len()
            )));
        }
        let n = codes.len() / m;
        if labels.len() != n || ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} codes vs {} labels / {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if codes.iter().any(|&c| c as usize >= codebook.k()) {
            return Err(Error::Input(format!(
                "code index outside [0, {})",
                codebook.k()
            )));
        }
        Ok(Self {
            codebook,
            codes,
            labels,
            ids,
        })
    }

    /// Hard-encodes precomputed embeddings (row-major `[n, dim]`).
    pub fn from_embeddings(
        codebook: EffectiveCodebook,
        embeddings: &[f64],
        ids: &[u64],
        labels: &[u32],
    ) -> Result<Self> {
        let dim = codebook.dim();
        if embeddings.len() != ids.len() * dim || labels.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} embedding values / {} ids / {} labels for dim {dim}",
                embeddings.len(),
                ids.len(),
                labels.len()
            )));
        }
        let rows = exec::map_range(ids.len(), |i| {
            hard_encode(&embeddings[i * dim..(i + 1) * dim], &codebook)
        });
        let mut codes = Vec::with_capacity(ids.len() * codebook.m());
        for row in rows {
            codes.extend(row?.indices);
        }
        Self::from_codes(codebook, codes, labels.to_vec(), ids.to_vec())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn m(&self) -> usize {
        self.codebook.m()
    }

    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    pub fn sub_dim(&self) -> usize {
        self.codebook.d()
    }

    pub fn codebook(&self) -> &EffectiveCodebook {
        &self.codebook
    }

    pub fn code(&self, item: usize) -> &[u16] {
        let m = self.m();
        &self.codes[item * m..(item + 1) * m]
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Bytes the packed code section occupies: `ceil(n*m*ceil(log2 k) / 8)`.
    pub fn code_payload_bytes(&self) -> usize {
        (self.len() * self.m() * index_width(self.k())).div_ceil(8)
    }

    /// Versioned binary layout: magic, m/k/d, n, codebook f32, packed codes,
    /// labels, ids. All little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"PQIX");
        buf.extend_from_slice(&1u32.to_le_bytes());
        for v in [self.m() as u32, self.k() as u32, self.sub_dim() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &w in self.codebook.words() {
            buf.extend_from_slice(&(w as f32).to_le_bytes());
        }
        let packed = pack_indices(&self.codes, index_width(self.k()));
        debug_assert_eq!(packed.len(), self.code_payload_bytes());
        buf.extend_from_slice(&packed);
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        for &id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let display = path.display().to_string();
        if buf.len() < 4 || &buf[..4] != b"PQIX" {
            return Err(Error::BadMagic(display));
        }
        let mut pos = 4usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::Truncated(display.clone()));
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Version {
                path: path.display().to_string(),
                found: version,
                expected: 1,
            });
        }
        let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut words = Vec::with_capacity(m * k * d);
        for chunk in take(m * k * d * 4)?.chunks_exact(4) {
            words.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let payload = (n * m * index_width(k)).div_ceil(8);
        let codes = unpack_indices(take(payload)?, n * m, index_width(k))?;
        let mut labels = Vec::with_capacity(n);
        for chunk in take(n * 4)?.chunks_exact(4) {
            labels.push(u32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut ids = Vec::with_capacity(n);
        for chunk in take(n * 8)?.chunks_exact(8) {
            ids.push(u64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Self::from_codes(EffectiveCodebook::from_words(m, k, d, words)?, codes, labels, ids)
    }
}

/// Embeds and hard-encodes labeled feature sets into an index.
pub fn encode_database(
    params: &ModelParams,
    sets: &[FeatureMapSet],
    ids: &[u64],
) -> Result<RetrievalIndex> {
    if sets.len() != ids.len() {
        return Err(Error::Shape(format!(
            "{} feature sets vs {} ids",
            sets.len(),
            ids.len()
        )));
    }
    let codebook = params.codebook.effective();
    let rows = exec::map_slice(sets, |fms| -> Result<(Vec<u16>, u32)> {
        let label = fms
            .label
            .ok_or_else(|| Error::Input("database item without a label".into()))?;
        let pooled = crate::pooling::pool_set(fms, &params.hyper.rhos)?;
        let z = params.embed(&pooled)?;
        Ok((hard_encode(&z, &codebook)?.indices, label))
    });
    let mut codes = Vec::with_capacity(sets.len() * codebook.m());
    let mut labels = Vec::with_capacity(sets.len());
    for row in rows {
        let (c, l) = row?;
        codes.extend(c);
        labels.push(l);
    }
    RetrievalIndex::from_codes(codebook, codes, labels, ids.to_vec())
}

/// A query's per-subspace normalized sub-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    m: usize,
    d: usize,
    subs: Vec<f64>, // [m, d]
    /// External id of the query item, used to exclude the item itself when
    /// it also appears in the database.
    pub id: Option<u64>,
}

impl QueryEmbedding {
    pub fn from_embedding(z: &[f64], m: usize, id: Option<u64>) -> Result<Self> {
        let parts = split_embedding(z, m)?;
        let d = parts[0].len();
        let mut subs = Vec::with_capacity(z.len());
        for p in parts {
            subs.extend(l2_normalize(p));
        }
        Ok(Self { m, d, subs, id })
    }

    pub fn sub(&self, sub: usize) -> &[f64] {
        &self.subs[sub * self.d..(sub + 1) * self.d]
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

/// Query-to-codeword similarity table, `m x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    m: usize,
    k: usize,
    entries: Vec<f64>,
}

impl LookupTable {
    pub fn entry(&self, sub: usize, idx: usize) -> f64 {
        self.entries[sub * self.k + idx]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Precomputes `<v_m, c_m^k>` for all m, k.
pub fn build_lookup(query: &QueryEmbedding, codebook: &EffectiveCodebook) -> Result<LookupTable> {
    if query.m != codebook.m() || query.d != codebook.d() {
        return Err(Error::Shape(format!(
            "query [{}, {}] vs codebook [{}, {}]",
            query.m,
            query.d,
            codebook.m(),
            codebook.d()
        )));
    }
    let (m, k) = (codebook.m(), codebook.k());
    let mut entries = Vec::with_capacity(m * k);
    for sub in 0..m {
        let v = query.sub(sub);
        for idx in 0..k {
            entries.push(dot(v, codebook.word(sub, idx)));
        }
    }
    Ok(LookupTable { m, k, entries })
}

/// Direct evaluation of the asymmetric score for one item, without the
/// lookup table. Kept as the second route for the equivalence checks.
pub fn aqd_score_direct(query: &QueryEmbedding, index: &RetrievalIndex, item: usize) -> f64 {
    let code = index.code(item);
    let mut score = 0.0;
    for (sub, &idx) in code.iter().enumerate() {
        score += dot(query.sub(sub), index.codebook.word(sub, idx as usize));
    }
    score
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    pub score: f64,
}

fn validate_top_n(top_n: usize, n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Eval(format!("{what} over an empty index")));
    }
    if top_n == 0 || top_n > n {
        return Err(Error::Param(format!(
            "top_n = {top_n} outside 1..={n} for {what}"
        )));
    }
    Ok(())
}

/// Descending score, ties by ascending id; optional self-exclusion.
fn select_top(
    scores: &[f64],
    ids: &[u64],
    exclude: Option<u64>,
    top_n: usize,
) -> Vec<SearchHit> {
    let mut order: Vec<u32> = (0..scores.len() as u32)
        .filter(|&i| exclude != Some(ids[i as usize]))
        .collect();
    let cmp = |a: &u32, b: &u32| {
        let (a, b) = (*a as usize, *b as usize);
        scores[b]
            .partial_cmp(&scores[a])
            .expect("search scores are finite")
            .then(ids[a].cmp(&ids[b]))
    };
    let keep = top_n.min(order.len());
    if keep < order.len() {
        order.select_nth_unstable_by(keep, cmp);
        order.truncate(keep);
    }
    order.sort_unstable_by(cmp);
    order
        .into_iter()
        .map(|i| SearchHit {
            id: ids[i as usize],
            score: scores[i as usize],
        })
        .collect()
}

/// Lookup-table AQD search: one table build, then `m` adds per item.
pub fn aqd_search(
    query: &QueryEmbedding,
    index: &RetrievalIndex,
    top_n: usize,
) -> Result<Vec<SearchHit>> {
    validate_top_n(top_n, index.len(), "aqd_search")?;
    let lut = build_lookup(query, &index.codebook)?;
    let m = index.m();
    let k = index.k();
    let scores: Vec<f64> = index
        .codes
        .chunks_exact(m)
        .map(|code| {
            let mut s = 0.0;
            for (sub, &idx) in code.iter().enumerate() {
                s += lut.entries[sub * k + idx as usize];
            }
            s
        })
        .collect();
    Ok(select_top(&scores, &index.ids, query.id, top_n))
}

/// AQD search over many queries, parallel across queries.
pub fn aqd_search_batch(
    queries: &[QueryEmbedding],
    index: &RetrievalIndex,
    top_n: usize,
) -> Result<Vec<Vec<SearchHit>>> {
    exec::map_slice(queries, |q| aqd_search(q, index, top_n))
        .into_iter()
        .collect()
}

/// Flat full-precision embedding database for the exact baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    embeddings: Vec<f64>, // [n, dim]
    labels: Vec<u32>,
    ids: Vec<u64>,
}

impl FlatIndex {
    pub fn new(dim: usize, embeddings: Vec<f64>, labels: Vec<u32>, ids: Vec<u64>) -> Result<Self> {
        if embeddings.len() != ids.len() * dim || labels.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} values / {} labels / {} ids for dim {dim}",
                embeddings.len(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self {
            dim,
            embeddings,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, item: usize) -> &[f64] {
        &self.embeddings[item * self.dim..(item + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}

/// Exact baseline: ranks by the full inner product of D-dim embeddings.
pub fn exact_search(
    query: &[f64],
    index: &FlatIndex,
    top_n: usize,
    exclude_id: Option<u64>,
) -> Result<Vec<SearchHit>> {
    validate_top_n(top_n, index.len(), "exact_search")?;
    if query.len() != index.dim {
        return Err(Error::Shape(format!(
            "query dim {} vs index dim {}",
            query.len(),
            index.dim
        )));
    }
    let scores: Vec<f64> = index
        .embeddings
        .chunks_exact(index.dim)
        .map(|e| dot(query, e))
        .collect();
    Ok(select_top(&scores, &index.ids, exclude_id, top_n))
}

/// Exact search over many queries (`[n, dim]` row-major), parallel.
pub fn exact_search_batch(
    queries: &[f64],
    exclude: &[Option<u64>],
    index: &FlatIndex,
    top_n: usize,
) -> Result<Vec<Vec<SearchHit>>> {
    if queries.len() != exclude.len() * index.dim {
        return Err(Error::Shape(format!(
            "{} query values vs {} exclusions for dim {}",
            queries.len(),
            exclude.len(),
            index.dim
        )));
    }
    exec::map_range(exclude.len(), |i| {
        exact_search(
            &queries[i * index.dim..(i + 1) * index.dim],
            index,
            top_n,
            exclude[i],
        )
    })
    .into_iter()
    .collect()
}
