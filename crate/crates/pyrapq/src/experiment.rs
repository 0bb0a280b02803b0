//! Whole-pipeline experiment runs (train -> encode -> search -> evaluate)
//! and the hyperparameter sweeps built on top of them.

use crate::dataio::{
    synthesize_dataset, DatasetSplits, LoadedDataset, ManifestRecord, Split, SplitProtocol,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::l2_normalize;
use crate::pooling::{pool_set, FeatureMapSet, FocusFactors, StageDims};
use crate::quantization::split_embedding;
use crate::retrieval::{
    aqd_search_batch, exact_search_batch, map_eval, p_at_n, EvalDatabase, FlatIndex,
    QueryEmbedding, QueryInfo, RetrievalIndex,
};
use crate::training::{train, ModelParams, TrainConfig, TrainLog, TrainSample, Variant};

/// An in-memory dataset with resolved train/query/database views.
#[derive(Debug, Clone)]
pub struct ExperimentDataset {
    pub records: Vec<ManifestRecord>,
    pub features: Vec<FeatureMapSet>,
    pub n_classes: u32,
    pub stage_dims: StageDims,
    pub splits: DatasetSplits,
}

impl ExperimentDataset {
    /// Synthesizes the desk dataset and applies the train-as-database
    /// protocol.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        let data = synthesize_dataset(spec)?;
        let splits = derive_splits(&data.records)?;
        Ok(Self {
            records: data.records,
            features: data.features,
            n_classes: data.n_classes,
            stage_dims: data.stage_dims,
            splits,
        })
    }

    pub fn from_loaded(loaded: LoadedDataset, protocol: SplitProtocol) -> Result<Self> {
        let splits = crate::dataio::split_dataset(&loaded.manifest, protocol)?;
        Ok(Self {
            records: loaded.manifest.records,
            features: loaded.features,
            n_classes: loaded.manifest.n_classes,
            stage_dims: loaded.manifest.stage_dims,
            splits,
        })
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        self.stage_dims.channels()
    }
}

fn derive_splits(records: &[ManifestRecord]) -> Result<DatasetSplits> {
    let train: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let query: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Query)
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(Error::Input("dataset has no training records".into()));
    }
    Ok(DatasetSplits {
        database: train.clone(),
        train,
        query,
    })
}

/// Everything one run needs besides the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub hyper: crate::training::HyperParams,
    pub train: TrainConfig,
    pub variant: Variant,
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub aqd_map: f64,
    pub exact_map: f64,
    pub p_at: Vec<(usize, f64)>,
    pub first_loss: f64,
    pub last_loss: f64,
    pub code_bits: usize,
    pub log: TrainLog,
}

fn pool_view(
    features: &[FeatureMapSet],
    view: &[usize],
    rhos: &FocusFactors,
) -> Result<Vec<TrainSample>> {
    let samples = exec::map_slice(view, |&i| -> Result<TrainSample> {
        let fms = &features[i];
        let label = fms
            .label
            .ok_or_else(|| Error::Input(format!("sample {i} has no label")))?;
        Ok(TrainSample {
            pooled: pool_set(fms, rhos)?,
            label,
        })
    });
    samples.into_iter().collect()
}

/// Concatenation of the embedding's l2-normalized sub-vectors: the exact
/// representation AQD quantizes, used for the exact baseline.
fn normalized_embedding(z: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(z.len());
    for part in split_embedding(z, m)? {
        out.extend(l2_normalize(part));
    }
    Ok(out)
}

/// Embeds a view of the dataset under trained parameters; returns raw and
/// per-sub-normalized embeddings plus ids and labels.
struct EmbeddedView {
    raw: Vec<f64>,
    normalized: Vec<f64>,
    ids: Vec<u64>,
    labels: Vec<u32>,
}

fn embed_view(
    params: &ModelParams,
    data: &ExperimentDataset,
    view: &[usize],
) -> Result<EmbeddedView> {
    let m = params.hyper.m;
    let rows = exec::map_slice(view, |&i| -> Result<(Vec<f64>, Vec<f64>)> {
        let pooled = pool_set(&data.features[i], &params.hyper.rhos)?;
        let z = params.embed(&pooled)?;
        let zn = normalized_embedding(&z, m)?;
        Ok((z, zn))
    });
    let mut raw = Vec::with_capacity(view.len() * params.hyper.dim);
    let mut normalized = Vec::with_capacity(view.len() * params.hyper.dim);
    for row in rows {
        let (z, zn) = row?;
        raw.extend(z);
        normalized.extend(zn);
    }
    Ok(EmbeddedView {
        raw,
        normalized,
        ids: view.iter().map(|&i| data.records[i].id).collect(),
        labels: view.iter().map(|&i| data.records[i].label).collect(),
    })
}

/// Trains on the dataset's train view, encodes its database view, then
/// evaluates quantized (AQD) and exact retrieval over the query view.
pub fn run_once(
    data: &ExperimentDataset,
    settings: &RunSettings,
    p_ns: &[usize],
) -> Result<(ModelParams, RunOutcome)> {
    let mut hyper = settings.hyper;
    settings.variant.apply(&mut hyper);
    hyper.validate()?;

    let train_samples = pool_view(&data.features, &data.splits.train, &hyper.rhos)?;
    let mut params = ModelParams::init(
        hyper,
        data.channels(),
        data.n_classes as usize,
        settings.train.seed,
    )?;
    let log = train(&mut params, &train_samples, &settings.train, None)?;

    let outcome = evaluate_model(&params, data, p_ns, &log)?;
    Ok((params, outcome))
}

/// Retrieval evaluation of trained parameters against the dataset views.
pub fn evaluate_model(
    params: &ModelParams,
    data: &ExperimentDataset,
    p_ns: &[usize],
    log: &TrainLog,
) -> Result<RunOutcome> {
    if data.splits.query.is_empty() {
        return Err(Error::Eval("dataset has no query records".into()));
    }
    let db = embed_view(params, data, &data.splits.database)?;
    let queries = embed_view(params, data, &data.splits.query)?;

    let index = RetrievalIndex::from_embeddings(
        params.codebook.effective(),
        &db.raw,
        &db.ids,
        &db.labels,
    )?;
    let flat = FlatIndex::new(
        params.hyper.dim,
        db.normalized.clone(),
        db.labels.clone(),
        db.ids.clone(),
    )?;

    let m = params.hyper.m;
    let query_embeddings: Vec<QueryEmbedding> = queries
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            QueryEmbedding::from_embedding(
                &queries.raw[i * params.hyper.dim..(i + 1) * params.hyper.dim],
                m,
                Some(id),
            )
        })
        .collect::<Result<_>>()?;

    let top_n = index.len();
    let aqd_hits = aqd_search_batch(&query_embeddings, &index, top_n)?;
    let excludes: Vec<Option<u64>> = queries.ids.iter().map(|&id| Some(id)).collect();
    let exact_hits = exact_search_batch(&queries.normalized, &excludes, &flat, top_n)?;

    let eval_db = EvalDatabase::from_index(&index)?;
    let infos: Vec<QueryInfo> = queries
        .ids
        .iter()
        .zip(&queries.labels)
        .map(|(&id, &label)| QueryInfo {
            id: Some(id),
            label,
        })
        .collect();
    let to_ids = |hits: &[Vec<crate::retrieval::SearchHit>]| -> Vec<Vec<u64>> {
        hits.iter()
            .map(|r| r.iter().map(|h| h.id).collect())
            .collect()
    };
    let aqd_rankings = to_ids(&aqd_hits);
    let aqd_map = map_eval(&aqd_rankings, &infos, &eval_db)?.map;
    let exact_map = map_eval(&to_ids(&exact_hits), &infos, &eval_db)?.map;
    let p_at = if p_ns.is_empty() {
        Vec::new()
    } else {
        p_at_n(&aqd_rankings, &infos, &eval_db, p_ns)?
    };

    Ok(RunOutcome {
        aqd_map,
        exact_map,
        p_at,
        first_loss: log.epochs.first().map_or(f64::NAN, |e| e.total),
        last_loss: log.epochs.last().map_or(f64::NAN, |e| e.total),
        code_bits: params.hyper.code_bits(),
        log: log.clone(),
    })
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Tau,
    Kappa,
    RhoOrder,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => SweepParam::Alpha,
            "tau" => SweepParam::Tau,
            "kappa" => SweepParam::Kappa,
            "rho_order" | "rho-order" => SweepParam::RhoOrder,
            other => return Err(Error::Parse(format!("unknown sweep parameter '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Tau => "tau",
            SweepParam::Kappa => "kappa",
            SweepParam::RhoOrder => "rho_order",
        }
    }

    /// Applies one sweep value. `kappa` accepts the literal `K`/`k` for the
    /// full-attention row; `rho_order` accepts descending/ascending/gap/gmp.
    pub fn apply(self, value: &str, hyper: &mut crate::training::HyperParams) -> Result<()> {
        match self {
            SweepParam::Alpha => {
                hyper.alpha = value
                    .parse()
                    .map_err(|_| Error::Parse(format!("alpha value '{value}'")))?;
            }
            SweepParam::Tau => {
                hyper.loss.tau = value
                    .parse()
                    .map_err(|_| Error::Parse(format!("tau value '{value}'")))?;
            }
            SweepParam::Kappa => {
                hyper.kappa = if value.eq_ignore_ascii_case("k") {
                    hyper.k
                } else {
                    value
                        .parse()
                        .map_err(|_| Error::Parse(format!("kappa value '{value}'")))?
                };
            }
            SweepParam::RhoOrder => {
                hyper.rhos = match value {
                    "descending" => FocusFactors::descending(),
                    "ascending" => FocusFactors::ascending(),
                    "gap" => FocusFactors::gap(),
                    "gmp" => FocusFactors::gmp(),
                    other => {
                        return Err(Error::Parse(format!("rho_order value '{other}'")));
                    }
                };
            }
        }
        Ok(())
    }
}

/// One sweep cell: a (value, bit-budget) pair aggregated over seeds.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub m: usize,
    pub bits: usize,
    pub maps: Vec<f64>,
    pub exact_maps: Vec<f64>,
    pub failures: Vec<String>,
}

impl SweepCell {
    pub fn mean_map(&self) -> Option<f64> {
        if self.maps.is_empty() {
            None
        } else {
            Some(self.maps.iter().sum::<f64>() / self.maps.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub cells: Vec<SweepCell>,
}

/// Sweep results shaped like the appendix tables: one row per value, one
/// column per bit budget, cells holding MAP means over seeds.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub param: String,
    pub k: usize,
    pub rows: Vec<SweepRow>,
    pub seeds: Vec<u64>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        if let Some(first) = self.rows.first() {
            s.push_str(&self.param.to_string());
            for c in &first.cells {
                s.push_str(&format!("\t{}bits(map)", c.bits));
                s.push_str(&format!("\t{}bits(exact)", c.bits));
            }
            s.push('\n');
        }
        for row in &self.rows {
            s.push_str(&row.value);
            for c in &row.cells {
                match c.mean_map() {
                    Some(v) => s.push_str(&format!("\t{v:.6}")),
                    None => s.push_str("\tfailed"),
                }
                if c.exact_maps.is_empty() {
                    s.push_str("\tfailed");
                } else {
                    let e = c.exact_maps.iter().sum::<f64>() / c.exact_maps.len() as f64;
                    s.push_str(&format!("\t{e:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if let Some(first) = self.rows.first() {
            s.push_str(&format!("| {} |", self.param));
            for c in &first.cells {
                s.push_str(&format!(" {} bits |", c.bits));
            }
            s.push('\n');
            s.push_str("| --- |");
            for _ in &first.cells {
                s.push_str(" --- |");
            }
            s.push('\n');
        }
        for row in &self.rows {
            s.push_str(&format!("| {} |", row.value));
            for c in &row.cells {
                match c.mean_map() {
                    Some(v) => s.push_str(&format!(" {:.2} |", v * 100.0)),
                    None => s.push_str(&format!(
                        " failed ({}) |",
                        c.failures.first().map(String::as_str).unwrap_or("?")
                    )),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn cell(&self, value: &str, m: usize) -> Option<&SweepCell> {
        self.rows
            .iter()
            .find(|r| r.value == value)?
            .cells
            .iter()
            .find(|c| c.m == m)
    }
}

/// One train+evaluate run per (value, m, seed); failures are recorded in
/// their cell and the sweep continues. Runs execute in parallel.
pub fn run_sweep(
    data: &ExperimentDataset,
    base: &RunSettings,
    param: SweepParam,
    values: &[String],
    m_values: &[usize],
    seeds: &[u64],
) -> Result<SweepTable> {
    if values.is_empty() || m_values.is_empty() || seeds.is_empty() {
        return Err(Error::Param("sweep needs values, m values, and seeds".into()));
    }
    struct Job {
        vi: usize,
        mi: usize,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for vi in 0..values.len() {
        for mi in 0..m_values.len() {
            for &seed in seeds {
                jobs.push(Job { vi, mi, seed });
            }
        }
    }
    let results = exec::map_slice(&jobs, |job| -> (usize, usize, std::result::Result<(f64, f64), String>) {
        let mut settings = *base;
        settings.train.seed = job.seed;
        settings.hyper.m = m_values[job.mi];
        let out = param
            .apply(&values[job.vi], &mut settings.hyper)
            .and_then(|()| {
                // keep kappa legal when the sweep changes k-dependent limits
                if settings.hyper.kappa > settings.hyper.k {
                    return Err(Error::Param(format!(
                        "kappa {} exceeds k {}",
                        settings.hyper.kappa, settings.hyper.k
                    )));
                }
                run_once(data, &settings, &[])
            })
            .map(|(_, o)| (o.aqd_map, o.exact_map))
            .map_err(|e| e.to_string());
        (job.vi, job.mi, out)
    });

    let mut rows: Vec<SweepRow> = values
        .iter()
        .map(|v| SweepRow {
            value: v.clone(),
            cells: m_values
                .iter()
                .map(|&m| SweepCell {
                    m,
                    bits: m * crate::bits::index_width(base.hyper.k),
                    maps: Vec::new(),
                    exact_maps: Vec::new(),
                    failures: Vec::new(),
                })
                .collect(),
        })
        .collect();
    for (vi, mi, res) in results {
        let cell = &mut rows[vi].cells[mi];
        match res {
            Ok((aqd, exact)) => {
                cell.maps.push(aqd);
                cell.exact_maps.push(exact);
            }
            Err(e) => cell.failures.push(e),
        }
    }
    Ok(SweepTable {
        param: param.name().to_string(),
        k: base.hyper.k,
        rows,
        seeds: seeds.to_vec(),
    })
}
