//! Synthetic fine-grained feature-map generator for desk-scale experiments.
//!
//! Each sample's stage2 map hides a small high-activation "part" patch whose
//! channel signature encodes the subclass; stage4 carries only the
//! meta-class signature spread over the whole grid; stage3 and everything
//! else is nonnegative noise. Subclass evidence deliberately lives in small
//! stage2 patches so mean pooling dilutes it while sharper focus factors
//! keep it, which is what separates the pooling ablations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pooling::{FeatureMapSet, StageDims};

/// How many signature channels a subclass or meta-class activates.
const SIGNATURE_CHANNELS: usize = 4;
const META_SIGNATURE_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Fine-grained subclass count (the label space).
    pub subclasses: u32,
    /// Subclasses group contiguously into this many meta-classes.
    pub meta_classes: u32,
    /// Total samples per subclass, queries included.
    pub samples_per_class: u32,
    /// Of those, how many are held out as queries.
    pub queries_per_class: u32,
    pub stage_dims: StageDims,
    /// Amplitude of the part patch and the meta signature.
    pub part_strength: f64,
    /// Std-dev of the truncated-at-zero Gaussian background.
    pub noise_level: f64,
    /// Side length of the square stage2 part patch.
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subclasses: 20,
            meta_classes: 4,
            samples_per_class: 60,
            queries_per_class: 10,
            stage_dims: StageDims::desk(),
            part_strength: 3.0,
            noise_level: 0.5,
            patch_size: 3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subclasses == 0 || self.meta_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Param(
                "subclasses, meta_classes, and samples_per_class must be positive".into(),
            ));
        }
        if self.meta_classes > self.subclasses {
            return Err(Error::Param(format!(
                "{} meta-classes for {} subclasses",
                self.meta_classes, self.subclasses
            )));
        }
        if self.queries_per_class >= self.samples_per_class {
            return Err(Error::Param(format!(
                "queries_per_class {} must leave training samples out of {}",
                self.queries_per_class, self.samples_per_class
            )));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(Error::Param(format!("noise_level {}", self.noise_level)));
        }
        if !(self.part_strength > 0.0 && self.part_strength.is_finite()) {
            return Err(Error::Param(format!("part_strength {}", self.part_strength)));
        }
        let [h, w, c2] = self.stage_dims.stage2;
        if self.patch_size == 0 || self.patch_size > h.min(w) {
            return Err(Error::Param(format!(
                "patch_size {} does not fit a {h}x{w} stage2 grid",
                self.patch_size
            )));
        }
        if c2 < SIGNATURE_CHANNELS || self.stage_dims.stage4[2] < META_SIGNATURE_CHANNELS {
            return Err(Error::Param(
                "stage2/stage4 channel counts too small for the class signatures".into(),
            ));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.subclasses as usize * self.samples_per_class as usize
    }

    pub fn meta_of(&self, subclass: u32) -> u32 {
        (subclass as u64 * self.meta_classes as u64 / self.subclasses as u64) as u32
    }
}

/// Sparse nonnegative channel signature: `count` distinct channels with
/// weights in [0.5, 1).
fn sparse_signature(rng: &mut ChaCha8Rng, channels: usize, count: usize) -> Vec<f64> {
    let mut sig = vec![0.0; channels];
    let mut picked = 0usize;
    while picked < count {
        let ch = rng.random_range(0..channels);
        if sig[ch] == 0.0 {
            sig[ch] = 0.5 + 0.5 * rng.random::<f64>();
            picked += 1;
        }
    }
    sig
}

/// All subclass signatures (stage2 channel space), deterministic in the seed.
pub fn subclass_signatures(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    (0..spec.subclasses)
        .map(|_| sparse_signature(&mut rng, spec.stage_dims.stage2[2], SIGNATURE_CHANNELS))
        .collect()
}

/// All meta-class signatures (stage4 channel space).
pub fn meta_signatures(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    (0..spec.meta_classes)
        .map(|_| {
            sparse_signature(
                &mut rng,
                spec.stage_dims.stage4[2],
                META_SIGNATURE_CHANNELS,
            )
        })
        .collect()
}

fn noise_tensor(rng: &mut ChaCha8Rng, shape: [usize; 3], sigma: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            (g * sigma).max(0.0)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise is finite and sized")
}

/// Synthesizes one sample. `global_index` selects the per-sample RNG stream,
/// so any sample regenerates identically in isolation.
pub fn synthesize_item(
    spec: &SyntheticSpec,
    subclass_sigs: &[Vec<f64>],
    meta_sigs: &[Vec<f64>],
    subclass: u32,
    global_index: u64,
) -> Result<FeatureMapSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 + global_index);

    let mut stage2 = noise_tensor(&mut rng, spec.stage_dims.stage2, spec.noise_level);
    let stage3 = noise_tensor(&mut rng, spec.stage_dims.stage3, spec.noise_level);
    let mut stage4 = noise_tensor(&mut rng, spec.stage_dims.stage4, spec.noise_level);

    // part patch: subclass evidence in a small stage2 region
    let [h, w, c2] = spec.stage_dims.stage2;
    let p = spec.patch_size;
    let row = rng.random_range(0..=h - p);
    let col = rng.random_range(0..=w - p);
    let amplitude = spec.part_strength * (0.8 + 0.4 * rng.random::<f64>());
    let sig = &subclass_sigs[subclass as usize];
    {
        let data = stage2.data_mut();
        for r in row..row + p {
            for c in col..col + p {
                let off = (r * w + c) * c2;
                for (ch, &s) in sig.iter().enumerate() {
                    data[off + ch] += amplitude * s;
                }
            }
        }
    }

    // meta-class signature spread over the whole stage4 grid
    let [h4, w4, c4] = spec.stage_dims.stage4;
    let meta = &meta_sigs[spec.meta_of(subclass) as usize];
    {
        let data = stage4.data_mut();
        for pos in 0..h4 * w4 {
            let off = pos * c4;
            for (ch, &s) in meta.iter().enumerate() {
                data[off + ch] += spec.part_strength * s;
            }
        }
    }

    FeatureMapSet::new(stage2, stage3, stage4, Some(subclass))
}

/// A fully in-memory synthetic dataset (records plus features, same order).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<ManifestRecord>,
    pub features: Vec<FeatureMapSet>,
    pub n_classes: u32,
    pub stage_dims: StageDims,
}

/// Deterministic in-memory synthesis; the first `queries_per_class` samples
/// of each class are tagged as queries, the rest as train.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let sub_sigs = subclass_signatures(spec);
    let meta_sigs = meta_signatures(spec);
    let total = spec.total_samples();
    let features = crate::exec::map_range(total, |idx| {
        let subclass = (idx / spec.samples_per_class as usize) as u32;
        synthesize_item(spec, &sub_sigs, &meta_sigs, subclass, idx as u64)
    });
    let features: Vec<FeatureMapSet> = features.into_iter().collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(total);
    for idx in 0..total {
        let subclass = (idx / spec.samples_per_class as usize) as u32;
        let within = (idx % spec.samples_per_class as usize) as u32;
        let split = if within < spec.queries_per_class {
            Split::Query
        } else {
            Split::Train
        };
        records.push(ManifestRecord {
            id: idx as u64,
            label: subclass,
            split,
            path: format!("features/{idx:08}.fmap"),
        });
    }
    Ok(SyntheticDataset {
        records,
        features,
        n_classes: spec.subclasses,
        stage_dims: spec.stage_dims,
    })
}

/// Synthesizes and writes a dataset tree: `<out>/manifest.tsv` plus one
/// feature file per sample under `<out>/features/`, in deterministic order.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let data = synthesize_dataset(spec)?;
    std::fs::create_dir_all(out_dir.join("features"))?;
    for (rec, fms) in data.records.iter().zip(&data.features) {
        super::write_feature_set(&out_dir.join(&rec.path), fms)?;
    }
    let manifest = DatasetManifest {
        n_classes: data.n_classes,
        stage_dims: data.stage_dims,
        records: data.records,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
