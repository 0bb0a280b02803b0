//! Dataset ingestion: binary feature-map files, tab-separated manifests,
//! and split protocols. The synthetic generator lives in [`synthetic`].
//!
//! Feature file layout (version 1, all little-endian): magic `PQFM`,
//! version u32, nine u32 stage extents (H, W, C for stages 2..4), then the
//! three f32 payloads row-major. f32 halves disk cost; training upcasts.

pub mod synthetic;

pub use synthetic::{
    generate_synthetic, synthesize_dataset, synthesize_item, SyntheticDataset, SyntheticSpec,
};

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pooling::{FeatureMapSet, StageDims};

const MAGIC: &[u8; 4] = b"PQFM";
const VERSION: u32 = 1;

pub fn write_feature_set(path: &Path, fms: &FeatureMapSet) -> Result<()> {
    fms.validate()?;
    let dims = fms.dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims.as_flat() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in [&fms.stage2, &fms.stage3, &fms.stage4] {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads one feature set, optionally validating extents against the
/// manifest's declaration. Never returns a partial value.
pub fn read_feature_set(path: &Path, expect: Option<&StageDims>) -> Result<FeatureMapSet> {
    let buf = std::fs::read(path)?;
    let display = path.display().to_string();
    if buf.len() < 4 || &buf[..4] != MAGIC {
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
    if version != VERSION {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: version,
            expected: VERSION,
        });
    }
    let mut flat = [0usize; 9];
    for d in flat.iter_mut() {
        *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let dims = StageDims::from_flat(flat);
    if let Some(want) = expect {
        if &dims != want {
            return Err(Error::DimMismatch(format!(
                "{}: file declares {:?}, manifest declares {:?}",
                path.display(),
                dims,
                want
            )));
        }
    }
    let mut stages = Vec::with_capacity(3);
    for shape in [dims.stage2, dims.stage3, dims.stage4] {
        let len: usize = shape.iter().product();
        let bytes = take(len * 4)?;
        let mut data = Vec::with_capacity(len);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if v < 0.0 {
                return Err(Error::Input(format!(
                    "{}: negative activation {v} violates the post-ReLU contract",
                    path.display()
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{}: {v}", path.display())));
            }
            data.push(v);
        }
        stages.push(Tensor::new(shape.to_vec(), data)?);
    }
    let stage4 = stages.pop().unwrap();
    let stage3 = stages.pop().unwrap();
    let stage2 = stages.pop().unwrap();
    FeatureMapSet::new(stage2, stage3, stage4, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Database,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "query" => Split::Query,
            "database" => Split::Database,
            other => return Err(Error::Parse(format!("unknown split '{other}'"))),
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Database => "database",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: u64,
    pub label: u32,
    pub split: Split,
    pub path: String,
}

/// Structured-text dataset manifest: header lines, then one tab-separated
/// record per line in the order `id  label  split  path`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub n_classes: u32,
    pub stage_dims: StageDims,
    pub records: Vec<ManifestRecord>,
}

fn format_dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("stage dims '{s}'")));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .parse()
            .map_err(|_| Error::Parse(format!("stage dims '{s}'")))?;
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for rec in &self.records {
            if rec.label >= self.n_classes {
                return Err(Error::Input(format!(
                    "record {}: label {} outside the {} classes",
                    rec.id, rec.label, self.n_classes
                )));
            }
            if !seen.insert(rec.id) {
                return Err(Error::Input(format!("duplicate item id {}", rec.id)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("pyrapq-manifest v1\n");
        s.push_str(&format!("classes\t{}\n", self.n_classes));
        s.push_str(&format!(
            "stages\t{}\t{}\t{}\n",
            format_dims(self.stage_dims.stage2),
            format_dims(self.stage_dims.stage3),
            format_dims(self.stage_dims.stage4),
        ));
        s.push_str(&format!("items\t{}\n", self.records.len()));
        s.push_str("id\tlabel\tsplit\tpath\n");
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.label, r.split, r.path));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Truncated(format!("manifest ends before {what}")))
        };
        let head = next("the header")?;
        if head.trim() != "pyrapq-manifest v1" {
            return Err(Error::BadMagic(format!("manifest header '{head}'")));
        }
        let classes_line = next("the class count")?;
        let n_classes: u32 = classes_line
            .strip_prefix("classes\t")
            .ok_or_else(|| Error::Parse(format!("expected 'classes', got '{classes_line}'")))?
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("class count in '{classes_line}'")))?;
        let stages_line = next("the stage dims")?;
        let parts: Vec<&str> = stages_line.split('\t').collect();
        if parts.len() != 4 || parts[0] != "stages" {
            return Err(Error::Parse(format!("stage line '{stages_line}'")));
        }
        let stage_dims = StageDims {
            stage2: parse_dims(parts[1])?,
            stage3: parse_dims(parts[2])?,
            stage4: parse_dims(parts[3])?,
        };
        let items_line = next("the item count")?;
        let n_items: usize = items_line
            .strip_prefix("items\t")
            .ok_or_else(|| Error::Parse(format!("expected 'items', got '{items_line}'")))?
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("item count in '{items_line}'")))?;
        let header = next("the record header")?;
        if header.trim() != "id\tlabel\tsplit\tpath" {
            return Err(Error::Parse(format!("record header '{header}'")));
        }
        let mut records = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let line = next("a record")?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("record '{line}'")));
            }
            records.push(ManifestRecord {
                id: f[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("id in '{line}'")))?,
                label: f[1]
                    .parse()
                    .map_err(|_| Error::Parse(format!("label in '{line}'")))?,
                split: Split::parse(f[2])?,
                path: f[3].to_string(),
            });
        }
        let manifest = Self {
            n_classes,
            stage_dims,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// How train/query/database views are derived from a manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitProtocol {
    /// The reference database is the training set; queries come from the
    /// manifest's query split.
    TrainAsDatabase,
    /// Hold out `per_class` samples per class as queries (seeded), train on
    /// the rest, database = train.
    HoldoutPerClass { per_class: usize, seed: u64 },
}

/// Index views into `manifest.records`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
}

pub fn split_dataset(manifest: &DatasetManifest, protocol: SplitProtocol) -> Result<DatasetSplits> {
    manifest.validate()?;
    match protocol {
        SplitProtocol::TrainAsDatabase => {
            let train: Vec<usize> = manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.split == Split::Train)
                .map(|(i, _)| i)
                .collect();
            let query: Vec<usize> = manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.split == Split::Query)
                .map(|(i, _)| i)
                .collect();
            Ok(DatasetSplits {
                database: train.clone(),
                train,
                query,
            })
        }
        SplitProtocol::HoldoutPerClass { per_class, seed } => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut train = Vec::new();
            let mut query = Vec::new();
            for class in 0..manifest.n_classes {
                let mut members: Vec<usize> = manifest
                    .records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.label == class)
                    .map(|(i, _)| i)
                    .collect();
                if members.len() < per_class + 1 {
                    return Err(Error::Input(format!(
                        "class {class} has {} samples, needs at least {} for a \
                         {per_class}-per-class holdout",
                        members.len(),
                        per_class + 1
                    )));
                }
                members.shuffle(&mut rng);
                query.extend(members[..per_class].iter().copied());
                train.extend(members[per_class..].iter().copied());
            }
            train.sort_unstable();
            query.sort_unstable();
            Ok(DatasetSplits {
                database: train.clone(),
                train,
                query,
            })
        }
    }
}

/// A manifest plus every feature set, loaded in record order.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub features: Vec<FeatureMapSet>,
}

/// Loads all feature files named by a manifest; paths resolve relative to
/// the manifest's directory. Labels are attached from the records.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let features = crate::exec::map_slice(&manifest.records, |rec| -> Result<FeatureMapSet> {
        let mut fms = read_feature_set(&root.join(&rec.path), Some(&manifest.stage_dims))?;
        fms.label = Some(rec.label);
        Ok(fms)
    });
    let features: Vec<FeatureMapSet> = features.into_iter().collect::<Result<_>>()?;
    Ok(LoadedDataset { manifest, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64) -> FeatureMapSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng, shape: [usize; 3]| {
            let len = shape.iter().product();
            let data: Vec<f64> = (0..len)
                .map(|_| (rng.random_range(0.0f32..2.0) as f64))
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        FeatureMapSet::new(
            mk(&mut rng, [4, 4, 3]),
            mk(&mut rng, [2, 2, 4]),
            mk(&mut rng, [2, 2, 5]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn feature_file_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        let fms = random_set(1);
        write_feature_set(&path, &fms).unwrap();
        let back = read_feature_set(&path, None).unwrap();
        // values were generated from f32 so the f32 file is lossless here
        assert_eq!(back.stage2, fms.stage2);
        assert_eq!(back.stage3, fms.stage3);
        assert_eq!(back.stage4, fms.stage4);
        // and the on-disk bytes are deterministic
        let before = std::fs::read(&path).unwrap();
        write_feature_set(&path, &fms).unwrap();
        assert_eq!(before, std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_yields_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        write_feature_set(&path, &random_set(2)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            read_feature_set(&path, None),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        write_feature_set(&path, &random_set(3)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_set(&path, None),
            Err(Error::BadMagic(_))
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'P';
        bytes[4] = 9; // version 9
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_set(&path, None),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn negative_activation_in_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        write_feature_set(&path, &random_set(4)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header = 4 + 4 + 9 * 4;
        bytes[header..header + 4].copy_from_slice(&(-0.5f32).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_set(&path, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dim_mismatch_against_manifest_declaration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        write_feature_set(&path, &random_set(5)).unwrap();
        let wrong = StageDims {
            stage2: [4, 4, 3],
            stage3: [2, 2, 4],
            stage4: [2, 2, 9],
        };
        assert!(matches!(
            read_feature_set(&path, Some(&wrong)),
            Err(Error::DimMismatch(_))
        ));
    }

    fn toy_manifest() -> DatasetManifest {
        DatasetManifest {
            n_classes: 2,
            stage_dims: StageDims {
                stage2: [4, 4, 3],
                stage3: [2, 2, 4],
                stage4: [2, 2, 5],
            },
            records: vec![
                ManifestRecord {
                    id: 0,
                    label: 0,
                    split: Split::Train,
                    path: "f/0.fmap".into(),
                },
                ManifestRecord {
                    id: 1,
                    label: 1,
                    split: Split::Train,
                    path: "f/1.fmap".into(),
                },
                ManifestRecord {
                    id: 2,
                    label: 0,
                    split: Split::Query,
                    path: "f/2.fmap".into(),
                },
            ],
        }
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = toy_manifest();
        let back = DatasetManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_labels() {
        let mut m = toy_manifest();
        m.records[1].id = 0;
        assert!(m.validate().is_err());
        let mut m = toy_manifest();
        m.records[1].label = 7;
        assert!(m.validate().is_err());
    }

    #[test]
    fn train_as_database_aliases_the_train_split() {
        let m = toy_manifest();
        let s = split_dataset(&m, SplitProtocol::TrainAsDatabase).unwrap();
        assert_eq!(s.train, vec![0, 1]);
        assert_eq!(s.database, s.train);
        assert_eq!(s.query, vec![2]);
    }

    #[test]
    fn holdout_protocol_counts_and_determinism() {
        // 2 classes x 5 samples
        let mut records = Vec::new();
        for i in 0..10u64 {
            records.push(ManifestRecord {
                id: i,
                label: (i % 2) as u32,
                split: Split::Train,
                path: format!("f/{i}.fmap"),
            });
        }
        let m = DatasetManifest {
            n_classes: 2,
            stage_dims: StageDims::desk(),
            records,
        };
        let p = SplitProtocol::HoldoutPerClass {
            per_class: 2,
            seed: 9,
        };
        let s1 = split_dataset(&m, p).unwrap();
        let s2 = split_dataset(&m, p).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.query.len(), 4); // 2 per class x 2 classes
        assert_eq!(s1.train.len(), 6);
        assert_eq!(s1.database, s1.train);

        // class 1 too small for a 5-per-class holdout
        let err = split_dataset(
            &m,
            SplitProtocol::HoldoutPerClass {
                per_class: 5,
                seed: 9,
            },
        );
        match err {
            Err(Error::Input(msg)) => assert!(msg.contains("class 0")),
            other => panic!("expected class-size error, got {other:?}"),
        }
    }
}
