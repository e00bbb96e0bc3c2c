//! Generation of paired datasets and their on-disk manifests.
//!
//! A manifest is a `key=value` document: the generation config as entries,
//! then one record per sample (`id=..., hq=..., lq=..., probe=..., seed=...`)
//! with tensor paths relative to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::kv::{record_get, KvDoc};
use crate::rng::{derive_seed, Rng};
use crate::simulator::{augment, make_phantom, simulate_pair, AugmentOp, PairedSample, PhantomKind, SimConfig};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// What to generate. Sample `i` draws from `derive_seed(seed, i)`: stream 0
/// picks the phantom, stream 1 the scattering medium, so augmentation
/// changes the target but never which phantom is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    /// Cycled through by sample index.
    pub kinds: Vec<PhantomKind>,
    /// Applied in order to every target before simulation.
    pub augment: Vec<AugmentOp>,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 8,
            size: 32,
            kinds: PhantomKind::ALL.to_vec(),
            augment: Vec::new(),
            seed: 0,
            id_prefix: "s".into(),
        }
    }
}

impl DatasetSpec {
    /// Keys `count`, `size`, `phantoms` (comma list), `augment` (comma
    /// list), `seed`, `id_prefix`.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let list = |key: &str| -> Option<Vec<String>> {
            doc.get(key).map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
        };
        let kinds = match list("phantoms") {
            Some(v) => v.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            None => d.kinds,
        };
        let augment = match list("augment") {
            Some(v) => v.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            None => d.augment,
        };
        let spec = Self {
            count: doc.parsed_or("count", d.count)?,
            size: doc.parsed_or("size", d.size)?,
            kinds,
            augment,
            seed: doc.parsed_or("seed", d.seed)?,
            id_prefix: doc.get("id_prefix").unwrap_or(&d.id_prefix).to_string(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("count", self.count);
        doc.set("size", self.size);
        let kinds: Vec<&str> = self.kinds.iter().map(|k| k.name()).collect();
        doc.set("phantoms", kinds.join(","));
        let ops: Vec<String> = self.augment.iter().map(|o| o.to_string()).collect();
        doc.set("augment", ops.join(","));
        doc.set("seed", self.seed);
        doc.set("id_prefix", &self.id_prefix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("at least one phantom kind is required".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_id(&self, i: usize) -> String {
        format!("{}{:04}", self.id_prefix, i)
    }

    /// The (augmented) clean target of sample `i`.
    pub fn target(&self, i: usize) -> Result<ImageGrid> {
        let rng = Rng::new(derive_seed(self.seed, i as u64));
        let kind = self.kinds[i % self.kinds.len()];
        let mut hq = make_phantom(kind, self.size, &mut rng.child(0))?;
        for &op in &self.augment {
            hq = augment(&hq, op)?;
        }
        Ok(hq)
    }

    pub fn sample(&self, i: usize, cfg: &SimConfig) -> Result<PairedSample> {
        let hq = self.target(i)?;
        let mut rng = Rng::new(derive_seed(self.seed, i as u64)).child(1);
        simulate_pair(&hq, cfg, &mut rng)
    }

    pub fn generate(&self, cfg: &SimConfig) -> Result<Vec<PairedSample>> {
        self.validate()?;
        (0..self.count).into_par_iter().map(|i| self.sample(i, cfg)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub hq: PathBuf,
    pub lq: PathBuf,
    pub probe: String,
    pub seed: u64,
}

/// Sample list plus an echo of the generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub config: KvDoc,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Writes `<id>_hq.irsd`, `<id>_lq.irsd` and the manifest into `dir`.
    pub fn write(dir: &Path, config: KvDoc, samples: &[(String, PairedSample)]) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(samples.len());
        for (id, s) in samples {
            let hq = PathBuf::from(format!("{id}_hq.irsd"));
            let lq = PathBuf::from(format!("{id}_lq.irsd"));
            write_tensor(dir.join(&hq), &s.hq)?;
            write_tensor(dir.join(&lq), &s.lq)?;
            entries.push(ManifestEntry {
                id: id.clone(),
                hq,
                lq,
                probe: s.probe.clone(),
                seed: s.seed,
            });
        }
        let m = Self { config, entries };
        m.check_ids()?;
        m.save(&dir.join(MANIFEST_FILE))?;
        Ok(m)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = self.config.clone();
        doc.records = self
            .entries
            .iter()
            .map(|e| {
                vec![
                    ("id".into(), e.id.clone()),
                    ("hq".into(), e.hq.display().to_string()),
                    ("lq".into(), e.lq.display().to_string()),
                    ("probe".into(), e.probe.clone()),
                    ("seed".into(), e.seed.to_string()),
                ]
            })
            .collect();
        doc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().save(path)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id `{}`", e.id)));
            }
        }
        Ok(())
    }

    /// Loads a manifest file (or a directory containing one), checking that
    /// ids are unique and every referenced tensor exists and parses.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let mut doc = KvDoc::load(&file)?;
        let records = std::mem::take(&mut doc.records);
        let field = |rec: &[(String, String)], key: &str| -> Result<String> {
            record_get(rec, key)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("{}: sample record without `{key}`", file.display())))
        };
        let entries = records
            .iter()
            .map(|rec| {
                let seed = field(rec, "seed")?;
                Ok(ManifestEntry {
                    id: field(rec, "id")?,
                    hq: field(rec, "hq")?.into(),
                    lq: field(rec, "lq")?.into(),
                    probe: field(rec, "probe")?,
                    seed: seed.parse().map_err(|_| Error::Parse {
                        field: "seed",
                        reason: format!("`{seed}` is not an unsigned integer"),
                    })?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Self { config: doc, entries };
        m.check_ids()?;
        let base = file.parent().unwrap_or(Path::new("."));
        for e in &m.entries {
            let hq = read_tensor(base.join(&e.hq))?;
            let lq = read_tensor(base.join(&e.lq))?;
            hq.ensure_same_shape(&lq)?;
        }
        Ok(m)
    }

    /// Reads every (id, hq, lq) triple; paths resolve against `base`.
    pub fn read_pairs(&self, base: &Path) -> Result<Vec<(String, ImageGrid, ImageGrid)>> {
        self.entries
            .iter()
            .map(|e| {
                Ok((
                    e.id.clone(),
                    read_tensor(base.join(&e.hq))?,
                    read_tensor(base.join(&e.lq))?,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.probe.steer_angles = vec![0.0];
        cfg.probe.num_elements = 32;
        cfg.oversample = 1;
        cfg
    }

    #[test]
    fn augmentation_changes_target_not_phantom() {
        let plain = DatasetSpec {
            count: 1,
            ..Default::default()
        };
        let flipped = DatasetSpec {
            augment: vec![AugmentOp::FlipH],
            ..plain.clone()
        };
        let a = plain.target(0).unwrap();
        let b = flipped.target(0).unwrap();
        assert_ne!(a, b);
        assert_eq!(augment(&a, AugmentOp::FlipH).unwrap(), b);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let spec = DatasetSpec {
            count: 2,
            kinds: vec![PhantomKind::Inclusion],
            seed: 5,
            ..Default::default()
        };
        let cfg = fast_cfg();
        let samples = spec.generate(&cfg).unwrap();
        let named: Vec<(String, PairedSample)> = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| (spec.sample_id(i), s))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let mut doc = cfg.to_kv();
        spec.write_kv(&mut doc);
        let m = DatasetManifest::write(dir.path(), doc, &named).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.entries[1].id, "s0001");
        assert_eq!(DatasetSpec::from_kv(&back.config).unwrap(), spec);
        let pairs = back.read_pairs(dir.path()).unwrap();
        assert_eq!(pairs[0].1, named[0].1.hq);

        std::fs::remove_file(dir.path().join("s0001_lq.irsd")).unwrap();
        assert!(DatasetManifest::load(dir.path()).is_err());

        let mut dup = m.clone();
        dup.entries[1].id = "s0000".into();
        dup.save(&dir.path().join("dup.txt")).unwrap();
        assert!(DatasetManifest::load(&dir.path().join("dup.txt")).is_err());
    }
}
