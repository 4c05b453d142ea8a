//! Synthetic multi-coil datasets: generation, on-disk format and loading.
//!
//! A dataset directory holds `manifest.json` and one VTXD blob per scan (see
//! [`format`]). Supervised, validation and test scans store fully sampled
//! k-space with the scan's mask alongside; unsupervised scans store only the
//! masked k-space.

pub mod format;
pub mod phantom;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Example;
use crate::error::{invalid, Error, Result};
use crate::mri::{make_poisson_disc_mask, scan_mask_seed, ForwardOperator, KSpaceTensor};
use crate::numerics::ComplexTensor;
use crate::rng::{domain, keyed};
pub use format::ScanBlob;
pub use phantom::{dilate, generate_phantom, synthesize_maps};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Dataset geometry and split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub coils: usize,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub supervised: usize,
    pub unsupervised: usize,
    pub validation: usize,
    pub test: usize,
    pub acceleration: f64,
    pub calibration: [usize; 2],
    /// Height and width are rounded up to a multiple of this.
    pub size_multiple: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            coils: 4,
            height: 32,
            width: 32,
            slices: 8,
            supervised: 4,
            unsupervised: 20,
            validation: 2,
            test: 3,
            acceleration: 8.0,
            calibration: [8, 8],
            size_multiple: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coils == 0 || self.slices == 0 {
            return Err(invalid!("coils and slices must be at least 1"));
        }
        if self.size_multiple == 0 {
            return Err(invalid!("size_multiple must be at least 1"));
        }
        let (h, w) = self.padded_dims();
        if h < phantom::MIN_PHANTOM_SIZE || w < phantom::MIN_PHANTOM_SIZE {
            return Err(invalid!(
                "images must be at least {0}x{0}",
                phantom::MIN_PHANTOM_SIZE
            ));
        }
        if self.supervised + self.unsupervised + self.validation + self.test == 0 {
            return Err(invalid!("dataset has no scans"));
        }
        if !(self.acceleration > 1.0) || !self.acceleration.is_finite() {
            return Err(invalid!("acceleration must be > 1"));
        }
        if self.calibration[0] > h || self.calibration[1] > w {
            return Err(invalid!("calibration region exceeds the image"));
        }
        Ok(())
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        let m = self.size_multiple.max(1);
        (self.height.div_ceil(m) * m, self.width.div_ceil(m) * m)
    }

    pub fn total_scans(&self) -> usize {
        self.supervised + self.unsupervised + self.validation + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "train-supervised")]
    TrainSupervised,
    #[serde(rename = "train-unsupervised")]
    TrainUnsupervised,
    #[serde(rename = "val")]
    Validation,
    #[serde(rename = "test")]
    Test,
}

impl Role {
    pub fn is_fully_sampled(self) -> bool {
        self != Role::TrainUnsupervised
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub coils: usize,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub scan_id: u64,
    pub role: Role,
    pub file: String,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub dataset_seed: u64,
    pub geometry: Geometry,
    pub acceleration: f64,
    pub calibration: [usize; 2],
    pub scans: Vec<ScanEntry>,
}

impl DatasetManifest {
    pub fn scans_with_role(&self, role: Role) -> impl Iterator<Item = &ScanEntry> {
        self.scans.iter().filter(move |s| s.role == role)
    }
}

/// One scan loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub scan_id: u64,
    pub role: Role,
    pub maps: crate::mri::SensitivityMaps,
    pub mask: crate::mri::UndersamplingMask,
    /// Fully sampled for every role except unsupervised training scans.
    pub kspace: Vec<KSpaceTensor>,
    pub images: Option<Vec<ComplexTensor>>,
    pub supports: Option<Vec<Vec<bool>>>,
}

impl ScanRecord {
    pub fn operator(&self) -> Result<ForwardOperator> {
        ForwardOperator::new(self.maps.clone(), self.mask.clone())
    }

    /// Reference image `A_full^H y` for a fully sampled slice.
    pub fn reference(&self, slice: usize) -> Result<ComplexTensor> {
        if !self.role.is_fully_sampled() {
            return Err(invalid!("scan {} has no fully sampled data", self.scan_id));
        }
        self.operator()?.fully_sampled().adjoint(&self.kspace[slice])
    }

    /// One example per slice; fully sampled scans carry their reference image.
    pub fn examples(&self) -> Result<Vec<Example>> {
        let op = self.operator()?;
        let full = op.fully_sampled();
        self.kspace
            .iter()
            .map(|k| {
                let fully = self.role.is_fully_sampled();
                Ok(Example {
                    kspace: k.clone(),
                    op: op.clone(),
                    fully_sampled: fully,
                    target: if fully { Some(full.adjoint(k)?) } else { None },
                })
            })
            .collect()
    }

    pub fn slices(&self) -> usize {
        self.kspace.len()
    }
}

/// Slices of one scan, ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanExamples {
    pub scan_id: u64,
    pub slices: Vec<Example>,
}

impl ScanExamples {
    pub fn from_record(record: &ScanRecord) -> Result<Self> {
        Ok(Self {
            scan_id: record.scan_id,
            slices: record.examples()?,
        })
    }
}

/// Role assignment: a keyed shuffle of scan ids split by the configured counts.
pub fn assign_roles(cfg: &DataConfig, seed: u64) -> Vec<Role> {
    let mut roles = Vec::with_capacity(cfg.total_scans());
    roles.extend(std::iter::repeat_n(Role::TrainSupervised, cfg.supervised));
    roles.extend(std::iter::repeat_n(Role::TrainUnsupervised, cfg.unsupervised));
    roles.extend(std::iter::repeat_n(Role::Validation, cfg.validation));
    roles.extend(std::iter::repeat_n(Role::Test, cfg.test));
    roles.shuffle(&mut keyed(&[seed, domain::SPLIT]));
    roles
}

/// Generates one scan's blob.
pub fn generate_scan(cfg: &DataConfig, seed: u64, scan_id: u64, role: Role) -> Result<ScanBlob> {
    let (h, w) = cfg.padded_dims();
    let maps = synthesize_maps(cfg.coils, h, w, &mut keyed(&[seed, domain::MAPS, scan_id]))?;
    let mask = make_poisson_disc_mask(
        h,
        w,
        cfg.acceleration,
        (cfg.calibration[0], cfg.calibration[1]),
        scan_mask_seed(seed, scan_id),
    )?;
    let op = ForwardOperator::new(maps.clone(), mask.clone())?;
    let full = op.fully_sampled();
    let mut kspace = Vec::with_capacity(cfg.slices);
    let mut images = Vec::with_capacity(cfg.slices);
    let mut supports = Vec::with_capacity(cfg.slices);
    for s in 0..cfg.slices {
        let mut rng = keyed(&[seed, domain::PHANTOM, scan_id, s as u64]);
        let (x, support) = generate_phantom(h, w, &mut rng)?;
        kspace.push(if role.is_fully_sampled() {
            full.forward(&x)?
        } else {
            op.forward(&x)?
        });
        images.push(x);
        supports.push(support);
    }
    Ok(ScanBlob {
        maps,
        mask,
        fully_sampled: role.is_fully_sampled(),
        kspace,
        images: role.is_fully_sampled().then_some((images, supports)),
    })
}

fn scan_file(scan_id: u64) -> String {
    format!("scan_{scan_id:04}.vtxd")
}

/// Generates every scan and writes the blobs and manifest into `dir`.
pub fn build_dataset(cfg: &DataConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let roles = assign_roles(cfg, seed);
    let entries: Vec<ScanEntry> = roles
        .par_iter()
        .enumerate()
        .map(|(id, &role)| {
            let id = id as u64;
            let bytes = format::encode(&generate_scan(cfg, seed, id, role)?);
            let file = scan_file(id);
            crate::io::write_atomic(&dir.join(&file), &bytes)?;
            Ok(ScanEntry {
                scan_id: id,
                role,
                file,
                bytes: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
            })
        })
        .collect::<Result<_>>()?;
    let (h, w) = cfg.padded_dims();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dataset_seed: seed,
        geometry: Geometry {
            coils: cfg.coils,
            height: h,
            width: w,
            slices: cfg.slices,
        },
        acceleration: cfg.acceleration,
        calibration: cfg.calibration,
        scans: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    crate::io::write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Handle on a dataset directory; scans are loaded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

/// Opens a dataset directory and validates its manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => invalid!(
            "no dataset at {} (run `vortex generate-data` first)",
            dir.display()
        ),
        _ => Error::Io(e),
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::CorruptDataset(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::CorruptDataset(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for s in &manifest.scans {
        if !seen.insert(s.scan_id) {
            return Err(Error::CorruptDataset(format!("scan {} listed twice", s.scan_id)));
        }
        if s.file.contains(['/', '\\']) || s.file.starts_with('.') {
            return Err(Error::CorruptDataset(format!("bad scan file name {:?}", s.file)));
        }
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry(&self, scan_id: u64) -> Result<&ScanEntry> {
        self.manifest
            .scans
            .iter()
            .find(|s| s.scan_id == scan_id)
            .ok_or_else(|| invalid!("unknown scan id {scan_id}"))
    }

    pub fn load_scan(&self, scan_id: u64) -> Result<ScanRecord> {
        let entry = self.entry(scan_id)?;
        let bytes = fs::read(self.dir.join(&entry.file))?;
        if bytes.len() as u64 != entry.bytes || crc32fast::hash(&bytes) != entry.crc32 {
            return Err(Error::CorruptDataset(format!(
                "{} does not match its manifest entry",
                entry.file
            )));
        }
        let blob = format::decode(&bytes)?;
        let g = &self.manifest.geometry;
        let (h, w) = blob.maps.dims();
        if (blob.maps.coils(), h, w, blob.kspace.len()) != (g.coils, g.height, g.width, g.slices) {
            return Err(Error::CorruptDataset(format!(
                "{} geometry differs from the manifest",
                entry.file
            )));
        }
        if blob.fully_sampled != entry.role.is_fully_sampled() {
            return Err(Error::CorruptDataset(format!(
                "{} sampling does not match role {:?}",
                entry.file, entry.role
            )));
        }
        let (images, supports) = match blob.images {
            Some((i, s)) => (Some(i), Some(s)),
            None => (None, None),
        };
        Ok(ScanRecord {
            scan_id,
            role: entry.role,
            maps: blob.maps,
            mask: blob.mask,
            kspace: blob.kspace,
            images,
            supports,
        })
    }

    /// Loads every scan with the given role, in scan-id order.
    pub fn load_role(&self, role: Role) -> Result<Vec<ScanRecord>> {
        let mut ids: Vec<u64> = self.manifest.scans_with_role(role).map(|s| s.scan_id).collect();
        ids.sort_unstable();
        ids.into_par_iter().map(|id| self.load_scan(id)).collect()
    }

    pub fn load_examples(&self, role: Role) -> Result<Vec<ScanExamples>> {
        self.load_role(role)?.iter().map(ScanExamples::from_record).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            coils: 2,
            height: 16,
            width: 16,
            slices: 2,
            supervised: 1,
            unsupervised: 2,
            validation: 1,
            test: 1,
            acceleration: 4.0,
            calibration: [4, 4],
            size_multiple: 8,
        }
    }

    #[test]
    fn roles_partition_scans() {
        let cfg = DataConfig::default();
        let roles = assign_roles(&cfg, 3);
        assert_eq!(roles.len(), 29);
        assert_eq!(roles.iter().filter(|r| **r == Role::TrainSupervised).count(), 4);
        assert_eq!(roles.iter().filter(|r| **r == Role::TrainUnsupervised).count(), 20);
        assert_eq!(roles, assign_roles(&cfg, 3));
    }

    #[test]
    fn dims_are_padded() {
        let cfg = DataConfig {
            height: 30,
            width: 17,
            ..DataConfig::default()
        };
        assert_eq!(cfg.padded_dims(), (32, 24));
    }

    #[test]
    fn supervised_scans_are_forward_consistent() {
        let cfg = small();
        let blob = generate_scan(&cfg, 5, 0, Role::TrainSupervised).unwrap();
        let op = ForwardOperator::new(blob.maps.clone(), blob.mask.clone()).unwrap().fully_sampled();
        let (images, _) = blob.images.as_ref().unwrap();
        for (k, x) in blob.kspace.iter().zip(images) {
            let again = op.forward(x).unwrap();
            let diff = k
                .data()
                .iter()
                .zip(again.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10);
        }
    }

    #[test]
    fn unsupervised_scans_are_masked() {
        let blob = generate_scan(&small(), 5, 1, Role::TrainUnsupervised).unwrap();
        assert!(blob.images.is_none());
        for k in &blob.kspace {
            for c in 0..k.coils() {
                for (v, &b) in k.coil(c).iter().zip(blob.mask.bits()) {
                    if !b {
                        assert_eq!(*v, crate::C64::new(0.0, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn blob_roundtrip_is_bit_identical() {
        for role in [Role::TrainSupervised, Role::TrainUnsupervised] {
            let blob = generate_scan(&small(), 9, 2, role).unwrap();
            let bytes = format::encode(&blob);
            assert_eq!(format::decode(&bytes).unwrap(), blob);
        }
    }

    #[test]
    fn truncated_and_flipped_blobs_are_corrupt() {
        let bytes = format::encode(&generate_scan(&small(), 9, 2, Role::Test).unwrap());
        for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(format::decode(&bytes[..cut]), Err(Error::CorruptDataset(_))));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(format::decode(&flipped), Err(Error::CorruptDataset(_))));
    }

    #[test]
    fn build_and_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifest = build_dataset(&cfg, 11, dir.path()).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest(), &manifest);
        for entry in &manifest.scans {
            let rec = ds.load_scan(entry.scan_id).unwrap();
            let blob = generate_scan(&cfg, 11, entry.scan_id, entry.role).unwrap();
            assert_eq!(rec.kspace, blob.kspace);
            assert_eq!(rec.mask, blob.mask);
        }
        let other = tempfile::tempdir().unwrap();
        build_dataset(&cfg, 11, other.path()).unwrap();
        for entry in &manifest.scans {
            assert_eq!(
                fs::read(dir.path().join(&entry.file)).unwrap(),
                fs::read(other.path().join(&entry.file)).unwrap()
            );
        }
    }

    #[test]
    fn unknown_role_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small(), 1, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replacen("\"test\"", "\"holdout\"", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptDataset(_))));
    }

    #[test]
    fn truncated_scan_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&small(), 1, dir.path()).unwrap();
        let entry = &manifest.scans[0];
        let path = dir.path().join(&entry.file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(matches!(ds.load_scan(entry.scan_id), Err(Error::CorruptDataset(_))));
    }

    #[test]
    fn reference_matches_phantom() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&cfg, 2, dir.path()).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        let id = manifest.scans_with_role(Role::Test).next().unwrap().scan_id;
        let rec = ds.load_scan(id).unwrap();
        let x = &rec.images.as_ref().unwrap()[0];
        let r = rec.reference(0).unwrap();
        let err = x.data().iter().zip(r.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        assert!(ds.load_scan(999).is_err());
    }
}
