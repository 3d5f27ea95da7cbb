//! Dataset schema: point files, reference images, manifests and splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_OBJECT_CLASSES: usize = 23;
pub const NUM_AFFORDANCES: usize = 17;

/// Point clouds in the full-scale benchmark's train and test splits.
pub const REFERENCE_TRAIN_CLOUDS: usize = 6000;
pub const REFERENCE_TEST_CLOUDS: usize = 1000;

pub const CLASS_NAMES: [&str; NUM_OBJECT_CLASSES] = [
    "Bag",
    "Bed",
    "Bowl",
    "Clock",
    "Dishwasher",
    "Display",
    "Door",
    "Earphone",
    "Faucet",
    "Hat",
    "StorageFurniture",
    "Keyboard",
    "Knife",
    "Laptop",
    "Microwave",
    "Mug",
    "Refrigerator",
    "Chair",
    "Scissors",
    "Table",
    "TrashCan",
    "Vase",
    "Bottle",
];

pub const AFFORDANCE_NAMES: [&str; NUM_AFFORDANCES] = [
    "grasp",
    "contain",
    "lift",
    "open",
    "lay",
    "sit",
    "support",
    "wrapgrasp",
    "pour",
    "move",
    "display",
    "push",
    "listen",
    "wear",
    "press",
    "cut",
    "stab",
];

/// Environment variable naming the default root for relative data paths.
pub const DATA_ROOT_ENV: &str = "MIFAG_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSample {
    pub coords: Vec<[f64; 3]>,
    /// Per-point affordance score in `[0, 1]`.
    pub labels: Vec<f64>,
    pub object_class: usize,
    pub affordance: usize,
    pub sample_id: String,
}

impl PointCloudSample {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Interleaved RGB raster, row-major, channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Nearest-neighbour resampling to `side × side`.
    pub fn resize_nearest(&self, side: usize) -> RgbImage {
        if self.width == side && self.height == side {
            return self.clone();
        }
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            let sy = y * self.height / side;
            for x in 0..side {
                let sx = x * self.width / side;
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        RgbImage::new(side, side, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImageSet {
    pub images: Vec<RgbImage>,
    pub affordance: usize,
    pub image_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffordancePair {
    pub cloud: PointCloudSample,
    pub refs: ReferenceImageSet,
}

impl AffordancePair {
    pub fn new(cloud: PointCloudSample, refs: ReferenceImageSet) -> Result<Self> {
        if cloud.affordance != refs.affordance {
            return Err(Error::Validation(format!(
                "sample {}: cloud affordance {} differs from image affordance {}",
                cloud.sample_id, cloud.affordance, refs.affordance
            )));
        }
        if refs.images.is_empty() {
            return Err(Error::Validation(format!(
                "sample {}: no reference images",
                cloud.sample_id
            )));
        }
        Ok(Self { cloud, refs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Seen,
    Unseen,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Setting::Seen),
            "unseen" => Ok(Setting::Unseen),
            other => Err(Error::Validation(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub object_class: usize,
    pub affordance: usize,
    pub point_file: String,
    pub image_files: Vec<String>,
    /// Overrides the manifest-level split, so one document can hold both halves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub setting: Setting,
    pub split: Split,
    pub class_names: Vec<String>,
    pub affordance_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative file paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(setting: Setting, split: Split, root: impl Into<PathBuf>) -> Self {
        Self {
            setting,
            split,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            affordance_names: AFFORDANCE_NAMES.iter().map(|s| s.to_string()).collect(),
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_split(&self, entry: &ManifestEntry) -> Split {
        entry.split.unwrap_or(self.split)
    }

    pub fn entry(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Checks every schema invariant except file existence.
    pub fn validate_schema(&self) -> Result<()> {
        if self.class_names.len() != NUM_OBJECT_CLASSES {
            return Err(Error::Validation(format!(
                "expected {NUM_OBJECT_CLASSES} class names, found {}",
                self.class_names.len()
            )));
        }
        if self.affordance_names.len() != NUM_AFFORDANCES {
            return Err(Error::Validation(format!(
                "expected {NUM_AFFORDANCES} affordance names, found {}",
                self.affordance_names.len()
            )));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.sample_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate sample_id {:?}",
                    e.sample_id
                )));
            }
            if e.object_class >= NUM_OBJECT_CLASSES {
                return Err(Error::Validation(format!(
                    "entry {}: object_class {} out of range",
                    e.sample_id, e.object_class
                )));
            }
            if e.affordance >= NUM_AFFORDANCES {
                return Err(Error::Validation(format!(
                    "entry {}: affordance {} out of range",
                    e.sample_id, e.affordance
                )));
            }
            if e.image_files.is_empty() {
                return Err(Error::Validation(format!(
                    "entry {}: no image files",
                    e.sample_id
                )));
            }
        }
        if self.setting == Setting::Unseen {
            let classes = |split: Split| -> BTreeSet<usize> {
                self.entries
                    .iter()
                    .filter(|e| self.entry_split(e) == split)
                    .map(|e| e.object_class)
                    .collect()
            };
            let train = classes(Split::Train);
            if let Some(e) = self
                .entries
                .iter()
                .find(|e| self.entry_split(e) == Split::Test && train.contains(&e.object_class))
            {
                return Err(Error::Validation(format!(
                    "entry {}: unseen test object_class {} also appears in train",
                    e.sample_id, e.object_class
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest JSON to `path`; relative paths stay relative.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("manifest serialisation: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Resolves a data path, falling back to `$MIFAG_DATA_ROOT/<path>` for relative
/// paths that do not exist as given.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                candidate
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}

/// Loads and fully validates a manifest, including every referenced file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = resolve_data_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate_schema()?;
    for e in &manifest.entries {
        let pf = manifest.resolve(&e.point_file);
        let cloud = load_point_file(&pf)?;
        if e.split.unwrap_or(manifest.split) == Split::Train && !cloud.labels.iter().any(|&l| l > 0.0) {
            return Err(Error::Validation(format!(
                "entry {}: training sample has no positive label",
                e.sample_id
            )));
        }
        for img in &e.image_files {
            read_ppm(&manifest.resolve(img))?;
        }
    }
    Ok(manifest)
}

/// Parses a point file. Metadata fields other than `sample_id` (the file stem)
/// are left at zero; manifests fill them in.
pub fn load_point_file(path: &Path) -> Result<PointCloudSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty point file"))?;
    let n: usize = header
        .strip_prefix("points ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format(path, format!("malformed header {header:?}")))?;
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("expected {n} rows, found {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        if vals.len() != 4 {
            return Err(Error::format(
                path,
                format!("row {}: expected 4 values, found {}", i + 1, vals.len()),
            ));
        }
        if !vals[..3].iter().all(|v| v.is_finite()) {
            return Err(Error::format(path, format!("row {}: non-finite coordinate", i + 1)));
        }
        let label = vals[3];
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::format(
                path,
                format!("row {}: label {label} outside [0, 1]", i + 1),
            ));
        }
        coords.push([vals[0], vals[1], vals[2]]);
        labels.push(label);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::format(path, format!("more than {n} rows")));
    }
    Ok(PointCloudSample {
        coords,
        labels,
        object_class: 0,
        affordance: 0,
        sample_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

pub fn format_point_file(sample: &PointCloudSample) -> String {
    let mut out = String::with_capacity(sample.len() * 40 + 16);
    let _ = writeln!(out, "points {}", sample.len());
    for (c, l) in sample.coords.iter().zip(&sample.labels) {
        let _ = writeln!(out, "{:.6} {:.6} {:.6} {:.6}", c[0], c[1], c[2], l);
    }
    out
}

pub fn save_point_file(path: &Path, sample: &PointCloudSample) -> Result<()> {
    fs::write(path, format_point_file(sample)).map_err(|e| Error::io(path, e))
}

/// Decodes a binary PPM (`P6`, maxval 255) into `[0, 1]` channel values.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::format(path, m))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(format!("unsupported image magic {magic:?}, expected P6"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed PPM header".to_string())?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PPM header".into());
    }
    pos += 1;
    let need = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format!(
            "truncated pixel payload: {} of {need} bytes",
            payload.len()
        ));
    }
    let data = payload[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(RgbImage::new(width, height, data))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Reads a P6 image and resizes it to `side × side`.
pub fn load_image(path: &Path, side: usize) -> Result<RgbImage> {
    Ok(read_ppm(path)?.resize_nearest(side))
}

/// Centres the cloud at the origin and scales the farthest point to unit norm.
pub fn normalize_cloud(sample: &PointCloudSample) -> Result<PointCloudSample> {
    let n = sample.len();
    if n == 0 {
        return Err(Error::DegenerateCloud(format!("{}: empty cloud", sample.sample_id)));
    }
    let mut centroid = [0.0; 3];
    for c in &sample.coords {
        for k in 0..3 {
            centroid[k] += c[k];
        }
    }
    for v in &mut centroid {
        *v /= n as f64;
    }
    let centred: Vec<[f64; 3]> = sample
        .coords
        .iter()
        .map(|c| [c[0] - centroid[0], c[1] - centroid[1], c[2] - centroid[2]])
        .collect();
    let radius = centred
        .iter()
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .fold(0.0, f64::max);
    if radius == 0.0 || !radius.is_finite() {
        return Err(Error::DegenerateCloud(format!(
            "{}: all points coincide",
            sample.sample_id
        )));
    }
    Ok(PointCloudSample {
        coords: centred
            .into_iter()
            .map(|c| [c[0] / radius, c[1] / radius, c[2] / radius])
            .collect(),
        ..sample.clone()
    })
}

/// Loads the cloud of one manifest entry with its metadata attached.
pub fn load_entry_cloud(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<PointCloudSample> {
    let mut cloud = load_point_file(&manifest.resolve(&entry.point_file))?;
    cloud.object_class = entry.object_class;
    cloud.affordance = entry.affordance;
    cloud.sample_id = entry.sample_id.clone();
    Ok(cloud)
}

/// Loads the given images of an entry (by index into `image_files`) as a pair.
pub fn load_pair(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    image_indices: &[usize],
    image_side: usize,
) -> Result<AffordancePair> {
    let cloud = load_entry_cloud(manifest, entry)?;
    let mut images = Vec::with_capacity(image_indices.len());
    let mut image_ids = Vec::with_capacity(image_indices.len());
    for &i in image_indices {
        let rel = entry.image_files.get(i).ok_or_else(|| {
            Error::Validation(format!("entry {}: no image index {i}", entry.sample_id))
        })?;
        images.push(load_image(&manifest.resolve(rel), image_side)?);
        image_ids.push(rel.clone());
    }
    AffordancePair::new(
        cloud,
        ReferenceImageSet {
            images,
            affordance: entry.affordance,
            image_ids,
        },
    )
}

/// Splits a manifest into train and test halves.
///
/// `Seen` performs a class-stratified random split with `train_ratio`;
/// `Unseen` sends exactly the samples whose class is in `unseen_classes` to test.
pub fn split_seen_unseen(
    manifest: &DatasetManifest,
    setting: Setting,
    unseen_classes: &BTreeSet<usize>,
    train_ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut train = DatasetManifest {
        setting,
        split: Split::Train,
        entries: Vec::new(),
        ..manifest.clone()
    };
    let mut test = DatasetManifest {
        split: Split::Test,
        ..train.clone()
    };
    let strip = |e: &ManifestEntry| ManifestEntry {
        split: None,
        ..e.clone()
    };
    match setting {
        Setting::Unseen => {
            let present: BTreeSet<usize> = manifest.entries.iter().map(|e| e.object_class).collect();
            if unseen_classes.is_empty() {
                return Err(Error::Validation("unseen split needs at least one held-out class".into()));
            }
            if present.iter().all(|c| unseen_classes.contains(c)) {
                return Err(Error::Validation(
                    "unseen classes cover every class; train split would be empty".into(),
                ));
            }
            for e in &manifest.entries {
                if unseen_classes.contains(&e.object_class) {
                    test.entries.push(strip(e));
                } else {
                    train.entries.push(strip(e));
                }
            }
        }
        Setting::Seen => {
            if !(0.0..=1.0).contains(&train_ratio) {
                return Err(Error::Validation(format!("train ratio {train_ratio} outside [0, 1]")));
            }
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, e) in manifest.entries.iter().enumerate() {
                by_class.entry(e.object_class).or_default().push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Largest-remainder allocation keeps the global total at round(n · ratio).
            let total = manifest.entries.len();
            let target = (total as f64 * train_ratio).round() as usize;
            let mut quotas: Vec<(usize, usize, f64)> = by_class
                .iter()
                .map(|(&c, idx)| {
                    let exact = idx.len() as f64 * train_ratio;
                    (c, exact.floor() as usize, exact - exact.floor())
                })
                .collect();
            let assigned: usize = quotas.iter().map(|q| q.1).sum();
            let mut order: Vec<usize> = (0..quotas.len()).collect();
            order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
            for &k in order.iter().take(target.saturating_sub(assigned)) {
                quotas[k].1 += 1;
            }
            let mut train_idx = BTreeSet::new();
            for (c, quota, _) in quotas {
                let mut idx = by_class[&c].clone();
                idx.shuffle(&mut rng);
                train_idx.extend(idx.into_iter().take(quota));
            }
            for (i, e) in manifest.entries.iter().enumerate() {
                if train_idx.contains(&i) {
                    train.entries.push(strip(e));
                } else {
                    test.entries.push(strip(e));
                }
            }
        }
    }
    Ok((train, test))
}
