//! Procedural scan/report pairs and their on-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json      version, count, seed, class distribution, splits, checksums
//! <dir>/splits.json        {"train": [...], "val": [...], "test": [...]}
//! <dir>/reports.jsonl      {"id", "report", "labels"} per line
//! <dir>/images/<id>.img    16-byte header + row-major f32 LE intensities
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{extract_findings, jsonl_string, read_jsonl, FindingLabel, LabelSet, ReportRecord};
use crate::seeding::mix;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const FORMAT_VERSION: u32 = 1;
pub const MIN_CASES: usize = 10;
const IMAGE_MAGIC: u32 = u32::from_le_bytes(*b"RGIM");
const HEADER_LEN: usize = 16;

const SIZES: [&str; 3] = ["small", "moderate", "large"];
const SIDES: [&str; 2] = ["left", "right"];
const NORMAL_REPORTS: [&str; 3] = [
    "no evidence of intracranial hemorrhage.",
    "no acute intracranial abnormality. ventricles are normal in size.",
    "the brain parenchyma is unremarkable. no evidence of intracranial hemorrhage.",
];
const TISSUE_LEVELS: [f64; 3] = [0.3, 0.4, 0.5];
const BACKGROUND: f64 = 0.05;
const BONE: f64 = 0.95;
const VENTRICLE: f64 = 0.15;
const BLOOD: f64 = 0.92;
const NOISE_SIGMA: f64 = 0.03;
/// Intensities above this inside the skull count as anomalous.
pub const BRIGHT_THRESHOLD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub id: String,
    pub image: Tensor,
    pub report: String,
    pub labels: LabelSet,
    pub seed: u64,
}

fn finding_phrase(label: FindingLabel, size: &str, side: &str) -> String {
    match label {
        FindingLabel::Epidural => format!("{size} {side} epidural hematoma"),
        FindingLabel::Subdural => format!("{size} acute subdural hematoma along the {side} convexity"),
        FindingLabel::Subarachnoid => format!("{size} subarachnoid hemorrhage within the {side} sulci"),
        FindingLabel::Intraparenchymal => format!("{size} intraparenchymal hemorrhage in the {side} frontal lobe"),
        FindingLabel::Intraventricular => format!("{size} intraventricular hemorrhage in the {side} lateral ventricle"),
        FindingLabel::Normal => unreachable!("normal cases have no finding phrase"),
    }
}

fn report_text(label: FindingLabel, level: usize, side: usize, size: usize) -> String {
    if label == FindingLabel::Normal {
        return NORMAL_REPORTS[level].to_string();
    }
    let phrase = finding_phrase(label, SIZES[size], SIDES[side]);
    match (side + size) % 3 {
        0 => format!("there is a {phrase}. no midline shift."),
        1 => format!("findings demonstrate a {phrase}. the remaining parenchyma is unremarkable."),
        _ => format!("{phrase} is identified. ventricles are normal in size."),
    }
}

const CENTRE: f64 = (IMAGE_SIZE as f64 - 1.0) / 2.0;
const SKULL_OUTER: (f64, f64) = (29.0, 30.0);
const SKULL_INNER: (f64, f64) = (26.0, 27.0);

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> f64 {
    ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2)
}

/// Normalised radius inside the skull cavity; below 1 means interior.
fn cavity_radius(x: f64, y: f64) -> f64 {
    ellipse(x, y, CENTRE, CENTRE, SKULL_INNER.0, SKULL_INNER.1).sqrt()
}

fn render(label: FindingLabel, level: usize, side: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let s = if side == 0 { -1.0 } else { 1.0 };
    let f = [1.0, 1.5, 2.0][size];
    let tissue = TISSUE_LEVELS[level];
    let mut img = vec![BACKGROUND; n * n];
    for yi in 0..n {
        for xi in 0..n {
            let (x, y) = (xi as f64, yi as f64);
            let v = if ellipse(x, y, CENTRE, CENTRE, SKULL_OUTER.0, SKULL_OUTER.1) >= 1.0 {
                BACKGROUND
            } else if cavity_radius(x, y) >= 1.0 {
                BONE
            } else if ellipse(x, y, CENTRE - 5.0, CENTRE, 3.0, 6.0) < 1.0
                || ellipse(x, y, CENTRE + 5.0, CENTRE, 3.0, 6.0) < 1.0
            {
                VENTRICLE
            } else {
                tissue
            };
            img[yi * n + xi] = v;
        }
    }
    let mut paint = |pred: &dyn Fn(f64, f64) -> bool| {
        for yi in 0..n {
            for xi in 0..n {
                let (x, y) = (xi as f64, yi as f64);
                if cavity_radius(x, y) < 1.0 && pred(x, y) {
                    img[yi * n + xi] = BLOOD;
                }
            }
        }
    };
    match label {
        FindingLabel::Epidural => paint(&|x, y| ellipse(x, y, CENTRE + s * 23.0, CENTRE, 2.0 * f, 6.0 * f) < 1.0),
        FindingLabel::Subdural => paint(&|x, y| {
            let r = cavity_radius(x, y);
            r >= 1.0 - 0.06 * f && s * (x - CENTRE) > 0.0 && (y - CENTRE).abs() < 10.0 * f
        }),
        FindingLabel::Subarachnoid => {
            let count = (6.0 * f).round() as usize;
            let mut spots = Vec::with_capacity(count);
            while spots.len() < count {
                let (x, y) = (rng.gen_range(0..n - 1) as f64, rng.gen_range(0..n - 1) as f64);
                let r = cavity_radius(x, y);
                if (0.6..0.9).contains(&r) && s * (x - CENTRE) > 2.0 {
                    spots.push((x, y));
                }
            }
            paint(&|x, y| spots.iter().any(|&(sx, sy)| (x == sx || x == sx + 1.0) && (y == sy || y == sy + 1.0)));
        }
        FindingLabel::Intraparenchymal => {
            paint(&|x, y| ellipse(x, y, CENTRE + s * 12.0, CENTRE - 9.0, 2.5 * f, 2.5 * f) < 1.0)
        }
        FindingLabel::Intraventricular => {
            paint(&|x, y| ellipse(x, y, CENTRE + s * 5.0, CENTRE, 1.5 * f, 3.0 * f) < 1.0)
        }
        FindingLabel::Normal => {}
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in img.iter_mut() {
        *v = ((*v + noise.sample(rng)).clamp(0.0, 1.0) as f32) as f64;
    }
    img
}

fn case_from_seed(id: String, seed: u64) -> SyntheticCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = *FindingLabel::ALL.choose(&mut rng).expect("non-empty");
    let level = rng.gen_range(0..TISSUE_LEVELS.len());
    let side = rng.gen_range(0..SIDES.len());
    let size = rng.gen_range(0..SIZES.len());
    let pixels = render(label, level, side, size, &mut rng);
    SyntheticCase {
        id,
        image: Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], pixels).expect("shape matches"),
        report: report_text(label, level, side, size),
        labels: LabelSet::from([label]),
        seed,
    }
}

/// A single case drawn from `seed`, with id `seed-<seed>`.
pub fn generate_case(seed: u64) -> SyntheticCase {
    case_from_seed(format!("seed-{seed}"), seed)
}

/// Fraction of skull-interior pixels brighter than [`BRIGHT_THRESHOLD`].
pub fn interior_bright_fraction(image: &Tensor) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (mut inside, mut bright) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if cavity_radius(x as f64, y as f64) < 1.0 {
                inside += 1;
                bright += usize::from(image.at(&[0, y, x]) > BRIGHT_THRESHOLD);
            }
        }
    }
    bright as f64 / inside.max(1) as f64
}

pub fn encode_image(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * h * w);
    for v in [IMAGE_MAGIC, FORMAT_VERSION, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses and validates an image file: header, exact 64×64 shape and
/// finite intensities in [0, 1].
pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let corrupt = |reason: String| Error::CorruptData {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != IMAGE_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    if word(1) != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported image version {}", word(1))));
    }
    let (h, w) = (word(2) as usize, word(3) as usize);
    if (h, w) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(corrupt(format!("shape {h}x{w}, expected {IMAGE_SIZE}x{IMAGE_SIZE}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * h * w {
        return Err(corrupt(format!("{} pixel bytes, expected {}", body.len(), 4 * h * w)));
    }
    let mut data = Vec::with_capacity(h * w);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        if !(0.0..=1.0).contains(&v) {
            return Err(corrupt(format!("intensity {v} outside [0, 1]")));
        }
        data.push(v);
    }
    Tensor::new(vec![1, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub class_distribution: BTreeMap<FindingLabel, usize>,
    pub splits: BTreeMap<Split, Vec<String>>,
    /// SHA-256 of every data file, keyed by path relative to the dataset root.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn summary(&self) -> String {
        format!(
            "train={} val={} test={}",
            self.split(Split::Train).len(),
            self.split(Split::Val).len(),
            self.split(Split::Test).len()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOutcome {
    pub manifest: DatasetManifest,
    /// False when every file already had the expected content.
    pub changed: bool,
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:05}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn image_rel(id: &str) -> String {
    format!("images/{id}.img")
}

/// 80/10/10 by ordering ids on their SHA-256; each split lists ids in
/// ascending order.
pub fn assign_splits(ids: &[String]) -> BTreeMap<Split, Vec<String>> {
    let mut hashed: Vec<&String> = ids.iter().collect();
    hashed.sort_by_cached_key(|id| (sha256_hex(id.as_bytes()), id.to_string()));
    let n = ids.len();
    let (n_train, n_val) = (n * 8 / 10, n / 10);
    let mut out = BTreeMap::new();
    let bounds = [(Split::Train, 0, n_train), (Split::Val, n_train, n_train + n_val), (Split::Test, n_train + n_val, n)];
    for (split, a, b) in bounds {
        let mut part: Vec<String> = hashed[a..b].iter().map(|s| s.to_string()).collect();
        part.sort();
        out.insert(split, part);
    }
    out
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

fn labels_vec(labels: &LabelSet) -> Vec<FindingLabel> {
    labels.iter().copied().collect()
}

/// Writes `n` cases derived from `seed` under `dir`. Re-running with the
/// same arguments leaves every file byte-identical.
pub fn generate_dataset(n: usize, seed: u64, dir: &Path) -> Result<GenerateOutcome> {
    if n < MIN_CASES {
        return Err(Error::Config(format!("dataset needs at least {MIN_CASES} cases, got {n}")));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut changed = false;
    let mut checksums = BTreeMap::new();
    let mut class_distribution: BTreeMap<FindingLabel, usize> = FindingLabel::ALL.iter().map(|&l| (l, 0)).collect();
    let mut records = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let case = case_from_seed(case_id(i), mix(&[seed, i as u64]));
        for l in &case.labels {
            *class_distribution.entry(*l).or_default() += 1;
        }
        let bytes = encode_image(&case.image);
        let rel = image_rel(&case.id);
        changed |= write_if_changed(&dir.join(&rel), &bytes)?;
        checksums.insert(rel, sha256_hex(&bytes));
        records.push(ReportRecord {
            id: case.id.clone(),
            report: case.report,
            labels: Some(labels_vec(&case.labels)),
        });
        ids.push(case.id);
    }
    let reports = jsonl_string(&records)?;
    changed |= write_if_changed(&dir.join("reports.jsonl"), reports.as_bytes())?;
    checksums.insert("reports.jsonl".into(), sha256_hex(reports.as_bytes()));
    let splits = assign_splits(&ids);
    let splits_json = serde_json::to_string_pretty(&splits)? + "\n";
    changed |= write_if_changed(&dir.join("splits.json"), splits_json.as_bytes())?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        count: n,
        seed,
        class_distribution,
        splits,
        checksums,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)? + "\n";
    changed |= write_if_changed(&dir.join("manifest.json"), manifest_json.as_bytes())?;
    Ok(GenerateOutcome { manifest, changed })
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptData {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::CorruptData {
            path,
            reason: format!("dataset version {} is not supported (expected {FORMAT_VERSION})", manifest.version),
        });
    }
    Ok(manifest)
}

fn verified_read(dir: &Path, rel: &str, manifest: &DatasetManifest) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match manifest.checksums.get(rel) {
        Some(sum) if *sum == sha256_hex(&bytes) => Ok((path, bytes)),
        Some(_) => Err(Error::CorruptData {
            path,
            reason: "checksum mismatch".into(),
        }),
        None => Err(Error::CorruptData {
            path,
            reason: "file is not listed in the manifest".into(),
        }),
    }
}

fn seed_for(manifest: &DatasetManifest, id: &str) -> u64 {
    id.strip_prefix("case-")
        .and_then(|n| n.parse::<u64>().ok())
        .map_or(0, |i| mix(&[manifest.seed, i]))
}

/// Cases of `split` in manifest order, with checksums, image shape and
/// intensity range verified.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SyntheticCase>> {
    let manifest = load_manifest(dir)?;
    let (reports_path, _) = verified_read(dir, "reports.jsonl", &manifest)?;
    let records: BTreeMap<String, ReportRecord> = read_jsonl(&reports_path)?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    manifest
        .split(split)
        .iter()
        .map(|id| {
            let record = records.get(id).ok_or_else(|| Error::CorruptData {
                path: reports_path.clone(),
                reason: format!("no report for `{id}`"),
            })?;
            let (path, bytes) = verified_read(dir, &image_rel(id), &manifest)?;
            let image = decode_image(&bytes, &path)?;
            let labels = match &record.labels {
                Some(l) => l.iter().copied().collect(),
                None => extract_findings(&record.report),
            };
            Ok(SyntheticCase {
                id: id.clone(),
                image,
                report: record.report.clone(),
                labels,
                seed: seed_for(&manifest, id),
            })
        })
        .collect()
}
