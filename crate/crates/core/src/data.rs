//! Datasets: attribute vocabularies, manifest ingestion, triplet sampling and
//! a deterministic synthetic image generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgmanError, Result};

/// The attributes a model embeds for, each with its sub-class vocabulary size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpace {
    names: Vec<String>,
    sub_class_counts: Vec<usize>,
}

/// One attribute as written in config files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub sub_classes: usize,
}

impl AttributeSpace {
    pub fn new(names: Vec<String>, sub_class_counts: Vec<usize>) -> Result<Self> {
        if names.is_empty() {
            return Err(AgmanError::Argument(
                "an attribute space needs at least one attribute".into(),
            ));
        }
        if names.len() != sub_class_counts.len() {
            return Err(AgmanError::Argument(format!(
                "{} attribute names but {} sub-class counts",
                names.len(),
                sub_class_counts.len()
            )));
        }
        for (name, &count) in names.iter().zip(&sub_class_counts) {
            if count < 2 {
                return Err(AgmanError::Argument(format!(
                    "attribute `{name}` has {count} sub-classes; at least 2 are required"
                )));
            }
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(AgmanError::Argument("attribute names must be unique".into()));
        }
        Ok(Self {
            names,
            sub_class_counts,
        })
    }

    pub fn from_defs(defs: &[AttributeDef]) -> Result<Self> {
        Self::new(
            defs.iter().map(|d| d.name.clone()).collect(),
            defs.iter().map(|d| d.sub_classes).collect(),
        )
    }

    pub fn to_defs(&self) -> Vec<AttributeDef> {
        self.names
            .iter()
            .zip(&self.sub_class_counts)
            .map(|(name, &sub_classes)| AttributeDef {
                name: name.clone(),
                sub_classes,
            })
            .collect()
    }

    /// Number of attributes.
    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, attribute: usize) -> &str {
        &self.names[attribute]
    }

    pub fn sub_class_counts(&self) -> &[usize] {
        &self.sub_class_counts
    }

    pub fn sub_class_count(&self, attribute: usize) -> usize {
        self.sub_class_counts[attribute]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| {
            AgmanError::Usage(format!(
                "unknown attribute `{name}`; valid attributes are: {}",
                self.names.join(", ")
            ))
        })
    }

    pub fn check_index(&self, attribute: usize) -> Result<()> {
        if attribute >= self.n() {
            Err(AgmanError::Argument(format!(
                "attribute index {attribute} out of range for n = {}",
                self.n()
            )))
        } else {
            Ok(())
        }
    }
}

/// One-hot encoding of an attribute index.
pub fn encode_attribute(attribute: usize, space: &AttributeSpace) -> Result<Vec<f64>> {
    space.check_index(attribute)?;
    let mut v = vec![0.0; space.n()];
    v[attribute] = 1.0;
    Ok(v)
}

/// Where the pixels of an image come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PixelSource {
    /// Image file, relative paths resolved against the manifest directory.
    File(PathBuf),
    /// Rendered on demand by [`render_synthetic`].
    Synthetic { seed: u64, size: usize },
}

const SYNTHETIC_PREFIX: &str = "synthetic:";

impl PixelSource {
    fn to_manifest_path(&self) -> String {
        match self {
            PixelSource::File(p) => p.to_string_lossy().into_owned(),
            PixelSource::Synthetic { seed, size } => format!("{SYNTHETIC_PREFIX}{seed}:{size}"),
        }
    }

    fn from_manifest_path(path: &str) -> std::result::Result<Self, String> {
        if let Some(rest) = path.strip_prefix(SYNTHETIC_PREFIX) {
            let (seed, size) = rest
                .split_once(':')
                .ok_or_else(|| format!("malformed synthetic source `{path}`"))?;
            let seed = seed
                .parse()
                .map_err(|_| format!("bad synthetic seed in `{path}`"))?;
            let size = size
                .parse()
                .map_err(|_| format!("bad synthetic size in `{path}`"))?;
            Ok(PixelSource::Synthetic { seed, size })
        } else {
            Ok(PixelSource::File(PathBuf::from(path)))
        }
    }
}

/// Attribute index to sub-class index. Records may be labeled for a subset of attributes.
pub type Labels = BTreeMap<usize, usize>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub source: PixelSource,
    pub labels: Labels,
}

impl ImageRecord {
    pub fn label(&self, attribute: usize) -> Option<usize> {
        self.labels.get(&attribute).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub attribute: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    #[default]
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitRole::Train => "train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub records: Vec<ImageRecord>,
    pub role: SplitRole,
    /// Query partition for evaluation splits; empty for training splits.
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    /// Directory that relative file paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl DatasetSplit {
    pub fn new(records: Vec<ImageRecord>, role: SplitRole) -> Self {
        Self {
            records,
            role,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Randomly assigns `fraction` of the records (at least one when the split
    /// has two or more records) to the query side; the rest become candidates.
    /// Both lists keep file order.
    pub fn with_query_partition(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
            return Err(AgmanError::Argument(format!(
                "query fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut q = ((n as f64) * fraction).round() as usize;
        if n >= 2 {
            q = q.clamp(1, n - 1);
        }
        let queries: HashSet<usize> = order[..q.min(n)].iter().copied().collect();
        self.query_ids.clear();
        self.candidate_ids.clear();
        for (i, r) in self.records.iter().enumerate() {
            if queries.contains(&i) {
                self.query_ids.push(r.id.clone());
            } else {
                self.candidate_ids.push(r.id.clone());
            }
        }
        Ok(self)
    }

    /// Loads the pixel tensor of one record at `input_size`.
    pub fn pixels(&self, record: &ImageRecord, space: &AttributeSpace, input_size: usize) -> Result<Array3<f64>> {
        let image = match &record.source {
            PixelSource::Synthetic { seed, size } => {
                render_synthetic(space, &record.labels, *seed, *size)
            }
            PixelSource::File(path) => {
                let full = match (&self.base_dir, path.is_relative()) {
                    (Some(base), true) => base.join(path),
                    _ => path.clone(),
                };
                load_image(&full, input_size)?
            }
        };
        let (c, h, w) = image.dim();
        if c != 3 || h != input_size || w != input_size {
            return Err(AgmanError::Argument(format!(
                "image `{}` has shape [{c}, {h}, {w}], expected [3, {input_size}, {input_size}]",
                record.id
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(AgmanError::Argument(format!(
                "image `{}` contains non-finite pixels",
                record.id
            )));
        }
        Ok(image)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    path: String,
    labels: BTreeMap<String, usize>,
}

/// Reads a JSON-lines manifest. Blank lines are ignored.
pub fn load_manifest(path: &Path, space: &AttributeSpace) -> Result<DatasetSplit> {
    let file = fs::File::open(path).map_err(|e| AgmanError::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| AgmanError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| AgmanError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let source = PixelSource::from_manifest_path(&parsed.path).map_err(|message| {
            AgmanError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            }
        })?;
        let mut labels = Labels::new();
        for (name, sub_class) in parsed.labels {
            let attribute = space.index_of(&name).map_err(|_| {
                AgmanError::Validation(format!(
                    "line {line_no}: record `{}` uses unknown attribute `{name}`",
                    parsed.id
                ))
            })?;
            let count = space.sub_class_count(attribute);
            if sub_class >= count {
                return Err(AgmanError::Validation(format!(
                    "line {line_no}: record `{}` has sub-class {sub_class} for attribute `{name}` which has {count} sub-classes",
                    parsed.id
                )));
            }
            labels.insert(attribute, sub_class);
        }
        if !seen.insert(parsed.id.clone()) {
            return Err(AgmanError::Validation(format!(
                "line {line_no}: duplicate record id `{}`",
                parsed.id
            )));
        }
        records.push(ImageRecord {
            id: parsed.id,
            source,
            labels,
        });
    }
    let mut split = DatasetSplit::new(records, SplitRole::Train);
    split.base_dir = path.parent().map(Path::to_path_buf);
    Ok(split)
}

pub fn save_manifest(path: &Path, split: &DatasetSplit, space: &AttributeSpace) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| AgmanError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in &split.records {
        let line = ManifestLine {
            id: record.id.clone(),
            path: record.source.to_manifest_path(),
            labels: record
                .labels
                .iter()
                .map(|(&a, &s)| (space.name(a).to_string(), s))
                .collect(),
        };
        let json = serde_json::to_string(&line).expect("manifest line serializes");
        writeln!(out, "{json}").map_err(|e| AgmanError::io(path, e))?;
    }
    out.flush().map_err(|e| AgmanError::io(path, e))
}

pub fn save_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| AgmanError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in triplets {
        let json = serde_json::to_string(t).expect("triplet serializes");
        writeln!(out, "{json}").map_err(|e| AgmanError::io(path, e))?;
    }
    out.flush().map_err(|e| AgmanError::io(path, e))
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path).map_err(|e| AgmanError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AgmanError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Checks that every member exists in `split` and that the labels satisfy the
/// triplet relation for the triplet's attribute.
pub fn validate_triplet(triplet: &Triplet, split: &DatasetSplit) -> Result<()> {
    let label = |id: &str| -> Result<usize> {
        let record = split.get(id).ok_or_else(|| {
            AgmanError::Validation(format!("triplet references unknown record `{id}`"))
        })?;
        record.label(triplet.attribute).ok_or_else(|| {
            AgmanError::Validation(format!(
                "record `{id}` is not labeled for attribute {}",
                triplet.attribute
            ))
        })
    };
    let (a, p, n) = (
        label(&triplet.anchor)?,
        label(&triplet.positive)?,
        label(&triplet.negative)?,
    );
    if a != p || a == n {
        return Err(AgmanError::Validation(format!(
            "triplet ({}, {}, {}) violates the same/different sub-class relation",
            triplet.anchor, triplet.positive, triplet.negative
        )));
    }
    Ok(())
}

/// Draws `count` triplets for one attribute.
///
/// The anchor sub-class is uniform over sub-classes with at least two members,
/// anchor and positive are drawn without replacement from it, and the negative
/// is uniform over every record of a different sub-class.
pub fn sample_triplets(
    split: &DatasetSplit,
    attribute: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if count == 0 {
        return Err(AgmanError::Argument("triplet count must be positive".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in split.records.iter().enumerate() {
        if let Some(s) = r.label(attribute) {
            groups.entry(s).or_default().push(i);
        }
    }
    let anchor_classes: Vec<usize> = groups
        .iter()
        .filter(|(_, members)| members.len() >= 2)
        .map(|(&s, _)| s)
        .collect();
    if anchor_classes.is_empty() || groups.len() < 2 {
        return Err(AgmanError::Sampling(format!(
            "attribute {attribute} has no valid triplet: need one sub-class with two records and a second populated sub-class"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attribute as u64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = anchor_classes[rng.random_range(0..anchor_classes.len())];
        let members = &groups[&s];
        let ai = rng.random_range(0..members.len());
        let mut pi = rng.random_range(0..members.len() - 1);
        if pi >= ai {
            pi += 1;
        }
        let negatives_total: usize = groups
            .iter()
            .filter(|(&k, _)| k != s)
            .map(|(_, m)| m.len())
            .sum();
        let mut ni = rng.random_range(0..negatives_total);
        let mut negative = 0;
        for (_, m) in groups.iter().filter(|(&k, _)| k != s) {
            if ni < m.len() {
                negative = m[ni];
                break;
            }
            ni -= m.len();
        }
        out.push(Triplet {
            anchor: split.records[members[ai]].id.clone(),
            positive: split.records[members[pi]].id.clone(),
            negative: split.records[negative].id.clone(),
            attribute,
        });
    }
    Ok(out)
}

/// Number of records produced by [`generate_synthetic`]: `per_subclass` times
/// the largest sub-class count.
pub fn synthetic_record_count(space: &AttributeSpace, per_subclass: usize) -> usize {
    per_subclass * space.sub_class_counts().iter().copied().max().unwrap_or(0)
}

/// Builds a fully labeled synthetic split.
///
/// Every attribute's labels are a balanced assignment shuffled independently
/// per attribute, so each (attribute, sub-class) cell holds at least
/// `per_subclass` records and attributes are not confounded with each other.
pub fn generate_synthetic(
    space: &AttributeSpace,
    per_subclass: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if per_subclass < 1 {
        return Err(AgmanError::Argument("per_subclass must be at least 1".into()));
    }
    if image_size < 16 {
        return Err(AgmanError::Argument(format!(
            "synthetic image size must be at least 16, got {image_size}"
        )));
    }
    let total = synthetic_record_count(space, per_subclass);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignments: Vec<Vec<usize>> = space
        .sub_class_counts()
        .iter()
        .map(|&k| {
            let mut column: Vec<usize> = (0..total).map(|j| j % k).collect();
            column.shuffle(&mut rng);
            column
        })
        .collect();
    let records = (0..total)
        .map(|j| ImageRecord {
            id: format!("s{seed}-{j:05}"),
            source: PixelSource::Synthetic {
                seed: rng.random(),
                size: image_size,
            },
            labels: assignments
                .iter()
                .enumerate()
                .map(|(a, column)| (a, column[j]))
                .collect(),
        })
        .collect();
    Ok(DatasetSplit::new(records, SplitRole::Train))
}

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.2, 0.35, 1.0],
    [1.0, 1.0, 0.15],
    [0.15, 1.0, 1.0],
    [1.0, 0.15, 1.0],
    [1.0, 0.6, 0.1],
    [0.6, 0.3, 1.0],
];

/// Orientation (radians) and cycles-per-patch of the stripe pattern encoding
/// sub-class `k` out of `count`.
fn stripe_pattern(k: usize, count: usize) -> (f64, f64) {
    use std::f64::consts::PI;
    if count <= 4 {
        (k as f64 * PI / count as f64, 2.5)
    } else {
        ((k % 4) as f64 * PI / 4.0, 2.5 + 1.5 * (k / 4) as f64)
    }
}

/// Renders the synthetic image for a label set.
///
/// The canvas is a grid with one cell per attribute. Attribute `a` draws a
/// square patch inside cell `a`, tinted with a desaturated version of its own
/// palette color so the stripes show in every channel. The stripe
/// orientation (and, for large vocabularies, frequency) inside the patch
/// encodes the sub-class. Patch offset, stripe phase and background noise
/// come from `seed`. Values are quantized to 8-bit levels so a PNG round trip
/// is lossless.
pub fn render_synthetic(space: &AttributeSpace, labels: &Labels, seed: u64, size: usize) -> Array3<f64> {
    let n = space.n();
    let grid = (n as f64).sqrt().ceil() as usize;
    let cell = size / grid;
    let patch = (cell * 7 / 8).max(4);
    let slack = cell - patch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::from_shape_simple_fn((3, size, size), || 0.08 + rng.random_range(0.0..0.08));
    for (&attribute, &sub_class) in labels {
        if attribute >= n {
            continue;
        }
        let (theta, cycles) = stripe_pattern(sub_class, space.sub_class_count(attribute));
        let phase = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
        let jitter = slack / 2;
        let oy = (attribute / grid) * cell + slack / 4 + rng.random_range(0..=jitter);
        let ox = (attribute % grid) * cell + slack / 4 + rng.random_range(0..=jitter);
        let color = PALETTE[attribute % PALETTE.len()];
        let freq = 2.0 * std::f64::consts::PI * cycles / patch as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..patch {
            for x in 0..patch {
                let t = (x as f64 * ct + y as f64 * st) * freq + phase;
                let v = 0.15 + 0.85 * (0.5 + 0.5 * t.sin());
                for (ch, &c) in color.iter().enumerate() {
                    img[[ch, oy + y, ox + x]] = (0.35 + 0.65 * c) * v;
                }
            }
        }
    }
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    img
}

fn load_image(path: &Path, input_size: usize) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| AgmanError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize != input_size || img.height() as usize != input_size {
        image::imageops::resize(
            &img,
            input_size as u32,
            input_size as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    Ok(Array3::from_shape_fn((3, input_size, input_size), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)
        .map_err(|e| AgmanError::Image(format!("{}: {e}", path.display())))
}
