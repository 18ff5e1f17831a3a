//! Dataset construction: labeled video sessions in, a balanced cropped image
//! dataset with a reproducible manifest out.
//!
//! Two sampling strategies are supported. `LL` anchors every crop at a fixed
//! offset from the bottom-left corner of the frame; `R` draws crop positions
//! uniformly from a per-session sea region that excludes sky, hull, and wake.
//! Frames are sampled per class at a fixed interval so classes come out
//! balanced, and splits hold out contiguous trailing frame ranges per session
//! (or whole sessions) so test frames never appear in training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::img::{crop, hw, load_png_rgb8, rgb8_to_image, save_png, Image};
use crate::rng::{derive, tag};

/// Side length of dataset crops.
pub const CROP_SIZE: usize = 331;

/// How many times an R-strategy draw is retried when an exclusion mask vetoes
/// the sampled region before the frame is dropped.
const MASK_RETRIES: usize = 20;

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Beaufort sea-state class. Native data spans 1..=8; foreign datasets may
/// declare a narrower contiguous range.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(transparent)]
pub struct SeaStateLabel(u8);

impl SeaStateLabel {
    pub fn new(value: i64, range: LabelRange) -> Result<Self> {
        if value < i64::from(range.min) || value > i64::from(range.max) {
            return Err(Error::LabelOutOfRange {
                label: value,
                min: range.min,
                max: range.max,
            });
        }
        Ok(SeaStateLabel(value as u8))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for SeaStateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Contiguous inclusive label interval, e.g. 1-8 for the native datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelRange {
    pub min: u8,
    pub max: u8,
}

impl LabelRange {
    /// The native corpus range: Beaufort 1 through 8.
    pub const NATIVE: LabelRange = LabelRange { min: 1, max: 8 };

    pub fn new(min: u8, max: u8) -> Result<Self> {
        if min > max || max > 12 {
            return Err(Error::Config(format!(
                "label range {min}-{max} is not a valid Beaufort interval"
            )));
        }
        Ok(LabelRange { min, max })
    }

    pub fn contains(self, value: u8) -> bool {
        (self.min..=self.max).contains(&value)
    }

    pub fn count(self) -> usize {
        usize::from(self.max - self.min) + 1
    }

    pub fn labels(self) -> impl Iterator<Item = SeaStateLabel> {
        (self.min..=self.max).map(SeaStateLabel)
    }

    /// Smallest contiguous range covering both; cross-dataset evaluation runs
    /// over this union space.
    pub fn union(self, other: LabelRange) -> LabelRange {
        LabelRange {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    /// Zero-based index of a label within this range (model output slot).
    pub fn index_of(self, label: SeaStateLabel) -> Option<usize> {
        self.contains(label.value())
            .then(|| usize::from(label.value() - self.min))
    }
}

impl fmt::Display for LabelRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min, self.max)
    }
}

impl FromStr for LabelRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (min, max) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("label range '{s}' is not 'min-max'")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u8>()
                .map_err(|_| Error::Config(format!("label range '{s}' has non-integer bound")))
        };
        LabelRange::new(parse(min)?, parse(max)?)
    }
}

// ---------------------------------------------------------------------------
// Sessions and crop geometry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadingCondition {
    Cargo,
    Ballast,
}

impl fmt::Display for LoadingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoadingCondition::Cargo => "cargo",
            LoadingCondition::Ballast => "ballast",
        })
    }
}

impl FromStr for LoadingCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cargo" => Ok(LoadingCondition::Cargo),
            "ballast" => Ok(LoadingCondition::Ballast),
            other => Err(Error::Config(format!(
                "loading condition must be cargo|ballast, got '{other}'"
            ))),
        }
    }
}

/// Axis-aligned pixel rectangle; (x, y) is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct CropRegion {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRegion {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        CropRegion {
            x,
            y,
            width,
            height,
        }
    }

    pub fn fits_in(&self, frame_w: usize, frame_h: usize) -> bool {
        self.x + self.width <= frame_w && self.y + self.height <= frame_h
    }

    pub fn intersects(&self, other: &CropRegion) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }

    /// "x,y,w,h" — the session-index encoding.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("region '{s}' is not 'x,y,w,h'")));
        }
        let mut vals = [0usize; 4];
        for (slot, part) in vals.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| Error::Config(format!("region '{s}' has non-integer field")))?;
        }
        Ok(CropRegion::new(vals[0], vals[1], vals[2], vals[3]))
    }
}

impl fmt::Display for CropRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.width, self.height)
    }
}

/// One labeled source video (or a stand-in directory of frames).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VideoSession {
    pub id: String,
    pub path: PathBuf,
    pub label: SeaStateLabel,
    pub frame_count: usize,
    pub duration_s: f64,
    /// (width, height) in pixels.
    pub resolution: (usize, usize),
    pub camera_height_m: f64,
    pub loading_condition: LoadingCondition,
    /// Rectangle within which R-strategy crops may fall; excludes sky, hull,
    /// and wake. Optional here, required at build time for strategy R.
    pub sea_region: Option<CropRegion>,
}

impl VideoSession {
    pub fn validate(&self, crop_size: usize) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::Data(format!("session {}: no frames", self.id)));
        }
        let (w, h) = self.resolution;
        if w < crop_size || h < crop_size {
            return Err(Error::Geometry(format!(
                "session {}: resolution {w}x{h} below crop size {crop_size}",
                self.id
            )));
        }
        if let Some(sr) = &self.sea_region {
            if !sr.fits_in(w, h) {
                return Err(Error::Geometry(format!(
                    "session {}: sea region {sr} exceeds frame {w}x{h}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Strategy / split enums
// ---------------------------------------------------------------------------

/// Crop placement strategy. `Horizon` is a recognized but disabled variant
/// (horizon-anchored crops carry no guarantees); building with it fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "LL")]
    LL,
    #[serde(rename = "R")]
    R,
    CenterEval,
    Horizon,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::LL => "LL",
            Strategy::R => "R",
            Strategy::CenterEval => "center_eval",
            Strategy::Horizon => "horizon",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LL" | "ll" => Ok(Strategy::LL),
            "R" | "r" => Ok(Strategy::R),
            "center_eval" => Ok(Strategy::CenterEval),
            "horizon" => Ok(Strategy::Horizon),
            other => Err(Error::Config(format!(
                "strategy must be LL|R|center_eval|horizon, got '{other}'"
            ))),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "split must be train|val|test, got '{other}'"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Records and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub session_id: String,
    pub frame_index: usize,
    pub crop: CropRegion,
    pub label: SeaStateLabel,
    pub split: Split,
    pub strategy: Strategy,
}

impl ImageRecord {
    /// Location of the cropped image below the dataset root.
    pub fn relative_path(&self) -> String {
        format!("{}/{}/{}.png", self.split, self.label, self.id)
    }
}

/// Authoritative record of a built dataset. Immutable after build; everything
/// downstream (training, evaluation, profiling) consumes it via this type.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub label_range: LabelRange,
    pub tool_version: String,
    pub records: Vec<ImageRecord>,
}

const MANIFEST_COLUMNS: &str =
    "id\tsession_id\tframe_index\tcrop_x\tcrop_y\tcrop_w\tcrop_h\tlabel\tsplit\tstrategy";

impl DatasetManifest {
    pub fn records_for(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Per-class record counts for one split, keyed by label value. Every
    /// label in the declared range appears, absent classes with count 0.
    pub fn class_counts(&self, split: Split) -> BTreeMap<u8, usize> {
        let mut counts: BTreeMap<u8, usize> = self
            .label_range
            .labels()
            .map(|l| (l.value(), 0))
            .collect();
        for rec in self.records_for(split) {
            *counts.entry(rec.label.value()).or_insert(0) += 1;
        }
        counts
    }

    /// Structural invariants: labels in range, strategy uniform, splits
    /// disjoint by (session_id, frame_index), no duplicated record.
    pub fn validate(&self) -> Result<()> {
        if matches!(self.strategy, Strategy::CenterEval | Strategy::Horizon) {
            return Err(Error::Config(format!(
                "manifest strategy must be LL or R, got {}",
                self.strategy
            )));
        }
        let mut seen: BTreeMap<(&str, usize), Split> = BTreeMap::new();
        for rec in &self.records {
            if !self.label_range.contains(rec.label.value()) {
                return Err(Error::LabelOutOfRange {
                    label: i64::from(rec.label.value()),
                    min: self.label_range.min,
                    max: self.label_range.max,
                });
            }
            if rec.strategy != self.strategy {
                return Err(Error::Data(format!(
                    "record {} has strategy {}, manifest is {}",
                    rec.id, rec.strategy, self.strategy
                )));
            }
            let key = (rec.session_id.as_str(), rec.frame_index);
            if let Some(prev) = seen.insert(key, rec.split) {
                let kind = if prev == rec.split {
                    "duplicated record"
                } else {
                    "frame shared across splits"
                };
                return Err(Error::Data(format!(
                    "{kind}: session {} frame {}",
                    rec.session_id, rec.frame_index
                )));
            }
        }
        Ok(())
    }

    /// Stable line-delimited form: `# key<TAB>value` header block, one column
    /// header, one record per line. Byte-identical across runs per the
    /// determinism contract.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# name\t{}\n", self.name));
        out.push_str(&format!("# strategy\t{}\n", self.strategy));
        out.push_str(&format!("# seed\t{}\n", self.seed));
        out.push_str(&format!("# label_range\t{}\n", self.label_range));
        out.push_str(&format!("# tool_version\t{}\n", self.tool_version));
        out.push_str(MANIFEST_COLUMNS);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.session_id,
                r.frame_index,
                r.crop.x,
                r.crop.y,
                r.crop.width,
                r.crop.height,
                r.label,
                r.split,
                r.strategy
            ));
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_tsv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut headers: BTreeMap<String, String> = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, line)) = lines.peek() {
            let Some(rest) = line.strip_prefix("# ") else {
                break;
            };
            let (lineno, _) = lines.next().expect("peeked");
            let (key, value) = rest
                .split_once('\t')
                .ok_or_else(|| err(lineno + 1, "header is not '# key<TAB>value'".into()))?;
            headers.insert(key.to_string(), value.to_string());
        }
        let header = |key: &str| {
            headers
                .get(key)
                .cloned()
                .ok_or_else(|| err(1, format!("missing '# {key}' header")))
        };
        let (colno, columns) = lines
            .next()
            .ok_or_else(|| err(1, "manifest has no column header".into()))?;
        if columns != MANIFEST_COLUMNS {
            return Err(err(colno + 1, format!("unexpected columns '{columns}'")));
        }

        let label_range: LabelRange = header("label_range")?.parse()?;
        let strategy: Strategy = header("strategy")?.parse()?;
        let seed: u64 = header("seed")?
            .parse()
            .map_err(|_| err(1, "seed is not an integer".into()))?;

        let mut records = Vec::new();
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 10 {
                return Err(err(lineno + 1, format!("expected 10 fields, got {}", fields.len())));
            }
            let int = |idx: usize| -> Result<usize> {
                fields[idx]
                    .parse()
                    .map_err(|_| err(lineno + 1, format!("field {} is not an integer", idx + 1)))
            };
            let label_value: i64 = fields[7]
                .parse()
                .map_err(|_| err(lineno + 1, "label is not an integer".into()))?;
            records.push(ImageRecord {
                id: fields[0].to_string(),
                session_id: fields[1].to_string(),
                frame_index: int(2)?,
                crop: CropRegion::new(int(3)?, int(4)?, int(5)?, int(6)?),
                label: SeaStateLabel::new(label_value, label_range)?,
                split: fields[8].parse()?,
                strategy: fields[9].parse()?,
            });
        }
        let manifest = DatasetManifest {
            name: header("name")?,
            strategy,
            seed,
            label_range,
            tool_version: header("tool_version")?,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// SHA-256 of the serialized manifest; recorded by training runs so a
    /// result can be traced to the exact dataset it saw.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Sampling plan
// ---------------------------------------------------------------------------

/// interval = floor(frame_count / target); taking every interval-th frame and
/// truncating to `target` then yields at least `target` candidates.
pub fn compute_sampling_interval(frame_count: usize, target: usize) -> Result<usize> {
    if target == 0 {
        return Err(Error::Config("sampling target must be positive".into()));
    }
    if frame_count < target {
        return Err(Error::Data(format!(
            "{frame_count} frames cannot supply {target} samples"
        )));
    }
    Ok(frame_count / target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PlanEntry {
    pub label: SeaStateLabel,
    pub split: Split,
    pub interval: usize,
    pub target: usize,
    pub available_frames: usize,
}

/// Per-(class, split) sampling intervals, derived before any pixel is read.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SamplingPlan {
    pub entries: Vec<PlanEntry>,
}

// ---------------------------------------------------------------------------
// Frame sources
// ---------------------------------------------------------------------------

/// Supplies decoded frames for sessions. Implementations: a directory of
/// pre-extracted PNG frames ([`FrameDirSource`]) and the procedural synthetic
/// generator (`synth` module). Must be `Sync`: extraction runs in parallel.
pub trait FrameSource: Sync {
    fn frame(&self, session: &VideoSession, frame_index: usize) -> Result<Image>;
}

/// Frames stored as PNG files in one directory per session (the session's
/// `path`), ordered by file name.
pub struct FrameDirSource;

impl FrameDirSource {
    fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(dir, e))?
            .into_iter()
            .map(|entry| entry.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
            .collect();
        files.sort();
        Ok(files)
    }

    /// Count frames and read the first frame's resolution, completing a
    /// [`SessionIndexEntry`] into a [`VideoSession`].
    pub fn probe(dir: &Path) -> Result<(usize, (usize, usize))> {
        let files = Self::frame_files(dir)?;
        let first = files
            .first()
            .ok_or_else(|| Error::Data(format!("no PNG frames in {}", dir.display())))?;
        let (_, (h, w)) = load_png_rgb8(first)?;
        Ok((files.len(), (w, h)))
    }
}

impl FrameSource for FrameDirSource {
    fn frame(&self, session: &VideoSession, frame_index: usize) -> Result<Image> {
        let files = Self::frame_files(&session.path)?;
        let path = files.get(frame_index).ok_or_else(|| {
            Error::Data(format!(
                "session {}: frame {frame_index} out of range ({} files)",
                session.id,
                files.len()
            ))
        })?;
        let (bytes, (h, w)) = load_png_rgb8(path)?;
        Ok(rgb8_to_image(&bytes, h, w))
    }
}

// ---------------------------------------------------------------------------
// Session index file
// ---------------------------------------------------------------------------

/// One row of the session index: everything the operator declares per video.
/// Frame count and resolution are probed from the source, not declared.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SessionIndexEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: SeaStateLabel,
    pub camera_height_m: f64,
    pub loading_condition: LoadingCondition,
    pub sea_region: Option<CropRegion>,
}

impl SessionIndexEntry {
    pub fn into_session(
        self,
        frame_count: usize,
        resolution: (usize, usize),
        fps: f64,
    ) -> VideoSession {
        VideoSession {
            id: self.id,
            path: self.path,
            label: self.label,
            frame_count,
            duration_s: frame_count as f64 / fps,
            resolution,
            camera_height_m: self.camera_height_m,
            loading_condition: self.loading_condition,
            sea_region: self.sea_region,
        }
    }
}

const SESSION_COLUMNS: &str = "id\tpath\tlabel\tcamera_height_m\tloading_condition\tsea_region";

pub fn read_session_index(path: &Path, label_range: LabelRange) -> Result<Vec<SessionIndexEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty session index".into()))?;
    if header != SESSION_COLUMNS {
        return Err(err(1, format!("expected header '{SESSION_COLUMNS}'")));
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(lineno + 1, format!("expected 6 fields, got {}", fields.len())));
        }
        let label_value: i64 = fields[2]
            .parse()
            .map_err(|_| err(lineno + 1, "label is not an integer".into()))?;
        entries.push(SessionIndexEntry {
            id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            label: SeaStateLabel::new(label_value, label_range)?,
            camera_height_m: fields[3]
                .parse()
                .map_err(|_| err(lineno + 1, "camera height is not a number".into()))?,
            loading_condition: fields[4].parse()?,
            sea_region: match fields[5] {
                "" | "-" => None,
                region => Some(CropRegion::parse(region)?),
            },
        });
    }
    Ok(entries)
}

pub fn write_session_index(path: &Path, entries: &[SessionIndexEntry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = String::from(SESSION_COLUMNS);
    out.push('\n');
    for e in entries {
        let region = e
            .sea_region
            .map_or_else(|| "-".to_string(), |r| r.to_string());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.path.display(),
            e.label,
            e.camera_height_m,
            e.loading_condition,
            region
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Crop extraction
// ---------------------------------------------------------------------------

/// Place one crop according to the strategy and return the exact pixel copy
/// plus its region. LL uses a fixed offset from the bottom-left corner; R
/// samples uniformly within `sea_region` (y drawn first, then x); center_eval
/// centers the region; horizon is disabled.
pub fn extract_crop<R: Rng>(
    frame: &Image,
    strategy: Strategy,
    sea_region: Option<&CropRegion>,
    ll_offset: (usize, usize),
    crop_size: usize,
    rng: &mut R,
) -> Result<(Image, CropRegion)> {
    let (h, w) = hw(frame);
    if h < crop_size || w < crop_size {
        return Err(Error::Geometry(format!(
            "{crop_size}x{crop_size} crop from {w}x{h} frame"
        )));
    }
    let region = match strategy {
        Strategy::LL => {
            let (dx, dy) = ll_offset;
            if dx + crop_size > w || dy + crop_size > h {
                return Err(Error::Geometry(format!(
                    "LL offset ({dx},{dy}) pushes crop outside {w}x{h} frame"
                )));
            }
            CropRegion::new(dx, h - crop_size - dy, crop_size, crop_size)
        }
        Strategy::R => {
            let sr = sea_region.ok_or_else(|| {
                Error::Config("strategy R requires a sea_region for the session".into())
            })?;
            if !sr.fits_in(w, h) {
                return Err(Error::Geometry(format!(
                    "sea region {sr} exceeds frame {w}x{h}"
                )));
            }
            if sr.width < crop_size || sr.height < crop_size {
                return Err(Error::Geometry(format!(
                    "sea region {sr} smaller than {crop_size}x{crop_size} crop"
                )));
            }
            let y = rng.gen_range(sr.y..=sr.y + sr.height - crop_size);
            let x = rng.gen_range(sr.x..=sr.x + sr.width - crop_size);
            CropRegion::new(x, y, crop_size, crop_size)
        }
        Strategy::CenterEval => CropRegion::new(
            (w - crop_size) / 2,
            (h - crop_size) / 2,
            crop_size,
            crop_size,
        ),
        Strategy::Horizon => {
            return Err(Error::Config(
                "horizon strategy is documented but disabled; use LL or R".into(),
            ))
        }
    };
    let image = crop(frame, region.x, region.y, region.width, region.height)?;
    Ok((image, region))
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------

/// Per-class record targets per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BuildTargets {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl BuildTargets {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn for_split(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// How held-out frames are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutMode {
    /// Contiguous trailing frame ranges of every session go to val/test.
    TrailingFrames,
    /// Whole sessions are assigned to exactly one split (stronger protocol;
    /// needs several sessions per class).
    PerSession,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BuildOptions {
    pub name: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub targets: BuildTargets,
    pub label_range: LabelRange,
    /// LL anchor offset (dx from left, dy up from bottom).
    pub ll_offset: (usize, usize),
    pub holdout: HoldoutMode,
    /// Fallback sea region for sessions that declare none (strategy R).
    pub default_sea_region: Option<CropRegion>,
    /// Per-session rectangles that vetoes any intersecting crop (wake marks).
    pub exclusion_masks: BTreeMap<String, Vec<CropRegion>>,
    /// Accepted per-class shortfall fraction before the build aborts.
    pub tolerance: f64,
    pub crop_size: usize,
    /// Write cropped PNGs; off for manifest-only dry runs.
    pub write_images: bool,
}

impl BuildOptions {
    pub fn new(name: &str, strategy: Strategy, seed: u64, targets: BuildTargets) -> Self {
        BuildOptions {
            name: name.to_string(),
            strategy,
            seed,
            targets,
            label_range: LabelRange::NATIVE,
            ll_offset: (0, 0),
            holdout: HoldoutMode::TrailingFrames,
            default_sea_region: None,
            exclusion_masks: BTreeMap::new(),
            tolerance: 0.10,
            crop_size: CROP_SIZE,
            write_images: true,
        }
    }
}

/// Frame index interval [start, end) a session contributes to one split.
#[derive(Debug, Clone, Copy)]
struct SessionRange<'a> {
    session: &'a VideoSession,
    start: usize,
    end: usize,
}

impl SessionRange<'_> {
    fn len(&self) -> usize {
        self.end - self.start
    }
}

/// Split one session's frame range into train/val/test sub-ranges
/// proportional to the targets, val and test taken from the tail.
fn trailing_ranges<'a>(
    session: &'a VideoSession,
    targets: &BuildTargets,
) -> [(Split, SessionRange<'a>); 3] {
    let n = session.frame_count;
    let total = targets.total();
    let train_end = n * targets.train / total;
    let val_end = n * (targets.train + targets.val) / total;
    [
        (
            Split::Train,
            SessionRange {
                session,
                start: 0,
                end: train_end,
            },
        ),
        (
            Split::Val,
            SessionRange {
                session,
                start: train_end,
                end: val_end,
            },
        ),
        (
            Split::Test,
            SessionRange {
                session,
                start: val_end,
                end: n,
            },
        ),
    ]
}

/// Assign whole sessions (sorted by id) to splits, filling test, then val,
/// then train, by cumulative frame share.
fn per_session_ranges<'a>(
    sessions: &[&'a VideoSession],
    targets: &BuildTargets,
) -> BTreeMap<Split, Vec<SessionRange<'a>>> {
    let total_frames: usize = sessions.iter().map(|s| s.frame_count).sum();
    let total = targets.total();
    let want_test = total_frames * targets.test / total;
    let want_val = total_frames * targets.val / total;
    let mut ranges: BTreeMap<Split, Vec<SessionRange<'a>>> =
        Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    let mut assigned_test = 0usize;
    let mut assigned_val = 0usize;
    // Walk from the back so the lexically-last sessions hold out, mirroring
    // the trailing-frames convention.
    for session in sessions.iter().rev() {
        let split = if assigned_test < want_test && targets.test > 0 {
            assigned_test += session.frame_count;
            Split::Test
        } else if assigned_val < want_val && targets.val > 0 {
            assigned_val += session.frame_count;
            Split::Val
        } else {
            Split::Train
        };
        ranges.get_mut(&split).expect("all splits present").push(SessionRange {
            session,
            start: 0,
            end: session.frame_count,
        });
    }
    for list in ranges.values_mut() {
        list.sort_by(|a, b| a.session.id.cmp(&b.session.id));
    }
    ranges
}

fn region_vetoed(region: &CropRegion, masks: &[CropRegion]) -> bool {
    masks.iter().any(|m| region.intersects(m))
}

/// Derive the sampling plan and select (session, frame, crop region) for every
/// record, without touching pixels. Returns records sorted by
/// (label, session_id, frame_index).
fn plan_records(
    sessions: &[VideoSession],
    opts: &BuildOptions,
) -> Result<(SamplingPlan, Vec<ImageRecord>)> {
    if !matches!(opts.strategy, Strategy::LL | Strategy::R) {
        return Err(Error::Config(format!(
            "build strategy must be LL or R, got {}",
            opts.strategy
        )));
    }
    if !(0.0..1.0).contains(&opts.tolerance) {
        return Err(Error::Config(format!(
            "tolerance must be in [0,1), got {}",
            opts.tolerance
        )));
    }
    for session in sessions {
        session.validate(opts.crop_size)?;
    }

    let mut by_label: BTreeMap<SeaStateLabel, Vec<&VideoSession>> = BTreeMap::new();
    for session in sessions {
        by_label.entry(session.label).or_default().push(session);
    }
    for label in opts.label_range.labels() {
        if !by_label.contains_key(&label) {
            return Err(Error::Data(format!("class {label} has no sessions")));
        }
    }
    for list in by_label.values_mut() {
        list.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in list.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Data(format!("duplicate session id {}", pair[0].id)));
            }
        }
    }

    let mut plan = SamplingPlan {
        entries: Vec::new(),
    };
    let mut records: Vec<ImageRecord> = Vec::new();
    let mut shortfalls: Vec<String> = Vec::new();

    for (label, class_sessions) in &by_label {
        // Frame ranges each session contributes to each split.
        let mut ranges: BTreeMap<Split, Vec<SessionRange>> = match opts.holdout {
            HoldoutMode::TrailingFrames => {
                let mut map: BTreeMap<Split, Vec<SessionRange>> =
                    Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
                for session in class_sessions {
                    for (split, range) in trailing_ranges(session, &opts.targets) {
                        map.get_mut(&split).expect("all splits present").push(range);
                    }
                }
                map
            }
            HoldoutMode::PerSession => per_session_ranges(class_sessions, &opts.targets),
        };

        for split in Split::ALL {
            let target = opts.targets.for_split(split);
            let split_ranges = ranges.remove(&split).unwrap_or_default();
            if target == 0 {
                continue;
            }
            let available: usize = split_ranges.iter().map(SessionRange::len).sum();
            let interval = match compute_sampling_interval(available, target) {
                Ok(i) => i,
                Err(_) => {
                    shortfalls.push(format!(
                        "class {label} {split}: need {target}, only {available} frames"
                    ));
                    continue;
                }
            };
            plan.entries.push(PlanEntry {
                label: *label,
                split,
                interval,
                target,
                available_frames: available,
            });

            let mut selected = 0usize;
            'sessions: for range in &split_ranges {
                let session = range.session;
                let masks = opts
                    .exclusion_masks
                    .get(&session.id)
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let (w, h) = session.resolution;
                let mut frame_index = range.start;
                while frame_index < range.end {
                    if selected == target {
                        break 'sessions;
                    }
                    let region = match opts.strategy {
                        Strategy::LL => {
                            let (dx, dy) = opts.ll_offset;
                            if dx + opts.crop_size > w || dy + opts.crop_size > h {
                                return Err(Error::Geometry(format!(
                                    "session {}: LL offset ({dx},{dy}) pushes crop outside {w}x{h}",
                                    session.id
                                )));
                            }
                            let region = CropRegion::new(
                                dx,
                                h - opts.crop_size - dy,
                                opts.crop_size,
                                opts.crop_size,
                            );
                            (!region_vetoed(&region, masks)).then_some(region)
                        }
                        Strategy::R => {
                            let sr = session
                                .sea_region
                                .or(opts.default_sea_region)
                                .ok_or_else(|| {
                                    Error::Config(format!(
                                        "session {}: strategy R requires a sea_region",
                                        session.id
                                    ))
                                })?;
                            if !sr.fits_in(w, h)
                                || sr.width < opts.crop_size
                                || sr.height < opts.crop_size
                            {
                                return Err(Error::Geometry(format!(
                                    "session {}: sea region {sr} cannot hold a {cs}x{cs} crop in {w}x{h}",
                                    session.id,
                                    cs = opts.crop_size
                                )));
                            }
                            let mut rng = derive(
                                opts.seed,
                                &[tag("crop"), tag(&session.id), frame_index as u64],
                            );
                            let mut placed = None;
                            for _ in 0..=MASK_RETRIES {
                                let region = CropRegion::new(
                                    rng.gen_range(sr.x..=sr.x + sr.width - opts.crop_size),
                                    rng.gen_range(sr.y..=sr.y + sr.height - opts.crop_size),
                                    opts.crop_size,
                                    opts.crop_size,
                                );
                                if !region_vetoed(&region, masks) {
                                    placed = Some(region);
                                    break;
                                }
                            }
                            placed
                        }
                        _ => unreachable!("strategy checked above"),
                    };
                    if let Some(region) = region {
                        records.push(ImageRecord {
                            id: format!("{}_f{:07}", session.id, frame_index),
                            session_id: session.id.clone(),
                            frame_index,
                            crop: region,
                            label: *label,
                            split,
                            strategy: opts.strategy,
                        });
                        selected += 1;
                    }
                    frame_index += interval;
                }
            }
            let floor = ((target as f64) * (1.0 - opts.tolerance)).ceil() as usize;
            if selected < floor {
                shortfalls.push(format!(
                    "class {label} {split}: need {target} (-{:.0}%), selected {selected}",
                    opts.tolerance * 100.0
                ));
            }
        }
    }

    if !shortfalls.is_empty() {
        return Err(Error::Shortfall {
            report: shortfalls.join("; "),
        });
    }
    records.sort_by(|a, b| {
        (a.label, &a.session_id, a.frame_index).cmp(&(b.label, &b.session_id, b.frame_index))
    });
    Ok((plan, records))
}

/// Build the dataset: plan per-class sampling, extract crops, write PNGs and
/// the manifest below `out_dir`. Deterministic given (sessions, opts).
pub fn build_dataset(
    sessions: &[VideoSession],
    source: &dyn FrameSource,
    opts: &BuildOptions,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (_, records) = plan_records(sessions, opts)?;
    let manifest = DatasetManifest {
        name: opts.name.clone(),
        strategy: opts.strategy,
        seed: opts.seed,
        label_range: opts.label_range,
        tool_version: crate::TOOL_VERSION.to_string(),
        records,
    };
    manifest.validate()?;

    if opts.write_images {
        let sessions_by_id: BTreeMap<&str, &VideoSession> =
            sessions.iter().map(|s| (s.id.as_str(), s)).collect();
        let write_one = |record: &ImageRecord| -> Result<()> {
            let session = sessions_by_id[record.session_id.as_str()];
            let frame = source.frame(session, record.frame_index)?;
            let (h, w) = hw(&frame);
            if (w, h) != session.resolution {
                return Err(Error::Geometry(format!(
                    "session {}: source frame is {w}x{h}, session declares {}x{}",
                    session.id, session.resolution.0, session.resolution.1
                )));
            }
            let image = crop(
                &frame,
                record.crop.x,
                record.crop.y,
                record.crop.width,
                record.crop.height,
            )?;
            save_png(&image, &out_dir.join(record.relative_path()))
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            manifest.records.par_iter().try_for_each(write_one)?;
        }
        #[cfg(not(feature = "parallel"))]
        manifest.records.iter().try_for_each(write_one)?;
    }

    manifest.write_to(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Plan without pixels: the sampling intervals and records build_dataset
/// would produce. Exposed for inspection and dry runs.
pub fn plan_dataset(
    sessions: &[VideoSession],
    opts: &BuildOptions,
) -> Result<(SamplingPlan, Vec<ImageRecord>)> {
    plan_records(sessions, opts)
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// max/min over per-class counts; infinite when some class is empty.
pub fn balance_ratio<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let mut min = usize::MAX;
    let mut max = 0usize;
    let mut any = false;
    for c in counts {
        any = true;
        min = min.min(c);
        max = max.max(c);
    }
    if !any || max == 0 {
        return 1.0;
    }
    if min == 0 {
        return f64::INFINITY;
    }
    max as f64 / min as f64
}

const BALANCE_RATIO_LIMIT: f64 = 1.1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitBalance {
    pub split: Split,
    pub counts: BTreeMap<u8, usize>,
    pub total: usize,
    pub ratio: f64,
    pub flagged: bool,
}

/// Always produced, never an error: violations are entries in `flags`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BalanceReport {
    pub splits: Vec<SplitBalance>,
    pub disjoint: bool,
    pub duplicate_records: usize,
    pub flags: Vec<String>,
}

impl BalanceReport {
    pub fn balanced(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("split\tclass\tcount\n");
        for sb in &self.splits {
            for (label, count) in &sb.counts {
                out.push_str(&format!("{}\t{label}\t{count}\n", sb.split));
            }
            out.push_str(&format!(
                "{}\ttotal {} ratio {:.3}{}\n",
                sb.split,
                sb.total,
                sb.ratio,
                if sb.flagged { " imbalanced" } else { "" }
            ));
        }
        out.push_str(&format!(
            "disjoint\t{}\nduplicates\t{}\n",
            self.disjoint, self.duplicate_records
        ));
        if self.flags.is_empty() {
            out.push_str("balanced\ttrue\n");
        } else {
            for flag in &self.flags {
                out.push_str(&format!("flag\t{flag}\n"));
            }
        }
        out
    }
}

/// Per-class counts, max/min ratio per split, split disjointness and
/// duplicate detection; imbalance flagged when the ratio exceeds 1.1.
pub fn verify_manifest(manifest: &DatasetManifest) -> BalanceReport {
    let mut flags = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let counts = manifest.class_counts(split);
        let total: usize = counts.values().sum();
        // Classes with no records at all (split unused) don't count against
        // balance; a split is judged over the classes it actually has.
        let ratio = if total == 0 {
            1.0
        } else {
            balance_ratio(counts.values().copied())
        };
        let flagged = ratio > BALANCE_RATIO_LIMIT;
        if flagged {
            flags.push(format!("{split}: class ratio {ratio:.3} exceeds {BALANCE_RATIO_LIMIT}"));
        }
        splits.push(SplitBalance {
            split,
            counts,
            total,
            ratio,
            flagged,
        });
    }

    let mut seen: BTreeMap<(&str, usize), Split> = BTreeMap::new();
    let mut duplicate_records = 0usize;
    let mut disjoint = true;
    for rec in &manifest.records {
        if let Some(prev) = seen.insert((rec.session_id.as_str(), rec.frame_index), rec.split) {
            if prev == rec.split {
                duplicate_records += 1;
            } else {
                disjoint = false;
            }
        }
    }
    if !disjoint {
        flags.push("splits share (session, frame) pairs".to_string());
    }
    if duplicate_records > 0 {
        flags.push(format!("{duplicate_records} duplicated records"));
    }
    BalanceReport {
        splits,
        disjoint,
        duplicate_records,
        flags,
    }
}

// ---------------------------------------------------------------------------
// Split loading (the trainer/evaluator input path)
// ---------------------------------------------------------------------------

/// One split's images held as raw RGB bytes (4x smaller than floats), decoded
/// to float on demand.
pub struct SplitData {
    pub records: Vec<ImageRecord>,
    rgb: Vec<Box<[u8]>>,
    pub height: usize,
    pub width: usize,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, index: usize) -> Image {
        rgb8_to_image(&self.rgb[index], self.height, self.width)
    }

    pub fn label(&self, index: usize) -> SeaStateLabel {
        self.records[index].label
    }
}

/// Load every image of one split into memory. All images must share one
/// resolution (dataset crops are square and uniform by construction).
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<SplitData> {
    let records: Vec<ImageRecord> = manifest.records_for(split).cloned().collect();
    if records.is_empty() {
        return Err(Error::Data(format!("split {split} has no records")));
    }
    let load_one = |rec: &ImageRecord| -> Result<(Box<[u8]>, (usize, usize))> {
        let (bytes, dims) = load_png_rgb8(&root.join(rec.relative_path()))?;
        Ok((bytes.into_boxed_slice(), dims))
    };
    #[cfg(feature = "parallel")]
    let loaded: Vec<(Box<[u8]>, (usize, usize))> = {
        use rayon::prelude::*;
        records.par_iter().map(load_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let loaded: Vec<(Box<[u8]>, (usize, usize))> =
        records.iter().map(load_one).collect::<Result<_>>()?;

    let (h, w) = loaded[0].1;
    let mut rgb = Vec::with_capacity(loaded.len());
    for (i, (bytes, dims)) in loaded.into_iter().enumerate() {
        if dims != (h, w) {
            return Err(Error::Data(format!(
                "split {split}: image {} is {}x{}, expected {w}x{h}",
                records[i].id, dims.1, dims.0
            )));
        }
        rgb.push(bytes);
    }
    Ok(SplitData {
        records,
        rgb,
        height: h,
        width: w,
    })
}
