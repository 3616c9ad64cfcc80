//! Synthetic longitudinal cohort: brain-like ellipses with five bright
//! regions that shrink (atrophy) or grow (ventricles, CSF) with age, plus the
//! on-disk dataset format and subject-level splits.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controlnet::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"MBIM";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Hippocampus,
    Amygdala,
    LatVentricle,
    Thalamus,
    Csf,
}

impl Region {
    /// Fixed order used for mask planes, reports and CSV columns.
    pub const ALL: [Region; 5] = [
        Region::Hippocampus,
        Region::Amygdala,
        Region::LatVentricle,
        Region::Thalamus,
        Region::Csf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Hippocampus => "hippocampus",
            Region::Amygdala => "amygdala",
            Region::LatVentricle => "lat_ventricle",
            Region::Thalamus => "thalamus",
            Region::Csf => "csf",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the region expands with age.
    pub fn grows(self) -> bool {
        matches!(self, Region::LatVentricle | Region::Csf)
    }

    fn intensity(self) -> f64 {
        match self {
            Region::Hippocampus => 0.80,
            Region::Amygdala => 0.75,
            Region::LatVentricle => 0.95,
            Region::Thalamus => 0.70,
            Region::Csf => 0.90,
        }
    }
}

/// Binary region masks, one plane per [`Region::ALL`] entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub height: usize,
    pub width: usize,
    planes: Vec<Vec<u8>>,
}

impl RegionMasks {
    pub fn new(height: usize, width: usize, planes: Vec<Vec<u8>>) -> Result<Self> {
        if planes.len() != Region::ALL.len() || planes.iter().any(|p| p.len() != height * width) {
            return Err(Error::invalid(format!(
                "region masks need {} planes of {height}x{width}",
                Region::ALL.len()
            )));
        }
        Ok(Self { height, width, planes })
    }

    pub fn plane(&self, r: Region) -> &[u8] {
        &self.planes[r.index()]
    }

    pub fn area(&self, r: Region) -> usize {
        self.plane(r).iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub age: f64,
    /// `(H, W)`, values in `[0, 1]`, each exactly representable as `f32`.
    pub image: Tensor,
    pub masks: RegionMasks,
}

/// Per-subject anatomy: the brain ellipse and the baseline size of every
/// region, all in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub hippocampus: Vec<Disc>,
    pub amygdala: Vec<Disc>,
    pub lat_ventricle: Vec<Disc>,
    pub thalamus: Vec<Disc>,
    /// Baseline thickness of the superior CSF crescent inside the brain rim.
    pub csf_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Geometry {
    /// Pixels whose centers lie inside the brain ellipse.
    pub fn brain_mask(&self, height: usize, width: usize) -> Vec<u8> {
        let mut out = vec![0; height * width];
        for y in 0..height {
            for x in 0..width {
                out[y * width + x] = u8::from(self.ellipse_radius(x as f64 + 0.5, y as f64 + 0.5) < 1.0);
            }
        }
        out
    }

    fn ellipse_radius(&self, px: f64, py: f64) -> f64 {
        let dx = (px - self.center.0) / self.axes.0;
        let dy = (py - self.center.1) / self.axes.1;
        (dx * dx + dy * dy).sqrt()
    }

    fn discs(&self, r: Region) -> &[Disc] {
        match r {
            Region::Hippocampus => &self.hippocampus,
            Region::Amygdala => &self.amygdala,
            Region::LatVentricle => &self.lat_ventricle,
            Region::Thalamus => &self.thalamus,
            Region::Csf => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// 0 or 1.
    pub sex: u8,
    pub baseline_age: f64,
    pub progression_rate: f64,
    pub geometry: Geometry,
    pub visits: Vec<Visit>,
}

impl Subject {
    pub fn brain_mask(&self) -> Vec<u8> {
        let img = &self.visits[0].image;
        self.geometry.brain_mask(img.shape()[0], img.shape()[1])
    }
}

/// Generator settings shared by a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortParams {
    pub image_size: usize,
    pub visits: usize,
    /// Progression rate is drawn uniformly from `[rate_min, rate_max]`
    /// (fractional radius change per year).
    pub rate_min: f64,
    pub rate_max: f64,
    /// Half-width of the i.i.d. uniform pixel noise.
    pub noise: f64,
    /// Jitter of region centers, as a fraction of image size.
    pub jitter: f64,
}

impl Default for CohortParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            visits: 5,
            rate_min: 0.02,
            rate_max: 0.06,
            noise: 0.02,
            jitter: 0.02,
        }
    }
}

impl CohortParams {
    fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid(format!(
                "geometry overflow: image size {} is below the 16-pixel minimum",
                self.image_size
            )));
        }
        if self.visits < 2 {
            return Err(Error::invalid("every subject needs at least 2 visits"));
        }
        if !(0.0 <= self.rate_min && self.rate_min <= self.rate_max && self.rate_max < 0.1) {
            return Err(Error::invalid(format!(
                "progression rate range [{}, {}] must satisfy 0 <= min <= max < 0.1",
                self.rate_min, self.rate_max
            )));
        }
        if !(0.0..0.25).contains(&self.noise) || !(0.0..=0.05).contains(&self.jitter) {
            return Err(Error::invalid("noise must lie in [0, 0.25) and jitter in [0, 0.05]"));
        }
        Ok(())
    }
}

const TISSUE: f64 = 0.35;
/// Width (pixels) of the logistic edge blending regions into tissue.
const EDGE: f64 = 0.25;
/// Fractional-radius bound on shrinking regions so they never vanish.
const MIN_SCALE: f64 = 0.35;
/// Progression-rate multiplier for sex = 1.
const SEX_FACTOR: f64 = 1.15;

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Radius scale of a region `years` after baseline.
fn scale(region: Region, rate: f64, years: f64) -> f64 {
    if region.grows() {
        1.0 + 1.5 * rate * years
    } else {
        (1.0 - rate * years).max(MIN_SCALE)
    }
}

/// Signed distance-like score, positive inside the region.
fn region_score(g: &Geometry, region: Region, s: f64, px: f64, py: f64) -> f64 {
    match region {
        Region::Csf => {
            // Crescent along the upper rim: inside the brain, within `width`
            // of the boundary (measured along the minor axis) and above center.
            let width = g.csf_width * s;
            let rho = g.ellipse_radius(px, py);
            let inner = 1.0 - width / g.axes.1;
            let upper = g.center.1 - 0.25 * g.axes.1 - py;
            let depth = (rho - inner) * g.axes.1;
            let edge = (1.0 - rho) * g.axes.1;
            depth.min(edge - 0.4).min(upper)
        }
        _ => g
            .discs(region)
            .iter()
            .map(|d| d.r * s - ((px - d.x).powi(2) + (py - d.y).powi(2)).sqrt())
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Mask ownership order: expanding regions claim contested pixels first, so
/// every region's area stays monotone as the others change.
const CLAIM_ORDER: [Region; 5] = [
    Region::LatVentricle,
    Region::Csf,
    Region::Hippocampus,
    Region::Amygdala,
    Region::Thalamus,
];

/// Minimum score (pixels inside the soft boundary) for a pixel to count as
/// part of a region's mask.
const MASK_DEPTH: f64 = 0.0;

fn render(g: &Geometry, rate: f64, years: f64, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, RegionMasks)> {
    let mut img = vec![0.0; size * size];
    let mut planes = vec![vec![0u8; size * size]; Region::ALL.len()];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rho = g.ellipse_radius(px, py);
            let brain = logistic((1.0 - rho) * g.axes.1 / EDGE);
            let mut v = TISSUE * brain;
            let mut claimed = false;
            for r in CLAIM_ORDER {
                let score = region_score(g, r, scale(r, rate, years), px, py);
                let w = logistic(score / EDGE);
                v += (r.intensity() - v) * w * brain;
                if score > MASK_DEPTH && rho < 1.0 && !claimed {
                    planes[r.index()][y * size + x] = 1;
                    claimed = true;
                }
            }
            let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            img[y * size + x] = ((v + n).clamp(0.0, 1.0) as f32) as f64;
        }
    }
    Ok((Tensor::new(&[size, size], img)?, RegionMasks::new(size, size, planes)?))
}

fn jittered(rng: &mut ChaCha8Rng, p: &CohortParams, x: f64, y: f64, r: f64) -> Disc {
    let s = p.image_size as f64;
    let j = p.jitter * s;
    Disc {
        x: x * s + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 },
        y: y * s + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 },
        r: r * s * rng.random_range(0.9..=1.1),
    }
}

/// Longest follow-up the generator can produce, in years.
fn max_years(p: &CohortParams) -> f64 {
    (p.visits - 1) as f64 * MAX_GAP
}

const MIN_GAP: f64 = 0.8;
const MAX_GAP: f64 = 2.2;
const GEOMETRY_ATTEMPTS: usize = 64;

fn draw_geometry(rng: &mut ChaCha8Rng, p: &CohortParams) -> Geometry {
    let s = p.image_size as f64;
    let axes = (
        s * rng.random_range(0.39..=0.42),
        s * rng.random_range(0.33..=0.36),
    );
    // canonical positions as fractions of the frame, mirrored left/right
    let hippocampus = vec![
        jittered(rng, p, 0.30, 0.65, 0.06),
        jittered(rng, p, 0.70, 0.65, 0.06),
    ];
    let amygdala = vec![
        jittered(rng, p, 0.29, 0.49, 0.05),
        jittered(rng, p, 0.71, 0.49, 0.05),
    ];
    let lat_ventricle = vec![
        jittered(rng, p, 0.42, 0.42, 0.05),
        jittered(rng, p, 0.58, 0.42, 0.05),
    ];
    let thalamus = vec![jittered(rng, p, 0.5, 0.62, 0.065)];
    Geometry {
        center: (0.5 * s, 0.5 * s),
        axes,
        hippocampus,
        amygdala,
        lat_ventricle,
        thalamus,
        csf_width: s * rng.random_range(0.04..=0.05),
    }
}

/// Why `g` cannot be rendered for the whole follow-up, if it cannot.
fn geometry_problem(g: &Geometry, p: &CohortParams) -> Option<String> {
    let grow = scale(Region::LatVentricle, p.rate_max * SEX_FACTOR, max_years(p));
    let min_axis = g.axes.0.min(g.axes.1);
    let csf_inner = 1.0 - grow * g.csf_width / g.axes.1;
    let discs: Vec<(Region, Disc)> = [Region::Hippocampus, Region::Amygdala, Region::LatVentricle, Region::Thalamus]
        .into_iter()
        .flat_map(|r| g.discs(r).iter().map(move |&d| (r, d)))
        .collect();
    for &(r, d) in &discs {
        let reach = d.r * if r.grows() { grow } else { 1.0 };
        let limit = if r.grows() { csf_inner } else { 1.0 };
        if g.ellipse_radius(d.x, d.y) + (reach + 0.5) / min_axis >= limit {
            return Some(format!(
                "{} disc at ({:.1}, {:.1}) radius {:.1} leaves the brain",
                r.name(),
                d.x,
                d.y,
                reach
            ));
        }
    }
    // shrinking regions never touch each other, so they trade no pixels
    for (i, &(ra, a)) in discs.iter().enumerate() {
        for &(rb, b) in &discs[i + 1..] {
            if ra != rb && !ra.grows() && !rb.grows() && (a.x - b.x).hypot(a.y - b.y) < a.r + b.r + 1.0 {
                return Some(format!("{} and {} discs overlap", ra.name(), rb.name()));
            }
        }
    }
    None
}

/// Draws jittered geometry, redrawing (deterministically) until every region
/// fits for the whole follow-up.
fn sample_geometry(rng: &mut ChaCha8Rng, p: &CohortParams) -> Result<Geometry> {
    let mut last = String::new();
    for _ in 0..GEOMETRY_ATTEMPTS {
        let g = draw_geometry(rng, p);
        match geometry_problem(&g, p) {
            None => return Ok(g),
            Some(why) => last = why,
        }
    }
    Err(Error::invalid(format!("geometry overflow: {last}")))
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:04}")
}

/// Deterministic subject `index` of the cohort seeded by `seed`.
pub fn generate_subject(seed: u64, index: usize, params: &CohortParams) -> Result<Subject> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let sex = rng.random_range(0..2u8);
    let baseline_age = rng.random_range(60.0..80.0);
    let mut rate = if params.rate_max > params.rate_min {
        rng.random_range(params.rate_min..params.rate_max)
    } else {
        params.rate_min
    };
    // sex shifts the progression rate a little so the covariate is informative
    if sex == 1 {
        rate *= SEX_FACTOR;
    }
    let geometry = sample_geometry(&mut rng, params)?;
    let mut age = baseline_age;
    let mut visits = Vec::with_capacity(params.visits);
    for k in 0..params.visits {
        if k > 0 {
            age += rng.random_range(MIN_GAP..MAX_GAP);
        }
        let (image, masks) = render(&geometry, rate, age - baseline_age, params.image_size, params.noise, &mut rng)?;
        visits.push(Visit { age, image, masks });
    }
    Ok(Subject {
        id: subject_id(index),
        sex,
        baseline_age,
        progression_rate: rate,
        geometry,
        visits,
    })
}

/// Subjects `0..count`, generated in parallel; the result does not depend on
/// scheduling.
pub fn generate_cohort(seed: u64, count: usize, params: &CohortParams) -> Result<Vec<Subject>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_subject(seed, i, params))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub subjects: usize,
    pub params: CohortParams,
    pub splits: Splits,
}

/// Seeded subject-level shuffle split 7:1:2; val and test sizes round down
/// and the remainder goes to train.
pub fn make_splits(ids: &[String], seed: u64) -> Result<Splits> {
    if ids.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 subjects to split, got {}",
            ids.len()
        )));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::invalid("duplicate subject ids"));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_val = n / 10;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Splits { train: order, val, test })
}

/// A consecutive-visit training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisitPair {
    pub subject: usize,
    pub prior: usize,
    pub target: usize,
}

pub fn consecutive_pairs(subjects: &[Subject]) -> Vec<VisitPair> {
    subjects
        .iter()
        .enumerate()
        .flat_map(|(s, sub)| {
            (1..sub.visits.len()).map(move |k| VisitPair {
                subject: s,
                prior: k - 1,
                target: k,
            })
        })
        .collect()
}

pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = img.dims2()?;
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 12 {
        return Err(format_err(path, bytes.len(), "truncated header"));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected MBIM"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    Ok((h, w))
}

fn check_len(bytes: &[u8], want: usize, path: &Path) -> Result<()> {
    if bytes.len() < want {
        return Err(format_err(path, bytes.len(), format!("truncated payload, expected {want} bytes")));
    }
    if bytes.len() > want {
        return Err(format_err(path, want, "trailing bytes after payload"));
    }
    Ok(())
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (h, w) = header(bytes, path)?;
    check_len(bytes, 12 + 4 * h * w, path)?;
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&[h, w], data)
}

pub fn encode_masks(m: &RegionMasks) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.planes.len() * m.height * m.width);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(m.height as u32).to_le_bytes());
    out.extend_from_slice(&(m.width as u32).to_le_bytes());
    for p in &m.planes {
        out.extend_from_slice(p);
    }
    out
}

pub fn decode_masks(bytes: &[u8], path: &Path) -> Result<RegionMasks> {
    let (h, w) = header(bytes, path)?;
    let plane = h * w;
    check_len(bytes, 12 + Region::ALL.len() * plane, path)?;
    if let Some(i) = bytes[12..].iter().position(|&b| b > 1) {
        return Err(format_err(path, 12 + i, "mask byte is not 0 or 1"));
    }
    let planes = bytes[12..].chunks_exact(plane.max(1)).map(<[u8]>::to_vec).collect();
    RegionMasks::new(h, w, planes)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &encode_image(img)?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

#[derive(Serialize, Deserialize)]
struct SubjectMeta {
    id: String,
    sex: u8,
    baseline_age: f64,
    progression_rate: f64,
    ages: Vec<f64>,
    geometry: Geometry,
}

/// A cohort as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Subjects of one split, in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&Subject>> {
        let ids = match name {
            "train" => &self.manifest.splits.train,
            "val" => &self.manifest.splits.val,
            "test" => &self.manifest.splits.test,
            other => return Err(Error::invalid(format!("unknown split {other:?} (train, val, test)"))),
        };
        ids.iter()
            .map(|id| {
                self.subject(id)
                    .ok_or_else(|| Error::invalid(format!("manifest names missing subject {id}")))
            })
            .collect()
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_tree(root: &Path, ds: &Dataset) -> Result<()> {
    io(root, std::fs::create_dir(root))?;
    let manifest = serde_json::to_vec_pretty(&ds.manifest)?;
    io(root, std::fs::write(root.join("manifest.json"), manifest))?;
    for s in &ds.subjects {
        let dir = root.join("subjects").join(&s.id);
        io(&dir, std::fs::create_dir_all(&dir))?;
        let meta = SubjectMeta {
            id: s.id.clone(),
            sex: s.sex,
            baseline_age: s.baseline_age,
            progression_rate: s.progression_rate,
            ages: s.visits.iter().map(|v| v.age).collect(),
            geometry: s.geometry.clone(),
        };
        let p = dir.join("meta.json");
        io(&p, std::fs::write(&p, serde_json::to_vec_pretty(&meta)?))?;
        for (k, v) in s.visits.iter().enumerate() {
            let p = dir.join(format!("visit_{k}.img"));
            io(&p, std::fs::write(&p, encode_image(&v.image)?))?;
            let p = dir.join(format!("visit_{k}.masks"));
            io(&p, std::fs::write(&p, encode_masks(&v.masks)))?;
        }
    }
    Ok(())
}

/// Writes the whole tree next to `path` and renames it into place, so a
/// failure never leaves a partial dataset at `path`.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::invalid(format!("{} already exists", path.display())));
    }
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        return Err(Error::io(
            &parent,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output parent directory does not exist"),
        ));
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = parent.join(format!(".{}.partial{}", name.to_string_lossy(), std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    let res = write_tree(&tmp, ds).and_then(|()| io(path, std::fs::rename(&tmp, path)));
    if res.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    res
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = io(path, std::fs::read(path))?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.column(), e.to_string()))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&path.join("manifest.json"))?;
    let ids: Vec<String> = (0..manifest.subjects).map(subject_id).collect();
    let subjects = ids
        .par_iter()
        .map(|id| -> Result<Subject> {
            let dir = path.join("subjects").join(id);
            let meta: SubjectMeta = read_json(&dir.join("meta.json"))?;
            if &meta.id != id {
                return Err(format_err(&dir.join("meta.json"), 0, format!("id {} does not match directory {id}", meta.id)));
            }
            let visits = meta
                .ages
                .iter()
                .enumerate()
                .map(|(k, &age)| {
                    let ip = dir.join(format!("visit_{k}.img"));
                    let mp = dir.join(format!("visit_{k}.masks"));
                    let image = decode_image(&io(&ip, std::fs::read(&ip))?, &ip)?;
                    let masks = decode_masks(&io(&mp, std::fs::read(&mp))?, &mp)?;
                    Ok(Visit { age, image, masks })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Subject {
                id: meta.id,
                sex: meta.sex,
                baseline_age: meta.baseline_age,
                progression_rate: meta.progression_rate,
                geometry: meta.geometry,
                visits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, subjects })
}

/// Generates a cohort and its splits in memory.
pub fn build_dataset(seed: u64, count: usize, params: &CohortParams) -> Result<Dataset> {
    let subjects = generate_cohort(seed, count, params)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let splits = make_splits(&ids, seed)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            subjects: count,
            params: params.clone(),
            splits,
        },
        subjects,
    })
}
