//! Synthetic binocular fundus-like dataset with a simulated rater panel,
//! its JSON-lines file format, and stratified splits.
//!
//! Each eye is a grayscale disc on a textured background. The bright cup
//! inside the disc grows with the eye's latent severity, the background
//! darkens with age, and the fellow eye shares the target's severity with
//! probability `bilateral_rho`. Per-eye image quality varies, so sometimes
//! the fellow image is the clearer view of a shared severity.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::kv_fields;
use crate::losses::LossTargets;
use crate::model::AgeScaler;
use crate::nn::ImageShape;
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tensor};

pub const DATASET_FORMAT: &str = "vvit-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Pixel values are stored on this grid so the text form stays short and
/// parses back exactly.
const PIXEL_LEVELS: f64 = 256.0;

const AGE_MEAN: f64 = 62.0;
const AGE_STD: f64 = 12.0;
const AGE_RANGE: (f64, f64) = (20.0, 95.0);

/// Position and size of a rendered disc, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub cup_radius: f64,
}

impl Disc {
    /// Whether the `patch × patch` cell at grid position `(row, col)`
    /// overlaps the disc.
    pub fn overlaps_patch(&self, row: usize, col: usize, patch: usize) -> bool {
        let (x0, y0) = ((col * patch) as f64, (row * patch) as f64);
        let (x1, y1) = (x0 + patch as f64, y0 + patch as f64);
        // pixel (x, y) covers [x, x+1); the disc is centred in pixel space
        let nx = self.cx.clamp(x0, x1);
        let ny = self.cy.clamp(y0, y1);
        (nx - self.cx).powi(2) + (ny - self.cy).powi(2) <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinocularSample {
    pub id: String,
    /// Flattened `C × H × W`, values in `[0, 1]`.
    pub target_img: Vec<f64>,
    pub fellow_img: Vec<f64>,
    pub age_years: f64,
    pub sex: u8,
    pub rater_votes: Vec<u8>,
    /// Mean of `rater_votes`.
    pub y_vote: f64,
    /// Population variance of `rater_votes`.
    pub var_vote: f64,
    /// Generator ground truth; never shown to the model.
    pub latent_severity: f64,
    pub fellow_severity: f64,
    pub target_disc: Disc,
    pub fellow_disc: Disc,
}

impl BinocularSample {
    pub fn hard_label(&self) -> u8 {
        u8::from(self.y_vote >= 0.5)
    }

    pub fn rater_count(&self) -> usize {
        self.rater_votes.len()
    }
}

/// Soft label and population variance of a panel's votes.
pub fn vote_stats(votes: &[u8]) -> (f64, f64) {
    let k = votes.len() as f64;
    let pos = votes.iter().filter(|&&v| v == 1).count() as f64;
    let y = pos / k;
    (y, y * (1.0 - y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image: ImageShape,
    pub samples: Vec<BinocularSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BinocularSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let index: BTreeMap<&str, &BinocularSample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let samples = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Input(format!("unknown sample id `{id}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { image: self.image, samples })
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.hard_label() == 1).count() as f64 / self.len() as f64
    }

    /// Number of samples per rater count.
    pub fn rater_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.rater_count()).or_insert(0) += 1;
        }
        h
    }

    pub fn ages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.age_years).collect()
    }
}

/// A batch of samples turned into model inputs and loss targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub target: Tensor<f64>,
    pub fellow: Tensor<f64>,
    pub targets: LossTargets,
}

impl Batch {
    pub fn new(image: ImageShape, samples: &[&BinocularSample], scaler: &AgeScaler) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let shape = [samples.len(), image.channels, image.height, image.width];
        let stack = |f: fn(&BinocularSample) -> &Vec<f64>| {
            let data = samples.iter().flat_map(|s| f(s).iter().copied()).collect();
            Tensor::from_vec(&shape, data)
        };
        let targets = LossTargets {
            y_vote: samples.iter().map(|s| s.y_vote).collect(),
            var_vote: samples.iter().map(|s| s.var_vote).collect(),
            rater_count: samples.iter().map(|s| s.rater_count()).collect(),
            age: samples.iter().map(|s| scaler.standardize(s.age_years)).collect(),
            sex: samples.iter().map(|s| s.sex).collect(),
        };
        Ok(Self {
            target: stack(|s| &s.target_img)?,
            fellow: stack(|s| &s.fellow_img)?,
            targets,
        })
    }

    /// Applies an independent random flip/rotation to every image, which
    /// leaves labels and disc geometry statistics unchanged.
    pub fn augment(&mut self, image: ImageShape, rng: &mut Rng) -> Result<()> {
        let per = image.numel();
        for t in [&mut self.target, &mut self.fellow] {
            let data: Vec<f64> = t
                .data()
                .chunks_exact(per)
                .flat_map(|img| dihedral(img, image.height, image.width, rng.below(8)))
                .collect();
            *t = Tensor::from_vec(t.shape(), data)?;
        }
        Ok(())
    }
}

/// One of the eight symmetries of a square grid (`k` in `0..8`: `k & 3`
/// quarter turns, then a horizontal flip if `k >= 4`), applied to each
/// `h × w` plane of `img`. Non-square images only use the two flips
/// (`k` even quarter turns).
pub fn dihedral(img: &[f64], height: usize, width: usize, k: usize) -> Vec<f64> {
    let plane = height * width;
    let turns = if height == width { k & 3 } else { k & 2 };
    let flip = k >= 4;
    let mut out = vec![0.0; img.len()];
    for (src, dst) in img.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for r in 0..height {
            for c in 0..width {
                let cf = if flip { width - 1 - c } else { c };
                let (sr, sc) = match turns {
                    0 => (r, cf),
                    1 => (cf, width - 1 - r),
                    2 => (height - 1 - r, width - 1 - cf),
                    _ => (height - 1 - cf, r),
                };
                dst[r * width + c] = src[sr * width + sc];
            }
        }
    }
    out
}

/// Generator settings. Severity on the logit scale is
/// `severity_offset + age_effect · z_age + severity_spread · ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Average panel size; counts are `1 + Poisson(mean_raters - 1)`.
    pub mean_raters: f64,
    /// Probability that the fellow eye shares the target's severity, which
    /// is also the correlation between the two severities.
    pub bilateral_rho: f64,
    pub age_effect: f64,
    pub severity_offset: f64,
    pub severity_spread: f64,
    /// Temperature of each rater's vote around severity 0.5; 0 gives a
    /// deterministic panel.
    pub rater_noise: f64,
    /// Per-eye pixel noise level is drawn uniformly from this range.
    pub texture_noise_min: f64,
    pub texture_noise_max: f64,
    pub background_level: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 2400,
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            mean_raters: 3.0,
            bilateral_rho: 0.6,
            age_effect: 0.8,
            severity_offset: -1.6,
            severity_spread: 1.5,
            rater_noise: 0.1,
            texture_noise_min: 0.02,
            texture_noise_max: 0.25,
            background_level: 0.3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// A shifted distribution for transfer checks: noisier texture, brighter
    /// background and weaker bilateral coupling.
    pub fn external() -> Self {
        Self {
            n_samples: 400,
            bilateral_rho: 0.4,
            texture_noise_min: 0.05,
            texture_noise_max: 0.35,
            background_level: 0.38,
            seed: 1,
            ..Self::default()
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            channels: self.image_channels,
            height: self.image_height,
            width: self.image_width,
        }
    }
}

impl KvConfig for GeneratorConfig {
    kv_fields!(GeneratorConfig {
        n_samples,
        image_channels,
        image_height,
        image_width,
        mean_raters,
        bilateral_rho,
        age_effect,
        severity_offset,
        severity_spread,
        rater_noise,
        texture_noise_min,
        texture_noise_max,
        background_level,
        seed,
    });

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.image_height < 8 || self.image_width < 8 {
            return bad("images must have >= 1 channel and be at least 8x8".into());
        }
        if !(self.mean_raters >= 1.0 && self.mean_raters.is_finite()) {
            return bad(format!("mean_raters = {} must be >= 1", self.mean_raters));
        }
        if !(0.0..=1.0).contains(&self.bilateral_rho) {
            return bad(format!("bilateral_rho = {} outside [0, 1]", self.bilateral_rho));
        }
        for (name, v) in [
            ("rater_noise", self.rater_noise),
            ("severity_spread", self.severity_spread),
            ("texture_noise_min", self.texture_noise_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a nonnegative number"));
            }
        }
        if !(self.texture_noise_max >= self.texture_noise_min && self.texture_noise_max.is_finite()) {
            return bad("texture_noise_max must be >= texture_noise_min".into());
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return bad("background_level outside [0, 1]".into());
        }
        if !(self.age_effect.is_finite() && self.severity_offset.is_finite()) {
            return bad("severity parameters must be finite".into());
        }
        Ok(())
    }
}

fn draw_severity(cfg: &GeneratorConfig, age_z: f64, rng: &mut Rng) -> f64 {
    sigmoid(cfg.severity_offset + cfg.age_effect * age_z + cfg.severity_spread * rng.normal())
}

fn draw_age(rng: &mut Rng) -> f64 {
    (AGE_MEAN + AGE_STD * rng.normal()).clamp(AGE_RANGE.0, AGE_RANGE.1)
}

fn smoothstep(edge: f64, width: f64, d: f64) -> f64 {
    // 1 inside, 0 outside, linear ramp of `width` pixels across the edge
    ((edge - d) / width + 0.5).clamp(0.0, 1.0)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * PIXEL_LEVELS).round() / PIXEL_LEVELS
}

/// Draws disc geometry and renders one eye.
fn render_eye(
    cfg: &GeneratorConfig,
    severity: f64,
    age_z: f64,
    sex: u8,
    rng: &mut Rng,
) -> (Vec<f64>, Disc) {
    let (h, w) = (cfg.image_height as f64, cfg.image_width as f64);
    let scale = h.min(w) / 32.0;
    let radius = scale * (6.6 + 0.4 * f64::from(sex) + 0.4 * rng.normal()).clamp(5.0, 8.5);
    let margin = radius + scale;
    let cx = margin + rng.uniform() * (w - 2.0 * margin);
    let cy = margin + rng.uniform() * (h - 2.0 * margin);
    let cup_ratio = 0.2 + 0.7 * severity;
    let disc = Disc {
        cx,
        cy,
        radius,
        cup_radius: cup_ratio * radius,
    };
    let noise = cfg.texture_noise_min + rng.uniform() * (cfg.texture_noise_max - cfg.texture_noise_min);
    let background = cfg.background_level - 0.06 * age_z;
    // slow brightness gradient across the field
    let tilt = (rng.uniform() - 0.5) * 0.1;
    let mut img = Vec::with_capacity(cfg.image_channels * cfg.image_height * cfg.image_width);
    for c in 0..cfg.image_channels {
        let tint = 1.0 - 0.15 * c as f64;
        for y in 0..cfg.image_height {
            for x in 0..cfg.image_width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let rim = smoothstep(disc.radius, 1.0, d);
                let cup = smoothstep(disc.cup_radius, 1.0, d);
                let base = background + tilt * (px / w - 0.5);
                let v = base + rim * (0.62 - base) + cup * 0.38;
                img.push(quantize(tint * v + noise * rng.normal()));
            }
        }
    }
    (img, disc)
}

fn panel(cfg: &GeneratorConfig, severity: f64, rng: &mut Rng) -> Vec<u8> {
    let extra = if cfg.mean_raters > 1.0 {
        Poisson::new(cfg.mean_raters - 1.0)
            .expect("positive rate")
            .sample(rng) as usize
    } else {
        0
    };
    (0..1 + extra)
        .map(|_| {
            let p = if cfg.rater_noise == 0.0 {
                if severity >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                sigmoid((severity - 0.5) / cfg.rater_noise)
            };
            u8::from(rng.uniform() < p)
        })
        .collect()
}

/// One sample from its own derived random stream, so samples can be made
/// independently and in any order.
pub fn generate_sample(cfg: &GeneratorConfig, index: usize) -> BinocularSample {
    let mut rng = Rng::new(cfg.seed).derive(index as u64);
    let age_years = draw_age(&mut rng);
    let age_z = (age_years - AGE_MEAN) / AGE_STD;
    let sex = u8::from(rng.uniform() < 0.5);
    let latent_severity = draw_severity(cfg, age_z, &mut rng);
    // the independent branch draws from the population marginal so the two
    // severities correlate at exactly `bilateral_rho` in expectation
    let shared = rng.uniform() < cfg.bilateral_rho;
    let other = draw_severity(cfg, (draw_age(&mut rng) - AGE_MEAN) / AGE_STD, &mut rng);
    let fellow_severity = if shared { latent_severity } else { other };
    let rater_votes = panel(cfg, latent_severity, &mut rng);
    let (y_vote, var_vote) = vote_stats(&rater_votes);
    let (target_img, target_disc) =
        render_eye(cfg, latent_severity, age_z, sex, &mut rng);
    let (fellow_img, fellow_disc) =
        render_eye(cfg, fellow_severity, age_z, sex, &mut rng);
    BinocularSample {
        id: format!("s{index:05}"),
        target_img,
        fellow_img,
        age_years,
        sex,
        rater_votes,
        y_vote,
        var_vote,
        latent_severity,
        fellow_severity,
        target_disc,
        fellow_disc,
    }
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        image: cfg.image_shape(),
        samples: (0..cfg.n_samples).map(|i| generate_sample(cfg, i)).collect(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    target_img: Vec<Vec<Vec<f64>>>,
    fellow_img: Vec<Vec<Vec<f64>>>,
    age_years: f64,
    sex: u8,
    rater_votes: Vec<u8>,
    y_vote: f64,
    var_vote: f64,
    latent_severity: f64,
    fellow_severity: f64,
    target_disc: Disc,
    fellow_disc: Disc,
}

fn nest(img: &[f64], s: ImageShape) -> Vec<Vec<Vec<f64>>> {
    img.chunks(s.height * s.width)
        .map(|plane| plane.chunks(s.width).map(<[f64]>::to_vec).collect())
        .collect()
}

fn flatten(img: Vec<Vec<Vec<f64>>>, s: ImageShape, field: &str) -> std::result::Result<Vec<f64>, String> {
    let ok = img.len() == s.channels
        && img.iter().all(|p| p.len() == s.height && p.iter().all(|r| r.len() == s.width));
    if !ok {
        return Err(format!(
            "`{field}` is not {}x{}x{}",
            s.channels, s.height, s.width
        ));
    }
    let flat: Vec<f64> = img.into_iter().flatten().flatten().collect();
    if flat.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!("`{field}` has pixel values outside [0, 1]"));
    }
    Ok(flat)
}

impl Record {
    fn from_sample(s: &BinocularSample, shape: ImageShape) -> Self {
        Self {
            id: s.id.clone(),
            target_img: nest(&s.target_img, shape),
            fellow_img: nest(&s.fellow_img, shape),
            age_years: s.age_years,
            sex: s.sex,
            rater_votes: s.rater_votes.clone(),
            y_vote: s.y_vote,
            var_vote: s.var_vote,
            latent_severity: s.latent_severity,
            fellow_severity: s.fellow_severity,
            target_disc: s.target_disc,
            fellow_disc: s.fellow_disc,
        }
    }

    fn into_sample(self, shape: ImageShape) -> std::result::Result<BinocularSample, String> {
        if self.rater_votes.is_empty() {
            return Err("`rater_votes` is empty".into());
        }
        if self.rater_votes.iter().any(|&v| v > 1) {
            return Err("`rater_votes` must be 0 or 1".into());
        }
        if self.sex > 1 {
            return Err(format!("`sex` = {} not in {{0, 1}}", self.sex));
        }
        let (y, var) = vote_stats(&self.rater_votes);
        if y != self.y_vote || var != self.var_vote {
            return Err("`y_vote`/`var_vote` disagree with `rater_votes`".into());
        }
        Ok(BinocularSample {
            target_img: flatten(self.target_img, shape, "target_img")?,
            fellow_img: flatten(self.fellow_img, shape, "fellow_img")?,
            id: self.id,
            age_years: self.age_years,
            sex: self.sex,
            rater_votes: self.rater_votes,
            y_vote: self.y_vote,
            var_vote: self.var_vote,
            latent_severity: self.latent_severity,
            fellow_severity: self.fellow_severity,
            target_disc: self.target_disc,
            fellow_disc: self.fellow_disc,
        })
    }
}

/// Writes a header line followed by one JSON record per sample.
pub fn write_dataset_to(ds: &Dataset, mut w: impl Write) -> std::io::Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        channels: ds.image.channels,
        height: ds.image.height,
        width: ds.image.width,
        count: ds.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, &Record::from_sample(s, ds.image))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(ds, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Parses the JSON-lines form. A completely empty input is an empty
/// dataset of the default image shape.
pub fn read_dataset_from(r: impl BufRead) -> Result<Dataset> {
    let mut lines = r.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    let image = match lines.next() {
        None => {
            return Ok(Dataset {
                image: GeneratorConfig::default().image_shape(),
                samples: Vec::new(),
            })
        }
        Some((i, line)) => {
            let line = line.map_err(|e| parse_err(i, e.to_string()))?;
            let h: Header = serde_json::from_str(&line).map_err(|e| parse_err(i, format!("bad header: {e}")))?;
            if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
                return Err(parse_err(
                    i,
                    format!("unsupported dataset format {} v{}", h.format, h.version),
                ));
            }
            ImageShape {
                channels: h.channels,
                height: h.height,
                width: h.width,
            }
        }
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| parse_err(i, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(i, e.to_string()))?;
        samples.push(rec.into_sample(image).map_err(|m| parse_err(i, m))?);
    }
    Ok(Dataset { image, samples })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(f))
}

/// Sample ids of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Fractions of the train+val pool and the test set in the default split:
/// 1800 / 200 / 400 of 2400 samples.
pub const DEFAULT_TRAIN_FRAC: f64 = 0.75;
pub const DEFAULT_VAL_FRAC: f64 = 1.0 / 12.0;

/// Seeded split stratified by hard label. Overall sizes are the rounded
/// fractions of the dataset; each class is divided in the same proportions
/// with leftover slots going to the largest remainders.
pub fn split(ds: &Dataset, train_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    let valid = |f: f64| (0.0..=1.0).contains(&f);
    if !valid(train_frac) || !valid(val_frac) || train_frac + val_frac > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions {train_frac} + {val_frac} must be in [0, 1] and sum to <= 1"
        )));
    }
    let n = ds.len();
    let n_train = ((n as f64 * train_frac).round() as usize).min(n);
    let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);

    let mut rng = Rng::new(seed).derive(0x5117);
    let mut classes: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for s in &ds.samples {
        classes[s.hard_label() as usize].push(s.id.clone());
    }
    for c in &mut classes {
        rng.shuffle(c);
    }
    let train_counts = apportion(&classes, n_train, n);
    let remaining: Vec<usize> = classes.iter().zip(&train_counts).map(|(c, t)| c.len() - t).collect();
    let val_counts = apportion_from(&remaining, n_val);

    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (c, ids) in classes.into_iter().enumerate() {
        let (t, v) = (train_counts[c], val_counts[c]);
        out.train.extend_from_slice(&ids[..t]);
        out.val.extend_from_slice(&ids[t..t + v]);
        out.test.extend_from_slice(&ids[t + v..]);
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        part.sort();
    }
    Ok(out)
}

fn apportion(classes: &[Vec<String>; 2], total: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return vec![0, 0];
    }
    let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    apportion_from(&sizes, total)
}

/// Largest-remainder allocation of `total` slots proportional to `sizes`.
fn apportion_from(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quota: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut out: Vec<usize> = quota.iter().zip(sizes).map(|(q, &s)| (q.floor() as usize).min(s)).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - quota[a].floor();
        let rb = quota[b] - quota[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while left > 0 {
        let before = left;
        for &i in &order {
            if left > 0 && out[i] < sizes[i] {
                out[i] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    out
}

/// Pearson correlation, `None` when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}
