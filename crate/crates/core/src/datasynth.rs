//! Synthetic overlapped-text samples: printed and handwritten ink layers
//! are extracted from grayscale crops, overlaid, labelled and augmented.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labelcodec::{decode_gt, encode_gt, Class, LabelMap, LabelMode};
use crate::tensor::{Real, Tensor};

pub const INK_THRESHOLD: u8 = 128;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InkLayer {
    pub width: u32,
    pub height: u32,
    pub mask: Vec<bool>,
    /// Source gray level under the mask, 255 elsewhere.
    pub intensity: Vec<u8>,
}

impl InkLayer {
    pub fn ink_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Ink is every pixel darker than `threshold`.
pub fn extract_layer(gray: &GrayImage, threshold: u8) -> InkLayer {
    let mask: Vec<bool> = gray.as_raw().iter().map(|&v| v < threshold).collect();
    let intensity = gray.as_raw().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 255 }).collect();
    InkLayer { width: gray.width(), height: gray.height(), mask, intensity }
}

/// A grayscale image with its four-class ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub labels: LabelMap,
}

impl Sample {
    /// Model input: ink density `1 − v/255` replicated over three channels.
    pub fn input<T: Real>(&self) -> Tensor<T> {
        image_to_input(&self.image)
    }
}

pub fn image_to_input<T: Real>(image: &GrayImage) -> Tensor<T> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| T::lit(1.0 - raw[i % (h * w)] as f64 / 255.0))
}

/// Overlay `ht` on `pt` over a white page; overlapping ink keeps the darker value.
pub fn compose(pt: &InkLayer, ht: &InkLayer) -> Result<Sample> {
    if (pt.width, pt.height) != (ht.width, ht.height) {
        return shape_err(format!(
            "compose: printed layer {}×{} vs handwritten {}×{}",
            pt.width, pt.height, ht.width, ht.height
        ));
    }
    let n = pt.mask.len();
    let mut pixels = vec![255u8; n];
    let mut classes = vec![Class::Bg; n];
    for i in 0..n {
        match (pt.mask[i], ht.mask[i]) {
            (true, true) => {
                pixels[i] = pt.intensity[i].min(ht.intensity[i]);
                classes[i] = Class::Ov;
            }
            (true, false) => {
                pixels[i] = pt.intensity[i];
                classes[i] = Class::Pt;
            }
            (false, true) => {
                pixels[i] = ht.intensity[i];
                classes[i] = Class::Ht;
            }
            (false, false) => {}
        }
    }
    Ok(Sample {
        image: GrayImage::from_raw(pt.width, pt.height, pixels).expect("buffer size"),
        labels: LabelMap::new(pt.width, pt.height, LabelMode::Four, classes)?,
    })
}

/// Shift in pixels, isotropic scale and rotation in degrees about the centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub angle: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { dx: 0.0, dy: 0.0, scale: 1.0, angle: 0.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    /// Maximum shift as a fraction of the image extent.
    pub shift_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_angle: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { shift_frac: 0.1, scale_min: 0.9, scale_max: 1.1, max_angle: 10.0 }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        Self { shift_frac: 0.0, scale_min: 1.0, scale_max: 1.0, max_angle: 0.0 }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, width: u32, height: u32) -> Transform {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (sx, sy) = (self.shift_frac * width as f64, self.shift_frac * height as f64);
        Transform {
            dx: uniform(-sx, sx),
            dy: uniform(-sy, sy),
            scale: uniform(self.scale_min, self.scale_max),
            angle: uniform(-self.max_angle, self.max_angle),
        }
    }

    pub fn check(&self, t: &Transform, width: u32, height: u32) -> Result<()> {
        let tol = 1e-9;
        let ok = t.dx.abs() <= self.shift_frac * width as f64 + tol
            && t.dy.abs() <= self.shift_frac * height as f64 + tol
            && t.scale >= self.scale_min - tol
            && t.scale <= self.scale_max + tol
            && t.angle.abs() <= self.max_angle + tol;
        if !ok {
            return Err(Error::Config(format!("transform {t:?} outside augmentation ranges {self:?}")));
        }
        Ok(())
    }
}

/// Geometric augmentation: bilinear for the image (white outside), nearest
/// neighbour for the labels (BG outside).
pub fn augment(sample: &Sample, t: &Transform, ranges: &AugmentRanges) -> Result<Sample> {
    let (w, h) = sample.image.dimensions();
    ranges.check(t, w, h)?;
    if t.is_identity() {
        return Ok(sample.clone());
    }
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = t.angle.to_radians().sin_cos();
    let src = sample.image.as_raw();
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            255.0
        } else {
            src[y as usize * w as usize + x as usize] as f64
        }
    };
    let mut pixels = Vec::with_capacity((w * h) as usize);
    let mut classes = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            // Inverse map of the output pixel centre into the source.
            let (px, py) = (x as f64 + 0.5 - cx - t.dx, y as f64 + 0.5 - cy - t.dy);
            let u = (cos * px + sin * py) / t.scale + cx;
            let v = (-sin * px + cos * py) / t.scale + cy;
            let (fx, fy) = (u - 0.5, v - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let val = (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1, y0))
                + ay * ((1.0 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1));
            pixels.push(val.round().clamp(0.0, 255.0) as u8);
            let (nx, ny) = (u.floor(), v.floor());
            classes.push(if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
                Class::Bg
            } else {
                sample.labels.get(nx as u32, ny as u32)
            });
        }
    }
    Ok(Sample {
        image: GrayImage::from_raw(w, h, pixels).expect("buffer size"),
        labels: LabelMap::new(w, h, sample.labels.mode(), classes)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InkKind {
    Printed,
    Handwritten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceCrop {
    pub id: String,
    pub kind: InkKind,
    pub image: GrayImage,
}

/// Printed-text crop: rows of dark blocky glyphs.
pub fn procedural_printed(seed: u64, width: u32, height: u32) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    let ink = rng.random_range(10u8..=50);
    let line_h = (height / 6).max(5);
    let glyph_h = (line_h * 2 / 3).max(3);
    let glyph_w = (glyph_h * 3 / 5).max(3);
    let cell_w = (glyph_w / 3).max(1);
    let cell_h = (glyph_h / 5).max(1);
    let mut top = rng.random_range(0..line_h / 2 + 1);
    while top + glyph_h < height {
        let mut left = rng.random_range(0..glyph_w + 1);
        while left + glyph_w < width {
            if rng.random_bool(0.15) {
                left += glyph_w;
                continue;
            }
            let bits: u16 = rng.random::<u16>() | 0b010_010_010_010_010;
            for gy in 0..5 {
                for gx in 0..3 {
                    if bits >> (gy * 3 + gx) & 1 == 0 {
                        continue;
                    }
                    for yy in 0..cell_h {
                        for xx in 0..cell_w {
                            let (x, y) = (left + gx * cell_w + xx, top + gy * cell_h + yy);
                            if x < width && y < height {
                                img.put_pixel(x, y, Luma([ink]));
                            }
                        }
                    }
                }
            }
            left += glyph_w + 1;
        }
        top += line_h;
    }
    img
}

/// Handwritten crop: a few smooth pen strokes of varying pressure.
pub fn procedural_handwritten(seed: u64, width: u32, height: u32) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    let (w, h) = (width as f64, height as f64);
    let strokes = rng.random_range(2..=4);
    for _ in 0..strokes {
        let radius = rng.random_range(0.8..1.6) * (w / 64.0).max(1.0);
        let base = rng.random_range(60.0..100.0);
        let y0 = rng.random_range(0.25 * h..0.75 * h);
        let x0 = rng.random_range(0.0..0.3 * w);
        let x1 = rng.random_range(0.7 * w..w);
        let amp = rng.random_range(0.05 * h..0.2 * h);
        let freq = rng.random_range(1.5..4.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let loop_amp = rng.random_range(0.0..0.05 * w);
        let steps = (4.0 * w) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let ang = freq * std::f64::consts::TAU * t + phase;
            let cx = x0 + (x1 - x0) * t + loop_amp * (2.0 * ang).cos();
            let cy = y0 + amp * ang.sin();
            let level = (base + 15.0 * (3.0 * ang).sin()).clamp(60.0, 115.0) as u8;
            let r = radius.ceil() as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                    if px < 0 || py < 0 || px >= width as i64 || py >= height as i64 {
                        continue;
                    }
                    let (ddx, ddy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                    if ddx * ddx + ddy * ddy <= radius * radius {
                        let cur = img.get_pixel(px as u32, py as u32)[0];
                        img.put_pixel(px as u32, py as u32, Luma([cur.min(level)]));
                    }
                }
            }
        }
    }
    img
}

/// Source crops, partitioned so test samples never share a source with
/// training or validation samples.
#[derive(Clone, Debug, Default)]
pub struct SourcePool {
    pub printed: Vec<SourceCrop>,
    pub handwritten: Vec<SourceCrop>,
}

impl SourcePool {
    pub fn procedural(n_printed: usize, n_handwritten: usize, size: u32, seed: u64) -> Self {
        let printed = (0..n_printed)
            .map(|i| SourceCrop {
                id: format!("pt{i:04}"),
                kind: InkKind::Printed,
                image: procedural_printed(sample_seed(seed, 2 * i as u64), size, size),
            })
            .collect();
        let handwritten = (0..n_handwritten)
            .map(|i| SourceCrop {
                id: format!("ht{i:04}"),
                kind: InkKind::Handwritten,
                image: procedural_handwritten(sample_seed(seed, 2 * i as u64 + 1), size, size),
            })
            .collect();
        Self { printed, handwritten }
    }

    /// Every PNG in each directory, centre-cropped to `size`×`size`.
    pub fn load(printed_dir: &Path, handwritten_dir: &Path, size: u32) -> Result<Self> {
        Ok(Self {
            printed: load_dir(printed_dir, InkKind::Printed, size)?,
            handwritten: load_dir(handwritten_dir, InkKind::Handwritten, size)?,
        })
    }

    fn list(&self, kind: InkKind) -> &[SourceCrop] {
        match kind {
            InkKind::Printed => &self.printed,
            InkKind::Handwritten => &self.handwritten,
        }
    }

    pub fn find(&self, kind: InkKind, id: &str) -> Option<&SourceCrop> {
        self.list(kind).iter().find(|s| s.id == id)
    }

    /// Indices usable by `split`: the last `test_sources` of each kind are
    /// reserved for the test split.
    fn partition(&self, kind: InkKind, split: Split, test_sources: usize) -> Result<std::ops::Range<usize>> {
        let n = self.list(kind).len();
        if n < test_sources + 1 || test_sources == 0 {
            return Err(Error::Config(format!(
                "insufficient {kind:?} sources: have {n}, need at least {} with {test_sources} held out for test",
                test_sources + 1
            )));
        }
        Ok(match split {
            Split::Test => n - test_sources..n,
            _ => 0..n - test_sources,
        })
    }
}

fn load_dir(dir: &Path, kind: InkKind, size: u32) -> Result<Vec<SourceCrop>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = read_gray(&p)?;
            if img.width() < size || img.height() < size {
                return Err(Error::Config(format!(
                    "source {} is {}×{}, smaller than {size}×{size}",
                    p.display(),
                    img.width(),
                    img.height()
                )));
            }
            let (x, y) = ((img.width() - size) / 2, (img.height() - size) / 2);
            let crop = image::imageops::crop_imm(&img, x, y, size, size).to_image();
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(SourceCrop { id, kind, image: crop })
        })
        .collect()
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let img = reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_luma8())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let img = reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_rgb8())
}

/// SplitMix64 finalizer over the master seed and sample index.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: u32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Procedural source counts per ink kind when no source directories are given.
    pub printed_sources: usize,
    pub handwritten_sources: usize,
    /// Sources of each kind reserved for the test split.
    pub test_sources: usize,
    /// Minimum number of overlapping ink pixels per sample; 0 disables.
    pub min_overlap: usize,
    pub threshold: u8,
    pub augment: AugmentRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl SynthConfig {
    pub fn toy() -> Self {
        Self {
            size: 64,
            train: 64,
            val: 8,
            test: 8,
            seed: 0,
            printed_sources: 24,
            handwritten_sources: 24,
            test_sources: 4,
            min_overlap: 16,
            threshold: INK_THRESHOLD,
            augment: AugmentRanges::default(),
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            size: 256,
            train: 5169,
            val: 530,
            test: 558,
            printed_sources: 160,
            handwritten_sources: 160,
            test_sources: 16,
            ..Self::toy()
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Provenance of one synthesized sample; enough to re-render it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub image_path: String,
    pub gt_path: String,
    pub split: Split,
    pub seed: u64,
    pub source_pt_id: String,
    pub source_ht_id: String,
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub angle: f64,
}

impl SynthRecord {
    pub fn transform(&self) -> Transform {
        Transform { dx: self.dx, dy: self.dy, scale: self.scale, angle: self.angle }
    }
}

fn overlap(a: &InkLayer, b: &InkLayer) -> usize {
    a.mask.iter().zip(&b.mask).filter(|(x, y)| **x && **y).count()
}

/// Choose sources and transforms for every sample without rendering.
pub fn plan(pool: &SourcePool, cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    let mut layers = std::collections::HashMap::new();
    let mut layer = |kind: InkKind, i: usize| -> InkLayer {
        layers
            .entry((kind == InkKind::Printed, i))
            .or_insert_with(|| extract_layer(&pool.list(kind)[i].image, cfg.threshold))
            .clone()
    };
    let mut records = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut index = 0u64;
    for split in Split::ALL {
        let pts = pool.partition(InkKind::Printed, split, cfg.test_sources)?;
        let hts = pool.partition(InkKind::Handwritten, split, cfg.test_sources)?;
        for k in 0..cfg.count(split) {
            let seed = sample_seed(cfg.seed, index);
            index += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pi = rng.random_range(pts.clone());
            let mut hi = rng.random_range(hts.clone());
            if cfg.min_overlap > 0 {
                let pl = layer(InkKind::Printed, pi);
                let mut best = (overlap(&pl, &layer(InkKind::Handwritten, hi)), hi);
                for _ in 0..32 {
                    if best.0 >= cfg.min_overlap {
                        break;
                    }
                    let cand = rng.random_range(hts.clone());
                    let ov = overlap(&pl, &layer(InkKind::Handwritten, cand));
                    if ov > best.0 {
                        best = (ov, cand);
                    }
                }
                hi = best.1;
            }
            let t = cfg.augment.sample(&mut rng, cfg.size, cfg.size);
            let id = format!("{}_{k:05}", split.name());
            records.push(SynthRecord {
                image_path: format!("{id}_img.png"),
                gt_path: format!("{id}_gt.png"),
                id,
                split,
                seed,
                source_pt_id: pool.printed[pi].id.clone(),
                source_ht_id: pool.handwritten[hi].id.clone(),
                dx: t.dx,
                dy: t.dy,
                scale: t.scale,
                angle: t.angle,
            });
        }
    }
    Ok(records)
}

/// Compose and augment the sample described by `record`.
pub fn render(pool: &SourcePool, record: &SynthRecord, cfg: &SynthConfig) -> Result<Sample> {
    let pt = pool
        .find(InkKind::Printed, &record.source_pt_id)
        .ok_or_else(|| Error::Manifest(format!("unknown printed source '{}'", record.source_pt_id)))?;
    let ht = pool
        .find(InkKind::Handwritten, &record.source_ht_id)
        .ok_or_else(|| Error::Manifest(format!("unknown handwritten source '{}'", record.source_ht_id)))?;
    let sample = compose(&extract_layer(&pt.image, cfg.threshold), &extract_layer(&ht.image, cfg.threshold))?;
    augment(&sample, &record.transform(), &cfg.augment)
}

/// Plan and render every sample in memory.
pub fn generate(pool: &SourcePool, cfg: &SynthConfig) -> Result<Vec<(SynthRecord, Sample)>> {
    plan(pool, cfg)?
        .into_iter()
        .map(|r| {
            let s = render(pool, &r, cfg)?;
            Ok((r, s))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Pixel counts in (PT, HT, BG, OV) order.
    pub class_pixels: [u64; 4],
}

impl DatasetSummary {
    fn add(&mut self, split: Split, labels: &LabelMap) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
        for c in Class::ALL {
            self.class_pixels[c.index()] += labels.count(c) as u64;
        }
    }
}

/// Write every sample as `<id>_img.png` / `<id>_gt.png` under `out` plus a
/// line-delimited manifest.
pub fn build_dataset(pool: &SourcePool, cfg: &SynthConfig, out: &Path) -> Result<(Vec<SynthRecord>, DatasetSummary)> {
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let records = plan(pool, cfg)?;
    let mut summary = DatasetSummary::default();
    for r in &records {
        let s = render(pool, r, cfg)?;
        write_sample(out, r, &s)?;
        summary.add(r.split, &s.labels);
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    Ok((records, summary))
}

fn write_sample(dir: &Path, r: &SynthRecord, s: &Sample) -> Result<()> {
    let img_path = dir.join(&r.image_path);
    s.image.save(&img_path).map_err(|source| Error::Image { path: img_path, source })?;
    let gt_path = dir.join(&r.gt_path);
    encode_gt(&s.labels).save(&gt_path).map_err(|source| Error::Image { path: gt_path, source })
}

pub fn write_manifest(path: &Path, records: &[SynthRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("writing manifest", e))?;
    }
    w.flush().map_err(|e| Error::io("writing manifest", e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SynthRecord>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(n, line)| {
            let line = line.map_err(|e| Error::io("reading manifest", e))?;
            serde_json::from_str(&line).map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Load the samples of one split from a dataset directory.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(SynthRecord, Sample)>> {
    read_manifest(&dir.join(MANIFEST_FILE))?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let image = read_gray(&dir.join(&r.image_path))?;
            let labels = decode_gt(&read_rgb(&dir.join(&r.gt_path))?, LabelMode::Four)?;
            Ok((r, Sample { image, labels }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)]))
    }

    #[test]
    fn extraction_thresholds() {
        assert_eq!(extract_layer(&gray(4, 4, |_, _| 255), 128).ink_count(), 0);
        assert_eq!(extract_layer(&gray(4, 4, |_, _| 0), 128).ink_count(), 16);
        let half = extract_layer(&gray(4, 2, |x, _| if x < 2 { 0 } else { 255 }), 128);
        assert_eq!(half.mask, vec![true, true, false, false, true, true, false, false]);
        let edge = extract_layer(&gray(2, 1, |x, _| if x == 0 { 127 } else { 128 }), 128);
        assert_eq!(edge.mask, vec![true, false]);
        assert_eq!(edge.intensity, vec![127, 255]);
    }

    #[test]
    fn composition_labels() {
        let pt = extract_layer(&gray(4, 1, |x, _| if x < 2 { 30 } else { 255 }), 128);
        let ht = extract_layer(&gray(4, 1, |x, _| if x % 2 == 1 { 90 } else { 255 }), 128);
        let s = compose(&pt, &ht).unwrap();
        assert_eq!(s.labels.classes(), &[Class::Pt, Class::Ov, Class::Bg, Class::Ht]);
        assert_eq!(s.image.as_raw(), &vec![30, 30, 255, 90]);
        let empty = extract_layer(&gray(3, 3, |_, _| 255), 128);
        let s = compose(&empty, &empty).unwrap();
        assert_eq!(s.labels.count(Class::Bg), 9);
        assert!(s.image.as_raw().iter().all(|&v| v == 255));
        let small = extract_layer(&gray(2, 2, |_, _| 255), 128);
        assert!(compose(&small, &empty).is_err());
    }

    #[test]
    fn identity_augment_is_exact() {
        let pool = SourcePool::procedural(1, 1, 32, 5);
        let s = compose(
            &extract_layer(&pool.printed[0].image, 128),
            &extract_layer(&pool.handwritten[0].image, 128),
        )
        .unwrap();
        let a = augment(&s, &Transform::IDENTITY, &AugmentRanges::default()).unwrap();
        assert_eq!(a, s);
        let bad = Transform { angle: 30.0, ..Transform::IDENTITY };
        assert!(matches!(augment(&s, &bad, &AugmentRanges::default()), Err(Error::Config(_))));
    }

    #[test]
    fn sources_have_ink_below_threshold() {
        let p = procedural_printed(1, 64, 64);
        let h = procedural_handwritten(1, 64, 64);
        assert!(extract_layer(&p, 128).ink_count() > 200);
        assert!(extract_layer(&h, 128).ink_count() > 100);
        assert!(p.as_raw().iter().all(|&v| v == 255 || v <= 50));
        assert!(h.as_raw().iter().all(|&v| v == 255 || (60..=115).contains(&v)));
    }

    #[test]
    fn seeds_differ_by_index() {
        assert_ne!(sample_seed(0, 0), sample_seed(0, 1));
        assert_ne!(sample_seed(0, 0), sample_seed(1, 0));
        assert_eq!(sample_seed(7, 3), sample_seed(7, 3));
    }

    #[test]
    fn insufficient_sources() {
        let pool = SourcePool::procedural(2, 8, 16, 0);
        let cfg = SynthConfig { size: 16, test_sources: 2, ..SynthConfig::toy() };
        assert!(matches!(plan(&pool, &cfg), Err(Error::Config(_))));
    }
}
