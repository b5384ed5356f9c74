//! Paired RGB/thermal datasets: on-disk layout, decoding, normalization,
//! augmentation, batching, and a procedural scene generator whose
//! RGB→thermal rule is known exactly.
//!
//! Layout on disk: `root/{split}/{rgb,thermal}/<id>.png` plus an optional
//! `root/{split}/tags.csv` with header `id,tag`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::{parallel, Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Day,
    Night,
    #[default]
    Untagged,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Day => "day",
            Tag::Night => "night",
            Tag::Untagged => "untagged",
        })
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "day" => Ok(Tag::Day),
            "night" => Ok(Tag::Night),
            "untagged" | "" => Ok(Tag::Untagged),
            other => Err(Error::Data(format!("unknown tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// An aligned source/target pair in normalized `[-1, 1]` units.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `[3, H, W]`
    pub source: Tensor,
    /// `[Ct, H, W]`
    pub target: Tensor,
    pub tag: Tag,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, source: Tensor, target: Tensor, tag: Tag) -> Result<Self> {
        let (s, t) = (source.shape(), target.shape());
        if s.len() != 3 || t.len() != 3 || s[0] != 3 || s[1..] != t[1..] {
            return Err(Error::shape(s, t, "image pair must be [3,H,W] / [Ct,H,W]"));
        }
        let in_range = |x: &Tensor| x.data().iter().all(|v| (-1.0..=1.0).contains(v));
        if !in_range(&source) || !in_range(&target) {
            return Err(Error::Range("pixel values outside [-1, 1]".into()));
        }
        Ok(Self {
            id: id.into(),
            source,
            target,
            tag,
        })
    }

    pub fn height(&self) -> usize {
        self.source.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.source.shape()[2]
    }
}

/// `[0, 1] → [-1, 1]`.
pub fn normalize(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// `[-1, 1] → [0, 1]`, clamped.
pub fn denormalize(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// 8-bit code of a normalized value.
pub fn to_u8(v: f32) -> u8 {
    (denormalize(v) * 255.0).round() as u8
}

/// Rec. 601 luma of a `[3, H, W]` source, as a `[1, H, W]` tensor.
pub fn grayscale(source: &Tensor) -> Result<Tensor> {
    let s = source.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Geometry(format!("grayscale expects [3,H,W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = source.data();
    let out = (0..hw)
        .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
        .collect();
    Tensor::new(&[1, s[1], s[2]], out)
}

// ---- manifest and loading -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub tag: Tag,
}

/// Percentile window applied to 16-bit thermal images before normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalScaling {
    pub lo: f32,
    pub hi: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    /// Filled in by [`DatasetManifest::resolve_scaling`]; `None` if every thermal image is 8-bit.
    #[serde(default)]
    pub thermal_scaling: Option<ThermalScaling>,
}

impl DatasetManifest {
    /// Build a manifest from the directory layout. Ids come from the RGB file
    /// stems; a thermal file with the same stem must exist.
    pub fn scan(root: &Path, split: Split) -> Result<Self> {
        let dir = root.join(split.as_str());
        let rgb_dir = dir.join("rgb");
        if !rgb_dir.is_dir() {
            return Err(Error::MissingFile(rgb_dir));
        }
        let tags = read_tags(&dir.join("tags.csv"))?;
        let mut entries = Vec::new();
        for item in fs::read_dir(&rgb_dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                target: dir.join("thermal").join(format!("{id}.png")),
                source: path.clone(),
                tag: tags.get(id).copied().unwrap_or_default(),
            });
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let m = Self {
            root: root.to_path_buf(),
            split,
            entries,
            thermal_scaling: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Every file exists and ids are unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate id {}", e.id)));
            }
            for p in [&e.source, &e.target] {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        Ok(())
    }

    /// Keep only entries with the given tag.
    pub fn filter_tag(mut self, tag: Tag) -> Self {
        self.entries.retain(|e| e.tag == tag);
        self
    }

    /// Compute the global 1%/99% window over all 16-bit thermal images.
    pub fn resolve_scaling(&mut self) -> Result<()> {
        if self.thermal_scaling.is_some() {
            return Ok(());
        }
        let mut values: Vec<u16> = Vec::new();
        for e in &self.entries {
            if let DynamicImage::ImageLuma16(img) = decode_thermal(&e.target)? {
                values.extend(img.into_raw());
            }
        }
        if values.is_empty() {
            return Ok(());
        }
        values.sort_unstable();
        let at = |q: f64| values[((values.len() - 1) as f64 * q).round() as usize] as f32;
        let (lo, hi) = (at(0.01), at(0.99));
        if hi <= lo {
            return Err(Error::Data(format!(
                "16-bit thermal images are constant over the 1%-99% window ({lo})"
            )));
        }
        self.thermal_scaling = Some(ThermalScaling { lo, hi });
        Ok(())
    }
}

fn read_tags(path: &Path) -> Result<BTreeMap<String, Tag>> {
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    #[derive(Deserialize)]
    struct Row {
        id: String,
        tag: String,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    for row in rdr.deserialize() {
        let row: Row = row?;
        out.insert(row.id, row.tag.parse()?);
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Single-channel thermal image, as `Luma8` or `Luma16` depending on bit depth.
fn decode_thermal(path: &Path) -> Result<DynamicImage> {
    let img = open_image(path)?;
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    Ok(if sixteen {
        DynamicImage::ImageLuma16(img.to_luma16())
    } else {
        DynamicImage::ImageLuma8(img.to_luma8())
    })
}

fn resize_planes<P>(img: ImageBuffer<P, Vec<f32>>, size: Option<usize>) -> ImageBuffer<P, Vec<f32>>
where
    P: image::Pixel<Subpixel = f32> + 'static,
{
    match size {
        Some(s) if (img.width() as usize, img.height() as usize) != (s, s) => {
            imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    }
}

fn load_entry(
    e: &ManifestEntry,
    size: Option<usize>,
    scaling: Option<ThermalScaling>,
) -> Result<ImagePair> {
    let src = resize_planes(open_image(&e.source)?.to_rgb32f(), size);
    let thermal = match decode_thermal(&e.target)? {
        DynamicImage::ImageLuma16(img) => {
            let ThermalScaling { lo, hi } = scaling.ok_or_else(|| {
                Error::Data("16-bit thermal image without a resolved scaling window".into())
            })?;
            let (w, h) = img.dimensions();
            let raw = img
                .into_raw()
                .into_iter()
                .map(|v| ((v as f32 - lo) / (hi - lo)).clamp(0.0, 1.0))
                .collect();
            ImageBuffer::<Luma<f32>, _>::from_raw(w, h, raw).expect("buffer size")
        }
        other => other.to_luma32f(),
    };
    let thermal = resize_planes(thermal, size);
    if src.dimensions() != thermal.dimensions() {
        return Err(Error::Data(format!(
            "pair {} misaligned: rgb {:?} vs thermal {:?}",
            e.id,
            src.dimensions(),
            thermal.dimensions()
        )));
    }
    let (w, h) = (src.width() as usize, src.height() as usize);
    let mut source = vec![0.0f32; 3 * h * w];
    for (i, p) in src.pixels().enumerate() {
        for c in 0..3 {
            source[c * h * w + i] = normalize(p.0[c].clamp(0.0, 1.0));
        }
    }
    let target = thermal
        .pixels()
        .map(|p| normalize(p.0[0].clamp(0.0, 1.0)))
        .collect();
    ImagePair::new(
        e.id.clone(),
        Tensor::new(&[3, h, w], source)?,
        Tensor::new(&[1, h, w], target)?,
        e.tag,
    )
}

/// Decode every pair, resize to `size × size` (bilinear) when given, and
/// normalize to `[-1, 1]`. Output is ordered by id.
pub fn load_dataset(manifest: &DatasetManifest, size: Option<usize>) -> Result<Vec<ImagePair>> {
    manifest.validate()?;
    let mut m = manifest.clone();
    m.resolve_scaling()?;
    let mut entries: Vec<&ManifestEntry> = m.entries.iter().collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    parallel::map_range(entries.len(), |i| load_entry(entries[i], size, m.thermal_scaling))
        .into_iter()
        .collect()
}

// ---- writing --------------------------------------------------------------

pub fn rgb_image(source: &Tensor) -> Result<image::RgbImage> {
    let s = source.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Geometry(format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = source.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    }))
}

/// First channel of a `[C, H, W]` tensor as an 8-bit gray image.
pub fn gray_image(t: &Tensor) -> Result<image::GrayImage> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Geometry(format!("expected [C,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(d[y as usize * w + x as usize])])
    }))
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write pairs in the standard layout under `root/{split}`, with `tags.csv`.
pub fn write_dataset(root: &Path, split: Split, pairs: &[ImagePair]) -> Result<DatasetManifest> {
    let dir = root.join(split.as_str());
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("thermal"))?;
    let mut tags = csv::Writer::from_path(dir.join("tags.csv"))?;
    tags.write_record(["id", "tag"])?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let source = dir.join("rgb").join(format!("{}.png", p.id));
        let target = dir.join("thermal").join(format!("{}.png", p.id));
        save_png(&rgb_image(&p.source)?, &source)?;
        save_png(&gray_image(&p.target)?, &target)?;
        tags.write_record([p.id.as_str(), &p.tag.to_string()])?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            source,
            target,
            tag: p.tag,
        });
    }
    tags.flush()?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
        thermal_scaling: None,
    })
}

/// Side-by-side strip of `[3,H,W]` source then any number of `[1,H,W]` panels.
pub fn comparison_strip(source: &Tensor, panels: &[&Tensor]) -> Result<image::RgbImage> {
    let rgb = rgb_image(source)?;
    let (w, h) = rgb.dimensions();
    let mut out = image::RgbImage::new(w * (1 + panels.len() as u32), h);
    imageops::replace(&mut out, &rgb, 0, 0);
    for (k, p) in panels.iter().enumerate() {
        let g = DynamicImage::ImageLuma8(gray_image(p)?).to_rgb8();
        if g.dimensions() != (w, h) {
            return Err(Error::shape(source.shape(), p.shape(), "comparison strip panel"));
        }
        imageops::replace(&mut out, &g, (w * (k as u32 + 1)) as i64, 0);
    }
    Ok(out)
}

pub fn save_rgb(img: &image::RgbImage, path: &Path) -> Result<()> {
    save_png(img, path)
}

// ---- augmentation and batching -------------------------------------------

fn flip_planes(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Mirror source and target left-right.
pub fn flip_horizontal(pair: &ImagePair) -> ImagePair {
    ImagePair {
        id: pair.id.clone(),
        source: flip_planes(&pair.source),
        target: flip_planes(&pair.target),
        tag: pair.tag,
    }
}

/// Horizontal flip with probability one half, applied jointly.
pub fn augment(pair: &ImagePair, rng: &mut Rng) -> ImagePair {
    if rng.bernoulli(0.5) {
        flip_horizontal(pair)
    } else {
        pair.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, 3, H, W]`
    pub x: Tensor,
    /// `[N, Ct, H, W]`
    pub y0: Tensor,
    pub tags: Vec<Tag>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&ImagePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let xs: Vec<&Tensor> = pairs.iter().map(|p| &p.source).collect();
        let ys: Vec<&Tensor> = pairs.iter().map(|p| &p.target).collect();
        Ok(Self {
            x: Tensor::stack(&xs)?,
            y0: Tensor::stack(&ys)?,
            tags: pairs.iter().map(|p| p.tag).collect(),
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ordered batch stream over a dataset; the last batch may be short.
pub struct Batches<'a> {
    pairs: &'a [ImagePair],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let items: Vec<&ImagePair> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.pairs[i])
            .collect();
        self.pos = end;
        Some(Batch::from_pairs(&items))
    }
}

/// Batches in dataset order, or in a seeded permutation when `shuffle_seed` is set.
pub fn batches(
    pairs: &[ImagePair],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches<'_>> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(Batches {
        pairs,
        order,
        batch_size,
        pos: 0,
    })
}

// ---- synthetic scenes -----------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Day,
    Night,
}

impl SynthMode {
    pub fn tag(self) -> Tag {
        match self {
            SynthMode::Day => Tag::Day,
            SynthMode::Night => Tag::Night,
        }
    }
}

/// Inclusive range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub image_size: usize,
    pub pedestrians: Span<usize>,
    pub vehicles: Span<usize>,
    /// Pedestrian half-height as a fraction of the image side.
    pub pedestrian_radius: Span<f32>,
    /// Vehicle width and height as fractions of the image side.
    pub vehicle_width: Span<f32>,
    pub vehicle_height: Span<f32>,
    /// Peak-to-peak amplitude of the linear background gradient.
    pub gradient: f32,
    pub mode: SynthMode,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            pedestrians: Span::new(1, 3),
            vehicles: Span::new(1, 2),
            pedestrian_radius: Span::new(0.08, 0.16),
            vehicle_width: Span::new(0.2, 0.35),
            vehicle_height: Span::new(0.1, 0.18),
            gradient: 0.2,
            mode: SynthMode::Day,
            seed: 0,
        }
    }
}

/// Source dimming and target compression applied at night.
pub const NIGHT_SOURCE_GAIN: f32 = 0.4;
pub const NIGHT_TARGET_CENTER: f32 = 0.45;
pub const NIGHT_TARGET_GAIN: f32 = 0.3;

const PEDESTRIAN_HEAT: f32 = 0.9;
const VEHICLE_HEAT: f32 = 0.55;
const TIRE_HEAT: f32 = 0.98;
const TIRE_VALUE: f32 = 0.03;

/// Day-mode thermal of a background pixel with gray level `g ∈ [0.35, 0.85]`.
fn background_heat(g: f32) -> f32 {
    0.10 + 0.30 * (0.85 - g.clamp(0.35, 0.85)) / 0.5
}

fn night_heat(day: f32) -> f32 {
    NIGHT_TARGET_CENTER + (day - NIGHT_TARGET_CENTER) * NIGHT_TARGET_GAIN
}

/// RGB with the given hue (degrees), max channel `value` and chroma.
fn hue_color(hue: f32, value: f32, chroma: f32) -> [f32; 3] {
    let h = (hue.rem_euclid(360.0)) / 60.0;
    let x = chroma * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = value - chroma;
    [r + m, g + m, b + m]
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.pedestrians.min > self.pedestrians.max || self.vehicles.min > self.vehicles.max {
            return bad("count ranges must satisfy min <= max");
        }
        let size = self.image_size as f32;
        for (name, s) in [
            ("pedestrian_radius", self.pedestrian_radius),
            ("vehicle_width", self.vehicle_width),
            ("vehicle_height", self.vehicle_height),
        ] {
            if !(s.min > 0.0 && s.min <= s.max && s.max <= 1.0) {
                return bad(&format!("{name} must satisfy 0 < min <= max <= 1"));
            }
            if s.min * size < 1.0 {
                return bad(&format!("{name} yields objects below one pixel"));
            }
        }
        if !(0.0..=0.5).contains(&self.gradient) {
            return bad("gradient must lie in [0, 0.5]");
        }
        Ok(())
    }

    /// Render scene `index` in `[0, 1]` units: (`[3,H,W]` rgb, `[1,H,W]` thermal).
    fn render(&self, index: u64) -> (Vec<f32>, Vec<f32>) {
        let n = self.image_size;
        let sz = n as f32;
        let mut rng = Rng::new(self.seed).split(index);
        let mut rgb = vec![0.0f32; 3 * n * n];
        let mut heat = vec![0.0f32; n * n];
        let put = |rgb: &mut [f32], heat: &mut [f32], i: usize, c: [f32; 3], t: f32| {
            for (k, v) in c.iter().enumerate() {
                rgb[k * n * n + i] = *v;
            }
            heat[i] = t;
        };

        let half = self.gradient / 2.0;
        let base = rng.uniform(0.35 + half, 0.85 - half);
        let (gx, gy) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        let norm = (gx.abs() + gy.abs()).max(1e-3);
        for y in 0..n {
            for x in 0..n {
                let u = (x as f32 / (sz - 1.0)) * 2.0 - 1.0;
                let v = (y as f32 / (sz - 1.0)) * 2.0 - 1.0;
                let g = (base + half * (gx * u + gy * v) / norm).clamp(0.35, 0.85);
                put(&mut rgb, &mut heat, y * n + x, [g; 3], background_heat(g));
            }
        }

        let vehicles = rng.int_inclusive(self.vehicles.min, self.vehicles.max);
        for _ in 0..vehicles {
            let w = (rng.uniform(self.vehicle_width.min, self.vehicle_width.max) * sz).round() as usize;
            let h = (rng.uniform(self.vehicle_height.min, self.vehicle_height.max) * sz).round() as usize;
            let (w, h) = (w.clamp(2, n), h.clamp(2, n));
            let x0 = rng.int_inclusive(0, n - w);
            let y0 = rng.int_inclusive(0, n - h);
            let color = hue_color(rng.uniform(0.0, 360.0), rng.uniform(0.5, 0.8), rng.uniform(0.15, 0.3));
            let tire_h = ((h as f32 * 0.25).round() as usize).max(1);
            let tire_w = ((w as f32 * 0.25).round() as usize).max(1);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let tire = y >= y0 + h - tire_h && (x < x0 + tire_w || x >= x0 + w - tire_w);
                    if tire {
                        put(&mut rgb, &mut heat, y * n + x, [TIRE_VALUE; 3], TIRE_HEAT);
                    } else {
                        put(&mut rgb, &mut heat, y * n + x, color, VEHICLE_HEAT);
                    }
                }
            }
        }

        let pedestrians = rng.int_inclusive(self.pedestrians.min, self.pedestrians.max);
        for _ in 0..pedestrians {
            let ry = rng.uniform(self.pedestrian_radius.min, self.pedestrian_radius.max) * sz;
            let rx = (ry * rng.uniform(0.35, 0.5)).max(0.75);
            let cx = rng.uniform(0.0, sz - 1.0);
            let cy = rng.uniform(0.0, sz - 1.0);
            let color = hue_color(rng.uniform(0.0, 360.0), rng.uniform(0.8, 0.95), rng.uniform(0.5, 0.75));
            for y in 0..n {
                for x in 0..n {
                    let dx = (x as f32 - cx) / rx;
                    let dy = (y as f32 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        put(&mut rgb, &mut heat, y * n + x, color, PEDESTRIAN_HEAT);
                    }
                }
            }
        }

        if self.mode == SynthMode::Night {
            rgb.iter_mut().for_each(|v| *v *= NIGHT_SOURCE_GAIN);
            heat.iter_mut().for_each(|v| *v = night_heat(*v));
        }
        (rgb, heat)
    }
}

/// The exact per-pixel rule mapping a synthetic source image to its thermal
/// target. It classifies each pixel by its brightness and saturation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthOracle {
    pub mode: SynthMode,
}

impl SynthOracle {
    /// Thermal value in `[0, 1]` of one `[0, 1]` RGB pixel.
    pub fn pixel(&self, rgb: [f32; 3]) -> f32 {
        let k = match self.mode {
            SynthMode::Day => 1.0,
            SynthMode::Night => NIGHT_SOURCE_GAIN,
        };
        let max = rgb.iter().copied().fold(f32::MIN, f32::max) / k;
        let min = rgb.iter().copied().fold(f32::MAX, f32::min) / k;
        let chroma = max - min;
        let day = if max < 0.2 {
            TIRE_HEAT
        } else if chroma >= 0.35 {
            PEDESTRIAN_HEAT
        } else if chroma >= 0.1 {
            VEHICLE_HEAT
        } else {
            background_heat((rgb[0] + rgb[1] + rgb[2]) / (3.0 * k))
        };
        match self.mode {
            SynthMode::Day => day,
            SynthMode::Night => night_heat(day),
        }
    }

    /// Apply to a normalized `[3,H,W]` source; returns a normalized `[1,H,W]` target.
    pub fn apply(&self, source: &Tensor) -> Result<Tensor> {
        let s = source.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Geometry(format!("oracle expects [3,H,W], got {s:?}")));
        }
        let hw = s[1] * s[2];
        let d = source.data();
        let out = (0..hw)
            .map(|i| {
                let px = [d[i], d[hw + i], d[2 * hw + i]].map(denormalize);
                normalize(self.pixel(px))
            })
            .collect();
        Tensor::new(&[1, s[1], s[2]], out)
    }
}

/// `n` scenes with ids `{mode}_{index:05}`. Scene `i` depends only on
/// `(spec minus mode, i)`, so day and night sets from one seed share geometry.
pub fn synth_generate(spec: &SynthSceneSpec, n: usize) -> Result<(Vec<ImagePair>, SynthOracle)> {
    synth_generate_range(spec, 0, n)
}

/// Scenes `start..start + n`, for carving disjoint splits out of one seed.
pub fn synth_generate_range(
    spec: &SynthSceneSpec,
    start: usize,
    n: usize,
) -> Result<(Vec<ImagePair>, SynthOracle)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("synthetic scene count must be at least 1".into()));
    }
    let size = spec.image_size;
    let prefix = match spec.mode {
        SynthMode::Day => "day",
        SynthMode::Night => "night",
    };
    let pairs = parallel::map_range(n, |k| {
        let i = start + k;
        let (rgb, heat) = spec.render(i as u64);
        ImagePair::new(
            format!("{prefix}_{i:05}"),
            Tensor::new(&[3, size, size], rgb.into_iter().map(normalize).collect())?,
            Tensor::new(&[1, size, size], heat.into_iter().map(normalize).collect())?,
            spec.mode.tag(),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((pairs, SynthOracle { mode: spec.mode }))
}
