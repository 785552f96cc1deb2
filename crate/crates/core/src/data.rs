//! Datasets: image folders, IDX digit archives, aligned evaluation pairs,
//! augmentations and a synthetic two-domain scene generator.
//!
//! Images are kept as `f32` in `[-1, 1]`, stacked `[N, C, H, W]`.
//! 8-bit values map as `v = u / 255 * 2 - 1`; the inverse rounds half away
//! from zero. Resizing uses a triangle (bilinear) filter whose support
//! widens when downscaling, so it antialiases.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, ByteOrder};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, UnitError};
use crate::model::Domain;
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// In-memory dataset of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub channels: usize,
    pub resolution: usize,
    /// `[N, C, H, W]` in `[-1, 1]`.
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    /// Source file stem or synthetic index per record.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(domain: Domain, images: Tensor<f32>, labels: Option<Vec<usize>>, names: Vec<String>) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        if h != w {
            return Err(dim_err!("dataset images must be square, got {}x{}", h, w));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) || names.len() != n {
            return Err(dim_err!("{} images but {} names / labels {:?}", n, names.len(), labels.as_ref().map(Vec::len)));
        }
        Ok(Self { domain, channels: c, resolution: h, images, labels, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Selected records as one batch.
    pub fn batch<F: Real>(&self, idx: &[usize]) -> Tensor<F> {
        self.images.select(idx).cast()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
    }

    /// Copy without labels.
    pub fn unlabeled(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }

    /// First `n` records.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            domain: self.domain,
            channels: self.channels,
            resolution: self.resolution,
            images: self.images.select(idx),
            labels: self.labels_of(idx),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }

    /// Every record resized to `resolution`.
    pub fn resized(&self, resolution: usize) -> Result<Self> {
        if resolution == self.resolution {
            return Ok(self.clone());
        }
        let per = self.channels * self.resolution * self.resolution;
        let mut data = Vec::with_capacity(self.len() * self.channels * resolution * resolution);
        for i in 0..self.len() {
            let img = &self.images.data()[i * per..(i + 1) * per];
            data.extend(resize_chw(img, self.channels, self.resolution, self.resolution, resolution, resolution));
        }
        let images = Tensor::from_vec(&[self.len(), self.channels, resolution, resolution], data)?;
        Self::new(self.domain, images, self.labels.clone(), self.names.clone())
    }

    /// Gray records replicated to three channels.
    pub fn to_rgb(&self) -> Result<Self> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => {
                let hw = self.resolution * self.resolution;
                let mut data = Vec::with_capacity(self.images.len() * 3);
                for img in self.images.data().chunks(hw) {
                    for _ in 0..3 {
                        data.extend_from_slice(img);
                    }
                }
                let images = Tensor::from_vec(&[self.len(), 3, self.resolution, self.resolution], data)?;
                Self::new(self.domain, images, self.labels.clone(), self.names.clone())
            }
            c => Err(dim_err!("cannot convert {}-channel images to RGB", c)),
        }
    }

    /// RGB records with x and y coordinate channels appended.
    pub fn with_coordinates(&self) -> Result<Self> {
        Self::new(self.domain, add_coordinate_channels(&self.images)?, self.labels.clone(), self.names.clone())
    }

    pub fn in_domain(&self, domain: Domain) -> Self {
        Self { domain, ..self.clone() }
    }
}

/// Held-out pairs of a source image and its ground-truth translation.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedEvalSet {
    pub sources: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub names: Vec<String>,
}

impl AlignedEvalSet {
    pub fn new(sources: Tensor<f32>, targets: Tensor<f32>, names: Vec<String>) -> Result<Self> {
        let (n, ..) = sources.dims4()?;
        let (m, ..) = targets.dims4()?;
        if n != m || n != names.len() {
            return Err(dim_err!("aligned set with {} sources, {} targets, {} names", n, m, names.len()));
        }
        Ok(Self { sources, targets, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One training step's images.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch<F> {
    pub x1: Tensor<F>,
    pub x2: Tensor<F>,
    /// Labels of the domain-1 images when the source dataset has them.
    pub labels1: Option<Vec<usize>>,
}

pub fn to_unit(u: u8) -> f32 {
    u as f32 / 255.0 * 2.0 - 1.0
}

/// Round half away from zero, clamped to the 8-bit range.
pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

fn resize_chw(img: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(
            w as u32,
            h as u32,
            img[ch * h * w..(ch + 1) * h * w].to_vec(),
        )
        .expect("plane size");
        let r = image::imageops::resize(&plane, ow as u32, oh as u32, FilterType::Triangle);
        out.extend(r.into_raw());
    }
    out
}

/// `[C, H, W]` tensor from a decoded image, converted to 1 or 3 channels
/// (grayscale replicates to RGB) and resized when `resolution` is given.
pub fn image_to_tensor(img: &DynamicImage, channels: usize, resolution: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let img = match resolution {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            img.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
        _ => img.clone(),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(to_unit).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            let mut d = vec![0.0; 3 * h * w];
            for (p, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    d[c * h * w + p] = to_unit(px[c]);
                }
            }
            d
        }
        _ => return Err(UnitError::Config(format!("images load as 1 or 3 channels, not {}", channels))),
    };
    Tensor::from_vec(&[channels, h, w], data)
}

pub fn read_image(path: &Path, channels: usize, resolution: Option<usize>) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| UnitError::Image { path: path.to_path_buf(), source })?;
    image_to_tensor(&img, channels, resolution.map(|r| (r, r)))
}

/// Writes a `[C, H, W]` or `[1, C, H, W]` tensor as PNG. One channel is
/// written as grayscale; otherwise the first three channels as RGB.
pub fn write_image<F: Real>(path: &Path, x: &Tensor<F>) -> Result<()> {
    let s = x.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(dim_err!("cannot write tensor of shape {:?} as an image", s)),
    };
    let d = x.data();
    let err = |source| UnitError::Image { path: path.to_path_buf(), source };
    if c == 1 {
        let raw = d.iter().map(|v| to_u8(v.f64())).collect();
        GrayImage::from_raw(w as u32, h as u32, raw).expect("gray size").save(path).map_err(err)
    } else if c >= 3 {
        let mut raw = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for ch in 0..3 {
                raw.push(to_u8(d[ch * h * w + p].f64()));
            }
        }
        RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb size").save(path).map_err(err)
    } else {
        Err(dim_err!("cannot write a {}-channel image", c))
    }
}

/// Quantizes to 8 bits per value.
pub fn quantize<F: Real>(x: &Tensor<F>) -> Vec<u8> {
    x.data().iter().map(|v| to_u8(v.f64())).collect()
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(UnitError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Decodes every image in `path` (sorted by name), skipping files that fail
/// to decode.
pub fn load_image_folder(path: &Path, domain: Domain, resolution: usize, channels: usize) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut names = Vec::new();
    for file in sorted_files(path)? {
        match read_image(&file, channels, Some(resolution)) {
            Ok(t) => {
                data.extend(t.into_data());
                names.push(stem(&file));
            }
            Err(e) => log::warn!("skipping {}: {}", file.display(), e),
        }
    }
    if names.is_empty() {
        return Err(UnitError::Dataset(format!("no decodable images in {}", path.display())));
    }
    let images = Tensor::from_vec(&[names.len(), channels, resolution, resolution], data)?;
    Dataset::new(domain, images, None, names)
}

/// Labeled images stored as `dir/<class>/<file>`, class directories named
/// by their integer label.
pub fn load_class_folders(dir: &Path, domain: Domain, resolution: usize, channels: usize) -> Result<Dataset> {
    let mut classes = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if let Some(label) = p.is_dir().then(|| stem(&p).parse::<usize>().ok()).flatten() {
            classes.push((label, p));
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(UnitError::Dataset(format!("no class directories in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut names = Vec::new();
    let mut labels = Vec::new();
    for (label, p) in classes {
        let d = load_image_folder(&p, domain, resolution, channels)?;
        data.extend_from_slice(d.images.data());
        labels.extend(std::iter::repeat_n(label, d.len()));
        names.extend(d.names.into_iter().map(|n| format!("{label}/{n}")));
    }
    let images = Tensor::from_vec(&[names.len(), channels, resolution, resolution], data)?;
    Dataset::new(domain, images, Some(labels), names)
}

/// Parsed IDX image file: count, rows, cols and raw bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn header_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| UnitError::Format(format!("truncated IDX header ({})", what)))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = header_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(UnitError::Format(format!("IDX image magic {:#010x}, expected {:#010x}", magic, IDX_IMAGE_MAGIC)));
    }
    let count = header_u32(bytes, 4, "count")? as usize;
    let rows = header_u32(bytes, 8, "rows")? as usize;
    let cols = header_u32(bytes, 12, "cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(UnitError::Format(format!("IDX image dims {}x{}", rows, cols)));
    }
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| UnitError::Format("IDX dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(UnitError::Format(format!("IDX image body has {} bytes, header implies {}", body.len(), need)));
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = header_u32(bytes, 0, "magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(UnitError::Format(format!("IDX label magic {:#010x}, expected {:#010x}", magic, IDX_LABEL_MAGIC)));
    }
    let count = header_u32(bytes, 4, "count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(UnitError::Format(format!("IDX label body has {} bytes, header says {}", body.len(), count)));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..4], IDX_IMAGE_MAGIC);
    BigEndian::write_u32(&mut out[4..8], count as u32);
    BigEndian::write_u32(&mut out[8..12], rows as u32);
    BigEndian::write_u32(&mut out[12..16], cols as u32);
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..4], IDX_LABEL_MAGIC);
    BigEndian::write_u32(&mut out[4..8], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image archive and optional label archive as single-channel
/// images. Non-square digits are rejected.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, domain: Domain) -> Result<Dataset> {
    let imgs = parse_idx_images(&fs::read(images_path)?)?;
    if imgs.rows != imgs.cols {
        return Err(UnitError::Format(format!("IDX images are {}x{}, expected square", imgs.rows, imgs.cols)));
    }
    let labels = match labels_path {
        Some(p) => {
            let l = parse_idx_labels(&fs::read(p)?)?;
            if l.len() != imgs.count {
                return Err(UnitError::Format(format!("{} labels for {} images", l.len(), imgs.count)));
            }
            Some(l.into_iter().map(usize::from).collect())
        }
        None => None,
    };
    let images = Tensor::from_vec(&[imgs.count, 1, imgs.rows, imgs.cols], imgs.pixels.into_iter().map(to_unit).collect())?;
    Dataset::new(domain, images, labels, (0..imgs.count).map(|i| i.to_string()).collect())
}

/// Which way a side-by-side pair image is cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitAxis {
    /// Cut along a vertical line: left half is the source, right the target.
    Vertical,
    /// Cut along a horizontal line: top half is the source.
    Horizontal,
}

/// Splits every image of `dir` into a (source, target) pair.
pub fn split_aligned_pairs(dir: &Path, axis: SplitAxis, channels: usize, resolution: Option<usize>) -> Result<AlignedEvalSet> {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut names = Vec::new();
    let mut dims = None;
    for file in sorted_files(dir)? {
        let img = image::open(&file).map_err(|source| UnitError::Image { path: file.clone(), source })?;
        let (w, h) = (img.width(), img.height());
        let (a, b) = match axis {
            SplitAxis::Vertical => {
                if w % 2 != 0 {
                    return Err(UnitError::Format(format!("{} has odd width {}", file.display(), w)));
                }
                (img.crop_imm(0, 0, w / 2, h), img.crop_imm(w / 2, 0, w / 2, h))
            }
            SplitAxis::Horizontal => {
                if h % 2 != 0 {
                    return Err(UnitError::Format(format!("{} has odd height {}", file.display(), h)));
                }
                (img.crop_imm(0, 0, w, h / 2), img.crop_imm(0, h / 2, w, h / 2))
            }
        };
        let target = resolution.map(|r| (r, r)).unwrap_or((a.height() as usize, a.width() as usize));
        if *dims.get_or_insert(target) != target {
            return Err(dim_err!("pair {} has size {:?}, earlier pairs {:?}", file.display(), target, dims));
        }
        src.extend(image_to_tensor(&a, channels, Some(target))?.into_data());
        tgt.extend(image_to_tensor(&b, channels, Some(target))?.into_data());
        names.push(stem(&file));
    }
    let (h, w) = dims.unwrap_or((0, 0));
    let n = names.len();
    AlignedEvalSet::new(
        Tensor::from_vec(&[n, channels, h, w], src)?,
        Tensor::from_vec(&[n, channels, h, w], tgt)?,
        names,
    )
}

/// Appends the negation of every record (labels duplicated).
pub fn invert_augment(d: &Dataset) -> Dataset {
    let neg = d.images.map(|v| -v);
    let images = Tensor::cat(&[&d.images, &neg]).expect("same shape");
    let mut names = d.names.clone();
    names.extend(d.names.iter().map(|n| format!("{n}-inv")));
    let labels = d.labels.as_ref().map(|l| l.iter().chain(l).copied().collect());
    Dataset::new(d.domain, images, labels, names).expect("consistent")
}

/// Normalized coordinate of index `i` among `n`: `-1` at the first, `1` at
/// the last.
fn coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// `[N, 3, H, W]` to `[N, 5, H, W]`; channel 4 holds x (column), channel 5
/// holds y (row), both in `[-1, 1]`.
pub fn add_coordinate_channels<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(dim_err!("coordinate channels need a 3-channel input, got {}", c));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * 5 * hw);
    for i in 0..n {
        out.extend_from_slice(&x.data()[i * 3 * hw..(i + 1) * 3 * hw]);
        out.extend((0..hw).map(|p| F::of(coord(p % w, w))));
        out.extend((0..hw).map(|p| F::of(coord(p / w, h))));
    }
    Tensor::from_vec(&[n, 5, h, w], out)
}

/// Deterministic pixel transform relating the two synthetic domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTransform {
    /// `v -> -v`
    IntensityInvert,
    /// `(r, g, b) -> (g, b, r)`
    ChannelPermute,
    /// Hue rotated by 60 degrees.
    HueShift,
}

impl FromStr for SyntheticTransform {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intensity-invert" => Ok(Self::IntensityInvert),
            "channel-permute" => Ok(Self::ChannelPermute),
            "hue-shift" => Ok(Self::HueShift),
            other => Err(UnitError::Config(format!("unknown synthetic transform '{}'", other))),
        }
    }
}

fn hue_rotate(rgb: [f64; 3], deg: f64) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return rgb;
    }
    let s = delta / max;
    let mut h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    h = (h + deg).rem_euclid(360.0);
    let c = max * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = max - c;
    let (r1, g1, b1) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r1 + m, g1 + m, b1 + m]
}

impl SyntheticTransform {
    /// Applies the transform to `[N, 3, H, W]` images in `[-1, 1]`.
    pub fn apply(self, x: &Tensor<f32>) -> Tensor<f32> {
        match self {
            Self::IntensityInvert => x.map(|v| -v),
            Self::ChannelPermute | Self::HueShift => {
                let (n, c, h, w) = x.dims4().expect("NCHW");
                assert_eq!(c, 3, "colour transform on {} channels", c);
                let hw = h * w;
                let mut out = x.clone();
                let d = out.data_mut();
                for i in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| i * 3 * hw + ch * hw + p;
                        let px = [x.data()[at(0)], x.data()[at(1)], x.data()[at(2)]];
                        let q = if self == Self::ChannelPermute {
                            [px[1], px[2], px[0]]
                        } else {
                            let unit = px.map(|v| (v as f64 + 1.0) / 2.0);
                            hue_rotate(unit, 60.0).map(|v| (v * 2.0 - 1.0) as f32)
                        };
                        for ch in 0..3 {
                            d[at(ch)] = q[ch];
                        }
                    }
                }
                out
            }
        }
    }
}

/// Dark background colours, channels in `[0, 0.3]`.
pub const BACKGROUND_PALETTE: [[f32; 3]; 4] = [[0.05, 0.05, 0.05], [0.25, 0.1, 0.05], [0.05, 0.2, 0.1], [0.1, 0.1, 0.3]];
/// Bright shape colours, channels in `[0.55, 1]`.
pub const SHAPE_PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.6, 0.6],
    [0.6, 1.0, 0.6],
    [0.6, 0.6, 1.0],
    [1.0, 1.0, 0.6],
    [0.95, 0.95, 0.95],
    [0.6, 0.95, 1.0],
];

/// Renders one scene: a dark palette background with one to three bright
/// flat palette shapes (rectangles, ellipses, triangles). Returns
/// `[3, r, r]` in `[-1, 1]`.
pub fn render_scene(rng: &mut ChaCha8Rng, r: usize) -> Vec<f32> {
    let bg = BACKGROUND_PALETTE[rng.random_range(0..BACKGROUND_PALETTE.len())];
    let mut img = vec![0f32; 3 * r * r];
    for p in 0..r * r {
        for c in 0..3 {
            img[c * r * r + p] = bg[c];
        }
    }
    let rf = r as f32;
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let kind = rng.random_range(0..3u8);
        let col = SHAPE_PALETTE[rng.random_range(0..SHAPE_PALETTE.len())];
        let (sw, sh) = (rng.random_range(0.25..0.6) * rf, rng.random_range(0.25..0.6) * rf);
        let (x0, y0) = (rng.random_range(0.0..(rf - sw)), rng.random_range(0.0..(rf - sh)));
        for y in 0..r {
            for x in 0..r {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let (u, v) = ((px - x0) / sw, (py - y0) / sh);
                let inside = match kind {
                    0 => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
                    1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                    _ => (0.0..1.0).contains(&v) && (u - 0.5).abs() <= v / 2.0,
                };
                if inside {
                    for c in 0..3 {
                        img[c * r * r + y * r + x] = col[c];
                    }
                }
            }
        }
    }
    img.into_iter().map(|v| v * 2.0 - 1.0).collect()
}

fn render_set(seed: u64, stream: u64, count: usize, r: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut data = Vec::with_capacity(count * 3 * r * r);
    for _ in 0..count {
        data.extend(render_scene(&mut rng, r));
    }
    Tensor::from_vec(&[count, 3, r, r], data).expect("scene size")
}

/// Two unpaired training sets of `count` images each, rendered from
/// disjoint scene streams, plus `max(1, count / 5)` held-out aligned pairs.
pub fn make_synthetic_domains(
    seed: u64,
    count: usize,
    resolution: usize,
    transform: SyntheticTransform,
) -> Result<(Dataset, Dataset, AlignedEvalSet)> {
    if count < 2 {
        return Err(UnitError::Config(format!("synthetic count must be at least 2, got {}", count)));
    }
    if resolution < 4 {
        return Err(UnitError::Config(format!("synthetic resolution {} too small", resolution)));
    }
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i:05}")).collect::<Vec<_>>();
    let d1 = Dataset::new(Domain::One, render_set(seed, 1, count, resolution), None, names("a", count))?;
    let d2 = Dataset::new(Domain::Two, transform.apply(&render_set(seed, 2, count, resolution)), None, names("b", count))?;
    let ne = (count / 5).max(1);
    let src = render_set(seed, 3, ne, resolution);
    let tgt = transform.apply(&src);
    Ok((d1, d2, AlignedEvalSet::new(src, tgt, names("pair", ne))?))
}

/// Indices of a batch: `batch_size` uniform draws from each dataset,
/// domain 1 first.
pub fn sample_indices(n1: usize, n2: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let a = (0..batch_size).map(|_| rng.random_range(0..n1)).collect();
    let b = (0..batch_size).map(|_| rng.random_range(0..n2)).collect();
    (a, b)
}

pub fn sample_batch<F: Real>(d1: &Dataset, d2: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<DomainBatch<F>> {
    if d1.is_empty() || d2.is_empty() {
        return Err(UnitError::Config("cannot sample from an empty dataset".into()));
    }
    let (a, b) = sample_indices(d1.len(), d2.len(), batch_size.max(1), rng);
    Ok(DomainBatch { x1: d1.batch(&a), x2: d2.batch(&b), labels1: d1.labels_of(&a) })
}
