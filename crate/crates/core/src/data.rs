//! Image/mask datasets: PNG pairs on disk, deterministic train/test
//! splitting, resizing and a synthetic curvilinear-vessel generator.
//!
//! On disk a dataset is `images/<id>.png` plus `masks/<id>.png`. Images are
//! 8-bit grayscale or RGB (alpha is dropped); masks are 8-bit grayscale
//! with every pixel 0 or 255.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// One image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, channels, H, W)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        let [n, _, h, w] = image.dims4()?;
        if n != 1 {
            return Err(Error::Shape(format!("a sample holds one image, got batch {n}")));
        }
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::Shape(format!(
                "image is {h}x{w} but mask is {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn channels(&self) -> usize {
        self.image.channels()
    }

    /// Converts between one and three channels: gray is replicated, RGB is
    /// reduced with Rec. 601 luma weights.
    pub fn with_channels(&self, channels: usize) -> Result<Sample> {
        let c = self.channels();
        if c == channels {
            return Ok(self.clone());
        }
        let (h, w) = (self.height(), self.width());
        let image = match (c, channels) {
            (1, 3) => Tensor::from_fn4([1, 3, h, w], |_, _, y, x| self.image.at4(0, 0, y, x)),
            (3, 1) => Tensor::from_fn4([1, 1, h, w], |_, _, y, x| {
                0.299 * self.image.at4(0, 0, y, x)
                    + 0.587 * self.image.at4(0, 1, y, x)
                    + 0.114 * self.image.at4(0, 2, y, x)
            }),
            _ => return Err(Error::Data(format!("cannot convert {c}-channel image to {channels} channels"))),
        };
        Sample::new(self.id.clone(), image, self.mask.clone())
    }

    /// Ground truth as a `(1, 1, H, W)` tensor of zeros and ones.
    pub fn target(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        Tensor::from_fn4([1, 1, h, w], |_, _, y, x| if self.mask.get(y, x) { 1.0 } else { 0.0 })
    }
}

/// Stacks images and targets of several samples into one batch.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut targets = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.channels(), s.height(), s.width()) != (c, h, w) {
            return Err(Error::Shape(format!("sample {} does not match the batch extents", s.id)));
        }
        images.extend_from_slice(s.image.data());
        targets.extend(s.mask.values().iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
    }
    let n = samples.len();
    Ok((Tensor::from_vec(&[n, c, h, w], images)?, Tensor::from_vec(&[n, 1, h, w], targets)?))
}

struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Raster> {
    let png_err = |message: String| Error::Png { path: path.to_path_buf(), message };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err("palette images are not supported".into())),
    };
    buf.truncate(info.buffer_size());
    Ok(Raster { width: info.width as usize, height: info.height as usize, channels, pixels: buf })
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let png_err = |e: png::EncodingError| Error::Png { path: path.to_path_buf(), message: e.to_string() };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    // pinned so identical inputs always give identical bytes
    enc.set_compression(png::Compression::Balanced);
    enc.set_filter(png::Filter::Sub);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads an 8-bit image as a `(1, C, H, W)` tensor scaled to `[0, 1]`;
/// gray stays one channel, colour becomes three.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let r = read_png(path.as_ref())?;
    let c_out = if r.channels <= 2 { 1 } else { 3 };
    Ok(Tensor::from_fn4([1, c_out, r.height, r.width], |_, c, y, x| {
        r.pixels[(y * r.width + x) * r.channels + c] as f32 / 255.0
    }))
}

/// Reads a grayscale mask whose pixels are all 0 or 255.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let r = read_png(path)?;
    if r.channels != 1 {
        return Err(Error::Data(format!("{}: mask must be single-channel grayscale", path.display())));
    }
    if let Some(&v) = r.pixels.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Data(format!("{}: mask value {v} is neither 0 nor 255", path.display())));
    }
    BinaryMask::new(r.height, r.width, r.pixels.iter().map(|&v| v == 255).collect())
}

pub fn load_pair(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<Sample> {
    let image_path = image_path.as_ref();
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    Sample::new(id, image, mask).map_err(|e| Error::Data(format!("{}: {e}", image_path.display())))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let [_, c, h, w] = image.dims4()?;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Data(format!("cannot save a {c}-channel image"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize(image.at4(0, ch, y, x)));
            }
        }
    }
    write_png(path.as_ref(), w, h, color, png::BitDepth::Eight, &bytes)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.values().iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_png(path.as_ref(), mask.width(), mask.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

/// Writes a probability map in `[0, 1]` as a 16-bit grayscale PNG.
pub fn save_probability(prob: &[f32], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if prob.len() != height * width {
        return Err(Error::Shape(format!("{} probabilities for a {height}x{width} map", prob.len())));
    }
    let bytes: Vec<u8> = prob
        .iter()
        .flat_map(|&p| ((p.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

fn dataset_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("images"), root.join("masks"))
}

/// Writes `images/<id>.png` and `masks/<id>.png` under `root`.
pub fn save_sample(sample: &Sample, root: impl AsRef<Path>) -> Result<()> {
    let (images, masks) = dataset_dirs(root.as_ref());
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    save_image(&sample.image, images.join(format!("{}.png", sample.id)))?;
    save_mask(&sample.mask, masks.join(format!("{}.png", sample.id)))
}

/// Loads every pair under `root`, sorted by id. Every image needs a mask
/// with the same stem.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let (images, masks) = dataset_dirs(root);
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("no images found in {}", images.display())));
    }
    ids.sort();
    ids.iter()
        .map(|id| {
            let mask = masks.join(format!("{id}.png"));
            if !mask.exists() {
                return Err(Error::Data(format!("image {id} has no mask at {}", mask.display())));
            }
            load_pair(images.join(format!("{id}.png")), mask)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (no antialiasing).
pub fn resize_image(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = image.dims4()?;
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ty = taps(height, h);
    let tx = taps(width, w);
    Ok(Tensor::from_fn4([n, c, height, width], |b, ch, y, x| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = image.at4(b, ch, y0, x0) * (1.0 - fx) + image.at4(b, ch, y0, x1) * fx;
        let bot = image.at4(b, ch, y1, x0) * (1.0 - fx) + image.at4(b, ch, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Nearest-neighbour resize: output pixel `d` reads source `floor((d + 0.5) · in / out)`.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let near = |d: usize, out: usize, len: usize| ((2 * d + 1) * len / (2 * out)).min(len - 1);
    BinaryMask::from_fn(height, width, |y, x| mask.get(near(y, height, h), near(x, width, w)))
}

/// Resizes a sample to `size × size`.
pub fn resize_to(sample: &Sample, size: usize) -> Result<Sample> {
    if size == 0 {
        return Err(Error::Value("resize target must be positive".into()));
    }
    Sample::new(
        sample.id.clone(),
        resize_image(&sample.image, size, size)?,
        resize_mask(&sample.mask, size, size),
    )
}

/// Shuffles with `seed` and splits `train:test`. The test part gets
/// `floor(n · test / (train + test))` items; the remainder goes to training.
pub fn split<T>(mut items: Vec<T>, ratio: (usize, usize), seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let (a, b) = ratio;
    if a + b == 0 {
        return Err(Error::Value("split ratio must not be 0:0".into()));
    }
    let n_test = items.len() * b / (a + b);
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = items.split_off(items.len() - n_test);
    Ok((items, test))
}

/// Parameters of the synthetic vessel generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Side length of the square images.
    pub size: usize,
    pub vessels: (usize, usize),
    /// Stroke width range in pixels; each vessel varies linearly between
    /// two widths drawn from it.
    pub width: (f64, f64),
    /// 0 gives straight segments; 1 draws the middle control point
    /// uniformly in the frame.
    pub curvature: f64,
    pub noise_sigma: f64,
    /// Intensity added along vessels.
    pub vessel_intensity: (f64, f64),
    /// Range spanned by the smooth background gradient.
    pub background: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 128,
            vessels: (3, 6),
            width: (2.0, 5.0),
            curvature: 0.6,
            noise_sigma: 0.05,
            vessel_intensity: (0.35, 0.6),
            background: (0.1, 0.35),
            seed: 0,
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "synth_size",
    "synth_vessels_min",
    "synth_vessels_max",
    "synth_width_min",
    "synth_width_max",
    "synth_curvature",
    "synth_noise_sigma",
    "synth_vessel_min",
    "synth_vessel_max",
    "synth_background_min",
    "synth_background_max",
    "synth_seed",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 32 {
            return bad(format!("synthetic images must be at least 32 pixels, got {}", self.size));
        }
        if self.vessels.0 == 0 || self.vessels.0 > self.vessels.1 {
            return bad(format!("vessel count range {:?} must satisfy 1 <= min <= max", self.vessels));
        }
        let (w0, w1) = self.width;
        if !(w0 >= 1.0 && w0 <= w1 && w1 <= self.size as f64 / 8.0) {
            return bad(format!("width range {:?} must satisfy 1 <= min <= max <= size/8", self.width));
        }
        if !(0.0..=1.0).contains(&self.curvature) {
            return bad(format!("curvature {} must lie in [0, 1]", self.curvature));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and non-negative", self.noise_sigma));
        }
        for (name, (lo, hi)) in [("vessel intensity", self.vessel_intensity), ("background", self.background)] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return bad(format!("{name} range ({lo}, {hi}) is empty"));
            }
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        SYNTH_KEYS
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("synth_size", self.size);
        kv.insert("synth_vessels_min", self.vessels.0);
        kv.insert("synth_vessels_max", self.vessels.1);
        kv.insert("synth_width_min", self.width.0);
        kv.insert("synth_width_max", self.width.1);
        kv.insert("synth_curvature", self.curvature);
        kv.insert("synth_noise_sigma", self.noise_sigma);
        kv.insert("synth_vessel_min", self.vessel_intensity.0);
        kv.insert("synth_vessel_max", self.vessel_intensity.1);
        kv.insert("synth_background_min", self.background.0);
        kv.insert("synth_background_max", self.background.1);
        kv.insert("synth_seed", self.seed);
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        set!("synth_size", self.size);
        set!("synth_vessels_min", self.vessels.0);
        set!("synth_vessels_max", self.vessels.1);
        set!("synth_width_min", self.width.0);
        set!("synth_width_max", self.width.1);
        set!("synth_curvature", self.curvature);
        set!("synth_noise_sigma", self.noise_sigma);
        set!("synth_vessel_min", self.vessel_intensity.0);
        set!("synth_vessel_max", self.vessel_intensity.1);
        set!("synth_background_min", self.background.0);
        set!("synth_background_max", self.background.1);
        set!("synth_seed", self.seed);
        Ok(())
    }
}

/// Fixed-point scale of the rasterizer (sub-pixel units per pixel).
const FP: i64 = 256;

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Stamps one quadratic Bézier stroke. Control points and widths are in
/// fixed point and the curve is evaluated with integer arithmetic, so the
/// mask depends only on the drawn integers.
fn rasterize_stroke(mask: &mut [bool], size: usize, p: [(i64, i64); 3], w0: i64, w1: i64) {
    let len = |a: (i64, i64), b: (i64, i64)| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt();
    // at most half a pixel between consecutive samples keeps the stroke 8-connected
    let n = ((2.0 * (len(p[0], p[1]) + len(p[1], p[2])) / FP as f64).ceil() as i64).max(1);
    let n2 = n * n;
    let s = size as i64;
    for i in 0..=n {
        let (a, b, c) = ((n - i) * (n - i), 2 * i * (n - i), i * i);
        let x = (a * p[0].0 + b * p[1].0 + c * p[2].0) / n2;
        let y = (a * p[0].1 + b * p[1].1 + c * p[2].1) / n2;
        let w = w0 + (w1 - w0) * i / n;
        let r = w / 2 + FP;
        let (xp, yp) = (x / FP, y / FP);
        let reach = r / FP + 1;
        for py in (yp - reach).max(0)..=(yp + reach).min(s - 1) {
            for px in (xp - reach).max(0)..=(xp + reach).min(s - 1) {
                let dx = 2 * (px * FP + FP / 2 - x);
                let dy = 2 * (py * FP + FP / 2 - y);
                if (px == xp && py == yp) || dx * dx + dy * dy <= w * w {
                    mask[(py * s + px) as usize] = true;
                }
            }
        }
    }
}

fn synth_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<f64>) {
    let size = spec.size;
    let span = size as i64 * FP;
    let k = rng.random_range(spec.vessels.0..=spec.vessels.1);
    let mut mask = vec![false; size * size];
    let mut intensity = vec![0.0f64; size * size];
    for _ in 0..k {
        let mut pt = || (rng.random_range(0..span), rng.random_range(0..span));
        let (p0, far, p2) = (pt(), pt(), pt());
        let mid = ((p0.0 + p2.0) / 2, (p0.1 + p2.1) / 2);
        let bend = (spec.curvature * 1024.0).round() as i64;
        let p1 = (mid.0 + (far.0 - mid.0) * bend / 1024, mid.1 + (far.1 - mid.1) * bend / 1024);
        let mut width = || (draw_range(rng, spec.width) * FP as f64).round() as i64;
        let (w0, w1) = (width(), width());
        let level = draw_range(rng, spec.vessel_intensity);
        let mut stroke = vec![false; size * size];
        rasterize_stroke(&mut stroke, size, [p0, p1, p2], w0, w1);
        for (i, &on) in stroke.iter().enumerate() {
            if on {
                mask[i] = true;
                intensity[i] = intensity[i].max(level);
            }
        }
    }
    (mask, intensity)
}

/// Generates sample `index` of the stream defined by `spec`.
pub fn synth_sample(spec: &SynthSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    // redraw (deterministically) the rare layouts covering half the frame
    let (mask, vessel) = loop {
        let (mask, vessel) = synth_mask(spec, &mut rng);
        let count = mask.iter().filter(|&&v| v).count();
        if count > 0 && 2 * count < size * size {
            break (mask, vessel);
        }
    };
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let (bg_lo, bg_hi) = spec.background;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            let v = (y as f64 + 0.5) / size as f64 - 0.5;
            // projection onto the gradient direction, mapped to [0, 1]
            let t = (u * ct + v * st) / ct.abs().max(st.abs()).max(f64::MIN_POSITIVE) + 0.5;
            let mut p = bg_lo + (bg_hi - bg_lo) * t.clamp(0.0, 1.0) + vessel[y * size + x];
            if spec.noise_sigma > 0.0 {
                p += noise.sample(&mut rng);
            }
            data.push(p.clamp(0.0, 1.0) as f32);
        }
    }
    Sample::new(
        format!("synth_{}_{index}", spec.seed),
        Tensor::from_vec(&[1, 1, size, size], data)?,
        BinaryMask::new(size, size, mask)?,
    )
}

pub fn synth_generate(spec: &SynthSpec, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| synth_sample(spec, i)).collect()
}

/// Generates `count` samples into `root` and records the spec in `root/spec.txt`.
pub fn synth_to_dir(spec: &SynthSpec, count: usize, root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let samples = synth_generate(spec, count)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in &samples {
        save_sample(s, root)?;
    }
    let spec_path = root.join("spec.txt");
    fs::write(&spec_path, spec.to_kv().to_text()).map_err(|e| Error::io(&spec_path, e))?;
    Ok(samples)
}
