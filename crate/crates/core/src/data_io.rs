//! Image folders, messages, batching and the bit-accuracy metric.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{Rgb, Rgb32FImage, RgbImage};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Smallest side accepted for an image buffer.
pub const MIN_SIDE: usize = 16;

/// The bit string hidden in an image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("message needs at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("message bit {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Bits as reals in {0, 1}, the form the encoder consumes.
    pub fn as_reals(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| b as f64)
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Message {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidArgument(format!(
                    "message may only contain '0' and '1', found '{other}'"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Message::new(bits)
    }
}

/// i.i.d. uniform bits.
pub fn random_message(n_bits: usize, rng: &mut impl Rng) -> Result<Message> {
    if n_bits == 0 {
        return Err(Error::InvalidArgument("n_bits must be at least 1".into()));
    }
    Message::new((0..n_bits).map(|_| rng.gen_range(0..=1u8)).collect())
}

/// Fraction of positions where `a` and `b` agree.
pub fn bit_accuracy(a: &Message, b: &Message) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cannot compare messages of {} and {} bits",
            a.len(),
            b.len()
        )));
    }
    let same = a.bits.iter().zip(&b.bits).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// RGB image with values in `[0, 1]`, stored channel-major (`3 × H × W`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    /// Build from channel-major values; values must already lie in `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Build from arbitrary reals, clamping into `[0, 1]`.
    pub fn from_chw_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_chw(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_chw(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.pixels[(channel * self.height + y) * self.width + x]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: crate::nn::Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| T::of(self.pixels[i] as f64))
    }

    /// Sample `index` of an `[N, 3, H, W]` tensor, clamped to `[0, 1]`.
    pub fn from_tensor<T: crate::nn::Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let px = t.sample(index).iter().map(|v| v.as_f64() as f32).collect();
        Self::from_chw_clamped(h, w, px)
    }

    /// Round-half-up 8-bit quantization, as written to PNG.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                quantize(self.get(0, y, x)),
                quantize(self.get(1, y, x)),
                quantize(self.get(2, y, x)),
            ])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Decode a PNG/JPEG file, scaling 8-bit values by 1/255. When `size` is
    /// given and differs from the file, the image is bilinearly resized.
    pub fn load(path: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let img = image::open(path)?.to_rgb32f();
        Ok(Self::from_rgb32f(&resize_to(img, size)))
    }

    fn from_rgb32f(img: &Rgb32FImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = p.0[c].clamp(0.0, 1.0);
            }
        }
        Self {
            height: h,
            width: w,
            pixels,
        }
    }
}

fn resize_to(img: Rgb32FImage, size: Option<(usize, usize)>) -> Rgb32FImage {
    match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    }
}

pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    /// File name the image was loaded from, used to pair edited copies.
    pub name: String,
    pub image: ImageBuffer,
}

/// Images resized to a common size, immutable after loading.
#[derive(Clone, Debug)]
pub struct Dataset {
    items: Vec<DatasetItem>,
    target_size: (usize, usize),
}

impl Dataset {
    pub fn from_items(items: Vec<DatasetItem>, target_size: (usize, usize)) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(it) = items
            .iter()
            .find(|it| (it.image.height(), it.image.width()) != target_size)
        {
            return Err(Error::Shape(format!(
                "item '{}' is {}x{}, expected {}x{}",
                it.name,
                it.image.height(),
                it.image.width(),
                target_size.0,
                target_size.1
            )));
        }
        Ok(Self { items, target_size })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn target_size(&self) -> (usize, usize) {
        self.target_size
    }

    /// First `n` items (all if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            items: self.items.iter().take(n.max(1)).cloned().collect(),
            target_size: self.target_size,
        }
    }
}

/// Load every decodable image in `dir` (sorted by file name), resized to
/// `target_size = (H, W)`. Undecodable files are skipped with a warning.
pub fn load_image_dir(dir: &Path, target_size: (usize, usize)) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut items = Vec::new();
    for path in paths {
        match ImageBuffer::load(&path, Some(target_size)) {
            Ok(image) => items.push(DatasetItem {
                name: path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image,
            }),
            Err(e) => warn!("skipping {}: {}", path.display(), e),
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Dataset::from_items(items, target_size)
}

/// Images and messages for one step; `images` is `[B, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub messages: Vec<Message>,
    /// Dataset index of each sample.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn n_bits(&self) -> usize {
        self.messages.first().map(Message::len).unwrap_or(0)
    }

    /// Messages as a `[B, n_bits]` tensor of zeros and ones.
    pub fn message_tensor<T: crate::nn::Real>(&self) -> Tensor<T> {
        message_tensor(&self.messages)
    }

    pub fn from_parts(images: &[&ImageBuffer], messages: Vec<Message>) -> Result<Self> {
        if images.is_empty() || images.len() != messages.len() {
            return Err(Error::Shape(format!(
                "{} images vs {} messages",
                images.len(),
                messages.len()
            )));
        }
        let (h, w) = (images[0].height(), images[0].width());
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Shape("batch images differ in size".into()));
            }
            data.extend_from_slice(img.pixels());
        }
        Ok(Self {
            images: Tensor::from_vec(&[images.len(), 3, h, w], data)?,
            messages,
            indices: (0..images.len()).collect(),
        })
    }
}

pub fn message_tensor<T: crate::nn::Real>(messages: &[Message]) -> Tensor<T> {
    let n = messages.first().map(Message::len).unwrap_or(0);
    let data = messages
        .iter()
        .flat_map(|m| m.as_reals().map(T::of))
        .collect();
    Tensor::from_vec(&[messages.len(), n], data).expect("messages share a length")
}

/// Draw `batch_size` images uniformly with replacement, each paired with a
/// fresh random message.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, n_bits: usize, rng: &mut impl Rng) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let (h, w) = dataset.target_size();
    let mut data = Vec::with_capacity(batch_size * 3 * h * w);
    let mut messages = Vec::with_capacity(batch_size);
    let mut indices = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.gen_range(0..dataset.len());
        data.extend_from_slice(dataset.items()[idx].image.pixels());
        messages.push(random_message(n_bits, rng)?);
        indices.push(idx);
    }
    Ok(Batch {
        images: Tensor::from_vec(&[batch_size, 3, h, w], data)?,
        messages,
        indices,
    })
}

/// Smooth random test image: a colour gradient plus a few soft blobs and a
/// low-frequency ripple, kept inside `[0.05, 0.95]`.
pub fn synthetic_image(height: usize, width: usize, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let mut px = vec![0.0f32; 3 * height * width];
    let base: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let grad: [(f32, f32); 3] = [
        (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
        (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
        (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
    ];
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.05..0.3),
                [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)],
            )
        })
        .collect();
    let (fx, fy, phase): (f32, f32, f32) = (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0), rng.gen_range(0.0..6.28));
    for y in 0..height {
        let v = y as f32 / height as f32;
        for x in 0..width {
            let u = x as f32 / width as f32;
            let ripple = 0.08 * ((fx * u + fy * v) * std::f32::consts::TAU + phase).sin();
            for c in 0..3 {
                let mut val = base[c] + grad[c].0 * (u - 0.5) + grad[c].1 * (v - 0.5) + ripple;
                for &(bx, by, r, amp) in &blobs {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    val += amp[c] * (-d2 / (2.0 * r * r)).exp();
                }
                px[(c * height + y) * width + x] = val.clamp(0.05, 0.95);
            }
        }
    }
    ImageBuffer::from_chw(height, width, px)
}

/// Write `count` synthetic PNGs named `img_00000.png`, … into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: (usize, usize), rng: &mut impl Rng) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let img = synthetic_image(size.0, size.1, rng)?;
        img.save_png(&dir.join(format!("img_{i:05}.png")))?;
    }
    Ok(())
}
