//! Post-hoc robustness evaluation: image edits, accuracy sweeps over edit
//! levels, the crop-versus-frame comparison and CSV/PNG reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{bit_accuracy, random_message, Dataset, ImageBuffer, Message};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::tape::LUMA;
use crate::nn::Tape;
use crate::perturb::{self, CropRect};

/// Default factor grid for brightness, contrast and saturation sweeps.
pub const DEFAULT_LEVELS: [f64; 7] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

/// Sharpening gain used by [`edge_enhance`].
pub const SHARPEN_GAIN: f32 = 0.5;

/// Images decoded per forward pass during sweeps.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum EditKind {
    Brightness,
    Contrast,
    Saturation,
    Grayscale,
    OneBit,
    HistEqualize,
    EdgeEnhance,
    /// Level is the width in pixels cut from every edge.
    CenterCrop,
    /// Level is the black border width in pixels.
    Frame,
    /// Pre-edited copies of the encoded images, matched by file name.
    ExternalDir(PathBuf),
}

impl EditKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Saturation => "saturation",
            Self::Grayscale => "grayscale",
            Self::OneBit => "one_bit",
            Self::HistEqualize => "hist_equalize",
            Self::EdgeEnhance => "edge_enhance",
            Self::CenterCrop => "center_crop",
            Self::Frame => "frame",
            Self::ExternalDir(_) => "external_dir",
        }
    }

    /// Whether the edit takes a level. Other kinds yield a single row at
    /// level 1 regardless of the requested levels.
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            Self::Brightness | Self::Contrast | Self::Saturation | Self::CenterCrop | Self::Frame
        )
    }

    /// Apply the edit to one image. External edits cannot be computed and
    /// return an error.
    pub fn apply(&self, img: &ImageBuffer, level: f64) -> Result<ImageBuffer> {
        match self {
            Self::Brightness => factor_edit(img, level, perturb::brightness),
            Self::Contrast => factor_edit(img, level, perturb::contrast),
            Self::Saturation => factor_edit(img, level, perturb::saturation),
            Self::Grayscale => Ok(grayscale(img)),
            Self::OneBit => Ok(one_bit_dither(img)),
            Self::HistEqualize => Ok(hist_equalize(img)),
            Self::EdgeEnhance => edge_enhance(img),
            Self::CenterCrop => center_crop_resize(img, pixel_width(level)?),
            Self::Frame => add_frame(img, pixel_width(level)?),
            Self::ExternalDir(dir) => Err(Error::InvalidArgument(format!(
                "external edits in {} are read from disk, not computed",
                dir.display()
            ))),
        }
    }
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ExternalDir(p) => write!(f, "external_dir:{}", p.display()),
            k => f.write_str(k.name()),
        }
    }
}

impl FromStr for EditKind {
    type Err = Error;

    /// Accepts the names from [`EditKind::name`]; the external kind is
    /// written `external_dir:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("external_dir:") {
            return Ok(Self::ExternalDir(PathBuf::from(path)));
        }
        Ok(match s {
            "brightness" => Self::Brightness,
            "contrast" => Self::Contrast,
            "saturation" => Self::Saturation,
            "grayscale" => Self::Grayscale,
            "one_bit" => Self::OneBit,
            "hist_equalize" => Self::HistEqualize,
            "edge_enhance" => Self::EdgeEnhance,
            "center_crop" => Self::CenterCrop,
            "frame" => Self::Frame,
            other => return Err(Error::InvalidArgument(format!("unknown edit kind `{other}`"))),
        })
    }
}

fn pixel_width(level: f64) -> Result<usize> {
    if !(level >= 0.0) || level.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "width {level} must be a non-negative whole number of pixels"
        )));
    }
    Ok(level as usize)
}

fn factor_edit(
    img: &ImageBuffer,
    level: f64,
    op: fn(&mut Tape<f32>, crate::nn::Var, &[f64]) -> Result<crate::nn::Var>,
) -> Result<ImageBuffer> {
    let mut tape = Tape::new();
    let x = tape.constant(img.to_tensor());
    let y = op(&mut tape, x, &[level])?;
    ImageBuffer::from_tensor(tape.value(y), 0)
}

fn check_width(img: &ImageBuffer, width: usize) -> Result<()> {
    let side = img.height().min(img.width());
    if 2 * width >= side {
        return Err(Error::InvalidArgument(format!(
            "width {width} leaves nothing of a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// The region kept by a centred crop of `width` pixels per edge.
pub fn center_crop_rect(h: usize, w: usize, width: usize) -> CropRect {
    CropRect {
        x0: width as f64,
        y0: width as f64,
        width: w.saturating_sub(2 * width) as f64,
        height: h.saturating_sub(2 * width) as f64,
    }
}

/// Pixels of an `h × w` image inside the centred band-free region.
pub fn retained_pixels(h: usize, w: usize, width: usize) -> usize {
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| y >= width && y + width < h && x >= width && x + width < w)
        .count()
}

/// Cut `width` pixels from each edge and bilinearly resize back.
pub fn center_crop_resize(img: &ImageBuffer, width: usize) -> Result<ImageBuffer> {
    check_width(img, width)?;
    if width == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(img.to_tensor());
    let y = perturb::crop_resize(&mut tape, x, &[center_crop_rect(h, w, width)], (h, w))?;
    ImageBuffer::from_tensor(tape.value(y), 0)
}

/// Black out every pixel within `width` of an edge.
pub fn add_frame(img: &ImageBuffer, width: usize) -> Result<ImageBuffer> {
    check_width(img, width)?;
    let (h, w) = (img.height(), img.width());
    let mut px = img.pixels().to_vec();
    for plane in px.chunks_mut(h * w) {
        for (y, row) in plane.chunks_mut(w).enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                if y < width || y + width >= h || x < width || x + width >= w {
                    *v = 0.0;
                }
            }
        }
    }
    ImageBuffer::from_chw(h, w, px)
}

fn luma_plane(img: &ImageBuffer) -> Vec<f64> {
    let hw = img.height() * img.width();
    let px = img.pixels();
    (0..hw)
        .map(|i| (0..3).map(|c| LUMA[c] * px[c * hw + i] as f64).sum::<f64>())
        .collect()
}

fn replicate(img: &ImageBuffer, plane: impl Iterator<Item = f32> + Clone) -> ImageBuffer {
    let px: Vec<f32> = (0..3).flat_map(|_| plane.clone()).collect();
    ImageBuffer::from_chw_clamped(img.height(), img.width(), px).expect("same size as the input")
}

/// Luma replicated to all three channels.
pub fn grayscale(img: &ImageBuffer) -> ImageBuffer {
    let l = luma_plane(img);
    replicate(img, l.iter().map(|&v| v as f32))
}

/// Black-and-white rendering by serpentine Floyd–Steinberg error diffusion
/// of the luma, thresholded at one half.
pub fn one_bit_dither(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    let mut l = luma_plane(img);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let forward = y % 2 == 0;
        let dir: isize = if forward { 1 } else { -1 };
        for k in 0..w {
            let x = if forward { k } else { w - 1 - k };
            let i = y * w + x;
            let new = if l[i] >= 0.5 { 1.0 } else { 0.0 };
            let err = l[i] - new;
            out[i] = new as f32;
            let mut spread = |dy: usize, dx: isize, weight: f64| {
                let nx = x as isize + dx * dir;
                if nx >= 0 && (nx as usize) < w && y + dy < h {
                    l[(y + dy) * w + nx as usize] += err * weight;
                }
            };
            spread(0, 1, 7.0 / 16.0);
            spread(1, -1, 3.0 / 16.0);
            spread(1, 0, 5.0 / 16.0);
            spread(1, 1, 1.0 / 16.0);
        }
    }
    replicate(img, out.iter().copied())
}

/// Per-channel histogram equalization over 256 bins.
pub fn hist_equalize(img: &ImageBuffer) -> ImageBuffer {
    let hw = img.height() * img.width();
    let mut px = img.pixels().to_vec();
    for plane in px.chunks_mut(hw) {
        let bins: Vec<u8> = plane.iter().map(|&v| crate::data_io::quantize(v)).collect();
        let mut cdf = [0usize; 256];
        for &b in &bins {
            cdf[b as usize] += 1;
        }
        for i in 1..256 {
            cdf[i] += cdf[i - 1];
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if cdf_min == hw {
            continue;
        }
        let denom = (hw - cdf_min) as f64;
        for (v, &b) in plane.iter_mut().zip(&bins) {
            let level = ((cdf[b as usize] - cdf_min) as f64 / denom * 255.0).round();
            *v = (level / 255.0) as f32;
        }
    }
    ImageBuffer::from_chw(img.height(), img.width(), px).expect("values stay in range")
}

/// Unsharp mask: `img + 0.5 · (img − blur(img, σ = 1))`, clamped.
pub fn edge_enhance(img: &ImageBuffer) -> Result<ImageBuffer> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(img.to_tensor());
    let b = perturb::defocus_blur(&mut tape, x, &[1.0])?;
    let px = img
        .pixels()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&v, &bv)| v + SHARPEN_GAIN * (v - bv))
        .collect();
    ImageBuffer::from_chw_clamped(img.height(), img.width(), px)
}

/// One aggregated sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub level: f64,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub n: usize,
}

impl SweepRow {
    pub fn from_accuracies(kind: &str, level: f64, accs: &[f64]) -> Result<Self> {
        if accs.is_empty() {
            return Err(Error::InvalidArgument(format!("no accuracies for {kind} at {level}")));
        }
        let mut sorted = accs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            kind: kind.to_string(),
            level,
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            p10: percentile(&sorted, 0.1),
            p50: percentile(&sorted, 0.5),
            p90: percentile(&sorted, 0.9),
            n: accs.len(),
        })
    }
}

/// Linear-interpolation percentile of sorted values, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub name: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, kind: &str, level: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.kind == kind && r.level == level)
    }
}

/// One random message per dataset image, fixed by `seed`.
pub fn eval_messages(n_images: usize, n_bits: usize, seed: u64) -> Result<Vec<Message>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images).map(|_| random_message(n_bits, &mut rng)).collect()
}

/// Watermark every dataset image with its [`eval_messages`] message and
/// round to 8 bits, as an exported PNG would be.
pub fn encode_dataset(model: &Model, dataset: &Dataset, seed: u64) -> Result<(Vec<ImageBuffer>, Vec<Message>)> {
    let messages = eval_messages(dataset.len(), model.config.n_bits, seed)?;
    let images: Vec<ImageBuffer> = dataset.items().iter().map(|it| it.image.clone()).collect();
    let encoded = model
        .encode_many(&images, &messages, CHUNK)?
        .into_iter()
        .map(|img| img.quantized())
        .collect();
    Ok((encoded, messages))
}

/// Write the encoded dataset under the original file names plus a
/// `messages.csv` of `name,bits`, for editing with external tools.
pub fn export_encoded(model: &Model, dataset: &Dataset, seed: u64, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (encoded, messages) = encode_dataset(model, dataset, seed)?;
    let mut w = csv::Writer::from_path(out_dir.join("messages.csv"))?;
    w.write_record(["name", "bits"])?;
    for ((item, img), msg) in dataset.items().iter().zip(&encoded).zip(&messages) {
        let name = Path::new(&item.name).with_extension("png");
        img.save_png(&out_dir.join(&name))?;
        w.write_record([name.to_string_lossy().as_ref(), msg.to_string().as_str()])?;
    }
    w.flush()?;
    Ok(())
}

fn decode_accuracies(model: &Model, images: &[ImageBuffer], messages: &[Message]) -> Result<Vec<f64>> {
    let decoded: Vec<Vec<Message>> = images
        .par_chunks(CHUNK)
        .map(|group| model.decode_many(group, CHUNK))
        .collect::<Result<_>>()?;
    decoded
        .into_iter()
        .flatten()
        .zip(messages)
        .map(|(d, m)| bit_accuracy(&d, m))
        .collect()
}

fn edited_accuracies(model: &Model, encoded: &[ImageBuffer], messages: &[Message], kind: &EditKind, level: f64) -> Result<Vec<f64>> {
    let edited: Vec<ImageBuffer> = encoded
        .par_iter()
        .map(|img| kind.apply(img, level))
        .collect::<Result<_>>()?;
    decode_accuracies(model, &edited, messages)
}

fn external_accuracies(model: &Model, dataset: &Dataset, messages: &[Message], dir: &Path) -> Result<Vec<f64>> {
    let size = (model.config.image_size, model.config.image_size);
    let mut images = Vec::new();
    let mut truths = Vec::new();
    for (item, msg) in dataset.items().iter().zip(messages) {
        let candidates = [dir.join(&item.name), dir.join(Path::new(&item.name).with_extension("png"))];
        if let Some(path) = candidates.iter().find(|p| p.is_file()) {
            images.push(ImageBuffer::load(path, Some(size))?);
            truths.push(msg.clone());
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    decode_accuracies(model, &images, &truths)
}

/// Accuracy of every dataset image after `kind` at each level. Messages
/// depend only on `seed` and the dataset order, so reruns match exactly.
pub fn evaluate_sweep(model: &Model, dataset: &Dataset, kind: &EditKind, levels: &[f64], seed: u64) -> Result<SweepTable> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let (encoded, messages) = encode_dataset(model, dataset, seed)?;
    let rows = sweep_rows(model, dataset, &encoded, &messages, kind, levels)?;
    Ok(SweepTable {
        name: kind.name().to_string(),
        rows,
    })
}

fn sweep_rows(
    model: &Model,
    dataset: &Dataset,
    encoded: &[ImageBuffer],
    messages: &[Message],
    kind: &EditKind,
    levels: &[f64],
) -> Result<Vec<SweepRow>> {
    if let EditKind::ExternalDir(dir) = kind {
        let accs = external_accuracies(model, dataset, messages, dir)?;
        return Ok(vec![SweepRow::from_accuracies(kind.name(), 1.0, &accs)?]);
    }
    if !kind.is_parametric() {
        let accs = edited_accuracies(model, encoded, messages, kind, 1.0)?;
        return Ok(vec![SweepRow::from_accuracies(kind.name(), 1.0, &accs)?]);
    }
    if levels.is_empty() {
        return Err(Error::InvalidArgument(format!("{} needs at least one level", kind.name())));
    }
    levels
        .iter()
        .map(|&level| {
            let accs = edited_accuracies(model, encoded, messages, kind, level)?;
            SweepRow::from_accuracies(kind.name(), level, &accs)
        })
        .collect()
}

/// Centre-crop and frame sweeps over the same widths, crop rows first.
pub fn crop_frame_experiment(model: &Model, dataset: &Dataset, widths: &[usize], seed: u64) -> Result<SweepTable> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let side = model.config.image_size;
    if let Some(&w) = widths.iter().find(|&&w| 2 * w >= side) {
        return Err(Error::InvalidArgument(format!("width {w} too large for {side}px images")));
    }
    let (encoded, messages) = encode_dataset(model, dataset, seed)?;
    let levels: Vec<f64> = widths.iter().map(|&w| w as f64).collect();
    let mut rows = sweep_rows(model, dataset, &encoded, &messages, &EditKind::CenterCrop, &levels)?;
    rows.extend(sweep_rows(model, dataset, &encoded, &messages, &EditKind::Frame, &levels)?);
    Ok(SweepTable {
        name: "crop_frame".into(),
        rows,
    })
}

/// Write `<name>.csv` and `<name>.png` for each table; returns the paths.
pub fn emit_report(tables: &[SweepTable], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(t) = tables.iter().find(|t| t.rows.is_empty()) {
        return Err(Error::InvalidArgument(format!("table `{}` has no rows", t.name)));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for table in tables {
        let csv_path = out_dir.join(format!("{}.csv", table.name));
        write_table(table, &csv_path)?;
        let png_path = out_dir.join(format!("{}.png", table.name));
        crate::plot::accuracy_plot(table, &png_path)?;
        written.push(csv_path);
        written.push(png_path);
    }
    Ok(written)
}

pub fn write_table(table: &SweepTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a table written by [`emit_report`]; the name is the file stem.
pub fn read_table(path: &Path) -> Result<SweepTable> {
    let rows = csv::Reader::from_path(path)?
        .deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SweepTable { name, rows })
}
