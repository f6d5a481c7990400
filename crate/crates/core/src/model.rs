//! Encoder + decoder parameters bundled with their architecture settings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{message_tensor, ImageBuffer, Message};
use crate::decoder;
use crate::encoder::{self, OutputMode};
use crate::error::{Error, Result};
use crate::nn::{Ctx, NormConfig, NormMode, ParamStore, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 8.
    pub image_size: usize,
    pub n_bits: usize,
    /// Width of the first U-Net level; levels use 1×, 2×, 4×, 8×.
    pub unet_base: usize,
    /// Width of the first decoder convolution.
    pub decoder_base: usize,
    pub norm: NormConfig,
    pub output_mode: OutputMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 400,
            n_bits: 100,
            unet_base: 32,
            decoder_base: 32,
            norm: NormConfig::default(),
            output_mode: OutputMode::Sigmoid,
        }
    }
}

impl ModelConfig {
    /// 64×64 images carrying 16 bits with narrow layers.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            n_bits: 16,
            unet_base: 4,
            decoder_base: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % encoder::MESSAGE_UPSAMPLE != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be >= 16 and divisible by {}",
                self.image_size,
                encoder::MESSAGE_UPSAMPLE
            )));
        }
        // Four stride-2 decoder convolutions leave a 1×1 map at 16 px, which
        // instance norm would flatten to zero.
        if self.norm.mode == NormMode::Instance && self.image_size < 24 {
            return Err(Error::Config(format!(
                "instance norm needs image_size >= 24, got {}",
                self.image_size
            )));
        }
        if self.n_bits == 0 || self.unet_base == 0 || self.decoder_base == 0 {
            return Err(Error::Config("n_bits and layer widths must be positive".into()));
        }
        if !(self.norm.eps > 0.0) {
            return Err(Error::Config("norm eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        encoder::init_params(&mut params, &config, rng)?;
        decoder::init_params(&mut params, &config, rng)?;
        Ok(Self { config, params })
    }

    fn check_images<T: Real>(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.image_size || s[3] != self.config.image_size {
            return Err(Error::Shape(format!(
                "images {:?} do not match model input [N, 3, {1}, {1}]",
                s, self.config.image_size
            )));
        }
        Ok(())
    }

    /// Inference-mode encoding of `[N,3,H,W]` images; returns the unclamped
    /// encoded images and the residuals.
    pub fn encode_batch(&self, images: &Tensor<f32>, messages: &[Message]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_images(images)?;
        if messages.len() != images.shape()[0] || messages.iter().any(|m| m.len() != self.config.n_bits) {
            return Err(Error::Shape(format!(
                "need {} messages of {} bits",
                images.shape()[0],
                self.config.n_bits
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let img = tape.constant(images.clone());
        let msg = tape.constant(message_tensor(messages));
        let mut ctx = Ctx::new(&mut tape, &vars, &self.params, self.config.norm, false);
        let (enc, res) = encoder::encode(&mut ctx, img, msg, &self.config)?;
        Ok((tape.value(enc).clone(), tape.value(res).clone()))
    }

    /// Inference-mode logits `[N, n_bits]`.
    pub fn decode_batch(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let img = tape.constant(images.clone());
        let mut ctx = Ctx::new(&mut tape, &vars, &self.params, self.config.norm, false);
        let logits = decoder::decode(&mut ctx, img, &self.config)?;
        Ok(tape.value(logits).clone())
    }

    /// Watermark one image. The returned image is clamped to `[0, 1]`.
    pub fn encode(&self, image: &ImageBuffer, message: &Message) -> Result<(ImageBuffer, Tensor<f32>)> {
        let (enc, res) = self.encode_batch(&image.to_tensor(), std::slice::from_ref(message))?;
        Ok((ImageBuffer::from_tensor(&enc, 0)?, res))
    }

    pub fn decode_logits(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        Ok(self.decode_batch(&image.to_tensor())?.into_data())
    }

    pub fn decode(&self, image: &ImageBuffer) -> Result<Message> {
        decoder::logits_to_bits(&self.decode_logits(image)?)
    }

    /// Decode many images, `chunk` at a time.
    pub fn decode_many(&self, images: &[ImageBuffer], chunk: usize) -> Result<Vec<Message>> {
        let mut out = Vec::with_capacity(images.len());
        for group in images.chunks(chunk.max(1)) {
            let t = stack(group)?;
            let logits = self.decode_batch(&t)?;
            for row in logits.data().chunks(self.config.n_bits) {
                out.push(decoder::logits_to_bits(row)?);
            }
        }
        Ok(out)
    }

    /// Encode many images, `chunk` at a time; outputs are clamped.
    pub fn encode_many(&self, images: &[ImageBuffer], messages: &[Message], chunk: usize) -> Result<Vec<ImageBuffer>> {
        let mut out = Vec::with_capacity(images.len());
        for (group, msgs) in images.chunks(chunk.max(1)).zip(messages.chunks(chunk.max(1))) {
            let (enc, _) = self.encode_batch(&stack(group)?, msgs)?;
            for i in 0..group.len() {
                out.push(ImageBuffer::from_tensor(&enc, i)?);
            }
        }
        Ok(out)
    }
}

/// `[N, 3, H, W]` tensor from equally sized images.
pub fn stack(images: &[ImageBuffer]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape("images differ in size".into()));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}
