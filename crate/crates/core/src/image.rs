//! RGB images in `[0, 1]`, PNG I/O, and the fixed latent codec.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An RGB image stored row-major, interleaved (HWC), nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::shape(height * width * Self::CHANNELS, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0., 1.)).collect(),
            ..*self
        }
    }

    /// Rounds to the 8-bit grid a PNG round-trip would produce.
    pub fn quantized(&self) -> Self {
        Self {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0., 1.) * 255.).round() / 255.)
                .collect(),
            ..*self
        }
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0., 1.) * 255.).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })
    }

    /// CHW tensor of shape (3, H, W).
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Stacks images into a (B, 3, H, W) tensor.
    pub fn batch_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let tensors = images
            .iter()
            .map(|img| img.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&tensors, 0)?)
    }

    /// Inverse of [`Image::to_tensor`]; accepts (3, H, W) or (1, 3, H, W).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape("rank 3 or 4", r)),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(3, c));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }
}

/// The fixed image-to-latent map: `factor`-times average pooling rescaled to
/// `[-1, 1]`, with a nearest-neighbour decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub factor: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { factor: 2 }
    }
}

impl LatentCodec {
    pub fn latent_dims(&self, image_size: usize) -> (usize, usize, usize) {
        let s = image_size / self.factor;
        (Image::CHANNELS, s, s)
    }

    /// Encodes a (B, 3, H, W) image batch.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} is not divisible by the codec factor {}",
                self.factor
            )));
        }
        let pooled = images.avg_pool2d(self.factor)?;
        Ok(pooled.affine(2., -1.)?)
    }

    /// Decodes a (B, 3, h, w) latent batch into clamped images.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = latents.dims4()?;
        let up = latents.upsample_nearest2d(h * self.factor, w * self.factor)?;
        Ok(up.affine(0.5, 0.5)?.clamp(0., 1.)?)
    }

    pub fn encode_images(&self, images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        self.encode(&Image::batch_tensor(images, dtype, device)?)
    }

    pub fn decode_images(&self, latents: &Tensor) -> Result<Vec<Image>> {
        let decoded = self.decode(latents)?;
        (0..decoded.dim(0)?)
            .map(|i| Image::from_tensor(&decoded.get(i)?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |y, x| [y as f32 / 4., x as f32 / 6., 0.3]);
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(4, 6, |y, x| [y as f32 / 4., x as f32 / 6., 0.5]);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 4, 6]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn codec_reconstructs_block_constant_images() {
        let codec = LatentCodec::default();
        let img = Image::from_fn(8, 8, |y, x| {
            let v = ((y / 2 + x / 2) % 4) as f32 / 4.;
            [v, 1. - v, 0.25]
        });
        let z = codec.encode_images(&[&img], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(z.dims(), &[1, 3, 4, 4]);
        let back = codec.decode_images(&z).unwrap();
        assert!(back[0].mse(&img).unwrap() < 1e-12);
    }

    #[test]
    fn codec_rejects_indivisible_sizes() {
        let codec = LatentCodec::default();
        let img = Image::filled(5, 4, [0.; 3]);
        assert!(codec.encode_images(&[&img], DType::F32, &Device::Cpu).is_err());
    }
}
