//! RGB images and pose masks, with PNG I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{param_err, shape_err, Error, Result};

/// RGB image, channels-last, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(shape_err!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(param_err!("pixel value {v} outside [-1, 1]"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
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

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(-1.0, 1.0);
        }
    }

    /// `(H, W, 3)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.pixels, (self.height, self.width, 3), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Builds an image from an `(H, W, 3)` tensor, clamping to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        if c != 3 {
            return Err(shape_err!("image tensor needs 3 channels, got {c}"));
        }
        let pixels = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            pixels,
        })
    }

    /// 8-bit quantisation used for PNG output.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        Self::new(height, width, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }
}

/// Loads `frame_00000.png`, `frame_00001.png`, … from `dir` until the first
/// gap.
pub fn load_frame_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("frame_{:05}.png", out.len()));
        if !p.exists() {
            break;
        }
        out.push(Image::load_png(&p)?);
    }
    if out.is_empty() {
        return Err(Error::format(dir, "no frame_00000.png"));
    }
    Ok(out)
}

/// Looping animated GIF at `fps`.
pub fn save_gif(frames: &[Image], fps: f64, path: &Path) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new(std::io::BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite).map_err(|e| Error::format(path, e))?;
    let delay = Delay::from_numer_denom_ms(1000, fps.round().max(1.0) as u32);
    for f in frames {
        let rgba: Vec<u8> = f.to_rgb8().chunks(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect();
        let img = RgbaImage::from_raw(f.width() as u32, f.height() as u32, rgba).expect("buffer matches dims");
        enc.encode_frame(Frame::from_parts(img, 0, 0, delay))
            .map_err(|e| Error::format(path, e))?;
    }
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Per-pixel soft silhouette in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl PoseMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param_err!("mask value {v} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `(H, W, 1)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.height, self.width, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| (v * 255.0).round() as u8).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::format(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma8();
        let (w, h) = img.dimensions();
        let values = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, values)
    }
}
