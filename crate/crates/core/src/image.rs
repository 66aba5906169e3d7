//! Images as `H×W×C` arrays of reals in `[0, 1]`, foreground masks, and PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};

/// Row-major `H×W×C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!("pixel value {v} at {i} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// Sets one value, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Zeroes every channel of pixel `(y, x)`.
    pub fn clear_pixel(&mut self, y: usize, x: usize) {
        let i = self.index(y, x, 0);
        self.data[i..i + self.channels].fill(0.0);
    }

    /// Copy of the `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    /// Nearest-neighbour resampling to `h×w`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::zeros(h, w, self.channels);
        for y in 0..h {
            let sy = y * self.height / h;
            for x in 0..w {
                let sx = x * self.width / w;
                let src = self.index(sy, sx, 0);
                let dst = out.index(y, x, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round() / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Loads an 8-bit PNG as RGB, dividing by 255.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::from_u8(h as usize, w as usize, 3, rgb.as_raw())
    }

    /// Writes an 8-bit RGB (or grayscale, for one channel) PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            3 => RgbImage::from_raw(w, h, bytes)
                .expect("buffer size matches dimensions")
                .save_with_format(path, image::ImageFormat::Png),
            1 => GrayImage::from_raw(w, h, bytes)
                .expect("buffer size matches dimensions")
                .save_with_format(path, image::ImageFormat::Png),
            c => return Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Sorted copy of all values; equal for two images iff their value
    /// multisets are equal.
    pub fn sorted_values(&self) -> Vec<f64> {
        let mut v = self.data.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskProvenance {
    File,
    ToyExact,
}

/// Binary `H×W` foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    provenance: MaskProvenance,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, provenance: MaskProvenance) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "{} mask bits for {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
            provenance,
        })
    }

    pub fn empty(height: usize, width: usize, provenance: MaskProvenance) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
            provenance,
        }
    }

    /// Mask whose foreground is the axis-aligned box `[y0, y1) × [x0, x1)`.
    pub fn from_box(
        height: usize,
        width: usize,
        (y0, x0, y1, x1): (usize, usize, usize, usize),
        provenance: MaskProvenance,
    ) -> Self {
        let mut m = Self::empty(height, width, provenance);
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                m.set(y, x, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn matches(&self, x: &Image) -> bool {
        self.height == x.height() && self.width == x.width()
    }

    /// Single-channel PNG, nonzero = foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let bits = gray.as_raw().iter().map(|&v| v != 0).collect();
        Self::new(h as usize, w as usize, bits, MaskProvenance::File)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(4, 6, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        img.quantize();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);

        let m = ForegroundMask::from_box(4, 6, (1, 2, 3, 5), MaskProvenance::File);
        let mp = dir.path().join("m.png");
        m.save_png(&mp).unwrap();
        assert_eq!(ForegroundMask::load_png(&mp).unwrap(), m);
        assert_eq!(m.count(), 6);
    }

    #[test]
    fn crop_and_resize() {
        let mut img = Image::zeros(4, 4, 1);
        img.set(0, 3, 0, 1.0);
        let c = img.crop(0, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 1, 0), 1.0);
        let up = c.resize_nearest(4, 4);
        assert_eq!(up.get(0, 2, 0), 1.0);
        assert_eq!(up.get(1, 3, 0), 1.0);
        assert_eq!(up.get(2, 3, 0), 0.0);
        assert!(img.crop(3, 3, 2, 2).is_err());
    }
}
