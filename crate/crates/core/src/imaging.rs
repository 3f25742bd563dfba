//! Planar float images, masks and normal maps, plus PNG / raw-float I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Channel-planar (`c, h, w`) float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    /// Per-pixel channel mean.
    pub fn gray(&self) -> Vec<f32> {
        let n = self.pixels();
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        let k = 1.0 / self.channels as f32;
        out.iter_mut().for_each(|v| *v *= k);
        out
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Zero every pixel outside `mask`.
    pub fn masked(mut self, mask: &Mask) -> Self {
        let n = self.pixels();
        for c in 0..self.channels {
            for (v, &m) in self.data[c * n..(c + 1) * n].iter_mut().zip(&mask.data) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel unit normals; pixels outside the object are conventionally zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vec3>,
}

impl NormalMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![Vec3::default(); width * height] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Vec3 {
        self.data[y * self.width + x]
    }

    /// Planar 3-channel image of the components.
    pub fn to_image(&self) -> Image {
        let n = self.data.len();
        let mut data = vec![0.0; 3 * n];
        for (i, v) in self.data.iter().enumerate() {
            data[i] = v.x as f32;
            data[n + i] = v.y as f32;
            data[2 * n + i] = v.z as f32;
        }
        Image { width: self.width, height: self.height, channels: 3, data }
    }

    /// Inverse of [`NormalMap::to_image`]; re-normalises each pixel and maps
    /// zero vectors to zero.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::Shape(format!("normal image needs 3 channels, has {}", img.channels)));
        }
        let n = img.pixels();
        let data = (0..n)
            .map(|i| {
                let v = Vec3::new(img.data[i] as f64, img.data[n + i] as f64, img.data[2 * n + i] as f64);
                v.normalized().unwrap_or_default()
            })
            .collect();
        Ok(Self { width: img.width, height: img.height, data })
    }

    /// Row-major `h x w x 3` little-endian float32 bytes.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 12);
        for v in &self.data {
            for c in v.to_array() {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_f32_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 12 {
            return Err(Error::Shape(format!(
                "normal file holds {} bytes, expected {} for {width}x{height}x3 float32",
                bytes.len(),
                width * height * 12
            )));
        }
        let vals: Vec<f64> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let data = vals.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        Ok(Self { width, height, data })
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn encode_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

/// Read an 8- or 16-bit PNG as RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let rgb = decode(path)?.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::zeros(w, h, 3);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p.0[c]);
        }
    }
    Ok(img)
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_buffer<P: image::Primitive>(img: &Image, q: impl Fn(f32) -> P) -> Result<Vec<P>> {
    if img.channels != 3 && img.channels != 1 {
        return Err(Error::Shape(format!("cannot write a {}-channel image as RGB", img.channels)));
    }
    let mut buf = Vec::with_capacity(img.pixels() * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                buf.push(q(img.get(c.min(img.channels - 1), y, x)));
            }
        }
    }
    Ok(buf)
}

/// 16-bit RGB PNG, values clipped to `[0, 1]`. One-channel images are
/// replicated to gray.
pub fn write_rgb16(path: &Path, img: &Image) -> Result<()> {
    let buf = rgb_buffer(img, quantize16)?;
    ImageBuffer::<Rgb<u16>, _>::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer sized from image")
        .save(path)
        .map_err(encode_err(path))
}

pub fn write_rgb8(path: &Path, img: &Image) -> Result<()> {
    let buf = rgb_buffer(img, quantize8)?;
    ImageBuffer::<Rgb<u8>, _>::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer sized from image")
        .save(path)
        .map_err(encode_err(path))
}

/// Any pixel brighter than half-scale counts as inside the object.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = decode(path)?.to_luma32f();
    Ok(Mask {
        width: g.width() as usize,
        height: g.height() as usize,
        data: g.pixels().map(|p| p.0[0] > 0.5).collect(),
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(mask.width as u32, mask.height as u32, buf)
        .expect("buffer sized from mask")
        .save(path)
        .map_err(encode_err(path))
}

/// Normals as 16-bit PNG with `[-1, 1] -> [0, 65535]` per channel.
pub fn write_normal_png16(path: &Path, n: &NormalMap) -> Result<()> {
    let mut img = n.to_image();
    img.data.iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
    write_rgb16(path, &img)
}

/// Inverse of [`write_normal_png16`]. Pixels encoding a (near) zero vector
/// decode to zero.
pub fn read_normal_png16(path: &Path) -> Result<NormalMap> {
    let mut img = read_rgb(path)?;
    img.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    let n = img.pixels();
    for i in 0..n {
        let len2: f32 = (0..3).map(|c| img.data[c * n + i].powi(2)).sum();
        if len2 < 0.25 {
            (0..3).for_each(|c| img.data[c * n + i] = 0.0);
        }
    }
    NormalMap::from_image(&img)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Tile equally sized images into a grid (`cols` per row), converting
/// one-channel images to gray.
pub fn tile(images: &[Image], cols: usize) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::Shape("nothing to tile".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::Shape("tiled images must share a size".into()));
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let mut out = Image::zeros(w * cols, h * rows, 3);
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, oy + y, ox + x, img.get(c.min(img.channels - 1), y, x));
                }
            }
        }
    }
    Ok(out)
}
