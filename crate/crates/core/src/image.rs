//! Planar-interleaved float images and PNG/JPEG I/O.
//!
//! Pixel `(row, col)` of a rendered image corresponds to grid axes `(i, j)`
//! of the camera-aligned volume. [`save_png`] draws `i` left to right and
//! `j` bottom to top so that the vertical grid axis points up on screen.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, Rgb32FImage};

use crate::error::{Result, VncaError};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(VncaError::shape(
                "Image::from_vec",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let at = (row * self.width + col) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    /// Rec. 601 luma of an RGB image; single-channel images are returned unchanged.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        total / self.data.len().max(1) as f64
    }

    /// Resamples to `height x width` with a triangle filter. Not differentiable.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rgb = self.to_rgb();
        // image buffers are (x = col, y = row)
        let buf: Rgb32FImage = ImageBuffer::from_fn(rgb.width as u32, rgb.height as u32, |x, y| {
            let p = rgb.pixel(y as usize, x as usize);
            Rgb([p[0], p[1], p[2]])
        });
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let resized = Image::from_fn(height, width, 3, |r, c, ch| out.get_pixel(c as u32, r as u32).0[ch]);
        if self.channels == 1 {
            resized.luminance()
        } else {
            resized
        }
    }

    /// Replicates a grey image to three channels.
    pub fn to_rgb(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            1 => Image::from_fn(self.height, self.width, 3, |r, c, _| self.pixel(r, c)[0]),
            n => Image::from_fn(self.height, self.width, 3, |r, c, ch| self.pixel(r, c)[ch.min(n - 1)]),
        }
    }
}

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Loads an RGB image as `[0, 1]` floats, resized to `size x size`.
pub fn load_rgb(path: impl AsRef<Path>, size: Option<usize>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| VncaError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb32f();
    let (w, h) = img.dimensions();
    let img = match size {
        Some(s) if s as u32 != w || s as u32 != h => image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle),
        _ => img,
    };
    let (w, h) = img.dimensions();
    Ok(Image::from_fn(h as usize, w as usize, 3, |r, c, ch| {
        img.get_pixel(c as u32, r as u32).0[ch].clamp(0.0, 1.0)
    }))
}

/// Writes an exemplar-style image (row = y) as 8-bit RGB PNG.
pub fn save_rgb_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = img.to_rgb();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(rgb.width as u32, rgb.height as u32, |x, y| {
        let p = rgb.pixel(y as usize, x as usize);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    buf.save(path).map_err(|source| VncaError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a rendered view with grid axis `i` horizontal and `j` pointing up.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let rgb = img.to_rgb();
    let display = Image::from_fn(rgb.width, rgb.height, 3, |y, x, ch| rgb.pixel(x, rgb.width - 1 - y)[ch]);
    save_rgb_png(&display, path)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
