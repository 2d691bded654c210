//! Interleaved `f32` images with values nominally in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::interp::{bilinear_taps, nearest_index};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::shape("image", format!("{width}x{height}x{channels} has a zero extent")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{width}x{height}x{channels} needs {} values, got {}", width * height * channels, data.len()),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f32) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + self.width - 1 - x) * c;
                let dst = (y * self.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(
                "crop",
                format!("{width}x{height} at ({x0}, {y0}) outside {}x{}", self.width, self.height),
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Image::new(width, height, c, data)
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if (width, height) == self.size() {
            return self.clone();
        }
        let ty = bilinear_taps(self.height, height);
        let tx = bilinear_taps(self.width, width);
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in &ty {
            for x in &tx {
                for ch in 0..c {
                    let v = y.w0 * (x.w0 * self.get(x.i0, y.i0, ch) as f64 + x.w1 * self.get(x.i1, y.i0, ch) as f64)
                        + y.w1 * (x.w0 * self.get(x.i0, y.i1, ch) as f64 + x.w1 * self.get(x.i1, y.i1, ch) as f64);
                    data.push(v as f32);
                }
            }
        }
        Image {
            width,
            height,
            channels: c,
            data,
        }
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Image {
        let iy = nearest_index(self.height, height);
        let ix = nearest_index(self.width, width);
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for &y in &iy {
            for &x in &ix {
                let s = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        Image {
            width,
            height,
            channels: c,
            data,
        }
    }

    /// `[H, W, C]`, or `[H, W]` for single-channel images.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let shape: Vec<usize> = if self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.channels]
        };
        Tensor::new(&shape, self.data.iter().map(|&v| T::from_f64(v as f64)).collect()).expect("image tensor")
    }

    /// Single-channel image from a `[H, W]` tensor.
    pub fn from_map<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let sh = t.shape();
        if sh.len() != 2 {
            return Err(Error::shape("image", format!("map tensor {sh:?} must be [H, W]")));
        }
        Image::new(sh[1], sh[0], 1, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h).map(|i| ((i % w) as f32 + (i / w) as f32) / (w + h) as f32).collect();
        Image::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(7, 3);
        assert_ne!(img.flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn crop_and_bounds() {
        let img = ramp(6, 5);
        let c = img.crop(1, 2, 3, 2).unwrap();
        assert_eq!(c.size(), (3, 2));
        assert_eq!(c.get(0, 0, 0), img.get(1, 2, 0));
        assert!(img.crop(4, 0, 3, 1).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(8, 8);
        assert_eq!(img.resize_bilinear(8, 8), img);
        assert_eq!(img.resize_nearest(8, 8), img);
        let k = Image::filled(5, 7, 3, 0.25);
        assert!(k.resize_bilinear(13, 4).data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let data = (0..36).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let m = Image::new(6, 6, 1, data).unwrap();
        let r = m.resize_nearest(11, 4);
        assert!(r.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(4, 3);
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(Image::from_map(&t).unwrap(), img);
    }
}
