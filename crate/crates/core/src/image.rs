use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Magic bytes opening every stored image file.
pub const IMAGE_MAGIC: &[u8; 4] = b"SCIM";

/// H×W×3 intensities, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                CHANNELS
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Little-endian layout: magic `SCIM`, then H, W, C as `u32`, then
    /// H·W·C `f64` values in row-major HWC order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        for d in [self.height, self.width, CHANNELS] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses the layout written by [`Image::write_to`]. The error string is
    /// a description suitable for wrapping into a format error.
    pub fn read_from(mut r: impl Read) -> std::result::Result<Image, String> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| format!("short header: {e}"))?;
        if &header[..4] != IMAGE_MAGIC {
            return Err("bad magic".into());
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        if c != CHANNELS {
            return Err(format!("expected {CHANNELS} channels, found {c}"));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| e.to_string())?;
        if raw.len() != h * w * c * 8 {
            return Err(format!("payload is {} bytes, expected {}", raw.len(), h * w * c * 8));
        }
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }
}
