use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::FeatureError;

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Size before zero padding.
    pub orig_width: usize,
    pub orig_height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, FeatureError> {
        if pixels.len() != width * height {
            return Err(FeatureError::Shape(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(FeatureError::Format("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            orig_width: width,
            orig_height: height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            orig_width: width,
            orig_height: height,
            pixels,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; `None` outside the
    /// original (unpadded) area.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f32> {
        let (w, h) = (self.orig_width as f64, self.orig_height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.orig_width - 1);
        let y0 = (y.floor() as usize).min(self.orig_height - 1);
        let x1 = (x0 + 1).min(self.orig_width - 1);
        let y1 = (y0 + 1).min(self.orig_height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.get(x0, y0) as f64 * (1.0 - fx) + self.get(x1, y0) as f64 * fx;
        let bot = self.get(x0, y1) as f64 * (1.0 - fx) + self.get(x1, y1) as f64 * fx;
        Some((top * (1.0 - fy) + bot * fy) as f32)
    }

    /// Zero-pads right/bottom so both dimensions are multiples of `multiple`.
    pub fn padded_to(&self, multiple: usize) -> Image {
        let w = self.width.div_ceil(multiple) * multiple;
        let h = self.height.div_ceil(multiple) * multiple;
        let mut pixels = vec![0.0; w * h];
        for y in 0..self.height {
            pixels[y * w..y * w + self.width].copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        Image {
            width: w,
            height: h,
            orig_width: self.orig_width,
            orig_height: self.orig_height,
            pixels,
        }
    }

    /// Crops away padding.
    pub fn unpadded(&self) -> Image {
        Image::from_fn(self.orig_width, self.orig_height, |x, y| self.get(x, y))
    }

    /// Bilinear resize of the original area (pixel-center aligned).
    pub fn resized(&self, new_w: usize, new_h: usize) -> Image {
        let sx = self.orig_width as f64 / new_w as f64;
        let sy = self.orig_height as f64 / new_h as f64;
        Image::from_fn(new_w, new_h, |x, y| {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.orig_width as f64 - 1.0);
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.orig_height as f64 - 1.0);
            self.sample_bilinear(src_x, src_y).unwrap_or(0.0)
        })
    }

    pub fn mean(&self) -> f32 {
        self.pixels.iter().sum::<f32>() / self.pixels.len().max(1) as f32
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str, FeatureError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FeatureError::Format("truncated header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| FeatureError::Format("non-ascii header".into()))
    }

    fn number(&mut self) -> Result<u32, FeatureError> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| FeatureError::Format(format!("bad header field {t:?}")))
    }
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval 255. Color is converted
/// with luma weights (0.299, 0.587, 0.114). No padding is applied.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, FeatureError> {
    let mut hr = HeaderReader { bytes, pos: 0 };
    let magic = hr.token()?.to_owned();
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(FeatureError::Format(format!("unsupported magic {other:?}"))),
    };
    let width = hr.number()? as usize;
    let height = hr.number()? as usize;
    let maxval = hr.number()?;
    if maxval != 255 {
        return Err(FeatureError::Maxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(FeatureError::Format("zero-sized image".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = hr.pos + 1;
    let need = width * height * channels;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| FeatureError::Format(format!("raster truncated: need {need} bytes")))?;
    let pixels = if channels == 1 {
        raster.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        raster
            .chunks_exact(3)
            .map(|c| ((0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0) as f32)
            .collect()
    };
    Image::new(width, height, pixels)
}

/// Reads a PGM/PPM file and zero-pads it to multiples of 8.
pub fn load_image(path: &Path) -> Result<Image, FeatureError> {
    let bytes = std::fs::read(path)?;
    Ok(decode_pnm(&bytes)?.padded_to(8))
}

/// Writes the original (unpadded) area as binary PGM.
pub fn save_pgm(img: &Image, path: &Path) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.orig_width, img.orig_height)?;
    let mut raster = Vec::with_capacity(img.orig_width * img.orig_height);
    for y in 0..img.orig_height {
        for x in 0..img.orig_width {
            raster.push((img.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    w.write_all(&raster)?;
    w.flush()?;
    Ok(())
}
