//! RGB rasters with channel values in `[0, 1]`, plus PNG and binary PPM codecs.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Decoders refuse images larger than this many pixels.
pub const MAX_PIXELS: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::Shape {
                op: "image",
                left: vec![height, width, CHANNELS],
                right: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let pixels = (0..width * height).flat_map(|_| rgb).map(|v| v.clamp(0.0, 1.0)).collect();
        Image { width, height, pixels }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * CHANNELS {
            return Err(Error::Shape {
                op: "from_rgb8",
                left: vec![height, width, CHANNELS],
                right: vec![bytes.len()],
            });
        }
        Image::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        for c in 0..CHANNELS {
            self.pixels[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Rec. 601 luma of pixel (`x`, `y`).
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.get(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image { width, height, pixels }
    }

    /// Rounds every channel to the nearest 8-bit level, as a save/load cycle would.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.to_rgb8().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Argument(format!("png encode: {e}")))?;
            w.write_image_data(&self.to_rgb8())
                .map_err(|e| Error::Argument(format!("png encode: {e}")))?;
        }
        Ok(out)
    }

    /// Decodes 8- or 16-bit PNG in gray, gray-alpha, RGB, RGBA or palette form.
    /// Alpha is dropped.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let bad = |m: String| Error::parse("png", 0, m);
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
        let (w, h) = {
            let info = reader.info();
            (info.width as usize, info.height as usize)
        };
        if w == 0 || h == 0 || w.saturating_mul(h) > MAX_PIXELS {
            return Err(bad(format!("unsupported dimensions {w}x{h}")));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        let data = &buf[..frame.buffer_size()];
        let per_pixel = match frame.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(bad("unexpanded palette".into())),
        };
        if frame.bit_depth != png::BitDepth::Eight || data.len() < w * h * per_pixel {
            return Err(bad("unexpected sample layout".into()));
        }
        let mut rgb = Vec::with_capacity(w * h * CHANNELS);
        for px in data.chunks_exact(per_pixel).take(w * h) {
            match per_pixel {
                1 | 2 => rgb.extend([px[0]; 3]),
                _ => rgb.extend(&px[..3]),
            }
        }
        Image::from_rgb8(w, h, &rgb)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    /// Decodes binary PPM (`P6`) with a maxval up to 255 and `#` comments in the header.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let bad = |m: &str| Error::parse("ppm", 0, m);
        let mut pos = 0;
        let mut fields = [0usize; 3];
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(bad("missing P6 magic"));
        }
        pos += 2;
        for field in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            if start == pos || pos - start > 9 {
                return Err(bad("malformed header number"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed header number"))?;
        }
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(bad("missing separator after header"));
        }
        pos += 1;
        let [w, h, maxval] = fields;
        if w == 0 || h == 0 || w.saturating_mul(h) > MAX_PIXELS {
            return Err(bad("unsupported dimensions"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let need = w * h * CHANNELS;
        let raster = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
        if raster.iter().any(|&b| b as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        let pixels = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
        Image::new(w, h, pixels)
    }

    /// Decodes by content: PPM when the bytes start with `P6`, PNG otherwise.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        if bytes.starts_with(b"P6") {
            Image::decode_ppm(bytes)
        } else {
            Image::decode_png(bytes)
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::parse(path.display().to_string(), line, message),
            other => other,
        })
    }

    /// Writes PPM for a `.ppm` extension and PNG otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            self.encode_ppm()
        } else {
            self.encode_png()?
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.5])
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_images() {
        let img = sample().quantized();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_round_trip_and_comments() {
        let img = sample().quantized();
        assert_eq!(Image::decode_ppm(&img.encode_ppm()).unwrap(), img);
        let mut bytes = b"P6 # comment\n5 3\n# another\n255\n".to_vec();
        bytes.extend(img.to_rgb8());
        assert_eq!(Image::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_truncation_and_wide_samples() {
        let img = sample();
        let bytes = img.encode_ppm();
        assert!(Image::decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(Image::decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(Image::decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Image::decode_ppm(b"P6\n0 1\n255\n").is_err());
    }

    #[test]
    fn new_validates_layout_and_range() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
    }
}
