//! PPM (P6, read/write) and PNG (read) image files.
//!
//! Pixels map linearly between `[0, 255]` and `[-1, 1]`:
//! `v = p * 2 / 255 - 1`, and back with rounding and clamping.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

pub fn to_unit<T: Scalar>(p: u8) -> T {
    T::lit(f64::from(p) * 2.0 / 255.0 - 1.0)
}

pub fn to_byte<T: Scalar>(v: T) -> u8 {
    ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decoded 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    /// Largest centered square.
    pub fn center_square(&self) -> Rgb8 {
        let side = self.width.min(self.height);
        let (x0, y0) = ((self.width - side) / 2, (self.height - side) / 2);
        let mut pixels = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            let row = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + side * 3]);
        }
        Rgb8 { width: side, height: side, pixels }
    }

    /// Channel-major `[3, H, W]` tensor in `[-1, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            to_unit(self.pixels[p * 3 + c])
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Rgb8> {
        let (c, height, width) = match t.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("save_image", "image rank", "[3, H, W]", format!("{s:?}"))),
        };
        if c != 3 {
            return Err(Error::shape("save_image", "channels", 3, c));
        }
        let plane = width * height;
        let mut pixels = vec![0u8; plane * 3];
        for (i, &v) in t.data().iter().enumerate() {
            pixels[(i % plane) * 3 + i / plane] = to_byte(v);
        }
        Ok(Rgb8 { width, height, pixels })
    }
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    let truncated = || Error::Truncated(path.to_path_buf());
    let corrupt = |detail: &str| Error::Corrupt { path: path.to_path_buf(), detail: detail.to_string() };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                None => return Err(truncated()),
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(if pos >= bytes.len() { truncated() } else { corrupt("expected a header number") });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval} (only 8-bit 255 is supported)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => return Err(truncated()),
        Some(_) => return Err(corrupt("missing separator after header")),
    }
    let need = width * height * 3;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(truncated());
    }
    Ok(Rgb8 { width, height, pixels: data[..need].to_vec() })
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    let corrupt = |e: png::DecodingError| match e {
        png::DecodingError::IoError(ref io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Truncated(path.to_path_buf()),
        other => Error::Corrupt { path: path.to_path_buf(), detail: other.to_string() },
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedFormat("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::UnsupportedFormat("indexed PNG after expansion".into())),
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for row in buf.chunks(info.line_size).take(height) {
        for px in row[..width * stride].chunks_exact(stride) {
            if stride < 3 {
                pixels.extend_from_slice(&[px[0]; 3]);
            } else {
                pixels.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok(Rgb8 { width, height, pixels })
}

/// Reads a PPM or PNG file, detected by its magic bytes.
pub fn read_rgb8(path: &Path) -> Result<Rgb8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if bytes.starts_with(b"P6") {
        parse_ppm(&bytes, path)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes, path)
    } else if PNG_SIGNATURE.starts_with(&bytes) {
        Err(Error::Truncated(path.to_path_buf()))
    } else {
        Err(Error::UnsupportedFormat(format!("{} (expected PPM P6 or PNG)", path.display())))
    }
}

/// Loads an image as a `[3, S, S]` tensor. Non-square inputs are center
/// cropped when `crop_to_square` is set and rejected otherwise.
pub fn load_tensor<T: Scalar>(path: &Path, crop_to_square: bool) -> Result<Tensor<T>> {
    let mut img = read_rgb8(path)?;
    if img.width != img.height {
        if !crop_to_square {
            return Err(Error::shape("load_image", format!("{} aspect", path.display()), "square", format!("{}x{}", img.width, img.height)));
        }
        img = img.center_square();
    }
    Ok(img.to_tensor())
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Writes a `[3, H, W]` tensor as binary PPM.
pub fn save_ppm<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let img = Rgb8::from_tensor(t)?;
    fs::write(path, encode_ppm(&img)).map_err(|e| Error::io(path, e))
}

pub fn encode_png(img: &Rgb8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let corrupt = |e: png::EncodingError| Error::UnsupportedFormat(format!("png encoding failed: {e}"));
    let mut w = enc.write_header().map_err(corrupt)?;
    w.write_image_data(&img.pixels).map_err(corrupt)?;
    w.finish().map_err(corrupt)?;
    Ok(out)
}

/// Writes a `[3, H, W]` tensor as PNG when the extension is `png`
/// (any case), as PPM otherwise.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let img = Rgb8::from_tensor(t)?;
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(&img)? } else { encode_ppm(&img) };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
