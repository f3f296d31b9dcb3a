//! RGB image buffers and the built-in binary PPM (P6) codec.

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeError(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = RgbImage::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let top = a[k] as f64 * (1.0 - wx) + b[k] as f64 * wx;
                    let bot = c[k] as f64 * (1.0 - wx) + d[k] as f64 * wx;
                    px[k] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        out
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::DecodeError {
                offset: pos,
                message: "truncated PPM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::DecodeError {
            offset: 0,
            message: format!("unsupported magic {:?}", fields[0]),
        });
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::DecodeError {
            offset: 0,
            message: format!("bad PPM {what} {s:?}"),
        })
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    if parse(&fields[3], "maxval")? != 255 {
        return Err(Error::DecodeError {
            offset: 0,
            message: "only 8-bit PPM is supported".into(),
        });
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::DecodeError {
            offset: bytes.len(),
            message: format!("PPM raster needs {need} bytes"),
        });
    }
    RgbImage::from_raw(width, height, bytes[pos..pos + need].to_vec())
}

/// Reads width and height from an encoded image without decoding pixels.
pub fn probe_dimensions(format: &str, bytes: &[u8]) -> Result<(usize, usize)> {
    match format {
        "ppm" => {
            let img = decode_ppm(bytes)?;
            Ok((img.width, img.height))
        }
        other => Err(Error::InvalidInput(format!("no codec for image format {other:?}"))),
    }
}

/// Decodes encoded image bytes by format tag.
pub fn decode_image(format: &str, bytes: &[u8]) -> Result<RgbImage> {
    match format {
        "ppm" => decode_ppm(bytes),
        other => Err(Error::InvalidInput(format!("no codec for image format {other:?}"))),
    }
}

pub fn format_for_extension(ext: &str) -> Option<&'static str> {
    match ext.to_ascii_lowercase().as_str() {
        "ppm" => Some("ppm"),
        "jpg" | "jpeg" => Some("jpeg"),
        "png" => Some("png"),
        _ => None,
    }
}
