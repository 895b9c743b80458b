use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!(
                "{channels} channels (need 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} image given {} values",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit quantisation used when saving.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Squared L2 distance between equally shaped images.
    pub fn l2_distance_sq(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum()
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

enum Format {
    Png,
    Pnm,
}

fn format_of(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(Format::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(Format::Pnm),
        _ => Err(Error::format(
            path,
            "unsupported image format (use .png or .ppm)",
        )),
    }
}

/// Loads an 8-bit PNG (gray, RGB, palette; alpha is dropped) or a binary
/// PPM/PGM.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format_of(path)? {
        Format::Png => decode_png(&bytes).map_err(|m| Error::format(path, m)),
        Format::Pnm => decode_pnm(&bytes).map_err(|m| Error::format(path, m)),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image, String> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err("unsupported bit depth (16-bit PNG)".into());
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", frame.bit_depth));
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    let buf = &buf[..frame.buffer_size()];
    let (channels, bytes): (usize, Vec<u8>) = match frame.color_type {
        png::ColorType::Grayscale => (1, buf.to_vec()),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf.to_vec()),
        png::ColorType::Rgba => (3, buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => return Err("palette PNG was not expanded".into()),
    };
    Image::from_u8(w, h, channels, &bytes).map_err(|e| e.to_string())
}

fn decode_pnm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported PNM variant {m}")),
    };
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header value {s}"))
    };
    let w = parse(token()?)?;
    let h = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval != 255 {
        return Err(format!("unsupported bit depth (maxval {maxval})"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err(format!(
            "truncated raster: need {need} bytes, found {}",
            bytes.len().saturating_sub(start)
        ));
    }
    Image::from_u8(w, h, channels, &bytes[start..start + need]).map_err(|e| e.to_string())
}

/// Saves with 8-bit quantisation, format chosen by extension.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let bytes = image.to_u8();
    match format_of(path)? {
        Format::Png => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = png::Encoder::new(
                BufWriter::new(file),
                image.width as u32,
                image.height as u32,
            );
            enc.set_color(if image.channels == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::format(path, e.to_string()))?;
            w.write_image_data(&bytes)
                .map_err(|e| Error::format(path, e.to_string()))?;
            w.finish().map_err(|e| Error::format(path, e.to_string()))
        }
        Format::Pnm => {
            let magic = if image.channels == 3 { "P6" } else { "P5" };
            let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
            out.extend_from_slice(&bytes);
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(w: usize, h: usize, c: usize) -> Image {
        let bytes: Vec<u8> = (0..w * h * c)
            .map(|i| ((i * 7919 + 13) % 256) as u8)
            .collect();
        Image::from_u8(w, h, c, &bytes).unwrap()
    }

    #[test]
    fn png_and_ppm_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (name, c) in [("a.png", 3), ("b.png", 1), ("c.ppm", 3), ("d.pgm", 1)] {
            let img = random_image(13, 7, c);
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.to_u8(), img.to_u8(), "{name}");
            assert_eq!(back.channels(), c);
        }
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        {
            let f = fs::File::create(&p).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 8]).unwrap();
        }
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("unsupported bit depth"), "{err}");
        assert!(err.contains("deep.png"), "{err}");
    }

    #[test]
    fn ppm_p6_has_three_channels_and_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        fs::write(&p, b"P6\n# comment\n2 1\n255\n\x00\x10\x20\x30\x40\x50").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 1, 3));
        assert_eq!(img.to_u8(), vec![0, 16, 32, 48, 64, 80]);

        fs::write(&p, b"P6\n2 2\n255\n\x00\x10").unwrap();
        assert!(load_image(&p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(load_image(&dir.path().join("missing.png")).is_err());
        assert!(load_image(&dir.path().join("x.bmp")).is_err());
    }
}
