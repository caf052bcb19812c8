//! PFM (HDR) and 8-bit PNG (LDR) image files.
//!
//! PFM rows are stored bottom-to-top; a negative scale marks little-endian
//! samples. We always write `PF` with scale `-1.0`.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{HdrImage, LdrImage};

#[derive(Debug, Clone, PartialEq)]
pub enum AnyImage {
    Hdr(HdrImage),
    Ldr(LdrImage),
}

fn malformed(format: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        format,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 12);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in img.get(x, y) {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Parses a PFM byte buffer. `Pf` (single channel) files are expanded to RGB.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<HdrImage> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("PFM", path, "unexpected end of header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| malformed("PFM", path, "non-ASCII header"))?
            .to_string();
        Ok(tok)
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(malformed("PFM", path, format!("bad magic {other:?}"))),
    };
    let w: usize = token()?
        .parse()
        .map_err(|_| malformed("PFM", path, "bad width"))?;
    let h: usize = token()?
        .parse()
        .map_err(|_| malformed("PFM", path, "bad height"))?;
    let scale: f64 = token()?
        .parse()
        .map_err(|_| malformed("PFM", path, "bad scale"))?;
    if w == 0 || h == 0 {
        return Err(malformed("PFM", path, "zero dimension"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed("PFM", path, "scale must be non-zero"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(malformed("PFM", path, "missing payload"));
    }
    pos += 1;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(malformed(
            "PFM",
            path,
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    let mut data = vec![0.0f64; w * h * 3];
    for (k, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        } as f64;
        let file_px = k / channels;
        let c = k % channels;
        let (fx, fy) = (file_px % w, file_px / w);
        let y = h - 1 - fy;
        let base = (y * w + fx) * 3;
        if channels == 1 {
            data[base..base + 3].fill(v);
        } else {
            data[base + c] = v;
        }
    }
    HdrImage::new(w, h, data).map_err(|e| malformed("PFM", path, e.to_string()))
}

pub fn write_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &LdrImage) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut buf), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidData(format!("png encode: {e}")))?;
        let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::InvalidData(format!("png encode: {e}")))?;
    }
    Ok(buf)
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<LdrImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| malformed("PNG", path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| malformed("PNG", path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| malformed("PNG", path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(malformed("PNG", path, "indexed colour was not expanded"))
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(malformed("PNG", path, "only 8-bit samples are supported"));
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            let rgb = match channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
        }
    }
    LdrImage::new(w, h, data)
}

pub fn write_png(img: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<LdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// Dispatches on the file signature, not the extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<AnyImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"PF") || bytes.starts_with(b"Pf") {
        decode_pfm(&bytes, path).map(AnyImage::Hdr)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, path).map(AnyImage::Ldr)
    } else {
        Err(malformed("image", path, "unrecognised signature"))
    }
}

pub fn write_image(img: &AnyImage, path: impl AsRef<Path>) -> Result<()> {
    match img {
        AnyImage::Hdr(h) => write_pfm(h, path),
        AnyImage::Ldr(l) => write_png(l, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let vals = [0.1f32, 1.5, 3.25e-7, 1e6, 0.0, 7.0, 2.0, 0.333, 9.5, 4.0, 8.0, 1e-30];
        let img = HdrImage::new(2, 2, vals.iter().map(|&v| v as f64).collect()).unwrap();
        write_pfm(&img, &p).unwrap();
        let back = read_pfm(&p).unwrap();
        for (a, b) in back.data().iter().zip(vals) {
            assert_eq!((*a as f32).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pfm_header_layout() {
        let mut bytes = b"PF\n2 2\n-1.0\n".to_vec();
        // file rows are bottom-to-top
        for k in 0..12u32 {
            bytes.extend_from_slice(&(k as f32).to_le_bytes());
        }
        let img = decode_pfm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.get(0, 1), [0.0, 1.0, 2.0]);
        assert_eq!(img.get(1, 1), [3.0, 4.0, 5.0]);
        assert_eq!(img.get(0, 0), [6.0, 7.0, 8.0]);
        assert_eq!(encode_pfm(&img), bytes);
    }

    #[test]
    fn pfm_big_endian_and_grayscale() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        let img = decode_pfm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(img.get(0, 1), [2.5; 3]);
        assert_eq!(img.get(0, 0), [0.5; 3]);
    }

    #[test]
    fn pfm_errors() {
        let p = Path::new("mem");
        assert!(decode_pfm(b"P6\n1 1\n-1.0\n", p).is_err());
        assert!(decode_pfm(b"PF\n2 2\n-1.0\n\0\0\0\0", p).is_err());
        assert!(decode_pfm(b"PF\nx 2\n-1.0\n", p).is_err());
        assert!(decode_pfm(b"PF\n1 1\n", p).is_err());
    }

    #[test]
    fn png_round_trip_after_quantization() {
        let img = LdrImage::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.3]);
        let bytes = encode_png(&img).unwrap();
        let back = decode_png(&bytes, Path::new("mem")).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(*a, quantize_u8(*b) as f64 / 255.0);
        }
        // second trip is lossless
        let again = decode_png(&encode_png(&back).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn truncated_png_is_an_error() {
        let img = LdrImage::from_fn(16, 16, |x, y| [x as f64 / 15.0, y as f64 / 15.0, 0.5]);
        let bytes = encode_png(&img).unwrap();
        for cut in [8, bytes.len() / 2, bytes.len() - 13] {
            assert!(decode_png(&bytes[..cut], Path::new("mem")).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn read_image_dispatches_on_signature() {
        let dir = tempfile::tempdir().unwrap();
        let h = HdrImage::filled(2, 1, [1.0, 2.0, 3.0]);
        let l = LdrImage::filled(2, 1, [1.0, 0.0, 0.2]);
        write_image(&AnyImage::Hdr(h.clone()), dir.path().join("h.bin")).unwrap();
        write_image(&AnyImage::Ldr(l), dir.path().join("l.bin")).unwrap();
        assert_eq!(read_image(dir.path().join("h.bin")).unwrap(), AnyImage::Hdr(h));
        assert!(matches!(read_image(dir.path().join("l.bin")).unwrap(), AnyImage::Ldr(_)));
        fs::write(dir.path().join("x.bin"), b"junk").unwrap();
        assert!(read_image(dir.path().join("x.bin")).is_err());
    }

    proptest! {
        #[test]
        fn pfm_encode_decode_identity(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let img = HdrImage::from_fn(w, h, |_, _| {
                let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 40) as f32 / 1000.0) as f64 };
                [next(), next(), next()]
            });
            let back = decode_pfm(&encode_pfm(&img), Path::new("mem")).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
