//! File helpers: atomic writes and 8-bit binary graymaps (PGM `P5`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Write `bytes` to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Quantise `[0, 1]` intensities to 8 bits (values are clamped first).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snap an intensity to the nearest 8-bit level, so that writing and reading
/// back a graymap reproduces it exactly.
pub fn snap(v: f32) -> f32 {
    quantize(v) as f32 / 255.0
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// Encode an arbitrary real-valued map as a min–max scaled graymap.
pub fn encode_pgm_scaled(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled: Vec<f32> = values.iter().map(|&v| (v - lo) / span).collect();
    let img = Image::new(width, height, scaled, 0.0).expect("extent");
    encode_pgm(&img)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_pgm(image))
}

pub fn read_pgm(path: &Path, nm_per_px: f32) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path, nm_per_px)
}

pub fn decode_pgm(bytes: &[u8], path: &Path, nm_per_px: f32) -> Result<Image> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(path, 0, "not a binary graymap (missing P5 magic)"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(Error::parse(path, pos as u64, format!("expected {what}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, start as u64, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::parse(path, pos as u64, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(path, pos as u64, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, pos as u64, "expected whitespace before raster"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() - pos < need {
        return Err(Error::parse(
            path,
            bytes.len() as u64,
            format!("raster truncated: need {need} bytes, found {}", bytes.len() - pos),
        ));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / maxval as f32).collect();
    Image::new(w, h, data, nm_per_px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_within_quantisation() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let img = Image::new(4, 3, data, 2.0).unwrap();
        let back = decode_pgm(&encode_pgm(&img), Path::new("x.pgm"), 2.0).unwrap();
        assert_eq!(back.dims(), (4, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = decode_pgm(bytes, Path::new("c.pgm"), 1.0).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_raster_names_offset() {
        let err = decode_pgm(b"P5 4 4 255\n\x01\x02", Path::new("t.pgm"), 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t.pgm") && msg.contains("byte 13"), "{msg}");
    }

    #[test]
    fn bad_magic() {
        let err = decode_pgm(b"P2 1 1 255\n0", Path::new("m.pgm"), 1.0).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }
}
