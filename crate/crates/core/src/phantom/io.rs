use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::error::{invalid, io_error, DmmError, Result};
use crate::image::Image;

/// Maps integer samples in `[0, 2^bits − 1]` to `[-1, 1]`.
pub fn normalize_intensity(
    raw: &[u32],
    height: usize,
    width: usize,
    bit_depth: u32,
) -> Result<Image> {
    if !(1..=16).contains(&bit_depth) {
        return Err(invalid("bit_depth", format!("{bit_depth} outside 1..=16")));
    }
    let max = ((1u32 << bit_depth) - 1) as f64;
    if let Some(v) = raw.iter().find(|&&v| f64::from(v) > max) {
        return Err(invalid(
            "sample",
            format!("{v} exceeds {bit_depth}-bit range"),
        ));
    }
    Image::new(
        height,
        width,
        raw.iter()
            .map(|&v| 2.0 * f64::from(v) / max - 1.0)
            .collect(),
    )
}

/// Inverse of [`normalize_intensity`], rounding to the nearest integer and
/// clamping to the representable range.
pub fn denormalize_intensity(img: &Image, bit_depth: u32) -> Vec<u32> {
    let max = ((1u32 << bit_depth) - 1) as f64;
    img.data()
        .iter()
        .map(|v| ((v + 1.0) / 2.0 * max).round().clamp(0.0, max) as u32)
        .collect()
}

fn bytes_8bit(img: &Image) -> Vec<u8> {
    denormalize_intensity(img, 8)
        .into_iter()
        .map(|v| v as u8)
        .collect()
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(bytes_8bit(img));
    std::fs::write(path, out).map_err(|e| io_error(path, e))
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a binary (P5) PGM with 8- or 16-bit samples.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let bad = |reason: String| DmmError::Format {
        what: "PGM",
        reason,
    };
    let mut pos = 0;
    let mut next =
        |name: &str| pgm_token(&bytes, &mut pos).ok_or_else(|| bad(format!("missing {name}")));
    if next("magic")? != "P5" {
        return Err(bad("not a binary PGM".into()));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| bad(format!("bad number {s}")))
    };
    let width = num(next("width")?)?;
    let height = num(next("height")?)?;
    let maxval = num(next("maxval")?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval}")));
    }
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("truncated pixel data".into()))?;
    let raw: Vec<f64> = if wide {
        payload
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        payload.iter().map(|&b| f64::from(b)).collect()
    };
    Image::new(
        height,
        width,
        raw.iter().map(|v| 2.0 * v / maxval as f64 - 1.0).collect(),
    )
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut enc = png::Encoder::new(
        std::io::BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| io_error(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes_8bit(img)).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Reads an 8- or 16-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    let bad = |reason: String| DmmError::Format {
        what: "PNG",
        reason,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad(format!(
            "{:?} is not single-channel grayscale",
            info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h]
            .iter()
            .map(|&b| 2.0 * f64::from(b) / 255.0 - 1.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| 2.0 * f64::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0 - 1.0)
            .collect(),
        other => return Err(bad(format!("unsupported bit depth {other:?}"))),
    };
    Image::new(h, w, data)
}

/// Dispatches on the file extension (`.pgm` or `.png`).
pub fn read_image(path: &Path) -> Result<Image> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(DmmError::Format {
            what: "image",
            reason: format!("{} is neither .pgm nor .png", path.display()),
        }),
    }
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let (h, w) = img.dims();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let coord = |i: usize, from: usize, to: usize| {
        ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64)
    };
    Image::from_fn(height, width, |y, x| {
        let (sy, sx) = (coord(y, h, height), coord(x, w, width));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = (1.0 - fx) * img.get(y0, x0) + fx * img.get(y0, x1);
        let bottom = (1.0 - fx) * img.get(y1, x0) + fx * img.get(y1, x1);
        (1.0 - fy) * top + fy * bottom
    })
}

/// Parses `source<TAB>target` lines; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|e| io_error(path, e))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (s, t) = line.split_once('\t').ok_or_else(|| DmmError::Format {
            what: "manifest",
            reason: format!("line {} lacks a tab separator", n + 1),
        })?;
        pairs.push((dir.join(s), dir.join(t)));
    }
    Ok(pairs)
}

pub fn write_manifest(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let text: String = pairs.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect();
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let img = normalize_intensity(&[0, 255, 128], 1, 3, 8).unwrap();
        assert_eq!(img.data()[0], -1.0);
        assert_eq!(img.data()[1], 1.0);
        assert!((img.data()[2] - 1.0 / 255.0).abs() < 1e-15);
        assert!(normalize_intensity(&[256], 1, 1, 8).is_err());
    }

    #[test]
    fn integer_round_trip() {
        for bits in [8, 12, 16] {
            let max = (1u32 << bits) - 1;
            let raw: Vec<u32> = (0..=max).step_by((max as usize / 997).max(1)).collect();
            let img = normalize_intensity(&raw, 1, raw.len(), bits).unwrap();
            assert_eq!(denormalize_intensity(&img, bits), raw);
        }
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u32> = (0..12).map(|i| i * 21).collect();
        let img = normalize_intensity(&raw, 3, 4, 8).unwrap();
        let pgm = dir.path().join("a.pgm");
        write_pgm(&pgm, &img).unwrap();
        assert_eq!(denormalize_intensity(&read_image(&pgm).unwrap(), 8), raw);
        let png_path = dir.path().join("a.png");
        write_png(&png_path, &img).unwrap();
        assert_eq!(
            denormalize_intensity(&read_image(&png_path).unwrap(), 8),
            raw
        );
        assert!(read_image(&dir.path().join("a.bmp")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_manifest(&path, &[("s0.pgm".into(), "t0.pgm".into())]).unwrap();
        let pairs = read_manifest(&path).unwrap();
        assert_eq!(
            pairs,
            vec![(dir.path().join("s0.pgm"), dir.path().join("t0.pgm"))]
        );
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Image::filled(5, 7, 0.25);
        let out = resize_bilinear(&img, 9, 3);
        assert_eq!(out.dims(), (9, 3));
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}
