//! PGM images, CSV tables, manifests and the raw sample export.

use std::io::Write;
use std::path::Path;

use lupi_core::metrics::GrayImage;
use lupi_core::synth::{Dataset, Manifest};
use lupi_core::{Sample, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Binary `P5` PGM with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary PGM with maxval ≤ 255; `#` comments in the header are
/// skipped.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let malformed = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
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
            return Err(malformed("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("non-ASCII header"))?,
        );
    }
    if fields[0] != "P5" {
        return Err(malformed("not a binary PGM"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| malformed("bad header number"))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(malformed("only 8-bit PGM is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let pixels = bytes
        .get(pos..)
        .filter(|p| p.len() == width * height)
        .ok_or_else(|| malformed("raster size mismatch"))?;
    Ok(GrayImage {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(Error::io(path))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_pgm(&bytes, path)
}

/// `[0,1]` plane as an 8-bit preview.
pub fn preview(plane: &[f64], width: usize, height: usize) -> GrayImage {
    let pixels = plane
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage {
        width,
        height,
        pixels,
    }
}

/// Comma-separated, LF-terminated, with a header row.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Shortest round-trip decimal; never uses exponent notation or grouping.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::json(path))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(Error::json(path))
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write_json(path, m)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(path)?;
    if m.version != Manifest::VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("manifest version {}", m.version),
        });
    }
    Ok(m)
}

fn write_f64s(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io(path))?);
    f.write_all(&t.to_le_bytes())
        .and_then(|_| f.flush())
        .map_err(Error::io(path))
}

/// Writes one directory per sample (`train_00000`, `test_00000`, …) with
/// planar little-endian `f64` dumps of every tensor and a PGM preview of
/// each image channel and the mask.
pub fn export_raw(dir: &Path, data: &Dataset) -> Result<()> {
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for (i, s) in samples.iter().enumerate() {
            let d = dir.join(format!("{split}_{i:05}"));
            std::fs::create_dir_all(&d).map_err(Error::io(&d))?;
            export_sample(&d, s)?;
        }
    }
    Ok(())
}

fn export_sample(d: &Path, s: &Sample) -> Result<()> {
    write_f64s(&d.join("image_hard.f64"), &s.image_hard)?;
    write_f64s(&d.join("image_priv.f64"), &s.image_priv)?;
    write_f64s(&d.join("mask.f64"), &s.mask)?;
    write_f64s(&d.join("pose.f64"), &s.pose)?;
    let sh = s.image_hard.shape();
    let (h, w) = (sh[1], sh[2]);
    for (c, plane) in s.image_hard.data().chunks_exact(h * w).enumerate() {
        write_pgm(&d.join(format!("hard_c{c}.pgm")), &preview(plane, w, h))?;
    }
    write_pgm(&d.join("priv.pgm"), &preview(s.image_priv.data(), w, h))?;
    write_pgm(&d.join("mask.pgm"), &preview(s.mask.data(), w, h))
}
