//! On-disk formats: binary PPM/PGM, raw little-endian `f32` grids with JSON
//! sidecars, and atomic file replacement.

use super::{BinaryMask, GrayMap, Image};
use crate::error::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::parse(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Sidecar path for a raw grid: same stem, `.json` extension.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

// ---- PNM -------------------------------------------------------------------

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(Error::parse(path, "truncated header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| Error::parse(path, "bad header field"))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, "missing separator before raster"));
    }
    Ok(PnmHeader {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_offset: pos + 1,
    })
}

/// Reads an 8-bit binary PGM (P5) or PPM (P6), mapping samples linearly into `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let hdr = parse_pnm_header(&bytes, path)?;
    let channels = match &hdr.magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::parse(path, "not a binary PGM/PPM")),
    };
    if hdr.maxval != 255 {
        return Err(Error::parse(path, format!("maxval {} (only 255 supported)", hdr.maxval)));
    }
    let n = hdr.width * hdr.height * channels;
    let raster = bytes
        .get(hdr.data_offset..hdr.data_offset + n)
        .ok_or_else(|| Error::parse(path, "truncated raster"))?;
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(hdr.width, hdr.height, channels, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

/// Writes P5 for single-channel and P6 for three-channel images, rounding to nearest.
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_pnm(img))
}

/// Reads a PGM mask; any nonzero sample is `true`.
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let img = read_pnm(path)?;
    if img.channels() != 1 {
        return Err(Error::parse(path, "mask must be single-channel PGM"));
    }
    let bits = img.data().iter().map(|&v| v > 0.0).collect();
    BinaryMask::new(img.width(), img.height(), bits)
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_pnm(path, &Image::new(mask.width(), mask.height(), 1, data)?)
}

// ---- raw f32 grids ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub width: usize,
    pub height: usize,
}

pub fn encode_f32_le(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32_le(bytes: &[u8], expected: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::parse(
            path,
            format!("{} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Reads `path` (raw `f32` LE) with its `{"width", "height"}` sidecar.
pub fn read_gray_map(path: &Path) -> Result<GrayMap> {
    let side: GridSidecar = read_json(&sidecar_path(path))?;
    let bytes = read_bytes(path)?;
    let values = decode_f32_le(&bytes, side.width * side.height, path)?;
    GrayMap::new(side.width, side.height, values).map_err(|e| Error::parse(path, e))
}

pub fn write_gray_map(path: &Path, map: &GrayMap) -> Result<()> {
    let side = GridSidecar {
        width: map.width(),
        height: map.height(),
    };
    write_atomic(path, &encode_f32_le(map.values().iter().copied()))?;
    write_json(&sidecar_path(path), &side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantizes_to_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = Image::new(2, 1, 3, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        write_pnm(&p, &img).unwrap();
        let back = read_pnm(&p).unwrap();
        assert_eq!(back.dims(), (2, 1));
        assert_eq!(back.channels(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // the raster is bit-exact once values are on the 8-bit grid
        let again = dir.path().join("b.ppm");
        write_pnm(&again, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn pgm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n3 1\n255\n\x00\x80\xff").unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
        let mask = read_mask_pgm(&p).unwrap();
        assert_eq!(mask.bits(), &[false, true, true]);
    }

    #[test]
    fn truncated_raster_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        fs::write(&p, b"P5 4 4 255\n\x00\x01").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn gray_map_raw_format_is_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let m = GrayMap::new(2, 1, vec![1.0, -2.5]).unwrap();
        write_gray_map(&p, &m).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(raw, [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat());
        let side: serde_json::Value = read_json(&sidecar_path(&p)).unwrap();
        assert_eq!(side, serde_json::json!({"width": 2, "height": 1}));
        assert_eq!(read_gray_map(&p).unwrap(), m);
    }

    #[test]
    fn missing_sidecar_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        fs::write(&p, [0u8; 4]).unwrap();
        assert!(matches!(read_gray_map(&p), Err(Error::MissingInput(_))));
    }
}
