//! Binary 8-bit PGM (`P5`) images and the tab-separated dataset manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Split;

/// Encodes a `[1×H×W]` (or `[H×W]`) image with values in `[0,1]`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(image)?;
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.reserve(h * w);
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("pixel value {} outside [0,1]", v)));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(Error::dim("pgm", format!("expected [1,H,W] image, got {:?}", s))),
    }
}

pub fn write_pgm(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pgm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a `P5` image with maxval 255 into a `[1×H×W]` tensor.
pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let parse_err = |detail: &str| Error::Parse {
        path: origin.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0usize;
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
            return Err(parse_err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| parse_err("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(parse_err("missing P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(parse_err("only non-empty 8-bit images with maxval 255 are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(parse_err("raster size does not match header"));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.path, e.label, e.split.as_str()))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_manifest(entries).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("line {}: {}", n + 1, detail),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let label = cols[1].parse().map_err(|_| err(format!("bad label `{}`", cols[1])))?;
        let split = Split::parse(cols[2]).ok_or_else(|| err(format!("bad split `{}`", cols[2])))?;
        out.push(ManifestEntry {
            path: cols[0].to_string(),
            label,
            split,
        });
    }
    Ok(out)
}

/// Resolves a manifest entry against the manifest's directory.
pub fn entry_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&entry.path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_for_32x32() {
        let bytes = encode_pgm(&Tensor::zeros(&[1, 32, 32])).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 1024);
        assert!(bytes[13..].iter().all(|&b| b == 0));
    }

    #[test]
    fn round_trip_within_quantization_bound() {
        let img = Tensor::from_fn(&[1, 5, 7], |i| ((i * 37) % 101) as f32 / 100.0);
        let bytes = encode_pgm(&img).unwrap();
        let back = decode_pgm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn malformed_headers_are_parse_errors() {
        for bad in [&b"P6\n1 1\n255\n\0"[..], b"P5\n2 2\n255\n\0", b"P5\n1\n", b"P5\n1 1\n65535\n\0\0"] {
            assert!(matches!(decode_pgm(bad, Path::new("x")), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x00\xff", Path::new("x")).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn manifest_lines_are_tab_separated() {
        let entries = vec![
            ManifestEntry { path: "train/a.pgm".into(), label: 1, split: Split::Train },
            ManifestEntry { path: "test/b.pgm".into(), label: 0, split: Split::Test },
        ];
        assert_eq!(format_manifest(&entries), "train/a.pgm\t1\ttrain\ntest/b.pgm\t0\ttest\n");
    }
}
