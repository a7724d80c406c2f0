//! Feature-map dumps as 8-bit binary PGM (P5) images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Min-max scales `plane` to `0..=255`; a constant plane maps to 128.
pub fn to_gray(plane: &[f64]) -> Vec<u8> {
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![128; plane.len()];
    }
    plane
        .iter()
        .map(|v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255. Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != w * h {
        return Err(bad("pixel count does not match dimensions"));
    }
    Ok((w, h, body.to_vec()))
}

/// Writes `img{i}_ch{c}_{pre|post}.pgm` for every image and channel of
/// activation slot `layer_id`. Returns the written paths in order.
pub fn dump_feature_maps(model: &mut Model, layer_id: usize, images: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (_, pre, post) = model.forward_probe(images, layer_id)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (stage, t) in [("pre", &pre), ("post", &post)] {
        let s = t.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let path = out_dir.join(format!("img{n}_ch{c}_{stage}.pgm"));
                let pgm = encode_pgm(s.w, s.h, &to_gray(t.plane(n, c)));
                fs::write(&path, pgm).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
