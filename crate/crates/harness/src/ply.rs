//! Binary little-endian PLY in the layout read by common splat viewers.
//!
//! One `vertex` element per Gaussian, all properties `float`, in this order:
//!
//! | property | meaning |
//! |---|---|
//! | `x y z` | mean |
//! | `f_dc_0 f_dc_1 f_dc_2` | degree-0 SH coefficient, RGB |
//! | `f_rest_0 ..` | higher SH coefficients, channel-major: all red, then green, then blue |
//! | `opacity` | opacity logit, `ln(α / (1 − α))` |
//! | `scale_0 scale_1 scale_2` | log standard deviations |
//! | `rot_0 rot_1 rot_2 rot_3` | quaternion `(w, x, y, z)`, unnormalized |
//!
//! The number of `f_rest_*` properties fixes the SH degree (0, 9 or 24 for
//! degrees 0, 1, 2).

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use pairsplat::gaussians::{sh_coeff_count, GaussianPrimitive, ShCoefficients, MAX_SH_DEGREE};
use pairsplat::linalg::Vec3;

use crate::error::{HarnessError, Result};

/// One Gaussian as stored in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatRecord {
    pub position: [f32; 3],
    pub f_dc: [f32; 3],
    /// Channel-major, `3·(K − 1)` values.
    pub f_rest: Vec<f32>,
    pub opacity_logit: f32,
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
}

fn logit(a: f64) -> f64 {
    let a = a.clamp(1e-12, 1.0 - 1e-12);
    (a / (1.0 - a)).ln()
}

impl SplatRecord {
    pub fn from_primitive(g: &GaussianPrimitive<f64>) -> Self {
        let coeffs = g.sh.coeffs();
        let k = coeffs.len();
        let mut f_rest = Vec::with_capacity(3 * (k - 1));
        for c in 0..3 {
            f_rest.extend(coeffs[1..].iter().map(|v| v[c] as f32));
        }
        Self {
            position: g.mean.to_array().map(|v| v as f32),
            f_dc: coeffs[0].map(|v| v as f32),
            f_rest,
            opacity_logit: logit(g.opacity) as f32,
            scale: g.scale_raw.to_array().map(|v| v as f32),
            rotation: g.rotation_raw.map(|v| v as f32),
        }
    }

    pub fn sh_degree(&self) -> Option<usize> {
        (0..=MAX_SH_DEGREE).find(|&d| 3 * (sh_coeff_count(d) - 1) == self.f_rest.len())
    }

    pub fn to_primitive(&self) -> Result<GaussianPrimitive<f64>> {
        let degree = self
            .sh_degree()
            .ok_or_else(|| HarnessError::validation(format!("{} f_rest values match no SH degree", self.f_rest.len())))?;
        let rest = self.f_rest.len() / 3;
        let mut coeffs = vec![self.f_dc.map(f64::from)];
        for k in 0..rest {
            coeffs.push(std::array::from_fn(|c| f64::from(self.f_rest[c * rest + k])));
        }
        Ok(GaussianPrimitive {
            mean: Vec3::from_array(self.position.map(f64::from)),
            scale_raw: Vec3::from_array(self.scale.map(f64::from)),
            rotation_raw: self.rotation.map(f64::from),
            opacity: 1.0 / (1.0 + (-f64::from(self.opacity_logit)).exp()),
            sh: ShCoefficients::new(degree, coeffs)?,
        })
    }
}

/// Property names in file order for SH degree `degree`.
pub fn property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..3 * (sh_coeff_count(degree) - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn header(count: usize, degree: usize) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for name in property_names(degree) {
        h.push_str(&format!("property float {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn encode_ply(records: &[SplatRecord], degree: usize) -> Result<Vec<u8>> {
    let width = 3 * (sh_coeff_count(degree) - 1);
    let mut out = header(records.len(), degree).into_bytes();
    for (i, r) in records.iter().enumerate() {
        if r.f_rest.len() != width {
            return Err(HarnessError::validation(format!(
                "record {i} has {} f_rest values, degree {degree} needs {width}",
                r.f_rest.len()
            )));
        }
        let values = r
            .position
            .iter()
            .chain(&r.f_dc)
            .chain(&r.f_rest)
            .chain(std::iter::once(&r.opacity_logit))
            .chain(&r.scale)
            .chain(&r.rotation);
        for &v in values {
            if !v.is_finite() {
                return Err(HarnessError::validation(format!("record {i} has a non-finite value")));
            }
            out.write_f32::<LittleEndian>(v).expect("writing to a Vec cannot fail");
        }
    }
    Ok(out)
}

fn parse_error(offset: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        format: "ply",
        offset,
        message: message.into(),
    }
}

pub fn decode_ply(bytes: &[u8]) -> Result<Vec<SplatRecord>> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_error(offset, "header is not terminated by end_header"))?;
        let line = std::str::from_utf8(&bytes[offset..offset + end])
            .map_err(|_| parse_error(offset, "header line is not UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        let start = offset;
        offset += end + 1;
        if line == "end_header" {
            break;
        }
        lines.push((start, line));
    }
    let mut it = lines.into_iter();
    match it.next() {
        Some((_, l)) if l == "ply" => {}
        _ => return Err(parse_error(0, "missing 'ply' magic")),
    }
    let mut count = None;
    let mut names = Vec::new();
    for (at, line) in it {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(parse_error(at, format!("unsupported format line '{line}'"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| parse_error(at, format!("bad vertex count '{n}'")))?)
            }
            ["element", other, ..] => return Err(parse_error(at, format!("unexpected element '{other}'"))),
            ["property", "float", name] => names.push(name.to_string()),
            ["property", ty, ..] => return Err(parse_error(at, format!("property type '{ty}' is not float"))),
            _ => return Err(parse_error(at, format!("unrecognized header line '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| parse_error(0, "no vertex element"))?;
    let rest = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| 3 * (sh_coeff_count(d) - 1) == rest)
        .ok_or_else(|| parse_error(0, format!("{rest} f_rest properties match no SH degree")))?;
    if names != property_names(degree) {
        return Err(parse_error(0, format!("property layout {names:?} differs from the documented one")));
    }
    let stride = 4 * names.len();
    let need = count
        .checked_mul(stride)
        .ok_or_else(|| parse_error(offset, "vertex count overflows"))?;
    if bytes.len() - offset != need {
        return Err(parse_error(
            offset,
            format!("expected {need} bytes of vertex data, found {}", bytes.len() - offset),
        ));
    }
    let width = rest;
    let records = bytes[offset..]
        .chunks_exact(stride)
        .map(|chunk| {
            let v: Vec<f32> = chunk.chunks_exact(4).map(LittleEndian::read_f32).collect();
            let mut k = 0;
            let mut take = |n: usize| {
                let s = &v[k..k + n];
                k += n;
                s.to_vec()
            };
            let position = take(3);
            let f_dc = take(3);
            let f_rest = take(width);
            let opacity = take(1);
            let scale = take(3);
            let rotation = take(4);
            SplatRecord {
                position: [position[0], position[1], position[2]],
                f_dc: [f_dc[0], f_dc[1], f_dc[2]],
                f_rest,
                opacity_logit: opacity[0],
                scale: [scale[0], scale[1], scale[2]],
                rotation: [rotation[0], rotation[1], rotation[2], rotation[3]],
            }
        })
        .collect();
    Ok(records)
}

pub fn export_ply(primitives: &[GaussianPrimitive<f64>], path: &Path) -> Result<()> {
    let degree = primitives.first().map_or(0, |g| g.sh.degree());
    if primitives.iter().any(|g| g.sh.degree() != degree) {
        return Err(HarnessError::validation("all primitives must share one SH degree"));
    }
    if primitives.iter().any(|g| !g.is_finite()) {
        return Err(HarnessError::validation("cannot export non-finite primitives"));
    }
    let records: Vec<SplatRecord> = primitives.iter().map(SplatRecord::from_primitive).collect();
    write_records(&records, degree, path)
}

pub fn write_records(records: &[SplatRecord], degree: usize, path: &Path) -> Result<()> {
    let bytes = encode_ply(records, degree)?;
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn import_ply(path: &Path) -> Result<Vec<SplatRecord>> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_ply(&bytes)
}
