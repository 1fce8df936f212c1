//! Model container: a text header naming each array with its element type
//! and shape, terminated by `end`, followed by the raw little-endian arrays
//! in header order.
//!
//! ```text
//! morphstn-model 1
//! endianness little
//! vertices 4096
//! modes 10
//! grid 64 64
//! landmarks 15
//! array mean_shape f64 12288
//! array basis f64 12288 10
//! array uv_coords f64 4096 2
//! array sym_index u64 4096
//! array landmark_indices u64 15
//! array mode_symmetry i8 10
//! end
//! ```
//!
//! `basis` is stored column-major, `uv_coords` vertex-major. Indices are
//! 0-based. Mode symmetry codes: 1 symmetric, -1 antisymmetric, 0 neither.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::model::{ModeSymmetry, MorphableModel};

pub const MAGIC: &str = "morphstn-model 1";
const KIND: &str = "model";

pub fn write_model(path: &Path, model: &MorphableModel) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub(crate) fn encode(model: &MorphableModel) -> Vec<u8> {
    let n = model.num_vertices();
    let d = model.num_modes();
    let l = model.landmark_indices().len();
    let header = format!(
        "{MAGIC}\nendianness little\nvertices {n}\nmodes {d}\ngrid {} {}\nlandmarks {l}\n\
         array mean_shape f64 {}\narray basis f64 {} {d}\narray uv_coords f64 {n} 2\n\
         array sym_index u64 {n}\narray landmark_indices u64 {l}\narray mode_symmetry i8 {d}\nend\n",
        model.grid_height(),
        model.grid_width(),
        3 * n,
        3 * n,
    );
    let mut out = header.into_bytes();
    for v in model.mean_shape().iter().chain(model.basis().as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for uv in model.uv_coords() {
        out.extend_from_slice(&uv[0].to_le_bytes());
        out.extend_from_slice(&uv[1].to_le_bytes());
    }
    for &i in model.sym_index().iter().chain(model.landmark_indices()) {
        out.extend_from_slice(&(i as u64).to_le_bytes());
    }
    for s in model.mode_symmetry() {
        out.push(s.code() as u8);
    }
    out
}

pub fn read_model(path: &Path) -> Result<MorphableModel> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|reason| Error::format(KIND, path, reason))?
}

struct Header {
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    l: usize,
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|b| *b == b'\n') else {
            return Err("header is not terminated by `end`".into());
        };
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| "header is not valid UTF-8".to_string())?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
        if lines.len() > 64 {
            return Err("header is too long".into());
        }
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(format!("missing magic line `{MAGIC}`"));
    }
    let mut fields = std::collections::HashMap::new();
    let mut arrays = Vec::new();
    for line in &lines[1..] {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["array", name, ty, dims @ ..] => arrays.push((name.to_string(), ty.to_string(), dims.join(" "))),
            [key, values @ ..] => {
                fields.insert(key.to_string(), values.join(" "));
            }
            [] => {}
        }
    }
    if fields.get("endianness").map(String::as_str) != Some("little") {
        return Err("only little-endian containers are supported".into());
    }
    let num = |key: &str| -> std::result::Result<usize, String> {
        fields
            .get(key)
            .ok_or_else(|| format!("missing `{key}`"))?
            .parse()
            .map_err(|_| format!("bad value for `{key}`"))
    };
    let (n, d, l) = (num("vertices")?, num("modes")?, num("landmarks")?);
    let grid: Vec<usize> = fields
        .get("grid")
        .ok_or("missing `grid`")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| "bad grid size".to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let [h, w] = grid[..] else {
        return Err("grid needs two sizes".into());
    };
    let expected = [
        ("mean_shape", "f64", format!("{}", 3 * n)),
        ("basis", "f64", format!("{} {d}", 3 * n)),
        ("uv_coords", "f64", format!("{n} 2")),
        ("sym_index", "u64", format!("{n}")),
        ("landmark_indices", "u64", format!("{l}")),
        ("mode_symmetry", "i8", format!("{d}")),
    ];
    if arrays.len() != expected.len() {
        return Err(format!("expected {} arrays, found {}", expected.len(), arrays.len()));
    }
    for ((name, ty, dims), (en, et, ed)) in arrays.iter().zip(expected.iter()) {
        if name != en || ty != et || dims != ed {
            return Err(format!(
                "array `{name} {ty} {dims}` where `{en} {et} {ed}` was expected"
            ));
        }
    }
    Ok(Header {
        n,
        d,
        h,
        w,
        l,
        body_start: pos,
    })
}

pub(crate) fn decode(bytes: &[u8]) -> std::result::Result<Result<MorphableModel>, String> {
    let hd = parse_header(bytes)?;
    let (n, d, l) = (hd.n, hd.d, hd.l);
    let need = 8 * (3 * n + 3 * n * d + 2 * n + n + l) + d;
    let body = &bytes[hd.body_start..];
    if body.len() != need {
        return Err(format!("body has {} bytes, header implies {need}", body.len()));
    }
    let mut cursor = 0;
    let mut take8 = |count: usize| {
        let out: Vec<[u8; 8]> = body[cursor..cursor + 8 * count]
            .chunks_exact(8)
            .map(|c| c.try_into().expect("8-byte chunk"))
            .collect();
        cursor += 8 * count;
        out
    };
    let f64s = |raw: Vec<[u8; 8]>| raw.into_iter().map(f64::from_le_bytes).collect::<Vec<_>>();
    let mean = f64s(take8(3 * n));
    let basis = f64s(take8(3 * n * d));
    let uv = f64s(take8(2 * n));
    let to_index = |raw: Vec<[u8; 8]>| -> std::result::Result<Vec<usize>, String> {
        raw.into_iter()
            .map(|b| usize::try_from(u64::from_le_bytes(b)).map_err(|_| "index out of range".to_string()))
            .collect()
    };
    let sym = to_index(take8(n))?;
    let landmarks = to_index(take8(l))?;
    let symmetry = body[body.len() - d..]
        .iter()
        .map(|b| ModeSymmetry::from_code(*b as i8).ok_or_else(|| format!("bad mode symmetry code {}", *b as i8)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if hd.h * hd.w != n {
        return Err(format!("grid {}x{} does not match {n} vertices", hd.h, hd.w));
    }
    Ok(MorphableModel::new(
        DVector::from_vec(mean),
        DMatrix::from_vec(3 * n, d, basis),
        hd.h,
        hd.w,
        uv.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        sym,
        landmarks,
        symmetry,
    ))
}
