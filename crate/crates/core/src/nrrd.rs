//! Minimal NRRD reader/writer.
//!
//! Supported subset: single attached header, `dimension: 3` (or 4 with a
//! trailing 3-component axis for vector fields), `type` in
//! {float, double, uchar, short}, `encoding: raw`, `endian: little`,
//! diagonal `space directions`, `space origin`. Any other field is rejected
//! with [`Error::UnsupportedField`].

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    UInt8,
    Int16,
    Float32,
    Float64,
}

impl ScalarType {
    pub fn size(self) -> usize {
        match self {
            ScalarType::UInt8 => 1,
            ScalarType::Int16 => 2,
            ScalarType::Float32 => 4,
            ScalarType::Float64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ScalarType::UInt8 => "uchar",
            ScalarType::Int16 => "short",
            ScalarType::Float32 => "float",
            ScalarType::Float64 => "double",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => ScalarType::UInt8,
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                ScalarType::Int16
            }
            "float" => ScalarType::Float32,
            "double" => ScalarType::Float64,
            _ => return None,
        })
    }
}

/// Typed sample storage, kept in the on-disk type for bit-exact round trips.
#[derive(Debug, Clone, PartialEq)]
pub enum NrrdData {
    UInt8(Vec<u8>),
    Int16(Vec<i16>),
    Float32(Vec<f32>),
    Float64(Vec<f64>),
}

impl NrrdData {
    pub fn scalar_type(&self) -> ScalarType {
        match self {
            NrrdData::UInt8(_) => ScalarType::UInt8,
            NrrdData::Int16(_) => ScalarType::Int16,
            NrrdData::Float32(_) => ScalarType::Float32,
            NrrdData::Float64(_) => ScalarType::Float64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NrrdData::UInt8(v) => v.len(),
            NrrdData::Int16(v) => v.len(),
            NrrdData::Float32(v) => v.len(),
            NrrdData::Float64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NrrdData::UInt8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NrrdData::Int16(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NrrdData::Float32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NrrdData::Float64(v) => v.clone(),
        }
    }

    fn from_f64(values: &[f64], ty: ScalarType) -> Self {
        match ty {
            ScalarType::UInt8 => NrrdData::UInt8(values.iter().map(|&x| x as u8).collect()),
            ScalarType::Int16 => NrrdData::Int16(values.iter().map(|&x| x as i16).collect()),
            ScalarType::Float32 => NrrdData::Float32(values.iter().map(|&x| x as f32).collect()),
            ScalarType::Float64 => NrrdData::Float64(values.to_vec()),
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            NrrdData::UInt8(v) => v.clone(),
            NrrdData::Int16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            NrrdData::Float32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            NrrdData::Float64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn decode(bytes: &[u8], ty: ScalarType) -> Self {
        match ty {
            ScalarType::UInt8 => NrrdData::UInt8(bytes.to_vec()),
            ScalarType::Int16 => NrrdData::Int16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            ScalarType::Float32 => NrrdData::Float32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            ScalarType::Float64 => NrrdData::Float64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A parsed NRRD file: spatial grid, number of components per voxel
/// (1 for scalars, 3 for vector fields stored component-slowest) and data.
#[derive(Debug, Clone, PartialEq)]
pub struct NrrdImage {
    pub grid: Grid,
    pub components: usize,
    pub data: NrrdData,
}

impl NrrdImage {
    pub fn into_volume(self) -> Result<Volume> {
        self.expect_components(1)?;
        Volume::new(self.grid, self.data.to_f64())
    }

    pub fn into_labelmap(self) -> Result<LabelMap> {
        self.expect_components(1)?;
        let labels = match &self.data {
            NrrdData::UInt8(v) => v.iter().map(|&x| u32::from(x)).collect(),
            NrrdData::Int16(v) => {
                if let Some(bad) = v.iter().find(|&&x| x < 0) {
                    return Err(Error::Parse {
                        line: 0,
                        message: format!("negative label {bad}"),
                    });
                }
                v.iter().map(|&x| x as u32).collect()
            }
            _ => {
                return Err(Error::UnsupportedField(
                    "type (label maps must be uchar or short)".into(),
                ))
            }
        };
        LabelMap::new(self.grid, labels)
    }

    pub fn into_displacement(self) -> Result<DisplacementField> {
        self.expect_components(3)?;
        let n = self.grid.len();
        let flat = self.data.to_f64();
        let vectors = (0..n)
            .map(|i| [flat[i], flat[n + i], flat[2 * n + i]])
            .collect();
        DisplacementField::new(self.grid, vectors)
    }

    fn expect_components(&self, n: usize) -> Result<()> {
        if self.components == n {
            Ok(())
        } else {
            Err(Error::UnsupportedField(format!(
                "dimension ({} components where {n} expected)",
                self.components
            )))
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn header(grid: &Grid, components: usize, ty: ScalarType) -> String {
    let d = grid.dims();
    let s = grid.spacing();
    let o = grid.origin();
    let mut h = String::from("NRRD0004\n");
    h.push_str("# Complete NRRD file format specification at:\n");
    h.push_str("# http://teem.sourceforge.net/nrrd/format.html\n");
    h.push_str(&format!("type: {}\n", ty.name()));
    if components == 1 {
        h.push_str("dimension: 3\n");
        h.push_str("space dimension: 3\n");
        h.push_str(&format!("sizes: {} {} {}\n", d[0], d[1], d[2]));
    } else {
        h.push_str("dimension: 4\n");
        h.push_str("space dimension: 3\n");
        h.push_str(&format!("sizes: {} {} {} {}\n", d[0], d[1], d[2], components));
    }
    let dirs = format!(
        "({},0,0) (0,{},0) (0,0,{})",
        fmt_f64(s[0]),
        fmt_f64(s[1]),
        fmt_f64(s[2])
    );
    if components == 1 {
        h.push_str(&format!("space directions: {dirs}\n"));
    } else {
        h.push_str(&format!("space directions: {dirs} none\n"));
    }
    h.push_str(&format!(
        "space origin: ({},{},{})\n",
        fmt_f64(o[0]),
        fmt_f64(o[1]),
        fmt_f64(o[2])
    ));
    h.push_str("endian: little\n");
    h.push_str("encoding: raw\n\n");
    h
}

/// Serialize to bytes (header followed by the raw little-endian payload).
pub fn encode(image: &NrrdImage) -> Vec<u8> {
    let mut out = header(&image.grid, image.components, image.data.scalar_type()).into_bytes();
    out.extend_from_slice(&image.data.encode());
    out
}

pub fn write(image: &NrrdImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(vol: &Volume, ty: ScalarType, path: impl AsRef<Path>) -> Result<()> {
    write(
        &NrrdImage {
            grid: *vol.grid(),
            components: 1,
            data: NrrdData::from_f64(vol.samples(), ty),
        },
        path,
    )
}

/// Stored as uchar when every label fits, otherwise short.
pub fn write_labelmap(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let max = lm.label_set().last().copied().unwrap_or(0);
    let data = if max <= u32::from(u8::MAX) {
        NrrdData::UInt8(lm.labels().iter().map(|&l| l as u8).collect())
    } else if max <= i16::MAX as u32 {
        NrrdData::Int16(lm.labels().iter().map(|&l| l as i16).collect())
    } else {
        return Err(Error::UnsupportedField(format!(
            "type (label {max} exceeds short range)"
        )));
    };
    write(
        &NrrdImage {
            grid: *lm.grid(),
            components: 1,
            data,
        },
        path,
    )
}

/// Component index slowest: all x components, then y, then z.
pub fn write_displacement(u: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let n = u.grid().len();
    let mut flat = vec![0.0; 3 * n];
    for (i, v) in u.vectors().iter().enumerate() {
        flat[i] = v[0];
        flat[n + i] = v[1];
        flat[2 * n + i] = v[2];
    }
    write(
        &NrrdImage {
            grid: *u.grid(),
            components: 3,
            data: NrrdData::Float64(flat),
        },
        path,
    )
}

pub fn read(path: impl AsRef<Path>) -> Result<NrrdImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read(path)?.into_volume()
}

pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    read(path)?.into_labelmap()
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    read(path)?.into_displacement()
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_vector(s: &str, line: usize) -> Result<Vec<f64>> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| parse_err(line, format!("expected parenthesized vector, got `{s}`")))?;
    inner
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad number `{t}`")))
        })
        .collect()
}

const NAMED_SPACES: &[&str] = &[
    "right-anterior-superior",
    "RAS",
    "left-anterior-superior",
    "LAS",
    "left-posterior-superior",
    "LPS",
    "scanner-xyz",
    "3D-right-handed",
    "3D-left-handed",
];

/// Parse an in-memory NRRD file.
pub fn decode(bytes: &[u8]) -> Result<NrrdImage> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| *pos + e)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[*pos..end])
            .trim_end_matches('\r')
            .to_string();
        *pos = end + 1;
        Some(line)
    };

    let magic = next_line(&mut pos).ok_or_else(|| parse_err(1, "empty file"))?;
    line_no += 1;
    if !magic.starts_with("NRRD000") {
        return Err(parse_err(1, "missing NRRD magic"));
    }

    let mut ty = None;
    let mut dimension = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut directions: Option<(Vec<f64>, usize)> = None;
    let mut origin = [0.0; 3];
    let mut encoding_seen = false;
    let mut endian_seen = false;

    loop {
        let line = next_line(&mut pos).ok_or_else(|| parse_err(line_no + 1, "header not terminated"))?;
        line_no += 1;
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        if let Some(k) = line.find(":=") {
            return Err(Error::UnsupportedField(line[..k].trim().to_string()));
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(line_no, format!("expected `key: value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "type" => {
                ty = Some(
                    ScalarType::parse(value)
                        .ok_or_else(|| Error::UnsupportedField(format!("type ({value})")))?,
                );
            }
            "dimension" => {
                let d: usize = value
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad dimension `{value}`")))?;
                if d != 3 && d != 4 {
                    return Err(Error::UnsupportedField(format!("dimension ({d})")));
                }
                dimension = Some(d);
            }
            "space dimension" => {
                if value != "3" {
                    return Err(Error::UnsupportedField(format!("space dimension ({value})")));
                }
            }
            "space" => {
                if !NAMED_SPACES.contains(&value) {
                    return Err(Error::UnsupportedField(format!("space ({value})")));
                }
            }
            "sizes" => {
                let s: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(str::parse).collect();
                let s = s.map_err(|_| parse_err(line_no, format!("bad sizes `{value}`")))?;
                if s.contains(&0) {
                    return Err(parse_err(line_no, "zero size"));
                }
                sizes = Some(s);
            }
            "space directions" => {
                let tokens: Vec<&str> = value.split_whitespace().collect();
                let mut spacing = Vec::new();
                let mut nones = 0;
                for (axis, t) in tokens.iter().enumerate() {
                    if *t == "none" {
                        nones += 1;
                        continue;
                    }
                    let v = parse_vector(t, line_no)?;
                    if v.len() != 3 {
                        return Err(parse_err(line_no, "direction vectors must have 3 entries"));
                    }
                    let a = spacing.len();
                    if a >= 3 || (0..3).any(|j| j != a && v[j] != 0.0) {
                        return Err(Error::UnsupportedField(format!(
                            "space directions (non-diagonal axis {axis})"
                        )));
                    }
                    if !(v[a] > 0.0) {
                        return Err(Error::UnsupportedField(format!(
                            "space directions (non-positive spacing on axis {axis})"
                        )));
                    }
                    spacing.push(v[a]);
                }
                if spacing.len() != 3 {
                    return Err(parse_err(line_no, "expected three spatial directions"));
                }
                directions = Some((spacing, nones));
            }
            "space origin" => {
                let v = parse_vector(value, line_no)?;
                if v.len() != 3 {
                    return Err(parse_err(line_no, "origin must have 3 entries"));
                }
                origin = [v[0], v[1], v[2]];
            }
            "encoding" => {
                if value != "raw" {
                    return Err(Error::UnsupportedField(format!("encoding ({value})")));
                }
                encoding_seen = true;
            }
            "endian" => {
                if value != "little" {
                    return Err(Error::UnsupportedField(format!("endian ({value})")));
                }
                endian_seen = true;
            }
            other => return Err(Error::UnsupportedField(other.to_string())),
        }
    }

    let ty = ty.ok_or_else(|| parse_err(line_no, "missing `type`"))?;
    let dimension = dimension.ok_or_else(|| parse_err(line_no, "missing `dimension`"))?;
    let sizes = sizes.ok_or_else(|| parse_err(line_no, "missing `sizes`"))?;
    if !encoding_seen {
        return Err(parse_err(line_no, "missing `encoding`"));
    }
    if !endian_seen && ty.size() > 1 {
        return Err(parse_err(line_no, "missing `endian`"));
    }
    if sizes.len() != dimension {
        return Err(parse_err(line_no, "`sizes` does not match `dimension`"));
    }
    let components = if dimension == 4 {
        if sizes[3] != 3 {
            return Err(Error::UnsupportedField(format!(
                "sizes (vector axis of length {})",
                sizes[3]
            )));
        }
        3
    } else {
        1
    };
    let spacing = match directions {
        Some((s, nones)) => {
            if nones != dimension - 3 {
                return Err(parse_err(line_no, "`space directions` does not match `dimension`"));
            }
            [s[0], s[1], s[2]]
        }
        None => [1.0; 3],
    };
    let grid = Grid::new([sizes[0], sizes[1], sizes[2]], spacing, origin)
        .map_err(|e| parse_err(line_no, e.to_string()))?;

    let expected = grid.len() * components * ty.size();
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() != expected {
        return Err(parse_err(
            line_no + 1,
            format!("data segment has {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok(NrrdImage {
        grid,
        components,
        data: NrrdData::decode(payload, ty),
    })
}
