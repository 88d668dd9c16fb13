//! MetaImage (`.mhd` + raw, or `.mha` with `ElementDataFile = LOCAL`) subset.
//!
//! Three dimensions, one channel, little-endian, uncompressed, x-fastest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{Grid, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Short,
    Float,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(ElementType::UChar),
            "MET_SHORT" => Some(ElementType::Short),
            "MET_FLOAT" => Some(ElementType::Float),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }
}

/// Parsed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub grid: Grid,
    pub element_type: ElementType,
    /// `None` for `LOCAL` (body follows the header in the same file).
    pub data_file: Option<PathBuf>,
    /// Byte offset of the body inside the header file when `data_file` is `None`.
    pub local_offset: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn numbers<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(line, format!("{key} needs 3 values, got {}", parts.len())));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| parse_err(line, format!("{key}: cannot parse {p:?}")))?);
    }
    out.try_into().map_err(|_| parse_err(line, "unreachable"))
}

/// Parse a header from the start of `bytes`.
pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut ndims = None;
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing: Option<[f64; 3]> = None;
    let mut offset: Option<[f64; 3]> = None;
    let mut etype = None;
    let mut data_file = None;
    let mut pos = 0;
    let mut line_no = 0;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
        let raw = &bytes[pos..end];
        pos = (end + 1).min(bytes.len());
        line_no += 1;
        let text = std::str::from_utf8(raw).map_err(|_| parse_err(line_no, "header is not UTF-8"))?.trim();
        if text.is_empty() {
            continue;
        }
        let (key, value) = text.split_once('=').ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got {text:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                let n: usize = value.parse().map_err(|_| parse_err(line_no, format!("NDims: cannot parse {value:?}")))?;
                if n != 3 {
                    return Err(parse_err(line_no, format!("only NDims = 3 is supported, got {n}")));
                }
                ndims = Some(n);
            }
            "DimSize" => dims = Some(numbers(line_no, key, value)?),
            "ElementSpacing" => spacing = Some(numbers(line_no, key, value)?),
            "Offset" | "Origin" | "Position" => offset = Some(numbers(line_no, key, value)?),
            "ElementType" => {
                etype = Some(ElementType::from_tag(value).ok_or_else(|| parse_err(line_no, format!("unsupported ElementType {value}")))?)
            }
            "ElementNumberOfChannels" if value != "1" => {
                return Err(parse_err(line_no, format!("only single-channel images are supported, got {value}")));
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" if value.eq_ignore_ascii_case("true") => {
                return Err(parse_err(line_no, "big-endian data is not supported"));
            }
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(parse_err(line_no, "compressed data is not supported"));
            }
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                break;
            }
            _ => {}
        }
    }
    let missing = |k: &str| parse_err(line_no, format!("missing mandatory key {k}"));
    ndims.ok_or_else(|| missing("NDims"))?;
    let dims = dims.ok_or_else(|| missing("DimSize"))?;
    let spacing = spacing.ok_or_else(|| missing("ElementSpacing"))?;
    let element_type = etype.ok_or_else(|| missing("ElementType"))?;
    let data_file = data_file.ok_or_else(|| missing("ElementDataFile"))?;
    let grid = Grid::new(dims, spacing, offset.unwrap_or([0.0; 3])).map_err(|e| parse_err(line_no, e.to_string()))?;
    let data_file = if data_file == "LOCAL" { None } else { Some(PathBuf::from(data_file)) };
    Ok(Header { grid, element_type, data_file, local_offset: pos })
}

fn decode(body: &[u8], t: ElementType, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match t {
        ElementType::UChar => out.extend(body.iter().map(|&b| b as f64)),
        ElementType::Short => out.extend(body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)),
        ElementType::Float => out.extend(body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)),
    }
    out
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes)?;
    let n = h.grid.len();
    let expected = n * h.element_type.bytes();
    let corrupt = |p: &Path, msg: String| Error::CorruptFile { path: p.to_path_buf(), msg };
    let (body, body_path) = match &h.data_file {
        None => (bytes[h.local_offset..].to_vec(), path.to_path_buf()),
        Some(f) => {
            let p = if f.is_absolute() { f.clone() } else { path.parent().unwrap_or(Path::new("")).join(f) };
            (fs::read(&p).map_err(|e| Error::io(&p, e))?, p)
        }
    };
    if body.len() != expected {
        return Err(corrupt(
            &body_path,
            format!("header declares {:?} x {} bytes = {expected} bytes, body has {}", h.grid.dims, h.element_type.bytes(), body.len()),
        ));
    }
    Volume::new(h.grid, decode(&body, h.element_type, n))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let v = read_volume(path)?;
    Mask::from_volume(v).map_err(|e| Error::CorruptFile { path: path.to_path_buf(), msg: e.to_string() })
}

fn encode(v: &Volume, t: ElementType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(v.data().len() * t.bytes());
    for &x in v.data() {
        match t {
            ElementType::UChar => {
                if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                    return Err(Error::invalid(format!("value {x} is not representable as MET_UCHAR")));
                }
                out.push(x as u8);
            }
            ElementType::Short => {
                if x.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&x) {
                    return Err(Error::invalid(format!("value {x} is not representable as MET_SHORT")));
                }
                out.extend((x as i16).to_le_bytes());
            }
            ElementType::Float => out.extend((x as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

fn join3<T: std::fmt::Display>(v: [T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

/// Header text; `data_file` is written verbatim as `ElementDataFile`.
pub fn header_text(grid: &Grid, t: ElementType, data_file: &str) -> String {
    format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {}\nElementSpacing = {}\nDimSize = {}\nElementType = {}\nElementDataFile = {}\n",
        join3(grid.origin),
        join3(grid.spacing),
        join3(grid.dims),
        t.tag(),
        data_file
    )
}

/// Write `v`; a `.mha` path gets an inline body, anything else a sibling `.raw`.
/// `MET_FLOAT` stores values at single precision; integer types reject
/// values they cannot hold exactly.
pub fn write_volume(v: &Volume, path: &Path, t: ElementType) -> Result<()> {
    let body = encode(v, t)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mha")) {
        let mut bytes = header_text(v.grid(), t, "LOCAL").into_bytes();
        bytes.extend(body);
        return fs::write(path, bytes).map_err(|e| Error::io(path, e));
    }
    let raw = path.with_extension("raw");
    let raw_name = raw.file_name().and_then(|s| s.to_str()).ok_or_else(|| Error::invalid(format!("bad output path {}", path.display())))?;
    fs::write(path, header_text(v.grid(), t, raw_name)).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, body).map_err(|e| Error::io(&raw, e))
}

pub fn write_mask(m: &Mask, path: &Path) -> Result<()> {
    write_volume(m.as_volume(), path, ElementType::UChar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_float_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(dims, [0.7, 1.25, 3.1], [-12.5, 0.1, 7.0]).unwrap();
        let data = (0..g.len()).map(|_| rng.random_range(-1000.0f32..1000.0) as f64).collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn float_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_float_volume(1, [7, 5, 3]);
        for name in ["a.mhd", "b.mha"] {
            let p = dir.path().join(name);
            write_volume(&v, &p, ElementType::Float).unwrap();
            let r = read_volume(&p).unwrap();
            assert_eq!(r.grid(), v.grid());
            assert!(r.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn short_and_uchar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([4, 3, 2], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g, (0..24).map(|i| i as f64 * 1000.0 - 12000.0).collect()).unwrap();
        let p = dir.path().join("s.mhd");
        write_volume(&v, &p, ElementType::Short).unwrap();
        assert_eq!(fs::metadata(dir.path().join("s.raw")).unwrap().len(), 48);
        assert_eq!(read_volume(&p).unwrap(), v);
        let m = Mask::from_fn(g, |p| p[0] > 1.0);
        write_mask(&m, &dir.path().join("m.mhd")).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.mhd")).unwrap(), m);
        assert!(write_volume(&v, &dir.path().join("u.mhd"), ElementType::UChar).is_err());
        let half = v.map(|x| x + 0.5);
        assert!(write_volume(&half, &dir.path().join("h.mhd"), ElementType::Short).is_err());
    }

    #[test]
    fn header_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mhd");
        fs::write(&p, "NDims = 3\nDimSize = 128 128 72\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = x.raw\n").unwrap();
        fs::write(dir.path().join("x.raw"), vec![0u8; 128 * 128 * 72 * 2 - 1]).unwrap();
        match read_volume(&p) {
            Err(Error::CorruptFile { msg, .. }) => assert!(msg.contains(&(128 * 128 * 72 * 2).to_string()), "{msg}"),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join("x.raw"), vec![0u8; 128 * 128 * 72 * 2]).unwrap();
        assert_eq!(read_volume(&p).unwrap().dims(), [128, 128, 72]);
    }

    #[test]
    fn missing_spacing_is_parse_error() {
        let text = "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n";
        match parse_header(text.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert!(msg.contains("ElementSpacing"));
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_ignored_and_bad_lines_located() {
        let text = "NDims = 3\nFoo = bar baz\nDimSize = 2 2 1\nElementSpacing = 1 1 1\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n";
        let mut bytes = text.as_bytes().to_vec();
        bytes.extend([0, 1, 1, 0]);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.grid.origin, [0.0; 3]);
        assert_eq!(h.local_offset, text.len());
        match parse_header(b"NDims = 3\nDimSize = 2 x 2\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_header(b"NDims = 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_header(b"NDims = 3\nElementType = MET_DOUBLE\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let e = read_volume(Path::new("/nonexistent/dir/img.mhd")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/dir/img.mhd"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn write_read_identity(seed in 0u64..1000, nx in 1usize..6, ny in 1usize..6, nz in 1usize..4) {
            let dir = tempfile::tempdir().unwrap();
            let v = random_float_volume(seed, [nx, ny, nz]);
            let p = dir.path().join("v.mhd");
            write_volume(&v, &p, ElementType::Float).unwrap();
            let r = read_volume(&p).unwrap();
            write_volume(&r, &dir.path().join("w.mhd"), ElementType::Float).unwrap();
            prop_assert_eq!(fs::read(dir.path().join("v.raw")).unwrap(), fs::read(dir.path().join("w.raw")).unwrap());
            prop_assert_eq!(r, v);
        }
    }
}
