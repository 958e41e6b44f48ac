//! MetaImage (`.mhd` header + `.raw` payload) reading and writing.
//!
//! Headers are ASCII `Key = Value` lines. Payloads are little-endian,
//! x-fastest / z-slowest, channels interleaved per voxel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ElementKind, Grid, ImageVolume, LabelVolume};
use crate::error::{Error, Result};

/// Parsed header of a MetaImage file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaHeader {
    pub grid: Grid,
    pub kind: ElementKind,
    pub channels: usize,
    /// Payload path, resolved relative to the header's directory.
    pub data_file: PathBuf,
}

impl MetaHeader {
    fn payload_bytes(&self) -> usize {
        self.grid.len() * self.channels * self.kind.byte_size()
    }
}

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_numbers<T: std::str::FromStr>(path: &Path, key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let parsed: std::result::Result<Vec<T>, _> = value.split_whitespace().map(str::parse).collect();
    let parsed = parsed.map_err(|_| header_err(path, format!("cannot parse {key} = {value}")))?;
    if parsed.len() != n {
        return Err(header_err(
            path,
            format!("{key} has {} values, expected {n}", parsed.len()),
        ));
    }
    Ok(parsed)
}

pub fn read_header(path: &Path) -> Result<MetaHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keys = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| header_err(path, format!("line {} is not `Key = Value`", lineno + 1)))?;
        keys.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        keys.get(k)
            .map(String::as_str)
            .ok_or_else(|| header_err(path, format!("missing key {k}")))
    };

    let ndims: usize = get("NDims")?
        .parse()
        .map_err(|_| header_err(path, "NDims is not an integer"))?;
    if ndims != 3 {
        return Err(header_err(path, format!("only 3D images are supported, NDims = {ndims}")));
    }
    if let Some(ot) = keys.get("ObjectType") {
        if ot != "Image" {
            return Err(header_err(path, format!("ObjectType {ot} is not Image")));
        }
    }
    if let Some(msb) = keys.get("BinaryDataByteOrderMSB").or_else(|| keys.get("ElementByteOrderMSB")) {
        if msb.eq_ignore_ascii_case("true") {
            return Err(header_err(path, "big-endian payloads are not supported"));
        }
    }
    let dims: Vec<usize> = parse_numbers(path, "DimSize", get("DimSize")?, 3)?;
    let spacing: Vec<f64> = match keys.get("ElementSpacing") {
        Some(v) => parse_numbers(path, "ElementSpacing", v, 3)?,
        None => vec![1.0; 3],
    };
    let origin: Vec<f64> = match keys.get("Offset").or_else(|| keys.get("Origin")) {
        Some(v) => parse_numbers(path, "Offset", v, 3)?,
        None => vec![0.0; 3],
    };
    let type_name = get("ElementType")?;
    let kind = ElementKind::from_met_name(type_name)
        .ok_or_else(|| Error::UnsupportedElement(type_name.to_string()))?;
    let channels = match keys.get("ElementNumberOfChannels") {
        Some(v) => v
            .parse()
            .map_err(|_| header_err(path, "ElementNumberOfChannels is not an integer"))?,
        None => 1,
    };
    let data_name = get("ElementDataFile")?;
    if data_name == "LOCAL" || data_name.starts_with("LIST") || data_name.contains('%') {
        return Err(header_err(path, format!("ElementDataFile = {data_name} is not supported")));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let grid = Grid::new(
        [dims[0], dims[1], dims[2]],
        [spacing[0], spacing[1], spacing[2]],
        [origin[0], origin[1], origin[2]],
    )
    .map_err(|e| header_err(path, e.to_string()))?;
    Ok(MetaHeader {
        grid,
        kind,
        channels,
        data_file: dir.join(data_name),
    })
}

fn read_payload(path: &Path) -> Result<(MetaHeader, Vec<u8>)> {
    let header = read_header(path)?;
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    if bytes.len() != header.payload_bytes() {
        return Err(Error::PayloadSize {
            expected: header.payload_bytes(),
            actual: bytes.len(),
        });
    }
    Ok((header, bytes))
}

fn decode(kind: ElementKind, bytes: &[u8]) -> Vec<f32> {
    match kind {
        ElementKind::U8 => bytes.iter().map(|&b| b as f32).collect(),
        ElementKind::I16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementKind::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    }
}

fn encode(kind: ElementKind, values: &[f32]) -> Result<Vec<u8>> {
    let representable = |v: f32, lo: f32, hi: f32| v.fract() == 0.0 && v >= lo && v <= hi;
    match kind {
        ElementKind::U8 => values
            .iter()
            .map(|&v| {
                if representable(v, 0.0, 255.0) {
                    Ok(v as u8)
                } else {
                    Err(Error::InvalidArgument(format!("value {v} not representable as u8")))
                }
            })
            .collect(),
        ElementKind::I16 => {
            let mut out = Vec::with_capacity(values.len() * 2);
            for &v in values {
                if !representable(v, i16::MIN as f32, i16::MAX as f32) {
                    return Err(Error::InvalidArgument(format!("value {v} not representable as i16")));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
            Ok(out)
        }
        ElementKind::F32 => Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect()),
    }
}

/// Reads a single-channel scalar image of any supported element type.
pub fn read_image(path: &Path) -> Result<ImageVolume> {
    let (h, bytes) = read_payload(path)?;
    if h.channels != 1 {
        return Err(header_err(path, format!("expected 1 channel, found {}", h.channels)));
    }
    ImageVolume::new(h.grid, h.kind, decode(h.kind, &bytes))
}

/// Reads a label map; the payload must be `MET_UCHAR`.
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let (h, bytes) = read_payload(path)?;
    if h.channels != 1 || h.kind != ElementKind::U8 {
        return Err(header_err(path, "label maps must be single-channel MET_UCHAR"));
    }
    LabelVolume::new(h.grid, bytes)
}

/// Reads a 3-channel `MET_FLOAT` vector image.
pub fn read_vectors(path: &Path) -> Result<(Grid, Vec<[f32; 3]>)> {
    let (h, bytes) = read_payload(path)?;
    if h.channels != 3 || h.kind != ElementKind::F32 {
        return Err(header_err(path, "vector images must be 3-channel MET_FLOAT"));
    }
    let flat = decode(h.kind, &bytes);
    Ok((h.grid, flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

/// Companion payload path: `<stem>.raw` next to the header.
fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_pair(path: &Path, grid: &Grid, kind: ElementKind, channels: usize, payload: &[u8]) -> Result<()> {
    let raw = raw_path(path);
    let raw_name = raw
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let fmt3 = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let mut text = String::new();
    text.push_str("ObjectType = Image\n");
    text.push_str("NDims = 3\n");
    text.push_str("BinaryData = True\n");
    text.push_str("BinaryDataByteOrderMSB = False\n");
    text.push_str(&format!("DimSize = {} {} {}\n", grid.dims[0], grid.dims[1], grid.dims[2]));
    text.push_str(&format!("ElementSpacing = {}\n", fmt3(grid.spacing)));
    text.push_str(&format!("Offset = {}\n", fmt3(grid.origin)));
    if channels != 1 {
        text.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    text.push_str(&format!("ElementType = {}\n", kind.met_name()));
    text.push_str(&format!("ElementDataFile = {raw_name}\n"));
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

pub fn write_image(vol: &ImageVolume, path: &Path) -> Result<()> {
    let payload = encode(vol.kind, &vol.data)?;
    write_pair(path, &vol.grid, vol.kind, 1, &payload)
}

/// Writes labels as `MET_UCHAR`, the smallest type holding codes 0..=3.
pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    write_pair(path, &labels.grid, ElementKind::U8, 1, &labels.data)
}

pub fn write_vectors(grid: &Grid, vectors: &[[f32; 3]], path: &Path) -> Result<()> {
    if vectors.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vectors for a grid of {} voxels",
            vectors.len(),
            grid.len()
        )));
    }
    let payload: Vec<u8> = vectors.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, grid, ElementKind::F32, 3, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_u8_header() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("a.mhd");
        fs::write(
            &hdr,
            "ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\nElementSpacing = 1.5 1.5 10\nOffset = 0 0 0\nElementType = MET_UCHAR\nElementDataFile = a.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("a.raw"), vec![9u8; 64]).unwrap();
        let v = read_image(&hdr).unwrap();
        assert_eq!(v.grid.dims, [4, 4, 4]);
        assert_eq!(v.grid.spacing, [1.5, 1.5, 10.0]);
        assert_eq!(v.kind, ElementKind::U8);
        assert!(v.data.iter().all(|&x| x == 9.0));
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("a.mhd");
        fs::write(
            &hdr,
            "NDims = 3\nDimSize = 4 4 4\nElementType = MET_UCHAR\nElementDataFile = a.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("a.raw"), vec![0u8; 32]).unwrap();
        assert!(matches!(
            read_image(&hdr),
            Err(Error::PayloadSize { expected: 64, actual: 32 })
        ));
    }

    #[test]
    fn missing_key_and_bad_type() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("a.mhd");
        fs::write(&hdr, "NDims = 3\nElementType = MET_UCHAR\nElementDataFile = a.raw\n").unwrap();
        assert!(matches!(read_image(&hdr), Err(Error::Header { .. })));
        fs::write(
            &hdr,
            "NDims = 3\nDimSize = 1 1 1\nElementType = MET_DOUBLE\nElementDataFile = a.raw\n",
        )
        .unwrap();
        assert!(matches!(read_image(&hdr), Err(Error::UnsupportedElement(_))));
    }

    #[test]
    fn f32_and_i16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([8, 8, 8], [0.7, 1.3, 2.9], [-10.25, 3.0, 1e-3]).unwrap();
        let data: Vec<f32> = (0..g.len()).map(|i| (i as f32).sin() * 1e3).collect();
        let v = ImageVolume::new(g, ElementKind::F32, data).unwrap();
        let p = dir.path().join("f.mhd");
        write_image(&v, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), v);

        let data: Vec<f32> = (0..g.len()).map(|i| (i as f32) - 300.0).collect();
        let v = ImageVolume::new(g, ElementKind::I16, data).unwrap();
        write_image(&v, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), v);
    }

    #[test]
    fn labels_written_as_uchar() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([2, 2, 1], [1.0; 3], [0.0; 3]).unwrap();
        let l = LabelVolume::new(g, vec![0, 1, 2, 3]).unwrap();
        let p = dir.path().join("l.mhd");
        write_labels(&l, &p).unwrap();
        let h = read_header(&p).unwrap();
        assert_eq!(h.kind, ElementKind::U8);
        assert_eq!(fs::metadata(dir.path().join("l.raw")).unwrap().len(), 4);
        assert_eq!(read_labels(&p).unwrap(), l);
    }

    #[test]
    fn unwritable_path_errors() {
        let g = Grid::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = ImageVolume::filled(g, ElementKind::U8, 1.0);
        let p = Path::new("/nonexistent-dir/for/sure/x.mhd");
        assert!(matches!(write_image(&v, p), Err(Error::Io { .. })));
    }

    #[test]
    fn vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([3, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let vecs: Vec<[f32; 3]> = (0..g.len()).map(|i| [i as f32, -(i as f32), 0.5]).collect();
        let p = dir.path().join("u.mhd");
        write_vectors(&g, &vecs, &p).unwrap();
        let (g2, v2) = read_vectors(&p).unwrap();
        assert_eq!(g2, g);
        assert_eq!(v2, vecs);
        assert!(read_image(&p).is_err());
    }
}
