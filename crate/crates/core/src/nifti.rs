//! NIfTI-1 reading, writing, and RAS reorientation.
//!
//! Supports the single-file layout (348-byte header, data at
//! `vox_offset`) and the `.hdr`/`.img` pair, optionally gzip-wrapped.
//! Byte order is auto-detected from the `sizeof_hdr` field; files are
//! always written little-endian with magic `n+1`.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{flat_index, Datatype, LabelVolume, NiftiHeader, Volume};

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated data: expected {expected} bytes after offset, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("singular affine direction matrix")]
    SingularAffine,
    #[error("label file has non-integer datatype {0:?}")]
    NonIntegerLabels(Datatype),
    #[error("negative value {0} cannot be a label id")]
    NegativeLabel(i64),
}

type Result<T> = std::result::Result<T, NiftiError>;

const HEADER_SIZE: usize = 348;

fn io_err(path: &Path, source: std::io::Error) -> NiftiError {
    NiftiError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| io_err(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Byte-order-aware field access into the raw 348-byte header.
struct RawHeader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl<'a> RawHeader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Parsed header plus the information needed to locate the data blob.
struct ParsedHeader {
    header: NiftiHeader,
    vox_offset: usize,
    big_endian: bool,
    /// magic was "ni1": data lives in a separate .img file
    pair_format: bool,
}

fn parse_header(bytes: &[u8]) -> Result<ParsedHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::MalformedHeader(format!(
            "file too small for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let sizeof_le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let sizeof_be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match (sizeof_le, sizeof_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(NiftiError::MalformedHeader(format!(
                "sizeof_hdr is {sizeof_le} (LE) / {sizeof_be} (BE), expected 348"
            )))
        }
    };
    let raw = RawHeader { bytes, big_endian };

    let magic = &bytes[344..348];
    let pair_format = match magic {
        b"n+1\0" => false,
        b"ni1\0" => true,
        _ => {
            return Err(NiftiError::MalformedHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic[..3])
            )))
        }
    };

    let ndim = raw.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3usize.min(ndim as usize) {
        let d = raw.i16_at(42 + 2 * a);
        if d < 1 {
            return Err(NiftiError::MalformedHeader(format!(
                "dim[{}] = {d}",
                a + 1
            )));
        }
        dims[a] = d as usize;
    }
    // Trailing dims beyond the third must be singleton: only 3D volumes here.
    for a in 3..ndim as usize {
        let d = raw.i16_at(42 + 2 * a);
        if d > 1 {
            return Err(NiftiError::MalformedHeader(format!(
                "4D+ volumes are not supported (dim[{}] = {d})",
                a + 1
            )));
        }
    }

    let datatype_code = raw.i16_at(70);
    let datatype = Datatype::from_code(datatype_code)
        .ok_or(NiftiError::UnsupportedDatatype(datatype_code))?;

    let qfac = {
        let v = raw.f32_at(76);
        if v < 0.0 {
            -1.0f64
        } else {
            1.0f64
        }
    };
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let s = raw.f32_at(80 + 4 * a) as f64;
        spacing[a] = if s > 0.0 { s } else { 1.0 };
    }

    let vox_offset = raw.f32_at(108).max(0.0) as usize;
    let scl_slope = raw.f32_at(112);
    let scl_inter = raw.f32_at(116);
    let qform_code = raw.i16_at(252);
    let sform_code = raw.i16_at(254);

    // sform preferred when present, else qform, else a diagonal affine.
    let affine = if sform_code > 0 {
        let mut m = [[0.0f64; 4]; 4];
        for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for c in 0..4 {
                m[r][c] = raw.f32_at(base + 4 * c) as f64;
            }
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        m
    } else if qform_code > 0 {
        let b = raw.f32_at(256) as f64;
        let c = raw.f32_at(260) as f64;
        let d = raw.f32_at(264) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..3 {
            m[i][0] = r[i][0] * spacing[0];
            m[i][1] = r[i][1] * spacing[1];
            m[i][2] = r[i][2] * spacing[2] * qfac;
            m[i][3] = raw.f32_at(268 + 4 * i) as f64;
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        m
    } else {
        let mut m = [[0.0f64; 4]; 4];
        for a in 0..3 {
            m[a][a] = spacing[a];
        }
        m[3][3] = 1.0;
        m
    };

    Ok(ParsedHeader {
        header: NiftiHeader {
            dims,
            spacing,
            affine,
            datatype,
            scl_slope,
            scl_inter,
        },
        vox_offset: if pair_format { vox_offset } else { vox_offset.max(HEADER_SIZE) },
        big_endian,
        pair_format,
    })
}

fn decode_values(
    data: &[u8],
    datatype: Datatype,
    big_endian: bool,
    count: usize,
) -> Result<Vec<f64>> {
    let need = count * datatype.size();
    if data.len() < need {
        return Err(NiftiError::TruncatedData {
            expected: need,
            found: data.len(),
        });
    }
    let mut out = Vec::with_capacity(count);
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            for i in 0..count {
                let mut b = [0u8; $n];
                b.copy_from_slice(&data[i * $n..(i + 1) * $n]);
                let v = if big_endian {
                    <$t>::from_be_bytes(b)
                } else {
                    <$t>::from_le_bytes(b)
                };
                out.push(v as f64);
            }
        };
    }
    match datatype {
        Datatype::U8 => {
            for i in 0..count {
                out.push(data[i] as f64);
            }
        }
        Datatype::I16 => decode!(i16, 2),
        Datatype::I32 => decode!(i32, 4),
        Datatype::F32 => decode!(f32, 4),
        Datatype::F64 => decode!(f64, 8),
    }
    Ok(out)
}

fn img_path_for(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else if let Some(stem) = s.strip_suffix(".hdr") {
        PathBuf::from(format!("{stem}.img"))
    } else {
        path.with_extension("img")
    }
}

/// Read a NIfTI-1 file as an intensity volume.
///
/// Raw values are scaled by `scl_slope * v + scl_inter` when the stored
/// slope is nonzero.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let parsed = parse_header(&bytes)?;
    let raw = raw_values(path, &bytes, &parsed)?;
    let mut header = parsed.header;

    let slope = header.scl_slope;
    let inter = header.scl_inter;
    let data = if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        raw.iter()
            .map(|&v| slope as f64 * v + inter as f64)
            .collect()
    } else {
        raw
    };
    // Scaling is folded into the data; the in-memory header is neutral.
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    Ok(Volume { header, data })
}

/// Read a NIfTI-1 file as a label volume.
///
/// Only integer datatypes are accepted; ids are widened to 32 bits.
pub fn read_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let parsed = parse_header(&bytes)?;
    if !parsed.header.datatype.is_integer() {
        return Err(NiftiError::NonIntegerLabels(parsed.header.datatype));
    }
    let raw = raw_values(path, &bytes, &parsed)?;
    let mut data = Vec::with_capacity(raw.len());
    for v in raw {
        if v < 0.0 {
            return Err(NiftiError::NegativeLabel(v as i64));
        }
        data.push(v as u32);
    }
    let mut header = parsed.header;
    header.datatype = Datatype::I32;
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    Ok(LabelVolume { header, data })
}

fn raw_values(path: &Path, bytes: &[u8], parsed: &ParsedHeader) -> Result<Vec<f64>> {
    let count = parsed.header.voxel_count();
    if parsed.pair_format {
        let img = img_path_for(path);
        let img_bytes = read_bytes(&img)?;
        let off = parsed.vox_offset.min(img_bytes.len());
        decode_values(
            &img_bytes[off..],
            parsed.header.datatype,
            parsed.big_endian,
            count,
        )
    } else {
        if bytes.len() < parsed.vox_offset {
            return Err(NiftiError::TruncatedData {
                expected: parsed.vox_offset + count * parsed.header.datatype.size(),
                found: bytes.len(),
            });
        }
        decode_values(
            &bytes[parsed.vox_offset..],
            parsed.header.datatype,
            parsed.big_endian,
            count,
        )
    }
}

fn encode_header(header: &NiftiHeader, datatype: Datatype) -> [u8; 352] {
    let mut h = [0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for a in 0..3 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(header.dims[a] as i16).to_le_bytes());
    }
    for a in 3..7 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.code().to_le_bytes());
    h[72..74].copy_from_slice(&((datatype.size() * 8) as i16).to_le_bytes());
    // pixdim: qfac 1, then spacing
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for a in 0..3 {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&(header.spacing[a] as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    h[112..116].copy_from_slice(&header.scl_slope.to_le_bytes());
    h[116..120].copy_from_slice(&header.scl_inter.to_le_bytes());
    // sform only
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
        for c in 0..4 {
            h[base + 4 * c..base + 4 * c + 4]
                .copy_from_slice(&(header.affine[r][c] as f32).to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn encode_values(values: impl Iterator<Item = f64>, datatype: Datatype, out: &mut Vec<u8>) {
    match datatype {
        Datatype::U8 => {
            for v in values {
                out.push(v.round().clamp(0.0, u8::MAX as f64) as u8);
            }
        }
        Datatype::I16 => {
            for v in values {
                let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        Datatype::I32 => {
            for v in values {
                let q = v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        Datatype::F32 => {
            for v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Datatype::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn write_file(path: &Path, payload: &[u8]) -> Result<()> {
    let gz = path.to_string_lossy().ends_with(".gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        std::io::Write::write_all(&mut enc, payload).map_err(|e| io_err(path, e))?;
        let compressed = enc.finish().map_err(|e| io_err(path, e))?;
        std::fs::write(path, compressed).map_err(|e| io_err(path, e))
    } else {
        std::fs::write(path, payload).map_err(|e| io_err(path, e))
    }
}

/// Write an intensity volume with an explicit storage type.
pub fn write_volume_as(volume: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let mut header = volume.header.clone();
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    let mut payload = Vec::with_capacity(352 + volume.data.len() * datatype.size());
    payload.extend_from_slice(&encode_header(&header, datatype));
    encode_values(volume.data.iter().copied(), datatype, &mut payload);
    write_file(path, &payload)
}

/// Write an intensity volume (stored as f32; gzip if the path ends in .gz).
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_as(volume, path, Datatype::F32)
}

/// Write a label volume (stored as i32).
pub fn write_label_volume(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = labels.header.clone();
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    let mut payload = Vec::with_capacity(352 + labels.data.len() * 4);
    payload.extend_from_slice(&encode_header(&header, Datatype::I32));
    for &v in &labels.data {
        payload.extend_from_slice(&(v as i32).to_le_bytes());
    }
    write_file(path, &payload)
}

/// Axis permutation and flips that bring a volume to RAS voxel order.
struct RasPlan {
    /// `source_axis[a]` is the input voxel axis that becomes output axis `a`.
    source_axis: [usize; 3],
    /// Whether that source axis is traversed in reverse.
    flip: [bool; 3],
}

fn ras_plan(header: &NiftiHeader) -> Result<RasPlan> {
    if header.direction_det().abs() < 1e-12 {
        return Err(NiftiError::SingularAffine);
    }
    // Greedy dominant-axis assignment: repeatedly take the largest |entry|
    // of the direction matrix among unassigned rows/columns. For axis-aligned
    // affines this is the usual dominant-direction rule; for oblique ones it
    // still yields a valid permutation.
    let a = &header.affine;
    let mut row_used = [false; 3];
    let mut col_used = [false; 3];
    let mut source_axis = [0usize; 3];
    let mut flip = [false; 3];
    for _ in 0..3 {
        let mut best = (0usize, 0usize, -1.0f64);
        for r in 0..3 {
            if row_used[r] {
                continue;
            }
            for c in 0..3 {
                if col_used[c] {
                    continue;
                }
                if a[r][c].abs() > best.2 {
                    best = (r, c, a[r][c].abs());
                }
            }
        }
        let (r, c, _) = best;
        row_used[r] = true;
        col_used[c] = true;
        source_axis[r] = c;
        flip[r] = a[r][c] < 0.0;
    }
    Ok(RasPlan { source_axis, flip })
}

fn reorient_header(header: &NiftiHeader, plan: &RasPlan) -> NiftiHeader {
    let mut affine = [[0.0f64; 4]; 4];
    affine[3] = [0.0, 0.0, 0.0, 1.0];
    let mut dims = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    for out_axis in 0..3 {
        let j = plan.source_axis[out_axis];
        dims[out_axis] = header.dims[j];
        spacing[out_axis] = header.spacing[j];
        let sign = if plan.flip[out_axis] { -1.0 } else { 1.0 };
        for r in 0..3 {
            affine[r][out_axis] = sign * header.affine[r][j];
        }
    }
    // Flipped axes move the origin to the former last voxel.
    for r in 0..3 {
        let mut t = header.affine[r][3];
        for out_axis in 0..3 {
            let j = plan.source_axis[out_axis];
            if plan.flip[out_axis] {
                t += header.affine[r][j] * (header.dims[j] as f64 - 1.0);
            }
        }
        affine[r][3] = t;
    }
    NiftiHeader {
        dims,
        spacing,
        affine,
        datatype: header.datatype,
        scl_slope: header.scl_slope,
        scl_inter: header.scl_inter,
    }
}

fn remap_data<T: Copy + Default>(
    header: &NiftiHeader,
    data: &[T],
    plan: &RasPlan,
    out_header: &NiftiHeader,
) -> Vec<T> {
    let od = out_header.dims;
    let id = header.dims;
    let mut out = vec![T::default(); data.len()];
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let new_idx = [x, y, z];
                let mut old_idx = [0usize; 3];
                for out_axis in 0..3 {
                    let j = plan.source_axis[out_axis];
                    old_idx[j] = if plan.flip[out_axis] {
                        id[j] - 1 - new_idx[out_axis]
                    } else {
                        new_idx[out_axis]
                    };
                }
                out[flat_index(od, x, y, z)] =
                    data[flat_index(id, old_idx[0], old_idx[1], old_idx[2])];
            }
        }
    }
    out
}

/// Permute/flip voxel axes so each points toward +Right/+Anterior/+Superior.
///
/// The affine is updated so every voxel keeps its world coordinates;
/// oblique affines are assigned to the nearest axis without resampling.
pub fn reorient_to_ras(volume: &Volume) -> Result<Volume> {
    let plan = ras_plan(&volume.header)?;
    let header = reorient_header(&volume.header, &plan);
    let data = remap_data(&volume.header, &volume.data, &plan, &header);
    Ok(Volume { header, data })
}

/// RAS reorientation for label volumes (same permutation rule).
pub fn reorient_labels_to_ras(labels: &LabelVolume) -> Result<LabelVolume> {
    let plan = ras_plan(&labels.header)?;
    let header = reorient_header(&labels.header, &plan);
    let data = remap_data(&labels.header, &labels.data, &plan, &header);
    Ok(LabelVolume { header, data })
}
