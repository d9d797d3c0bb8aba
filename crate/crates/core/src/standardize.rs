//! Standardization to the canonical cube representation: isotropic
//! resampling, pad/crop to a fixed side, and intensity normalization.

use thiserror::Error;

use crate::volume::{flat_index, LabelVolume, NiftiHeader, Volume};

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error("volume is constant; intensity range is empty")]
    ConstantVolume,
}

/// Interpolation used when resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Target grid for one axis: dims scaled by spacing, snapped to the
/// nearest even integer, with the physical extent preserved.
fn target_axis(dim: usize, spacing: f64) -> (usize, f64) {
    let extent = dim as f64 * spacing;
    let target = ((extent / 2.0).round() * 2.0).max(2.0) as usize;
    (target, extent / target as f64)
}

/// Continuous source coordinate of an output voxel center.
///
/// Voxel centers of both grids are aligned on the shared physical extent,
/// so equal grids map to the identity.
#[inline]
fn source_coord(out_idx: usize, scale: f64) -> f64 {
    (out_idx as f64 + 0.5) * scale - 0.5
}

fn resampled_header(header: &NiftiHeader) -> (NiftiHeader, [f64; 3]) {
    let mut dims = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    let mut scale = [0.0f64; 3];
    for a in 0..3 {
        let (d, s) = target_axis(header.dims[a], header.spacing[a]);
        dims[a] = d;
        spacing[a] = s;
        scale[a] = s / header.spacing[a];
    }
    let mut affine = header.affine;
    for r in 0..3 {
        let mut t = header.affine[r][3];
        for c in 0..3 {
            affine[r][c] = header.affine[r][c] * scale[c];
            t += header.affine[r][c] * (0.5 * scale[c] - 0.5);
        }
        affine[r][3] = t;
    }
    (
        NiftiHeader {
            dims,
            spacing,
            affine,
            datatype: header.datatype,
            scl_slope: header.scl_slope,
            scl_inter: header.scl_inter,
        },
        scale,
    )
}

/// Resample to (approximately) 1 mm isotropic voxels.
///
/// Per axis the target dimension is the nearest even integer to
/// `dim * spacing`; the output spacing divides the original physical
/// extent evenly, so the extent is preserved.
pub fn resample_to_isotropic(volume: &Volume, mode: Interpolation) -> Volume {
    let (header, scale) = resampled_header(&volume.header);
    let d = header.dims;
    let mut data = vec![0.0; d[0] * d[1] * d[2]];
    for z in 0..d[2] {
        let pz = source_coord(z, scale[2]);
        for y in 0..d[1] {
            let py = source_coord(y, scale[1]);
            for x in 0..d[0] {
                let px = source_coord(x, scale[0]);
                data[flat_index(d, x, y, z)] = match mode {
                    Interpolation::Linear => volume.sample_trilinear([px, py, pz], 0.0),
                    Interpolation::Nearest => {
                        // Nearest on an intensity volume: go through a label-free path.
                        let xi = nearest_in(px, volume.header.dims[0]);
                        let yi = nearest_in(py, volume.header.dims[1]);
                        let zi = nearest_in(pz, volume.header.dims[2]);
                        match (xi, yi, zi) {
                            (Some(xi), Some(yi), Some(zi)) => volume.at(xi, yi, zi),
                            _ => 0.0,
                        }
                    }
                };
            }
        }
    }
    Volume { header, data }
}

fn nearest_in(p: f64, dim: usize) -> Option<usize> {
    if p < -0.5 || p > dim as f64 - 0.5 {
        None
    } else {
        Some((p.round().max(0.0) as usize).min(dim - 1))
    }
}

/// Nearest-neighbor isotropic resampling for label volumes.
pub fn resample_labels_to_isotropic(labels: &LabelVolume) -> LabelVolume {
    let (header, scale) = resampled_header(&labels.header);
    let d = header.dims;
    let mut data = vec![0u32; d[0] * d[1] * d[2]];
    for z in 0..d[2] {
        let pz = source_coord(z, scale[2]);
        for y in 0..d[1] {
            let py = source_coord(y, scale[1]);
            for x in 0..d[0] {
                let px = source_coord(x, scale[0]);
                data[flat_index(d, x, y, z)] = labels.sample_nearest([px, py, pz], 0);
            }
        }
    }
    LabelVolume { header, data }
}

/// Per-axis shift of the cube placement: output index + shift = input index.
fn pad_crop_shifts(dims: [usize; 3], side: usize) -> [i64; 3] {
    let mut shift = [0i64; 3];
    for a in 0..3 {
        let diff = dims[a] as i64 - side as i64;
        // Centered; when the difference is odd the extra slice goes high.
        shift[a] = if diff >= 0 { diff / 2 } else { -((-diff) / 2) };
    }
    shift
}

fn pad_crop_header(header: &NiftiHeader, side: usize, shift: [i64; 3]) -> NiftiHeader {
    let mut affine = header.affine;
    for r in 0..3 {
        for (c, s) in shift.iter().enumerate() {
            affine[r][3] += header.affine[r][c] * *s as f64;
        }
    }
    NiftiHeader {
        dims: [side; 3],
        spacing: header.spacing,
        affine,
        datatype: header.datatype,
        scl_slope: header.scl_slope,
        scl_inter: header.scl_inter,
    }
}

fn pad_crop<T: Copy>(
    dims: [usize; 3],
    data: &[T],
    side: usize,
    fill: T,
    shift: [i64; 3],
) -> Vec<T> {
    let out_dims = [side; 3];
    let mut out = vec![fill; side * side * side];
    for z in 0..side {
        let sz = z as i64 + shift[2];
        if sz < 0 || sz >= dims[2] as i64 {
            continue;
        }
        for y in 0..side {
            let sy = y as i64 + shift[1];
            if sy < 0 || sy >= dims[1] as i64 {
                continue;
            }
            for x in 0..side {
                let sx = x as i64 + shift[0];
                if sx < 0 || sx >= dims[0] as i64 {
                    continue;
                }
                out[flat_index(out_dims, x, y, z)] =
                    data[flat_index(dims, sx as usize, sy as usize, sz as usize)];
            }
        }
    }
    out
}

/// Pad or crop symmetrically to a cube of the given side, keeping the
/// content centered; an odd remainder goes to the high side.
pub fn pad_crop_to_cube(volume: &Volume, side: usize, fill: f64) -> Volume {
    let shift = pad_crop_shifts(volume.header.dims, side);
    let header = pad_crop_header(&volume.header, side, shift);
    let data = pad_crop(volume.header.dims, &volume.data, side, fill, shift);
    Volume { header, data }
}

/// Label variant of [`pad_crop_to_cube`]; pads with background (0).
pub fn pad_crop_labels_to_cube(labels: &LabelVolume, side: usize) -> LabelVolume {
    let shift = pad_crop_shifts(labels.header.dims, side);
    let header = pad_crop_header(&labels.header, side, shift);
    let data = pad_crop(labels.header.dims, &labels.data, side, 0u32, shift);
    LabelVolume { header, data }
}

/// Min-max normalize intensities to [0, 1].
pub fn normalize_intensity(volume: &Volume) -> Result<Volume, StandardizeError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &volume.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(StandardizeError::ConstantVolume);
    }
    let inv = 1.0 / (hi - lo);
    let data = volume.data.iter().map(|&v| (v - lo) * inv).collect();
    Ok(Volume {
        header: volume.header.clone(),
        data,
    })
}

/// Elementwise power transform `v^gamma` on a [0, 1] volume.
pub fn gamma_transform(volume: &Volume, gamma: f64) -> Volume {
    assert!(gamma > 0.0, "gamma must be positive");
    let data = volume.data.iter().map(|&v| v.max(0.0).powf(gamma)).collect();
    Volume {
        header: volume.header.clone(),
        data,
    }
}
