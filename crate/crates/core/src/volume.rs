//! Core volume types shared by the whole pipeline.
//!
//! Voxel data is stored densely in x-fastest order: the element at
//! `(x, y, z)` lives at index `x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

/// Scalar storage types supported in NIfTI-1 files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    /// NIfTI-1 `datatype` header code.
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            8 => Some(Datatype::I32),
            16 => Some(Datatype::F32),
            64 => Some(Datatype::F64),
            _ => None,
        }
    }

    /// Bytes per voxel.
    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Datatype::U8 | Datatype::I16 | Datatype::I32)
    }
}

/// Geometry and scaling metadata of a volume.
///
/// `affine` maps homogeneous voxel indices to world coordinates in mm;
/// its upper-left 3x3 block must be nonsingular.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    /// Voxel spacing in mm along each voxel axis.
    pub spacing: [f64; 3],
    /// Voxel-to-world transform (mm), row-major.
    pub affine: [[f64; 4]; 4],
    pub datatype: Datatype,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiHeader {
    /// Header with a diagonal RAS affine built from dims and spacing.
    pub fn isotropic(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = spacing[a];
        }
        affine[3][3] = 1.0;
        NiftiHeader {
            dims,
            spacing,
            affine,
            datatype: Datatype::F32,
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Voxel volume in mm^3.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// World coordinates (mm) of the voxel index `(i, j, k)`.
    pub fn voxel_to_world(&self, i: f64, j: f64, k: f64) -> [f64; 3] {
        let a = &self.affine;
        [
            a[0][0] * i + a[0][1] * j + a[0][2] * k + a[0][3],
            a[1][0] * i + a[1][1] * j + a[1][2] * k + a[1][3],
            a[2][0] * i + a[2][1] * j + a[2][2] * k + a[2][3],
        ]
    }

    /// Determinant of the direction (3x3) block.
    pub fn direction_det(&self) -> f64 {
        let a = &self.affine;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }
}

/// Dense 3D scalar volume, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: NiftiHeader,
    pub data: Vec<f64>,
}

/// Dense 3D label volume; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub header: NiftiHeader,
    pub data: Vec<u32>,
}

#[inline]
pub(crate) fn flat_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

impl Volume {
    /// Build a volume with a diagonal affine from raw data.
    ///
    /// Panics if `data.len()` does not match the dims product.
    pub fn from_parts(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Volume {
            header: NiftiHeader::isotropic(dims, spacing),
            data,
        }
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Self {
        Volume::from_parts(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        flat_index(self.header.dims, x, y, z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Trilinear sample at a continuous voxel coordinate.
    ///
    /// Points outside the physical footprint of the grid (more than half
    /// a voxel beyond the outermost centers) return `fill`; points inside
    /// use edge-clamped interpolation.
    pub fn sample_trilinear(&self, p: [f64; 3], fill: f64) -> f64 {
        let d = self.header.dims;
        for a in 0..3 {
            if p[a] < -0.5 || p[a] > d[a] as f64 - 0.5 {
                return fill;
            }
        }
        let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
        let x = clamp(p[0], d[0]);
        let y = clamp(p[1], d[1]);
        let z = clamp(p[2], d[2]);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let z0 = z.floor() as usize;
        let x1 = (x0 + 1).min(d[0] - 1);
        let y1 = (y0 + 1).min(d[1] - 1);
        let z1 = (z0 + 1).min(d[2] - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let fz = z - z0 as f64;

        let v000 = self.at(x0, y0, z0);
        let v100 = self.at(x1, y0, z0);
        let v010 = self.at(x0, y1, z0);
        let v110 = self.at(x1, y1, z0);
        let v001 = self.at(x0, y0, z1);
        let v101 = self.at(x1, y0, z1);
        let v011 = self.at(x0, y1, z1);
        let v111 = self.at(x1, y1, z1);

        let c00 = v000 + (v100 - v000) * fx;
        let c10 = v010 + (v110 - v010) * fx;
        let c01 = v001 + (v101 - v001) * fx;
        let c11 = v011 + (v111 - v011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }
}

impl LabelVolume {
    pub fn from_parts(dims: [usize; 3], spacing: [f64; 3], data: Vec<u32>) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        let mut header = NiftiHeader::isotropic(dims, spacing);
        header.datatype = Datatype::I32;
        LabelVolume { header, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        flat_index(self.header.dims, x, y, z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.index(x, y, z)]
    }

    /// Nearest-neighbor sample; outside the grid footprint returns `fill`.
    pub fn sample_nearest(&self, p: [f64; 3], fill: u32) -> u32 {
        let d = self.header.dims;
        for a in 0..3 {
            if p[a] < -0.5 || p[a] > d[a] as f64 - 0.5 {
                return fill;
            }
        }
        let x = (p[0].round().max(0.0) as usize).min(d[0] - 1);
        let y = (p[1].round().max(0.0) as usize).min(d[1] - 1);
        let z = (p[2].round().max(0.0) as usize).min(d[2] - 1);
        self.at(x, y, z)
    }

    /// True if any voxel carries a non-background label.
    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }
}
