//! Centered 3D FFT used by the k-space artifact transforms.
//!
//! "Centered" means the zero-frequency bin sits at index `dim / 2` on
//! every axis after the forward transform, matching the usual fftshift
//! convention. Arbitrary (mixed-radix) dimensions are supported.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::volume::{flat_index, NiftiHeader, Volume};

/// Complex k-space array with the DC bin at the geometric center.
#[derive(Debug, Clone)]
pub struct KSpace {
    pub header: NiftiHeader,
    pub data: Vec<Complex64>,
}

impl KSpace {
    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    /// Index of the DC bin along each axis.
    pub fn center(&self) -> [usize; 3] {
        let d = self.header.dims;
        [d[0] / 2, d[1] / 2, d[2] / 2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        flat_index(self.header.dims, x, y, z)
    }
}

/// Apply a 1D FFT along every line of the given axis, in place.
fn transform_axis(data: &mut [Complex64], dims: [usize; 3], axis: usize, inverse: bool) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut line = vec![Complex64::default(); n];
    let (outer_a, outer_b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for j in 0..dims[outer_b] {
        for i in 0..dims[outer_a] {
            for (k, slot) in line.iter_mut().enumerate() {
                let mut idx = [0usize; 3];
                idx[axis] = k;
                idx[outer_a] = i;
                idx[outer_b] = j;
                *slot = data[flat_index(dims, idx[0], idx[1], idx[2])];
            }
            fft.process(&mut line);
            for (k, slot) in line.iter().enumerate() {
                let mut idx = [0usize; 3];
                idx[axis] = k;
                idx[outer_a] = i;
                idx[outer_b] = j;
                data[flat_index(dims, idx[0], idx[1], idx[2])] = *slot;
            }
        }
    }
}

/// Circularly shift each axis so index 0 moves to `dim / 2` (fftshift)
/// or the inverse (ifftshift).
fn shift_axes(data: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let total = dims[0] * dims[1] * dims[2];
    let mut tmp = vec![Complex64::default(); total];
    let shift = |dim: usize| -> usize {
        if inverse {
            // ifftshift: move dim/2 back to 0, i.e. shift by ceil(dim/2)
            dim - dim / 2
        } else {
            dim / 2
        }
    };
    let s = [shift(dims[0]), shift(dims[1]), shift(dims[2])];
    for z in 0..dims[2] {
        let nz = (z + s[2]) % dims[2];
        for y in 0..dims[1] {
            let ny = (y + s[1]) % dims[1];
            for x in 0..dims[0] {
                let nx = (x + s[0]) % dims[0];
                tmp[flat_index(dims, nx, ny, nz)] = data[flat_index(dims, x, y, z)];
            }
        }
    }
    data.copy_from_slice(&tmp);
}

/// Forward centered 3D FFT.
pub fn fft3_centered(volume: &Volume) -> KSpace {
    let dims = volume.header.dims;
    let mut data: Vec<Complex64> = volume
        .data
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for axis in 0..3 {
        transform_axis(&mut data, dims, axis, false);
    }
    shift_axes(&mut data, dims, false);
    KSpace {
        header: volume.header.clone(),
        data,
    }
}

/// Inverse centered 3D FFT; returns the real part.
pub fn ifft3_centered(kspace: &KSpace) -> Volume {
    let dims = kspace.header.dims;
    let mut data = kspace.data.clone();
    shift_axes(&mut data, dims, true);
    for axis in 0..3 {
        transform_axis(&mut data, dims, axis, true);
    }
    let scale = 1.0 / (dims[0] * dims[1] * dims[2]) as f64;
    Volume {
        header: kspace.header.clone(),
        data: data.iter().map(|c| c.re * scale).collect(),
    }
}
