//! Patch extraction and scatter used by strided 3-D convolution.
//!
//! Volumes are channel-last: `[n, z, y, x, c]`, x fastest among the
//! spatial axes. Patch columns are ordered `(kz, ky, kx, c)`.

use super::Real;

/// Geometry of a cubic convolution between a high-resolution volume
/// (side `hi`) and a low-resolution volume (side `lo`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub hi: usize,
    pub lo: usize,
    /// Channels of the high-resolution volume.
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output side of a forward convolution, if the geometry is valid.
    pub fn conv_out_side(hi: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = hi + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Output side of a transposed convolution.
    pub fn transposed_out_side(lo: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let full = (lo - 1) * stride + kernel;
        full.checked_sub(2 * pad).filter(|&s| s > 0)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.kernel * self.channels
    }

    pub fn patch_rows(&self) -> usize {
        self.batch * self.lo * self.lo * self.lo
    }

    pub fn hi_len(&self) -> usize {
        self.batch * self.hi * self.hi * self.hi * self.channels
    }

    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        if i < 0 || i >= self.hi as isize {
            None
        } else {
            Some(i as usize)
        }
    }
}

/// Gather every kernel-sized patch of `hi` into a row of `cols`.
pub fn im2col<T: Real>(g: &ConvGeom, hi: &[T], cols: &mut [T]) {
    debug_assert_eq!(hi.len(), g.hi_len());
    debug_assert_eq!(cols.len(), g.patch_rows() * g.patch_len());
    let c = g.channels;
    let k = g.kernel;
    let plen = g.patch_len();
    let mut row = 0;
    for n in 0..g.batch {
        let base_n = n * g.hi * g.hi * g.hi;
        for oz in 0..g.lo {
            for oy in 0..g.lo {
                for ox in 0..g.lo {
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    let mut col = 0;
                    for kz in 0..k {
                        let iz = g.source(oz, kz);
                        for ky in 0..k {
                            let iy = g.source(oy, ky);
                            for kx in 0..k {
                                let ix = g.source(ox, kx);
                                let out = &mut dst[col..col + c];
                                match (iz, iy, ix) {
                                    (Some(z), Some(y), Some(x)) => {
                                        let src = (base_n + (z * g.hi + y) * g.hi + x) * c;
                                        out.copy_from_slice(&hi[src..src + c]);
                                    }
                                    _ => out.iter_mut().for_each(|v| *v = T::ZERO),
                                }
                                col += c;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into `hi`.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], hi: &mut [T]) {
    debug_assert_eq!(hi.len(), g.hi_len());
    debug_assert_eq!(cols.len(), g.patch_rows() * g.patch_len());
    let c = g.channels;
    let k = g.kernel;
    let plen = g.patch_len();
    let mut row = 0;
    for n in 0..g.batch {
        let base_n = n * g.hi * g.hi * g.hi;
        for oz in 0..g.lo {
            for oy in 0..g.lo {
                for ox in 0..g.lo {
                    let src = &cols[row * plen..(row + 1) * plen];
                    let mut col = 0;
                    for kz in 0..k {
                        let iz = g.source(oz, kz);
                        for ky in 0..k {
                            let iy = g.source(oy, ky);
                            for kx in 0..k {
                                let ix = g.source(ox, kx);
                                if let (Some(z), Some(y), Some(x)) = (iz, iy, ix) {
                                    let dst = (base_n + (z * g.hi + y) * g.hi + x) * c;
                                    for (d, s) in hi[dst..dst + c].iter_mut().zip(&src[col..col + c]) {
                                        *d += *s;
                                    }
                                }
                                col += c;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
