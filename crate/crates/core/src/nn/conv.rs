//! im2col / col2im for 3D convolutions.
//!
//! Spatial dims are ordered `[z, y, x]` (x fastest), matching the voxel
//! order of [`crate::Volume`].

/// Geometry of a strided, zero-padded 3D convolution from an "input" grid to
/// an "output" grid. A transposed convolution uses the same geometry with
/// the roles of the two grids swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output grid of a forward convolution; `None` if the kernel does not fit.
    pub fn conv_output(
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = (input[a] + 2 * padding).checked_sub(kernel)?;
            out[a] = span / stride + 1;
        }
        Some(out)
    }

    /// Output grid of a transposed convolution (the conv input grid whose
    /// forward convolution lands exactly on `input`).
    pub fn transpose_output(
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = ((input[a] - 1) * stride + kernel).checked_sub(2 * padding)?;
            if out[a] == 0 {
                return None;
            }
        }
        Some(out)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the column matrix: `channels * kernel^3`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    /// Input coordinate read by output coordinate `o` through kernel tap
    /// `t` on one axis, or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t).checked_sub(self.padding)?;
        (i < self.input[axis]).then_some(i)
    }

    /// Writes the patches of one sample into columns
    /// `[col_offset, col_offset + output_len)` of a column matrix with
    /// `col_stride` columns.
    pub fn im2col(&self, src: &[f64], col: &mut [f64], col_stride: usize, col_offset: usize) {
        debug_assert_eq!(src.len(), self.channels * self.input_len());
        let k = self.kernel;
        let [oz_n, oy_n, ox_n] = self.output;
        let [_, iy_n, ix_n] = self.input;
        let in_len = self.input_len();
        for c in 0..self.channels {
            let plane = &src[c * in_len..(c + 1) * in_len];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let dst = &mut col[row * col_stride + col_offset..][..oz_n * oy_n * ox_n];
                        let mut o = 0;
                        for oz in 0..oz_n {
                            let iz = self.source(0, oz, kz);
                            for oy in 0..oy_n {
                                let iy = self.source(1, oy, ky);
                                match (iz, iy) {
                                    (Some(iz), Some(iy)) => {
                                        let base = (iz * iy_n + iy) * ix_n;
                                        for ox in 0..ox_n {
                                            dst[o] = match self.source(2, ox, kx) {
                                                Some(ix) => plane[base + ix],
                                                None => 0.0,
                                            };
                                            o += 1;
                                        }
                                    }
                                    _ => {
                                        dst[o..o + ox_n].iter_mut().for_each(|v| *v = 0.0);
                                        o += ox_n;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back onto
    /// the input grid of one sample.
    pub fn col2im(&self, col: &[f64], col_stride: usize, col_offset: usize, dst: &mut [f64]) {
        debug_assert_eq!(dst.len(), self.channels * self.input_len());
        let k = self.kernel;
        let [oz_n, oy_n, ox_n] = self.output;
        let [_, iy_n, ix_n] = self.input;
        let in_len = self.input_len();
        for c in 0..self.channels {
            let plane = &mut dst[c * in_len..(c + 1) * in_len];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let src = &col[row * col_stride + col_offset..][..oz_n * oy_n * ox_n];
                        let mut o = 0;
                        for oz in 0..oz_n {
                            let iz = self.source(0, oz, kz);
                            for oy in 0..oy_n {
                                let iy = self.source(1, oy, ky);
                                if let (Some(iz), Some(iy)) = (iz, iy) {
                                    let base = (iz * iy_n + iy) * ix_n;
                                    for ox in 0..ox_n {
                                        if let Some(ix) = self.source(2, ox, kx) {
                                            plane[base + ix] += src[o];
                                        }
                                        o += 1;
                                    }
                                } else {
                                    o += ox_n;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(
            ConvGeometry::conv_output([8, 8, 8], 4, 2, 1),
            Some([4, 4, 4])
        );
        assert_eq!(
            ConvGeometry::conv_output([4, 4, 4], 4, 2, 1),
            Some([2, 2, 2])
        );
        assert_eq!(
            ConvGeometry::conv_output([8, 8, 8], 3, 1, 1),
            Some([8, 8, 8])
        );
        assert_eq!(ConvGeometry::conv_output([2, 2, 2], 5, 1, 0), None);
        assert_eq!(
            ConvGeometry::transpose_output([4, 4, 4], 4, 2, 1),
            Some([8, 8, 8])
        );
        assert_eq!(
            ConvGeometry::transpose_output([3, 3, 3], 4, 2, 1),
            Some([6, 6, 6])
        );
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeometry {
            channels: 2,
            input: [3, 4, 5],
            output: ConvGeometry::conv_output([3, 4, 5], 3, 2, 1).unwrap(),
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..2 * g.input_len())
            .map(|i| (i as f64 * 0.7).sin())
            .collect();
        let cols = g.output_len();
        let y: Vec<f64> = (0..g.col_rows() * cols)
            .map(|i| (i as f64 * 1.3).cos())
            .collect();
        let mut col = vec![0.0; g.col_rows() * cols];
        g.im2col(&x, &mut col, cols, 0);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, cols, 0, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
