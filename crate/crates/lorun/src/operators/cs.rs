//! Blockwise compressive sensing: a sampling matrix applied to flattened
//! image blocks (or to a plain vector when the signal is 1-D).

use crate::error::{LorunError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Sampling operator `y = Φ x` with `Φ: [n, m]`, `m = block_size²`.
#[derive(Clone, Debug)]
pub struct CsParams<S> {
    pub matrix: Tensor<S>,
    pub block_size: usize,
}

impl<S: Scalar> CsParams<S> {
    pub fn new(matrix: Tensor<S>, block_size: usize) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(LorunError::Dimension(format!(
                "sampling matrix must be 2-D, got {:?}",
                matrix.shape()
            )));
        }
        let (n, m) = (matrix.shape()[0], matrix.shape()[1]);
        if m != block_size * block_size && block_size != 0 {
            return Err(LorunError::Dimension(format!(
                "matrix width {m} must equal block_size² = {}",
                block_size * block_size
            )));
        }
        if n > m {
            return Err(LorunError::Config(format!(
                "measurement rows {n} exceed signal length {m} (ratio > 1)"
            )));
        }
        Ok(CsParams { matrix, block_size })
    }

    /// Gaussian matrix with entries ~ N(0, 1/n), n = ⌈β·m⌉.
    pub fn random(block_size: usize, ratio: f64, seed: u64) -> Result<Self> {
        let m = block_size * block_size;
        Self::random_vector(m, ratio, seed).map(|mut p| {
            p.block_size = block_size;
            p
        })
    }

    /// Same, for a 1-D signal of length `m` (block covers the whole signal).
    pub fn random_vector(m: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(LorunError::Config(format!(
                "CS ratio must be in (0, 1], got {ratio}"
            )));
        }
        let n = (ratio * m as f64).ceil() as usize;
        let mut rng = Rng::for_purpose(seed, "cs-sampling-matrix");
        let std = (1.0 / n as f64).sqrt();
        let matrix = Tensor::randn(&[n, m], std, &mut rng);
        Ok(CsParams {
            matrix,
            block_size: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn signal_len(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn ratio(&self) -> f64 {
        self.rows() as f64 / self.signal_len() as f64
    }
}

/// Geometry of the blocks a CS signal splits into.
fn block_grid<S: Scalar>(x_shape: &[usize], matrix: &Tensor<S>, block: usize) -> Result<(usize, usize, usize)> {
    let m = matrix.shape()[1];
    match x_shape.len() {
        1 => {
            if x_shape[0] != m {
                return Err(LorunError::Dimension(format!(
                    "CS vector length {} does not match matrix width {m}",
                    x_shape[0]
                )));
            }
            Ok((1, 1, 1))
        }
        3 => {
            let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
            if block == 0 || h % block != 0 || w % block != 0 {
                return Err(LorunError::Dimension(format!(
                    "image {h}x{w} is not tiled by block size {block}"
                )));
            }
            if block * block != m {
                return Err(LorunError::Dimension(format!(
                    "block size {block} does not match matrix width {m}"
                )));
            }
            Ok((c, h / block, w / block))
        }
        _ => Err(LorunError::Dimension(format!(
            "CS input must be 1-D or [C,H,W], got {x_shape:?}"
        ))),
    }
}

/// `y = Φ x` per block. Vector input gives `[n]`, image gives `[C,Bh,Bw,n]`.
pub fn forward<S: Scalar>(x: &Tensor<S>, matrix: &Tensor<S>, block: usize) -> Result<Tensor<S>> {
    let (c, bh, bw) = block_grid(x.shape(), matrix, block)?;
    let (n, m) = (matrix.shape()[0], matrix.shape()[1]);
    let md = matrix.data();
    let xd = x.data();
    if x.ndim() == 1 {
        let mut y = vec![S::ZERO; n];
        for (r, yo) in y.iter_mut().enumerate() {
            let row = &md[r * m..(r + 1) * m];
            let mut acc = S::ZERO;
            for (&mv, &xv) in row.iter().zip(xd) {
                acc += mv * xv;
            }
            *yo = acc;
        }
        return Tensor::from_vec(vec![n], y);
    }
    let h = x.shape()[1];
    let w = x.shape()[2];
    let mut y = vec![S::ZERO; c * bh * bw * n];
    let mut blockbuf = vec![S::ZERO; m];
    for ci in 0..c {
        for bi in 0..bh {
            for bj in 0..bw {
                gather_block(xd, ci, bi, bj, h, w, block, &mut blockbuf);
                let base = ((ci * bh + bi) * bw + bj) * n;
                for r in 0..n {
                    let row = &md[r * m..(r + 1) * m];
                    let mut acc = S::ZERO;
                    for (&mv, &xv) in row.iter().zip(&blockbuf) {
                        acc += mv * xv;
                    }
                    y[base + r] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![c, bh, bw, n], y)
}

/// `x = Φᵀ y` per block, reassembled to the signal geometry.
pub fn adjoint<S: Scalar>(y: &Tensor<S>, matrix: &Tensor<S>, block: usize) -> Result<Tensor<S>> {
    let (n, m) = (matrix.shape()[0], matrix.shape()[1]);
    let md = matrix.data();
    let yd = y.data();
    match y.ndim() {
        1 => {
            if y.shape()[0] != n {
                return Err(LorunError::Dimension(format!(
                    "CS measurement length {} does not match matrix rows {n}",
                    y.shape()[0]
                )));
            }
            let mut x = vec![S::ZERO; m];
            for r in 0..n {
                let row = &md[r * m..(r + 1) * m];
                let yv = yd[r];
                for (xo, &mv) in x.iter_mut().zip(row) {
                    *xo += mv * yv;
                }
            }
            Tensor::from_vec(vec![m], x)
        }
        4 => {
            let (c, bh, bw) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            if y.shape()[3] != n {
                return Err(LorunError::Dimension(format!(
                    "CS measurement depth {} does not match matrix rows {n}",
                    y.shape()[3]
                )));
            }
            let h = bh * block;
            let w = bw * block;
            let mut x = vec![S::ZERO; c * h * w];
            let mut blockbuf = vec![S::ZERO; m];
            for ci in 0..c {
                for bi in 0..bh {
                    for bj in 0..bw {
                        let base = ((ci * bh + bi) * bw + bj) * n;
                        blockbuf.iter_mut().for_each(|v| *v = S::ZERO);
                        for r in 0..n {
                            let row = &md[r * m..(r + 1) * m];
                            let yv = yd[base + r];
                            for (bo, &mv) in blockbuf.iter_mut().zip(row) {
                                *bo += mv * yv;
                            }
                        }
                        scatter_block(&mut x, ci, bi, bj, h, w, block, &blockbuf);
                    }
                }
            }
            Tensor::from_vec(vec![c, h, w], x)
        }
        _ => Err(LorunError::Dimension(format!(
            "CS measurement must be 1-D or [C,Bh,Bw,n], got {:?}",
            y.shape()
        ))),
    }
}

/// Gradient of a measurement w.r.t. the matrix: Σ over blocks of g ⊗ x.
pub fn forward_vjp_matrix<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    matrix_shape: &[usize],
    block: usize,
) -> Result<Tensor<S>> {
    let (n, m) = (matrix_shape[0], matrix_shape[1]);
    let mut gm = vec![S::ZERO; n * m];
    let xd = x.data();
    let gd = g.data();
    if x.ndim() == 1 {
        for r in 0..n {
            let gv = gd[r];
            let row = &mut gm[r * m..(r + 1) * m];
            for (o, &xv) in row.iter_mut().zip(xd) {
                *o += gv * xv;
            }
        }
        return Tensor::from_vec(vec![n, m], gm);
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (bh, bw) = (h / block, w / block);
    let mut blockbuf = vec![S::ZERO; m];
    for ci in 0..c {
        for bi in 0..bh {
            for bj in 0..bw {
                gather_block(xd, ci, bi, bj, h, w, block, &mut blockbuf);
                let base = ((ci * bh + bi) * bw + bj) * n;
                for r in 0..n {
                    let gv = gd[base + r];
                    let row = &mut gm[r * m..(r + 1) * m];
                    for (o, &xv) in row.iter_mut().zip(&blockbuf) {
                        *o += gv * xv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, m], gm)
}

/// Gradient of an adjoint application w.r.t. the matrix: Σ of y ⊗ g.
pub fn adjoint_vjp_matrix<S: Scalar>(
    y: &Tensor<S>,
    g: &Tensor<S>,
    matrix_shape: &[usize],
    block: usize,
) -> Result<Tensor<S>> {
    // x̂ = Φᵀy swaps the roles of the two vectors in the outer product.
    let (n, m) = (matrix_shape[0], matrix_shape[1]);
    let mut gm = vec![S::ZERO; n * m];
    let yd = y.data();
    let gd = g.data();
    if y.ndim() == 1 {
        for r in 0..n {
            let yv = yd[r];
            let row = &mut gm[r * m..(r + 1) * m];
            for (o, &gv) in row.iter_mut().zip(gd) {
                *o += yv * gv;
            }
        }
        return Tensor::from_vec(vec![n, m], gm);
    }
    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (bh, bw) = (h / block, w / block);
    let mut blockbuf = vec![S::ZERO; m];
    for ci in 0..c {
        for bi in 0..bh {
            for bj in 0..bw {
                gather_block(gd, ci, bi, bj, h, w, block, &mut blockbuf);
                let base = ((ci * bh + bi) * bw + bj) * n;
                for r in 0..n {
                    let yv = yd[base + r];
                    let row = &mut gm[r * m..(r + 1) * m];
                    for (o, &gv) in row.iter_mut().zip(&blockbuf) {
                        *o += yv * gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, m], gm)
}

fn gather_block<S: Scalar>(
    data: &[S],
    c: usize,
    bi: usize,
    bj: usize,
    h: usize,
    w: usize,
    block: usize,
    out: &mut [S],
) {
    for r in 0..block {
        let src = (c * h + bi * block + r) * w + bj * block;
        out[r * block..(r + 1) * block].copy_from_slice(&data[src..src + block]);
    }
}

fn scatter_block<S: Scalar>(
    data: &mut [S],
    c: usize,
    bi: usize,
    bj: usize,
    h: usize,
    w: usize,
    block: usize,
    src: &[S],
) {
    for r in 0..block {
        let dst = (c * h + bi * block + r) * w + bj * block;
        data[dst..dst + block].copy_from_slice(&src[r * block..(r + 1) * block]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matrix_full_ratio_passes_through() {
        let m = 4;
        let mut eye = vec![0.0f64; m * m];
        for i in 0..m {
            eye[i * m + i] = 1.0;
        }
        let matrix = Tensor::from_vec(vec![m, m], eye).unwrap();
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .reshaped(vec![1, 2, 2])
            .unwrap();
        let y = forward(&x, &matrix, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_of_ones_adjoint_replicates() {
        let matrix = Tensor::from_vec(vec![1, 2], vec![1.0f64, 1.0]).unwrap();
        let y = Tensor::from_vec(vec![1], vec![5.0]).unwrap();
        let x = adjoint(&y, &matrix, 0).unwrap();
        assert_eq!(x.data(), &[5.0, 5.0]);
    }

    #[test]
    fn ratio_and_rows_follow_ceiling_rule() {
        let p = CsParams::<f64>::random(32, 0.25, 3).unwrap();
        assert_eq!(p.signal_len(), 1024);
        assert_eq!(p.rows(), 256);
        let p = CsParams::<f64>::random_vector(64, 0.5, 3).unwrap();
        assert_eq!(p.rows(), 32);
        assert!(CsParams::<f64>::random(32, 0.0, 3).is_err());
        assert!(CsParams::<f64>::random(32, 1.5, 3).is_err());
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let p = CsParams::<f64>::random(4, 0.5, 1).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 6, 6]); // 6 not divisible by 4
        assert!(forward(&x, &p.matrix, p.block_size).is_err());
        let y = Tensor::<f64>::zeros(&[3]);
        assert!(adjoint(&y, &p.matrix, p.block_size).is_err());
    }
}
