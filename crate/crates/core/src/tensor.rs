//! Dense row-major tensors.

use crate::error::{CoreError, Result};
use crate::real::Real;

/// A dense tensor value. `shape` is row-major; `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![R::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: R) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::Shape(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.shape[self.rank() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        let c = self.shape[self.rank() - 1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Split an image `[c0, h, w]` into non-overlapping patches, flattened in
/// row-major raster order over the patch grid. Token channel layout is
/// channel-major then within-patch raster: `c = c0*p*p + di*p + dj`.
pub fn patchify<R: Real>(image: &Tensor<R>, patch: usize) -> Result<Tensor<R>> {
    if image.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "patchify expects [c,h,w], got {:?}",
            image.shape
        )));
    }
    let (c0, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CoreError::Shape(format!(
            "image {}x{} not divisible by patch {}",
            h, w, patch
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let k = gh * gw;
    let c = c0 * patch * patch;
    let mut out = vec![R::ZERO; k * c];
    for bi in 0..gh {
        for bj in 0..gw {
            let tok = bi * gw + bj;
            for ch in 0..c0 {
                for di in 0..patch {
                    for dj in 0..patch {
                        let src = ch * h * w + (bi * patch + di) * w + (bj * patch + dj);
                        let dst = tok * c + ch * patch * patch + di * patch + dj;
                        out[dst] = image.data[src];
                    }
                }
            }
        }
    }
    Tensor::new(vec![k, c], out)
}

/// Inverse of [`patchify`]; exact round trip.
pub fn unpatchify<R: Real>(
    tokens: &Tensor<R>,
    c0: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<Tensor<R>> {
    let (k, c) = tokens.dims2()?;
    let (gh, gw) = (h / patch, w / patch);
    if k != gh * gw || c != c0 * patch * patch || h % patch != 0 || w % patch != 0 {
        return Err(CoreError::Shape(format!(
            "unpatchify mismatch: {} tokens x {} channels vs {}x{}x{} patch {}",
            k, c, c0, h, w, patch
        )));
    }
    let mut out = vec![R::ZERO; c0 * h * w];
    for bi in 0..gh {
        for bj in 0..gw {
            let tok = bi * gw + bj;
            for ch in 0..c0 {
                for di in 0..patch {
                    for dj in 0..patch {
                        let dst = ch * h * w + (bi * patch + di) * w + (bj * patch + dj);
                        let src = tok * c + ch * patch * patch + di * patch + dj;
                        out[dst] = tokens.data[src];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c0, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn patchify_orders_patches_row_major() {
        // 1x2x2 image, patch 1: tokens follow (0,0),(0,1),(1,0),(1,1).
        let img = Tensor::new(vec![1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let toks = patchify(&img, 1).unwrap();
        assert_eq!(toks.shape, vec![4, 1]);
        assert_eq!(toks.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn whole_image_patch_is_single_token() {
        let img = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let toks = patchify(&img, 2).unwrap();
        assert_eq!(toks.shape, vec![1, 8]);
    }

    #[test]
    fn patchify_round_trip_exact() {
        let mut rng = rng::substream(&[11]);
        let img = Tensor::new(vec![3, 8, 8], rng::normal_vec::<f64>(&mut rng, 3 * 8 * 8)).unwrap();
        let toks = patchify(&img, 2).unwrap();
        assert_eq!(toks.shape, vec![16, 12]);
        let back = unpatchify(&toks, 3, 8, 8, 2).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn indivisible_dims_error() {
        let img = Tensor::<f32>::zeros(&[1, 3, 4]);
        assert!(patchify(&img, 2).is_err());
    }
}
