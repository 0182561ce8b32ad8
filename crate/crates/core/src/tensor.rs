//! Dense `f64` arrays with explicit dimensions.
//!
//! Layout is row-major with the first dimension outermost, so a `(C, H, W)`
//! tensor stores each channel plane contiguously.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a length mismatch
    /// and non-finite values.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidDims(format!("{dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::InvalidDims(format!("dims {dims:?} need {len} elements, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value {} at flat index {i}", data[i])));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    /// 2-D tensor from a closure over `(row, col)`.
    pub fn from_fn_2d(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(vec![rows, cols], data)
    }

    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidDims(format!("expected 2-D tensor, got {:?}", self.dims))),
        }
    }

    /// `(channels, rows, cols)` of a 3-D tensor.
    pub fn shape3(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, r, w] => Ok((c, r, w)),
            _ => Err(Error::InvalidDims(format!("expected 3-D tensor, got {:?}", self.dims))),
        }
    }

    /// Same data viewed under different dimensions of equal total size.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Elementwise map. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

#[inline]
fn lerp_clamped(a: f64, b: f64, t: f64) -> f64 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Source coordinate and blend weight for one output sample under
/// half-pixel-center alignment.
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize of a 2-D tensor with half-pixel-center alignment and
/// clamped edges. Identity sizes return an exact copy.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = t.shape2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDims(format!("resize target {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, h, out_h);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &cols {
            let top = lerp_clamped(r0[x0], r0[x1], fx);
            let bottom = lerp_clamped(r1[x0], r1[x1], fx);
            out.push(lerp_clamped(top, bottom, fy));
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![out_h, out_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form bilinear sample with half-pixel centers, written
    /// independently of `source_coord`.
    fn bilinear_oracle(src: &[Vec<f64>], y: usize, x: usize, oh: usize, ow: usize) -> f64 {
        let h = src.len() as f64;
        let w = src[0].len() as f64;
        let sy = ((y as f64 + 0.5) * h / oh as f64 - 0.5).max(0.0).min(h - 1.0);
        let sx = ((x as f64 + 0.5) * w / ow as f64 - 0.5).max(0.0).min(w - 1.0);
        let mut acc = 0.0;
        for (iy, row) in src.iter().enumerate() {
            for (ix, &v) in row.iter().enumerate() {
                let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                acc += wy * wx * v;
            }
        }
        acc
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::InvalidDims(_))));
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::InvalidDims(_))));
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn constant_map_stays_constant() {
        let t = Tensor::filled(vec![5, 7], 0.3).unwrap();
        for (h, w) in [(1, 1), (3, 11), (10, 14), (17, 2)] {
            let r = resize_bilinear(&t, h, w).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn identity_resize_is_bit_identical() {
        let t = Tensor::from_fn_2d(6, 9, |r, c| ((r * 31 + c * 17) % 13) as f64 / 13.0).unwrap();
        assert_eq!(resize_bilinear(&t, 6, 9).unwrap(), t);
    }

    #[test]
    fn checkerboard_upsample_matches_oracle() {
        let src = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&t, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = bilinear_oracle(&src, y, x, 4, 4);
                assert!((r.data()[y * 4 + x] - want).abs() < 1e-12, "({y},{x})");
            }
        }
        // corners replicate, the interior ring blends
        assert_eq!(r.data()[0], 0.0);
        assert!((r.data()[5] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn zero_target_is_rejected() {
        let t = Tensor::filled(vec![2, 2], 1.0).unwrap();
        assert!(matches!(resize_bilinear(&t, 0, 3), Err(Error::InvalidDims(_))));
    }

    proptest::proptest! {
        #[test]
        fn resize_stays_within_bounds(
            h in 1usize..9, w in 1usize..9, oh in 1usize..15, ow in 1usize..15,
            seed in proptest::collection::vec(-5.0f64..5.0, 81),
        ) {
            let t = Tensor::from_fn_2d(h, w, |r, c| seed[r * 9 + c]).unwrap();
            let r = resize_bilinear(&t, oh, ow).unwrap();
            let (lo, hi) = (t.min(), t.max());
            proptest::prop_assert!(r.data().iter().all(|&v| v >= lo && v <= hi));
            let src: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|x| seed[y * 9 + x]).collect()).collect();
            for y in 0..oh {
                for x in 0..ow {
                    let want = bilinear_oracle(&src, y, x, oh, ow);
                    proptest::prop_assert!((r.data()[y * ow + x] - want).abs() < 1e-9);
                }
            }
        }
    }
}
