//! Dense NCHW tensors of `f32`.
//!
//! Every image, feature map and gradient in the crate lives in a [`Tensor`].
//! Layout is fixed row-major with width innermost, so a `(b, c)` plane is a
//! contiguous `h * w` slice.

use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

fn checked_len(shape: Shape) -> Result<usize> {
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Size(format!("extent product of {shape:?} overflows")))?;
    if len > isize::MAX as usize / std::mem::size_of::<f32>() {
        return Err(Error::Size(format!(
            "{shape:?} needs {len} elements, more than addressable"
        )));
    }
    Ok(len)
}

impl Tensor {
    /// Tensor of the given shape with every element set to `value`.
    pub fn new_filled(shape: Shape, value: f32) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; len],
        })
    }

    /// Zero tensor. Panics on shapes whose size overflows; use
    /// [`Tensor::new_filled`] for untrusted shapes.
    pub fn zeros(shape: Shape) -> Self {
        Self::new_filled(shape, 0.0).expect("tensor shape overflows")
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(shape)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {shape:?} ({len} elements)",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Single-plane `(1, 1, h, w)` tensor.
    pub fn plane(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_vec([1, 1, height, width], data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + y) * ws + x
    }

    /// Inverse of [`Tensor::offset`].
    pub fn index_of(&self, offset: usize) -> (usize, usize, usize, usize) {
        let [_, cs, hs, ws] = self.shape;
        let x = offset % ws;
        let rest = offset / ws;
        let y = rest % hs;
        let rest = rest / hs;
        (rest / cs, rest % cs, y, x)
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(b, c, y, x);
        self.data[i] = value;
    }

    /// Number of elements in one sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn plane_slice(&self, b: usize, c: usize) -> &[f32] {
        let n = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// `self[i] += alpha * src[i]`.
    pub fn axpy_into(&mut self, alpha: f32, src: &Tensor) -> Result<()> {
        if self.shape != src.shape {
            return Err(Error::shape(format!(
                "axpy between {:?} and {:?}",
                self.shape, src.shape
            )));
        }
        axpy(&mut self.data, alpha, &src.data);
        Ok(())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot between {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut batch = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        for t in parts {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([batch, c, h, w], data)
    }

    /// Copies the window `[y0, y0 + h) x [x0, x0 + w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let [b, c, hs, ws] = self.shape;
        if y0 + h > hs || x0 + w > ws {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {hs}x{ws}"
            )));
        }
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            let plane = &self.data[p * hs * ws..(p + 1) * hs * ws];
            for y in y0..y0 + h {
                out.extend_from_slice(&plane[y * ws + x0..y * ws + x0 + w]);
            }
        }
        Tensor::from_vec([b, c, h, w], out)
    }
}

pub(crate) fn axpy(dst: &mut [f32], alpha: f32, src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Mean of squared differences over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "mse between {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    if a.is_empty() {
        return Err(Error::Domain("mse of empty tensors".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_filled_examples() {
        let t = Tensor::new_filled([1, 1, 2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new_filled([2, 3, 4, 5], 1.5).unwrap();
        assert_eq!(t.len(), 120);
        assert!(t.data().iter().all(|&v| v == 1.5));
        let t = Tensor::new_filled([1, 0, 5, 5], 7.0).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn new_filled_overflow() {
        let err = Tensor::new_filled([usize::MAX, 2, 1, 1], 0.0).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
        let err = Tensor::new_filled([1 << 31, 1 << 31, 1, 1], 0.0).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
    }

    fn row(v: &[f32]) -> Tensor {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        let mut d = row(&[1.0, 2.0]);
        d.axpy_into(0.0, &row(&[9.0, 9.0])).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);

        let mut d = row(&[1.0, 2.0]);
        d.axpy_into(1.0, &row(&[3.0, 4.0])).unwrap();
        assert_eq!(d.data(), &[4.0, 6.0]);

        let mut d = row(&[0.0, 0.0]);
        d.axpy_into(-0.5, &row(&[2.0, 4.0])).unwrap();
        assert_eq!(d.data(), &[-1.0, -2.0]);
    }

    #[test]
    fn axpy_shape_mismatch() {
        let mut d = row(&[0.0, 0.0]);
        assert!(matches!(
            d.axpy_into(1.0, &row(&[1.0, 2.0, 3.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mse_examples() {
        let a = row(&[0.3, -2.0, 5.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&row(&[1.0; 4]), &row(&[0.0; 4])).unwrap(), 1.0);
        assert_eq!(mse(&row(&[1.0, 3.0]), &row(&[2.0, 1.0])).unwrap(), 2.5);
    }

    #[test]
    fn mse_errors() {
        let e = Tensor::zeros([0, 1, 1, 1]);
        assert!(matches!(mse(&e, &e), Err(Error::Domain(_))));
        assert!(matches!(
            mse(&row(&[1.0]), &row(&[1.0, 2.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let c = t.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let s = Tensor::stack(&[&c, &c]).unwrap();
        assert_eq!(s.shape(), [2, 1, 2, 2]);
        assert!(t.crop(2, 2, 2, 2).is_err());
    }

    fn small_shape() -> impl Strategy<Value = Shape> {
        [1usize..4, 1usize..4, 1usize..6, 1usize..6]
    }

    proptest! {
        #[test]
        fn index_offset_round_trip(shape in small_shape(), seed in 0usize..1000) {
            let t = Tensor::zeros(shape);
            let off = seed % t.len();
            let (b, c, y, x) = t.index_of(off);
            prop_assert_eq!(t.offset(b, c, y, x), off);
        }

        #[test]
        fn reshape_to_same_shape_is_identity(shape in small_shape()) {
            let n: usize = shape.iter().product();
            let t = Tensor::from_vec(shape, (0..n).map(|v| v as f32 * 0.5).collect()).unwrap();
            let flat = t.clone().reshape([1, 1, 1, n]).unwrap();
            prop_assert_eq!(flat.reshape(shape).unwrap(), t);
        }

        #[test]
        fn mse_symmetric_nonnegative(a in prop::collection::vec(-10f32..10.0, 1..32),
                                     b in prop::collection::vec(-10f32..10.0, 1..32)) {
            let n = a.len().min(b.len());
            let (ta, tb) = (row(&a[..n]), row(&b[..n]));
            let ab = mse(&ta, &tb).unwrap();
            prop_assert_eq!(ab, mse(&tb, &ta).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a[..n] == b[..n]);
        }

        #[test]
        fn axpy_is_linear(d in prop::collection::vec(-4i32..4, 1..16),
                          s in prop::collection::vec(-4i32..4, 16),
                          alpha in -4i32..4, beta in -4i32..4) {
            // small integers keep every intermediate exact in f32
            let n = d.len();
            let dst = row(&d.iter().map(|&v| v as f32).collect::<Vec<_>>());
            let src = row(&s[..n].iter().map(|&v| v as f32).collect::<Vec<_>>());
            let mut twice = dst.clone();
            twice.axpy_into(alpha as f32, &src).unwrap();
            twice.axpy_into(beta as f32, &src).unwrap();
            let mut once = dst;
            once.axpy_into((alpha + beta) as f32, &src).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
