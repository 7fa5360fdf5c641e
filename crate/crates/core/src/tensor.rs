//! Dense row-major tensors and the GEMM kernels everything else is built on.
//!
//! All matrix products accumulate over the inner dimension in ascending
//! order starting from `0.0`, so results are bit-reproducible and match a
//! naive triple loop exactly.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// 2-D matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// 2-D matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => shape_err(format!("expected a matrix, got shape {:?}", s)),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            0
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `alpha * self + beta * other`, elementwise.
    pub fn axpby(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

/// `a (M×K) · b (K×N)`.
pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return shape_err(format!(
            "gemm inner dims differ: {}x{} · {}x{}",
            m, k, kb, n
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a (M×K) · bᵀ` where `b` is N×K.
pub fn gemm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return shape_err(format!(
            "gemm_nt inner dims differ: {}x{} · ({}x{})ᵀ",
            m, k, n, kb
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` where `a` is K×M and `b` is K×N.
pub fn gemm_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return shape_err(format!(
            "gemm_tn inner dims differ: ({}x{})ᵀ · {}x{}",
            k, m, kb, n
        ));
    }
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let a_row = &a.data[kk * m..(kk + 1) * m];
        let b_row = &b.data[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Geometry of a 2-D convolution (no dilation, no groups).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config(format!(
                "conv stride and kernel dims must be >= 1: {:?}",
                self
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "conv channels must be >= 1: {:?}",
                self
            )));
        }
        Ok(())
    }

    /// Row length of the GEMM-form weight matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = height + 2 * self.padding;
        let pw = width + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return shape_err(format!(
                "{}x{} kernel exceeds padded input {}x{}",
                self.kernel_h, self.kernel_w, ph, pw
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

fn conv_input_dims(input: &Tensor, spec: &ConvSpec) -> Result<(usize, usize)> {
    match *input.shape() {
        [c, h, w] if c == spec.in_channels => Ok((h, w)),
        ref s => shape_err(format!(
            "conv input must be {}xHxW, got {:?}",
            spec.in_channels, s
        )),
    }
}

/// Lower a `C×H×W` input to the `(C·kh·kw) × (out_h·out_w)` patch matrix.
///
/// Row index is `c·kh·kw + i·kw + j`; column index is `oy·out_w + ox`.
pub fn im2col(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, w) = conv_input_dims(input, spec)?;
    let (oh, ow) = spec.output_dims(h, w)?;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let cols = oh * ow;
    let mut out = vec![0.0; spec.patch_len() * cols];
    let src = input.data();
    for c in 0..spec.in_channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let y = oy * s + i;
                    if y < p || y - p >= h {
                        continue;
                    }
                    let y = y - p;
                    for ox in 0..ow {
                        let x = ox * s + j;
                        if x < p || x - p >= w {
                            continue;
                        }
                        dst[oy * ow + ox] = src[(c * h + y) * w + (x - p)];
                    }
                }
            }
        }
    }
    Tensor::matrix(spec.patch_len(), cols, out)
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a `C×H×W` image.
pub fn col2im(cols: &Tensor, spec: &ConvSpec, height: usize, width: usize) -> Result<Tensor> {
    let (oh, ow) = spec.output_dims(height, width)?;
    let (r, n) = cols.dims2()?;
    if r != spec.patch_len() || n != oh * ow {
        return shape_err(format!(
            "col2im expects {}x{}, got {}x{}",
            spec.patch_len(),
            oh * ow,
            r,
            n
        ));
    }
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let mut out = vec![0.0; spec.in_channels * height * width];
    for c in 0..spec.in_channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &cols.data()[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let y = oy * s + i;
                    if y < p || y - p >= height {
                        continue;
                    }
                    let y = y - p;
                    for ox in 0..ow {
                        let x = ox * s + j;
                        if x < p || x - p >= width {
                            continue;
                        }
                        out[(c * height + y) * width + (x - p)] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    Tensor::new(vec![spec.in_channels, height, width], out)
}

/// Convolution as `weights · im2col(input)`, reshaped to `out_channels×out_h×out_w`.
pub fn conv2d_gemm(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (rows, cols) = weights.dims2()?;
    if rows != spec.out_channels || cols != spec.patch_len() {
        return shape_err(format!(
            "conv weights must be {}x{}, got {}x{}",
            spec.out_channels,
            spec.patch_len(),
            rows,
            cols
        ));
    }
    let (h, w) = conv_input_dims(input, spec)?;
    let (oh, ow) = spec.output_dims(h, w)?;
    gemm(weights, &im2col(input, spec)?)?.reshape(vec![spec.out_channels, oh, ow])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.cols();
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at(i, kk) * b.at(kk, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Sliding-window convolution straight from the definition.
    fn direct_conv(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; spec.out_channels * oh * ow];
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * s + i) as isize - p as isize;
                                let x = (ox * s + j) as isize - p as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                let v = input.data()[(c * h + y as usize) * w + x as usize];
                                acc += weights.at(o, (c * kh + i) * kw + j) * v;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![spec.out_channels, oh, ow], out).unwrap()
    }

    #[test]
    fn gemm_identity_and_hand_case() {
        let b = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(gemm(&Tensor::identity(2), &b).unwrap(), b);

        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[5.0], [6.0]]);
        assert_eq!(gemm(&a, &b).unwrap(), Tensor::from_rows(&[[17.0], [39.0]]));
    }

    #[test]
    fn gemm_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = gemm(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn transposed_variants_agree_with_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 6, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let c = random_matrix(&mut rng, 6, 3);
        assert_eq!(
            gemm_nt(&a, &b).unwrap(),
            gemm(&a, &b.transpose().unwrap()).unwrap()
        );
        assert_eq!(
            gemm_tn(&a, &c).unwrap(),
            gemm(&a.transpose().unwrap(), &c).unwrap()
        );
    }

    #[test]
    fn gemm_rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(gemm(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn im2col_one_by_one_is_reshape() {
        let spec = ConvSpec {
            in_channels: 3,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let data: Vec<f64> = (0..3 * 4 * 5).map(f64::from).collect();
        let input = Tensor::new(vec![3, 4, 5], data.clone()).unwrap();
        let cols = im2col(&input, &spec).unwrap();
        assert_eq!(cols.shape(), &[3, 20]);
        assert_eq!(cols.data(), data.as_slice());
    }

    #[test]
    fn im2col_enumerates_patches() {
        // 3x3 image 1..9, 2x2 kernel: patches in raster order.
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let cols = im2col(&input, &spec).unwrap();
        let patches = [
            [1., 2., 4., 5.],
            [2., 3., 5., 6.],
            [4., 5., 7., 8.],
            [5., 6., 8., 9.],
        ];
        assert_eq!(cols.shape(), &[4, 4]);
        for (p, patch) in patches.iter().enumerate() {
            for (r, v) in patch.iter().enumerate() {
                assert_eq!(cols.at(r, p), *v);
            }
        }
    }

    #[test]
    fn im2col_rejects_oversized_window() {
        let input = Tensor::zeros(vec![1, 2, 2]);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 0,
        };
        assert!(matches!(im2col(&input, &spec), Err(Error::Shape(_))));
        let padded = ConvSpec { padding: 1, ..spec };
        assert!(im2col(&input, &padded).is_ok());
    }

    #[test]
    fn conv_trivial_cases() {
        let input = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let ident = conv2d_gemm(&input, &Tensor::from_rows(&[[1.0]]), &spec).unwrap();
        assert_eq!(ident.data(), input.data());

        let spec3 = ConvSpec {
            out_channels: 2,
            kernel_h: 3,
            kernel_w: 3,
            padding: 1,
            ..spec
        };
        let zero = conv2d_gemm(&input, &Tensor::zeros(vec![2, 9]), &spec3).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_direct_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 200 {
            let spec = ConvSpec {
                in_channels: rng.random_range(1..=4),
                out_channels: rng.random_range(1..=4),
                kernel_h: rng.random_range(1..=4),
                kernel_w: rng.random_range(1..=4),
                stride: rng.random_range(1..=3),
                padding: rng.random_range(0..=2),
            };
            let h = rng.random_range(1..=8);
            let w = rng.random_range(1..=8);
            if spec.output_dims(h, w).is_err() {
                continue;
            }
            let input = Tensor::new(
                vec![spec.in_channels, h, w],
                (0..spec.in_channels * h * w)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let weights = random_matrix(&mut rng, spec.out_channels, spec.patch_len());
            let got = conv2d_gemm(&input, &weights, &spec).unwrap();
            let want = direct_conv(&input, &weights, &spec);
            assert_eq!(got.shape(), want.shape());
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() <= 1e-12, "{} vs {} for {:?}", x, y, spec);
            }
            checked += 1;
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
        };
        let (h, w) = (5, 6);
        let x = Tensor::new(
            vec![2, h, w],
            (0..2 * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let cols = im2col(&x, &spec).unwrap();
        let y = random_matrix(&mut rng, cols.rows(), cols.cols());
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &spec, h, w).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zeroed_weight_row_zeroes_exactly_that_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let input = Tensor::new(
            vec![2, 5, 5],
            (0..50).map(|_| rng.random_range(0.1..1.0)).collect(),
        )
        .unwrap();
        let mut weights = random_matrix(&mut rng, 4, 18);
        weights.row_mut(2).fill(0.0);
        let out = conv2d_gemm(&input, &weights, &spec).unwrap();
        let plane = 25;
        for o in 0..4 {
            let chan = &out.data()[o * plane..(o + 1) * plane];
            if o == 2 {
                assert!(chan.iter().all(|v| *v == 0.0));
            } else {
                assert!(chan.iter().any(|v| *v != 0.0));
            }
        }
    }

    proptest! {
        #[test]
        fn gemm_is_linear(
            seed in any::<u64>(),
            m in 1usize..6, k in 1usize..6, n in 1usize..6,
            alpha in -1.0f64..1.0, beta in -1.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, m, k);
            let a2 = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let lhs = gemm(&a.axpby(alpha, &a2, beta).unwrap(), &b).unwrap();
            let rhs = gemm(&a, &b).unwrap().axpby(alpha, &gemm(&a2, &b).unwrap(), beta).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
