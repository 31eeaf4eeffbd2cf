//! Dense row-major tensors and the numeric kernels shared by the eager and
//! taped execution paths.

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::TensorError;

/// Floating-point element type accepted by [`Tensor`].
pub trait Element:
    Float + FromPrimitive + AddAssign + SubAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self, TensorError> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Number of leading rows when the tensor is viewed as `[rows × rest]`.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let rows = self.rows();
        if start > end || end > rows || self.shape.is_empty() {
            return Err(TensorError::Invalid(format!(
                "row range {start}..{end} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let stride = self.data.len() / rows.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Converts element type (used for f32 <-> f64 round trips in tests and checkpoints).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

fn dims2<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn dims4<T: Element>(
    t: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize, usize), TensorError> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: s.to_vec(),
        }),
    }
}

/// Accumulates `out[M×N] += a[M×K] · b[K×N]`. Zero entries of `a` are skipped,
/// which makes products with binary spike matrices cheap.
fn gemm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `a[M×K] · bᵀ` where `b` is `[N×K]`.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = dims2(a, "matmul_nt")?;
    let (n, k2) = dims2(b, "matmul_nt")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` where `a` is `[K×M]` and `b` is `[K×N]`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (k, m) = dims2(a, "matmul_tn")?;
    let (k2, n) = dims2(b, "matmul_tn")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds `row[N]` to every row of `x[M×N]`.
pub fn add_row<T: Element>(x: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (_, n) = dims2(x, "add_row")?;
    if row.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "add_row",
            left: x.shape().to_vec(),
            right: row.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(n) {
        for (o, &b) in chunk.iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Geometry of a 2-D convolution over a `[B×C×H×W]` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (batch, in_ch, height, width) = dims4(input, "conv2d")?;
        let (out_ch, kc, kh, kw) = dims4(kernel, "conv2d")?;
        if kc != in_ch || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        let (out_h, out_w) = conv_output_hw(height, width, kh, stride, padding)?;
        Ok(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output height/width of a convolution, or an error for invalid geometry.
pub fn conv_output_hw(
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize), TensorError> {
    if stride == 0 {
        return Err(TensorError::Invalid("conv2d stride must be positive".into()));
    }
    if k == 0 || k > height + 2 * padding || k > width + 2 * padding {
        return Err(TensorError::Invalid(format!(
            "conv2d kernel {k} exceeds padded input {}x{}",
            height + 2 * padding,
            width + 2 * padding
        )));
    }
    Ok((
        (height + 2 * padding - k) / stride + 1,
        (width + 2 * padding - k) / stride + 1,
    ))
}

/// Unfolds input patches into `[B·H'·W' × C·k·k]`.
pub fn im2col<T: Element>(input: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let plen = g.patch_len();
    let npos = g.positions();
    let mut cols = vec![T::zero(); g.batch * npos * plen];
    let x = input.data();
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * npos + oy * g.out_w + ox) * plen;
                for c in 0..g.in_ch {
                    let plane = ((b * g.in_ch + c) * g.height) * g.width;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            cols[row + (c * g.kernel + ky) * g.kernel + kx] =
                                x[plane + iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.batch * npos, plen],
        data: cols,
    }
}

/// Folds patch gradients back onto the input grid (adjoint of [`im2col`]).
pub fn col2im<T: Element>(cols: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let plen = g.patch_len();
    let npos = g.positions();
    let mut out = vec![T::zero(); g.batch * g.in_ch * g.height * g.width];
    let cd = cols.data();
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * npos + oy * g.out_w + ox) * plen;
                for c in 0..g.in_ch {
                    let plane = ((b * g.in_ch + c) * g.height) * g.width;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            out[plane + iy as usize * g.width + ix as usize] +=
                                cd[row + (c * g.kernel + ky) * g.kernel + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.batch, g.in_ch, g.height, g.width],
        data: out,
    }
}

/// Convolution result together with the unfolded input needed for the kernel gradient.
pub struct ConvOutput<T> {
    pub output: Tensor<T>,
    pub cols: Tensor<T>,
    pub geometry: ConvGeometry,
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `[B×C×H×W]`, `kernel` is `[O×C×k×k]`, `bias` is `[O]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<ConvOutput<T>, TensorError> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_ch {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: kernel.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    let cols = im2col(input, &g);
    let kmat = Tensor {
        shape: vec![g.out_ch, g.patch_len()],
        data: kernel.data().to_vec(),
    };
    // [B·P × O]
    let flat = matmul_nt(&cols, &kmat)?;
    let npos = g.positions();
    let mut out = vec![T::zero(); g.batch * g.out_ch * npos];
    let fd = flat.data();
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let bias_v = bias.map_or(T::zero(), |t| t.data()[o]);
            let dst = &mut out[(b * g.out_ch + o) * npos..(b * g.out_ch + o + 1) * npos];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = fd[(b * npos + p) * g.out_ch + o] + bias_v;
            }
        }
    }
    Ok(ConvOutput {
        output: Tensor {
            shape: vec![g.batch, g.out_ch, g.out_h, g.out_w],
            data: out,
        },
        cols,
        geometry: g,
    })
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`. `d_input` is only
/// computed when requested.
pub fn conv2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    cols: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let npos = g.positions();
    // Rearrange [B×O×P] to [B·P × O].
    let mut go = vec![T::zero(); g.batch * npos * g.out_ch];
    let gd = grad_out.data();
    let mut d_bias = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &gd[(b * g.out_ch + o) * npos..(b * g.out_ch + o + 1) * npos];
            for (p, &v) in src.iter().enumerate() {
                go[(b * npos + p) * g.out_ch + o] = v;
                d_bias[o] += v;
            }
        }
    }
    let go = Tensor {
        shape: vec![g.batch * npos, g.out_ch],
        data: go,
    };
    let d_kernel = matmul_tn(&go, cols).expect("conv grad shapes agree");
    let d_kernel = Tensor {
        shape: kernel.shape().to_vec(),
        data: d_kernel.into_data(),
    };
    let d_input = need_input.then(|| {
        let kmat = Tensor {
            shape: vec![g.out_ch, g.patch_len()],
            data: kernel.data().to_vec(),
        };
        let dcols = matmul(&go, &kmat).expect("conv grad shapes agree");
        col2im(&dcols, g)
    });
    (
        d_input,
        d_kernel,
        Tensor {
            shape: vec![g.out_ch],
            data: d_bias,
        },
    )
}

/// Max pooling over `[B×C×H×W]` with truncating windows. Returns the pooled
/// tensor and, per output element, the flat input index of the selected maximum
/// (first index on ties).
pub fn maxpool2d<T: Element>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let (b, c, h, w) = dims4(input, "maxpool2d")?;
    if k == 0 || k > h || k > w {
        return Err(TensorError::Invalid(format!(
            "maxpool window {k} exceeds input {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(TensorError::Invalid("maxpool stride must be positive".into()));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![b, c, oh, ow],
            data: out,
        },
        arg,
    ))
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Spike convention: 1 iff `x >= 0`.
pub fn heaviside<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i, &m).unwrap(), m);
    }

    #[test]
    fn orthogonal_rows() {
        let a = t(&[1, 2], &[1.0, 0.0]);
        let b = t(&[2, 1], &[0.0, 5.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        let direct = matmul(&a, &b).unwrap();
        let bt = t(&[2, 3], &[0.5, 2.0, 1.0, -1.0, 0.0, 3.0]);
        assert_eq!(matmul_nt(&a, &bt).unwrap(), direct);
        let at = t(&[3, 2], &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(matmul_tn(&at, &b).unwrap(), direct);
    }

    #[test]
    fn conv_mnist_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 1, 28, 28]);
        let k = Tensor::<f32>::zeros(&[4, 1, 5, 5]);
        let out = conv2d(&x, &k, None, 2, 2).unwrap().output;
        assert_eq!(out.shape(), &[1, 4, 14, 14]);
        assert_eq!(out.len(), 784);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let out = conv2d(&x, &k, None, 1, 0).unwrap().output;
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_applies_bias_and_padding() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let bias = t(&[1], &[0.5]);
        let out = conv2d(&x, &k, Some(&bias), 1, 1).unwrap().output;
        assert_eq!(out.data(), &[4.5, 4.5, 4.5, 4.5]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, None, 0, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = Tensor::<f64>::from_fn(&[2, 2, 5, 5], |i| (i as f64 * 0.37).sin());
        let k = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let g = ConvGeometry::new(&x, &k, 2, 1).unwrap();
        let cols = im2col(&x, &g);
        let c = Tensor::<f64>::from_fn(cols.shape(), |i| (i as f64 * 0.11).cos());
        let lhs: f64 = cols.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, &g);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().1, vec![0]);
    }

    #[test]
    fn maxpool_truncates_and_rejects_large_window() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().0.shape(), &[1, 1, 2, 2]);
        assert!(maxpool2d(&x, 6, 1).is_err());
    }

    #[test]
    fn maxpool_of_binary_is_binary() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 6, 6], |i| ((i * 7) % 3 == 0) as u8 as f32);
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn heaviside_at_threshold_is_one() {
        assert_eq!(heaviside(0.0f64), 1.0);
        assert_eq!(heaviside(-1e-12f64), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
