//! Element-type abstraction: training runs in `f32`, gradient checks in `f64`.

use std::any::TypeId;
use std::fmt;

/// Floating-point element supported by the tensor engine.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy cast from `f64` (named to avoid clashing with `FromPrimitive`).
    fn cast(v: f64) -> Self;
    fn to64(self) -> f64;

    fn is_f32() -> bool {
        TypeId::of::<Self>() == TypeId::of::<f32>()
    }
}

impl Scalar for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn to64(self) -> f64 {
        self
    }
}

/// `c = alpha * a @ b + beta * c` for 2-d views with arbitrary strides,
/// dispatching to the packed f32/f64 kernels at runtime.
pub fn gemm<F: Scalar>(
    alpha: F,
    a: &ndarray::ArrayView2<F>,
    b: &ndarray::ArrayView2<F>,
    beta: F,
    c: &mut ndarray::ArrayViewMut2<F>,
) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "gemm inner dims: {k} vs {k2}");
    assert_eq!(c.dim(), (m, n), "gemm output dims");
    let (rsa, csa) = (a.strides()[0], a.strides()[1]);
    let (rsb, csb) = (b.strides()[0], b.strides()[1]);
    let (rsc, csc) = (c.strides()[0], c.strides()[1]);
    unsafe {
        if TypeId::of::<F>() == TypeId::of::<f32>() {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha.to64() as f32,
                a.as_ptr() as *const f32,
                rsa,
                csa,
                b.as_ptr() as *const f32,
                rsb,
                csb,
                beta.to64() as f32,
                c.as_mut_ptr() as *mut f32,
                rsc,
                csc,
            );
        } else {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha.to64(),
                a.as_ptr() as *const f64,
                rsa,
                csa,
                b.as_ptr() as *const f64,
                rsb,
                csb,
                beta.to64(),
                c.as_mut_ptr() as *mut f64,
                rsc,
                csc,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    #[test]
    fn gemm_matches_naive() {
        let a = array![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[7.0f64, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let mut c = ndarray::Array2::zeros((2, 2));
        super::gemm(1.0, &a.view(), &b.view(), 0.0, &mut c.view_mut());
        assert_eq!(c, array![[58.0, 64.0], [139.0, 154.0]]);
    }
}
