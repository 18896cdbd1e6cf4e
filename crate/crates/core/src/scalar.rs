use nalgebra::RealField;
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the numerics are generic over: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + std::fmt::LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// A positive number far below any meaningful magnitude (`ε⁴`).
    fn tiny() -> Self {
        let e = Self::default_epsilon();
        e * e * e * e
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type C<T> = Complex<T>;

#[inline]
pub fn cplx<T: Real>(re: T, im: T) -> C<T> {
    Complex::new(re, im)
}

#[inline]
pub fn creal<T: Real>(re: T) -> C<T> {
    Complex::new(re, T::zero())
}

#[inline]
pub fn cabs<T: Real>(z: C<T>) -> T {
    z.re.hypot(z.im)
}

#[inline]
pub fn cexp<T: Real>(z: C<T>) -> C<T> {
    let m = z.re.exp();
    Complex::new(m * z.im.cos(), m * z.im.sin())
}

/// Principal branch of the square root.
pub fn csqrt<T: Real>(z: C<T>) -> C<T> {
    let r = cabs(z);
    if r == T::zero() {
        return Complex::new(T::zero(), T::zero());
    }
    let two = T::lit(2.0);
    let re = ((r + z.re) / two).sqrt();
    let im = ((r - z.re) / two).sqrt();
    Complex::new(re, if z.im < T::zero() { -im } else { im })
}

/// Natural logarithm of |z|, robust to values near the overflow range.
#[inline]
pub fn cln_abs<T: Real>(z: C<T>) -> T {
    let a = z.re.abs().max(z.im.abs());
    if a == T::zero() {
        return T::min_value().unwrap_or(T::lit(-1e300)).ln();
    }
    let (x, y) = (z.re / a, z.im / a);
    a.ln() + (x * x + y * y).ln() / T::lit(2.0)
}
