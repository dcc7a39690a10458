//! Double-double reals used as a high-precision reference.
//!
//! Arithmetic, `sqrt`, `exp`, `ln`, `tanh` and the functions built from them
//! carry about 32 significant digits. Functions the compute engine never
//! uses (trigonometry, `cbrt`, ...) are evaluated in `f64`.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

/// A real number carried as an unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Default, PartialEq)]
pub struct Extended {
    hi: f64,
    lo: f64,
}

/// Argument halvings before the Taylor series in `exp`.
const EXP_HALVINGS: i32 = 10;
const EXP_TERMS: usize = 14;
const LN2_LO: f64 = 2.319_046_813_846_299_6e-17;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Veltkamp split of `a` into two 26-bit halves.
#[inline]
fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

/// Exact product `a * b = p + e` (Dekker). Falls back to a fused
/// multiply-add where the split would overflow.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    if a.abs() > 1e300 || b.abs() > 1e300 {
        return (p, a.mul_add(b, -p));
    }
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Extended {
    #[inline]
    pub const fn from_f64(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    /// Normalizes `hi + lo`; non-finite values keep only `hi`.
    #[inline]
    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self::from_f64(hi);
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn ln2() -> Self {
        Self {
            hi: std::f64::consts::LN_2,
            lo: LN2_LO,
        }
    }

    #[inline]
    fn mul_f64(self, b: f64) -> Self {
        let (p1, p2) = two_prod(self.hi, b);
        Self::renorm(p1, p2 + self.lo * b)
    }

    fn scale_pow2(self, k: i32) -> Self {
        // Two exact steps so 2^k itself never overflows.
        let half = k / 2;
        let f = 2f64.powi(half);
        let g = 2f64.powi(k - half);
        Self {
            hi: self.hi * f * g,
            lo: self.lo * f * g,
        }
    }

    fn via_f64(self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_f64(f(self.hi + self.lo))
    }

    fn exp_impl(self) -> Self {
        let x = self.hi;
        if x.is_nan() {
            return Self::nan();
        }
        if x > 709.8 {
            return Self::infinity();
        }
        if x < -745.2 {
            return Self::zero();
        }
        let k = (x / std::f64::consts::LN_2).round();
        let r = (self - Self::ln2().mul_f64(k)).scale_pow2(-EXP_HALVINGS);
        // Taylor series of exp(r) - 1 keeps the small result precise through squaring.
        let mut term = r;
        let mut em1 = r;
        for n in 2..=EXP_TERMS {
            term = (term * r) / Self::from_f64(n as f64);
            em1 += term;
        }
        for _ in 0..EXP_HALVINGS {
            em1 = em1 * (em1 + Self::from_f64(2.0));
        }
        (em1 + Self::one()).scale_pow2(k as i32)
    }

    fn ln_impl(self) -> Self {
        let x = self.hi;
        if x.is_nan() || x < 0.0 {
            return Self::nan();
        }
        if x == 0.0 {
            return Self::neg_infinity();
        }
        if x.is_infinite() {
            return Self::infinity();
        }
        // Newton on exp(y) = x from the f64 estimate; one step doubles the digits.
        let y = Self::from_f64(x.ln());
        y + self * (-y).exp_impl() - Self::one()
    }
}

impl fmt::Debug for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Extended({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
    }
}

impl PartialOrd for Extended {
    #[inline]
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Add for Extended {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        let (s1, s2) = two_sum(self.hi, b.hi);
        if !s1.is_finite() {
            return Self::from_f64(s1);
        }
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Self::renorm(s1, s2 + t2)
    }
}

impl Sub for Extended {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for Extended {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Self::renorm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Extended {
    type Output = Self;
    #[inline]
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi.is_infinite() {
            return Self::from_f64(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Self { hi: q1, lo: q2 } + Self::from_f64(q3)
    }
}

impl Rem for Extended {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - (self / b).trunc() * b
    }
}

impl Neg for Extended {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

macro_rules! assign {
    ($atr:ident, $am:ident, $op:tt) => {
        impl $atr for Extended {
            #[inline]
            fn $am(&mut self, rhs: Self) {
                *self = *self $op rhs;
            }
        }
    };
}

assign!(AddAssign, add_assign, +);
assign!(SubAssign, sub_assign, -);
assign!(MulAssign, mul_assign, *);

impl Zero for Extended {
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Extended {
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Num for Extended {
    type FromStrRadixErr = num_traits::ParseFloatError;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64)
    }
}

impl ToPrimitive for Extended {
    fn to_i64(&self) -> Option<i64> {
        let t = self.trunc();
        if !t.hi.is_finite() {
            return None;
        }
        i64::try_from(t.hi as i128 + t.lo as i128).ok()
    }
    fn to_u64(&self) -> Option<u64> {
        let t = self.trunc();
        if !t.hi.is_finite() {
            return None;
        }
        u64::try_from(t.hi as i128 + t.lo as i128).ok()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for Extended {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::renorm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::renorm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Self::from_f64(n))
    }
    fn from_f32(n: f32) -> Option<Self> {
        Some(Self::from_f64(n as f64))
    }
}

impl NumCast for Extended {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::from_f64)
    }
}

macro_rules! in_f64 {
    ($($m:ident),*) => {
        $(fn $m(self) -> Self { self.via_f64(f64::$m) })*
    };
}

impl Float for Extended {
    in_f64!(cbrt, sin, cos, tan, asin, acos, atan, sinh, cosh, asinh, acosh, atanh);

    fn nan() -> Self {
        Self::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        Self::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::from_f64(-0.0)
    }
    fn min_value() -> Self {
        Self::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::from_f64(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Self::from_f64(f64::MAX)
    }
    fn epsilon() -> Self {
        Self::from_f64(2f64.powi(-104))
    }

    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }

    fn floor(self) -> Self {
        let f = self.hi.floor();
        if f == self.hi {
            Self::renorm(f, self.lo.floor())
        } else {
            Self::from_f64(f)
        }
    }

    fn ceil(self) -> Self {
        -(-self).floor()
    }

    fn round(self) -> Self {
        if self.hi < 0.0 {
            -(-self).round()
        } else {
            (self + Self::from_f64(0.5)).floor()
        }
    }

    fn trunc(self) -> Self {
        if self.hi < 0.0 {
            self.ceil()
        } else {
            self.floor()
        }
    }

    fn fract(self) -> Self {
        self - self.trunc()
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn signum(self) -> Self {
        Self::from_f64(self.hi.signum())
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }

    fn powf(self, n: Self) -> Self {
        (n * self.ln_impl()).exp_impl()
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::from_f64(self.hi.sqrt());
        }
        // One Newton correction of the f64 root.
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let (p1, p2) = two_prod(ax, ax);
        let resid = self - Self { hi: p1, lo: p2 };
        Self::from_f64(ax) + Self::from_f64(resid.hi * x * 0.5)
    }

    fn exp(self) -> Self {
        self.exp_impl()
    }

    fn exp2(self) -> Self {
        (self * Self::ln2()).exp_impl()
    }

    fn exp_m1(self) -> Self {
        self.exp_impl() - Self::one()
    }

    fn ln(self) -> Self {
        self.ln_impl()
    }

    fn ln_1p(self) -> Self {
        (self + Self::one()).ln_impl()
    }

    fn log(self, base: Self) -> Self {
        self.ln_impl() / base.ln_impl()
    }

    fn log2(self) -> Self {
        self.ln_impl() / Self::ln2()
    }

    fn log10(self) -> Self {
        self.ln_impl() / Self::from_f64(10.0).ln_impl()
    }

    fn tanh(self) -> Self {
        let e = (self.abs() * Self::from_f64(2.0)).exp_impl();
        let t = Self::one() - Self::from_f64(2.0) / (e + Self::one());
        if self.is_sign_negative() {
            -t
        } else {
            t
        }
    }

    fn max(self, other: Self) -> Self {
        if other.is_nan() || self >= other {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if other.is_nan() || self <= other {
            self
        } else {
            other
        }
    }

    fn abs_sub(self, other: Self) -> Self {
        if self <= other {
            Self::zero()
        } else {
            self - other
        }
    }

    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }

    fn atan2(self, other: Self) -> Self {
        Self::from_f64((self.hi + self.lo).atan2(other.hi + other.lo))
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn to_degrees(self) -> Self {
        self.via_f64(f64::to_degrees)
    }

    fn to_radians(self) -> Self {
        self.via_f64(f64::to_radians)
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}
