//! Counter-based Gaussian noise.
//!
//! Every increment is a pure function of `(seed, stream, path, step)`, so a
//! batch is bit-identical no matter how work is split across threads, and any
//! single increment can be recomputed on demand instead of stored. A 64-bit
//! key is hashed per counter and mapped through the inverse normal CDF.

use crate::real::Real;

/// Noise stream of the primary path batch.
pub const STREAM_MAIN: u64 = 0;
/// Independent stream used to estimate scenario constants.
pub const STREAM_CONSTANTS: u64 = 1;
/// Parent stream for nested inner simulations.
pub const STREAM_INNER: u64 = 2;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; bijective on `u64` with strong avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn combine(h: u64, v: u64) -> u64 {
    mix(h ^ v.wrapping_mul(GAMMA).wrapping_add(0x1656_67B1_9E37_79F9))
}

/// Key identifying one noise stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey(u64);

impl NoiseKey {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseKey(combine(combine(mix(seed.wrapping_add(GAMMA)), stream), 0x5851_F42D_4C95_7F2D))
    }

    /// Derives an independent sub-stream, e.g. one per outer path of a
    /// nested estimator.
    pub fn child(self, salt: u64) -> Self {
        NoiseKey(combine(self.0, salt.wrapping_add(1)))
    }

    /// Uniform variate in the open interval (0, 1).
    #[inline]
    pub fn uniform(self, path: u64, step: u64) -> f64 {
        let h = combine(combine(self.0, path), step);
        ((h >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal variate for counter `(path, step)`.
    #[inline]
    pub fn normal(self, path: u64, step: u64) -> f64 {
        inv_norm_cdf(self.uniform(path, step))
    }

    /// Normal variate scaled by `scale`, rounded to the working precision.
    #[inline]
    pub fn normal_scaled<R: Real>(self, path: u64, step: u64, scale: R) -> R {
        R::of(self.normal(path, step)) * scale
    }
}

/// Inverse standard normal CDF (Wichura's PPND16), accurate to full double
/// precision for p in (0, 1).
pub fn inv_norm_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = (((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r)
            + 1.0;
        return num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_9)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_3e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}
