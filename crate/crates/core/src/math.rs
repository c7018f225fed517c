//! Small numeric helpers: logistic, normal distribution functions, seed
//! derivation, and content hashing.
//!
//! Everything here is deterministic and allocation-free so it can sit on the
//! hot path of batch rendering and scoring.

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_TWO_PI: f64 = 0.3989422804014327;
    INV_SQRT_TWO_PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, accurate to ~1e-15 (Hart rational approximation as
/// popularized by West's double-precision cumulative normal).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs();
    let c = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_475 {
            let b = 3.526_249_659_989_11e-2 * z + 0.700_383_064_443_688;
            let b = b * z + 6.373_962_203_531_65;
            let b = b * z + 33.912_866_078_383;
            let b = b * z + 112.079_291_497_871;
            let b = b * z + 221.213_596_169_931;
            let b = b * z + 220.206_867_912_376;
            let d = 8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64;
            let d = d * z + 16.064_177_579_207;
            let d = d * z + 86.780_732_202_946_1;
            let d = d * z + 296.564_248_779_674;
            let d = d * z + 637.333_633_378_831;
            let d = d * z + 793.826_512_519_948;
            let d = d * z + 440.413_735_824_752;
            e * b / d
        } else {
            let b = z + 0.65;
            let b = z + 4.0 / b;
            let b = z + 3.0 / b;
            let b = z + 2.0 / b;
            let b = z + 1.0 / b;
            e / (b * 2.506_628_274_631_000_5)
        }
    };
    if x > 0.0 {
        1.0 - c
    } else {
        c
    }
}

/// Inverse standard normal CDF. Acklam's rational approximation refined with
/// one Halley step against [`normal_cdf`], giving near machine precision.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0, 1), got {p}");

    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054; // 97.5th percentile
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let center = p + z2 / (2.0 * n_f);
    let spread = Z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    // At the boundary counts, center and spread cancel exactly in real
    // arithmetic; snap over the rounding residue.
    let lo = if successes == 0 { 0.0 } else { ((center - spread) / denom).max(0.0) };
    let hi = if successes == n { 1.0 } else { ((center + spread) / denom).min(1.0) };
    (lo, hi)
}

/// FNV-1a over a byte stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a base seed, a stream label, and an index.
///
/// This is the single seed-derivation rule used everywhere: per-sample latent
/// seeds, per-iteration batch seeds, and per-stage pipeline seeds all flow
/// from one global seed through this function, so any artifact can be
/// regenerated from the seeds it records.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut z = base
        ^ fnv1a(stream.as_bytes())
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
