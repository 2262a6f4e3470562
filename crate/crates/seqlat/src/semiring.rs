//! Semiring values and operations shared by every lattice computation.
//!
//! Three semirings over `f64`:
//!
//! - real: `(R+, +, *, 0, 1)` — weights are probabilities; only usable on
//!   tiny instances before underflow.
//! - log: `(R u {inf}, logadd, +, inf, 0)` — weights are negative log
//!   scores; the workhorse for training and normalizers.
//! - tropical: `(R u {inf}, min, +, inf, 0)` — Viterbi / max-path decoding.
//!
//! Log and real are isomorphic under `w -> exp(-w)`. `f64::INFINITY` is the
//! canonical zero element of the log and tropical semirings. Negative values
//! are legal log/tropical weights: globally normalized models place no sign
//! constraint on transition scores.

/// A lattice weight. Interpretation depends on the active [`Semiring`]:
/// probability (real) or negative log score (log, tropical).
pub type Weight = f64;

/// Semiring selector. All operations are total on valid inputs and never
/// produce NaN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Semiring {
    Real,
    Log,
    Tropical,
}

impl Semiring {
    /// Additive identity (`0̄`).
    #[inline]
    pub fn zero(self) -> Weight {
        match self {
            Semiring::Real => 0.0,
            Semiring::Log | Semiring::Tropical => f64::INFINITY,
        }
    }

    /// Multiplicative identity (`1̄`).
    #[inline]
    pub fn one(self) -> Weight {
        match self {
            Semiring::Real => 1.0,
            Semiring::Log | Semiring::Tropical => 0.0,
        }
    }

    /// Semiring addition: combines parallel paths.
    #[inline]
    pub fn plus(self, a: Weight, b: Weight) -> Weight {
        match self {
            Semiring::Real => a + b,
            Semiring::Log => log_add(a, b),
            Semiring::Tropical => a.min(b),
        }
    }

    /// Semiring multiplication: sequences path segments. `0̄` is absorbing.
    #[inline]
    pub fn times(self, a: Weight, b: Weight) -> Weight {
        match self {
            Semiring::Real => a * b,
            // inf + finite = inf, so absorption is automatic.
            Semiring::Log | Semiring::Tropical => a + b,
        }
    }

    /// Whether `w` is this semiring's `0̄`.
    #[inline]
    pub fn is_zero(self, w: Weight) -> bool {
        w == self.zero()
    }
}

/// Stable `-log(exp(-a) + exp(-b))`.
///
/// Computed as `min(a, b) - log1p(exp(-|a - b|))`; for large `|a - b|` the
/// inner exp underflows to zero and the result degrades gracefully to
/// `min(a, b)`. Infinite inputs short-circuit so that `inf` acts as the
/// additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::INFINITY {
        return b;
    }
    if b == f64::INFINITY {
        return a;
    }
    let m = a.min(b);
    m - (-(a - b).abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALL: [Semiring; 3] = [Semiring::Real, Semiring::Log, Semiring::Tropical];

    fn sample(k: Semiring, rng: &mut ChaCha8Rng) -> f64 {
        match k {
            Semiring::Real => rng.gen_range(0.0..10.0),
            Semiring::Log | Semiring::Tropical => rng.gen_range(-10.0..10.0),
        }
    }

    #[test]
    fn identities() {
        // Pinned from the semiring definitions.
        assert_eq!(Semiring::Log.zero(), f64::INFINITY);
        assert_eq!(Semiring::Log.one(), 0.0);
        assert_eq!(Semiring::Real.zero(), 0.0);
        assert_eq!(Semiring::Real.one(), 1.0);
        assert_eq!(Semiring::Tropical.zero(), f64::INFINITY);
        assert_eq!(Semiring::Tropical.one(), 0.0);
    }

    #[test]
    fn log_plus_examples() {
        // -log(e^0 + e^0) = -log 2
        let r = Semiring::Log.plus(0.0, 0.0);
        assert!((r - (-(2.0_f64).ln())).abs() < 1e-15);
        assert!((r + std::f64::consts::LN_2).abs() < 1e-15);
        // inf is the identity
        assert_eq!(Semiring::Log.plus(3.25, f64::INFINITY), 3.25);
        assert_eq!(Semiring::Log.plus(f64::INFINITY, -7.0), -7.0);
        assert_eq!(
            Semiring::Log.plus(f64::INFINITY, f64::INFINITY),
            f64::INFINITY
        );
    }

    #[test]
    fn tropical_plus_is_min() {
        assert_eq!(Semiring::Tropical.plus(3.0, 5.0), 3.0);
        assert_eq!(Semiring::Tropical.plus(5.0, 3.0), 3.0);
    }

    #[test]
    fn log_times_examples() {
        assert_eq!(Semiring::Log.times(1.5, 2.5), 4.0);
        assert_eq!(Semiring::Log.times(-3.0, f64::INFINITY), f64::INFINITY);
        assert_eq!(Semiring::Log.times(f64::INFINITY, 2.0), f64::INFINITY);
    }

    #[test]
    fn real_log_isomorphism_times() {
        let real = Semiring::Real.times(0.5, 0.5);
        assert_eq!(real, 0.25);
        let log = Semiring::Log.times(-(0.5_f64).ln(), -(0.5_f64).ln());
        assert!(((-log).exp() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn real_log_isomorphism_plus_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(-20.0..20.0);
            let b: f64 = rng.gen_range(-20.0..20.0);
            let via_log = (-Semiring::Log.plus(a, b)).exp();
            let via_real = Semiring::Real.plus((-a).exp(), (-b).exp());
            let rel = (via_log - via_real).abs() / via_real.abs().max(f64::MIN_POSITIVE);
            assert!(rel < 1e-12, "a={a} b={b} log={via_log} real={via_real}");
        }
    }

    #[test]
    fn log_plus_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ln2 = (2.0_f64).ln();
        for _ in 0..10_000 {
            let a = rng.gen_range(-50.0..50.0);
            let b = rng.gen_range(-50.0..50.0);
            let p = Semiring::Log.plus(a, b);
            let m = a.min(b);
            assert!(p <= m + 1e-12);
            assert!(p >= m - ln2 - 1e-12);
        }
    }

    #[test]
    fn algebra_laws_random_triples() {
        // Associativity/commutativity of plus, associativity of times,
        // distributivity, identities, absorption; 1e-12 absolute.
        let tol = 1e-12;
        for &k in &ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..10_000 {
                let a = sample(k, &mut rng);
                let b = sample(k, &mut rng);
                let c = sample(k, &mut rng);
                let close = |x: f64, y: f64| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs()));
                assert!(close(k.plus(a, k.plus(b, c)), k.plus(k.plus(a, b), c)));
                assert!(close(k.plus(a, b), k.plus(b, a)));
                assert!(close(k.times(a, k.times(b, c)), k.times(k.times(a, b), c)));
                assert!(close(
                    k.times(a, k.plus(b, c)),
                    k.plus(k.times(a, b), k.times(a, c))
                ));
                assert!(close(k.plus(a, k.zero()), a));
                assert!(close(k.times(a, k.one()), a));
                assert!(k.is_zero(k.times(a, k.zero())));
                assert!(k.is_zero(k.times(k.zero(), a)));
                assert!(!k.plus(a, b).is_nan() && !k.times(a, b).is_nan());
            }
        }
    }

    proptest! {
        #[test]
        fn log_add_never_nan_and_bounded(a in -1e6_f64..1e6, b in -1e6_f64..1e6) {
            let p = log_add(a, b);
            prop_assert!(!p.is_nan());
            prop_assert!(p <= a.min(b));
            prop_assert!(p >= a.min(b) - (2.0_f64).ln() - 1e-9);
        }
    }
}
