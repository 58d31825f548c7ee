//! Learning-rate schedules as pure functions of a 1-based iteration counter.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// `alpha1` at every iteration.
    Constant { alpha1: f64 },
    /// Within each cycle of `cycle` iterations the rate falls linearly from just below
    /// `alpha1` to exactly `alpha2`, then jumps back up.
    CyclicLinear { alpha1: f64, alpha2: f64, cycle: u64 },
    /// `base * (1 + cos(pi * (seg_start + epoch mod seg_len) / period))`: a window of a
    /// longer cosine-annealing run, replayed every `seg_len` epochs.
    CosineSegment {
        base: f64,
        seg_start: u64,
        seg_len: u64,
        period: u64,
    },
    /// `alpha1` for the first half of the budget, linear decay to `0.01 * alpha1` up to
    /// 90% of the budget, then flat.
    PiecewiseDecay { alpha1: f64, budget_iters: u64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and > 0, got {v}")))
            }
        };
        match *self {
            LrSchedule::Constant { alpha1 } => positive("schedule.alpha1", alpha1),
            LrSchedule::CyclicLinear { alpha1, alpha2, cycle } => {
                positive("schedule.alpha1", alpha1)?;
                positive("schedule.alpha2", alpha2)?;
                if alpha2 > alpha1 {
                    return Err(Error::config(
                        "schedule.alpha2",
                        format!("cyclic schedule needs α1 ≥ α2, got α1={alpha1}, α2={alpha2}"),
                    ));
                }
                if cycle == 0 {
                    return Err(Error::config("schedule.cycle", "cycle length must be >= 1"));
                }
                Ok(())
            }
            LrSchedule::CosineSegment {
                base,
                seg_start,
                seg_len,
                period,
            } => {
                positive("schedule.alpha1", base)?;
                if seg_len == 0 || period == 0 {
                    return Err(Error::config("schedule.cycle", "segment length and period must be >= 1"));
                }
                // Keeps the cosine argument below pi so the rate stays positive.
                if seg_start + seg_len > period {
                    return Err(Error::config(
                        "schedule.cycle",
                        format!("segment [{seg_start}, {}) runs past the period {period}", seg_start + seg_len),
                    ));
                }
                Ok(())
            }
            LrSchedule::PiecewiseDecay { alpha1, budget_iters } => {
                positive("schedule.alpha1", alpha1)?;
                if budget_iters == 0 {
                    return Err(Error::config("schedule.budget", "budget must be >= 1 iteration"));
                }
                Ok(())
            }
        }
    }

    /// Learning rate at iteration `i` (1-based). `iters_per_epoch` only matters for
    /// [`LrSchedule::CosineSegment`], whose epoch index is the number of full data
    /// passes completed before iteration `i`.
    pub fn lr_at(&self, i: u64, iters_per_epoch: u64) -> Result<f64> {
        if i < 1 {
            return Err(Error::domain("iteration counter is 1-based"));
        }
        Ok(match *self {
            LrSchedule::Constant { alpha1 } => alpha1,
            LrSchedule::CyclicLinear { alpha1, alpha2, cycle } => {
                let t = ((i - 1) % cycle + 1) as f64 / cycle as f64;
                (1.0 - t) * alpha1 + t * alpha2
            }
            LrSchedule::CosineSegment {
                base,
                seg_start,
                seg_len,
                period,
            } => {
                let epoch = (i - 1) / iters_per_epoch.max(1);
                let phase = (seg_start + epoch % seg_len) as f64 / period as f64;
                base * (1.0 + (PI * phase).cos())
            }
            LrSchedule::PiecewiseDecay { alpha1, budget_iters } => {
                let progress = (i - 1) as f64 / budget_iters as f64;
                if progress < 0.5 {
                    alpha1
                } else if progress < 0.9 {
                    let frac = (progress - 0.5) / 0.4;
                    alpha1 * (1.0 - 0.99 * frac)
                } else {
                    0.01 * alpha1
                }
            }
        })
    }

    /// Largest value the schedule can return.
    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::Constant { alpha1 }
            | LrSchedule::CyclicLinear { alpha1, .. }
            | LrSchedule::PiecewiseDecay { alpha1, .. } => alpha1,
            LrSchedule::CosineSegment { base, .. } => 2.0 * base,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LrSchedule::Constant { .. } => "constant",
            LrSchedule::CyclicLinear { .. } => "cyclic",
            LrSchedule::CosineSegment { .. } => "cosine",
            LrSchedule::PiecewiseDecay { .. } => "piecewise",
        }
    }
}

/// Whether the weights after iteration `i` are folded into the running average.
///
/// For a cyclic schedule pass `capture_every = cycle` so captures land on the
/// `alpha2` iterations; for a constant schedule use the iterations per epoch.
pub fn is_capture_point(i: u64, capture_every: u64) -> bool {
    capture_every >= 1 && i % capture_every == 0
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const CYC: LrSchedule = LrSchedule::CyclicLinear {
        alpha1: 0.1,
        alpha2: 0.001,
        cycle: 5,
    };

    #[test]
    fn cyclic_examples() {
        assert_eq!(CYC.lr_at(5, 1).unwrap(), 0.001);
        assert!((CYC.lr_at(1, 1).unwrap() - 0.0802).abs() < 1e-15);
        assert_eq!(CYC.lr_at(6, 1).unwrap(), CYC.lr_at(1, 1).unwrap());
    }

    #[test]
    fn zero_iteration_is_a_domain_error() {
        assert!(matches!(CYC.lr_at(0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn piecewise_plateaus_and_decay() {
        let s = LrSchedule::PiecewiseDecay {
            alpha1: 0.1,
            budget_iters: 100,
        };
        assert_eq!(s.lr_at(1, 1).unwrap(), 0.1);
        assert_eq!(s.lr_at(50, 1).unwrap(), 0.1);
        assert!((s.lr_at(95, 1).unwrap() - 0.001).abs() < 1e-18);
        assert!((s.lr_at(71, 1).unwrap() - 0.1 * (1.0 - 0.99 * 0.5)).abs() < 1e-15);
        assert!((s.lr_at(500, 1).unwrap() - 0.001).abs() < 1e-18);
    }

    #[test]
    fn cosine_segment_matches_closed_form() {
        let s = LrSchedule::CosineSegment {
            base: 0.1,
            seg_start: 1600,
            seg_len: 100,
            period: 1800,
        };
        s.validate().unwrap();
        // 10 iterations per epoch: iteration 1 is epoch 0, iteration 1001 is epoch 100 -> wraps.
        let first = s.lr_at(1, 10).unwrap();
        assert!((first - 0.1 * (1.0 + (PI * 1600.0 / 1800.0).cos())).abs() < 1e-15);
        assert_eq!(s.lr_at(1001, 10).unwrap(), first);
        let last = s.lr_at(1000, 10).unwrap();
        assert!((last - 0.1 * (1.0 + (PI * 1699.0 / 1800.0).cos())).abs() < 1e-15);
        assert!(last < first);
    }

    #[test]
    fn validation_rejects_inverted_bounds() {
        let bad = LrSchedule::CyclicLinear {
            alpha1: 0.01,
            alpha2: 0.1,
            cycle: 3,
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("α1 ≥ α2"), "{err}");
        assert!(LrSchedule::CyclicLinear { alpha1: 0.1, alpha2: 0.01, cycle: 0 }.validate().is_err());
        assert!(LrSchedule::PiecewiseDecay { alpha1: 0.1, budget_iters: 0 }.validate().is_err());
        assert!(LrSchedule::Constant { alpha1: 0.0 }.validate().is_err());
    }

    #[test]
    fn capture_points() {
        assert!(is_capture_point(10, 5));
        assert!(!is_capture_point(7, 5));
    }

    #[test]
    fn cyclic_captures_coincide_with_alpha2() {
        for c in 1..=7u64 {
            let s = LrSchedule::CyclicLinear {
                alpha1: 0.05,
                alpha2: 0.001,
                cycle: c,
            };
            for i in 1..=10 * c {
                let at_min = s.lr_at(i, 1).unwrap() == 0.001;
                assert_eq!(at_min, is_capture_point(i, c), "c={c} i={i}");
            }
        }
    }

    proptest! {
        #[test]
        fn cyclic_period_and_range(a2 in 1e-4f64..0.05, gap in 0.0f64..0.5, c in 1u64..40, i in 1u64..10_000) {
            let a1 = a2 + gap;
            let s = LrSchedule::CyclicLinear { alpha1: a1, alpha2: a2, cycle: c };
            let lr = s.lr_at(i, 1).unwrap();
            prop_assert_eq!(lr, s.lr_at(i + c, 1).unwrap());
            prop_assert!(lr > 0.0 && lr <= a1);
            prop_assert!(lr <= (1.0 - 1.0 / c as f64) * a1 + a2 / c as f64 + 1e-15);
            prop_assert!(lr >= a2 - 1e-15);
        }

        #[test]
        fn piecewise_is_non_increasing(a1 in 1e-3f64..1.0, b in 1u64..2000, i in 1u64..3000) {
            let s = LrSchedule::PiecewiseDecay { alpha1: a1, budget_iters: b };
            let now = s.lr_at(i, 1).unwrap();
            prop_assert!(s.lr_at(i + 1, 1).unwrap() <= now);
            prop_assert!(now > 0.0 && now <= a1);
        }
    }
}
