use std::ops::{Add, Mul};

use crate::error::{Error, Result};

/// Evaluates `a_0 + a_1 x + ... + a_m x^m` as `a_0 + x(a_1 + x(a_2 + ...))`,
/// using exactly `m` multiplications and `m` additions.
pub fn horner_eval<T>(coeffs: &[T], x: T) -> Result<T>
where
    T: Copy + Add<Output = T> + Mul<Output = T>,
{
    match coeffs.split_last() {
        None => Err(Error::InvalidArgument(
            "polynomial needs at least one coefficient".into(),
        )),
        Some((&top, rest)) => Ok(rest.iter().rev().fold(top, |acc, &a| a + x * acc)),
    }
}

/// Infallible Horner for internal use where the slice is known non-empty.
#[inline]
pub(crate) fn horner(coeffs: &[f64], x: f64) -> f64 {
    let (&top, rest) = coeffs.split_last().expect("non-empty coefficients");
    rest.iter().rev().fold(top, |acc, &a| a + x * acc)
}

/// Value and first derivative of a polynomial in one nested pass.
#[inline]
pub(crate) fn horner_with_derivative(coeffs: &[f64], x: f64) -> (f64, f64) {
    let (&top, rest) = coeffs.split_last().expect("non-empty coefficients");
    let mut p = top;
    let mut dp = 0.0;
    for &a in rest.iter().rev() {
        dp = p + x * dp;
        p = a + x * p;
    }
    (p, dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    thread_local! {
        static MULS: Cell<usize> = const { Cell::new(0) };
        static ADDS: Cell<usize> = const { Cell::new(0) };
    }

    #[derive(Clone, Copy)]
    struct Counted(f64);

    impl Add for Counted {
        type Output = Counted;
        fn add(self, o: Counted) -> Counted {
            ADDS.with(|c| c.set(c.get() + 1));
            Counted(self.0 + o.0)
        }
    }

    impl Mul for Counted {
        type Output = Counted;
        fn mul(self, o: Counted) -> Counted {
            MULS.with(|c| c.set(c.get() + 1));
            Counted(self.0 * o.0)
        }
    }

    fn naive(coeffs: &[f64], x: f64) -> f64 {
        coeffs.iter().enumerate().map(|(i, a)| a * x.powi(i as i32)).sum()
    }

    #[test]
    fn small_cases() {
        assert_eq!(horner_eval(&[3.5], 100.0).unwrap(), 3.5);
        assert_eq!(horner_eval(&[1.0, 2.0, 3.0], 2.0).unwrap(), 17.0);
        assert!(matches!(horner_eval::<f64>(&[], 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn operation_count_is_degree() {
        for m in 0..9 {
            MULS.with(|c| c.set(0));
            ADDS.with(|c| c.set(0));
            let coeffs: Vec<Counted> = (0..=m).map(|i| Counted(i as f64)).collect();
            horner_eval(&coeffs, Counted(0.5)).unwrap();
            assert_eq!(MULS.with(Cell::get), m);
            assert_eq!(ADDS.with(Cell::get), m);
        }
    }

    #[test]
    fn matches_naive_power_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = rng.random_range(0..=8);
            let coeffs: Vec<f64> = (0..=m).map(|_| rng.random_range(-4.0..4.0)).collect();
            let x = rng.random_range(-4.0..4.0);
            let want = naive(&coeffs, x);
            let got = horner_eval(&coeffs, x).unwrap();
            assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn derivative_pass() {
        let c = [1.0, -2.0, 0.5, 3.0];
        let (p, dp) = horner_with_derivative(&c, 1.7);
        assert!((p - naive(&c, 1.7)).abs() < 1e-12);
        assert!((dp - (-2.0 + 2.0 * 0.5 * 1.7 + 3.0 * 3.0 * 1.7 * 1.7)).abs() < 1e-12);
        assert_eq!(horner_with_derivative(&[4.0], 9.0), (4.0, 0.0));
    }
}
