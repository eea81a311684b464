use crate::error::{ensure_arg, Result};

/// `-log softmax(scores)[label]` and its gradient `softmax(scores) - onehot(label)`.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    ensure_arg!(
        label < scores.len(),
        "label {label} out of range for {} classes",
        scores.len()
    );
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (scores[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_log_c() {
        for c in 1..6 {
            let (l, g) = cross_entropy(&vec![0.3; c], 0).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
            assert!((g.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let (l, g) = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l < 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let c = rng.random_range(2..8);
            let s: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let label = rng.random_range(0..c);
            let (_, g) = cross_entropy(&s, label).unwrap();
            for i in 0..c {
                let h = 1e-5;
                let mut sp = s.clone();
                sp[i] += h;
                let a = cross_entropy(&sp, label).unwrap().0;
                sp[i] -= 2.0 * h;
                let b = cross_entropy(&sp, label).unwrap().0;
                let num = (a - b) / (2.0 * h);
                assert!((num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-3) < 1e-6);
            }
        }
    }
}
