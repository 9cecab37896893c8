use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-3,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences `(f(x+h) - f(x-h)) / 2h`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], opts: &GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, x.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
        passed: true,
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + opts.h;
        let up = f(&probe);
        probe[i] = orig - opts.h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(opts.abs_floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[6.0], &GradCheckOptions::default());
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(|_| 4.2, &[1.0, -2.0], &[0.0, 0.0], &GradCheckOptions::default());
        assert!(r.passed);
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[5.0], &GradCheckOptions::default());
        assert!(!r.passed);
    }

    #[test]
    fn samples_requested_number_of_coordinates() {
        let x = vec![1.0; 50];
        let g = vec![2.0; 50];
        let opts = GradCheckOptions {
            max_coords: Some(7),
            ..Default::default()
        };
        let r = grad_check(|x| x.iter().map(|v| 2.0 * v).sum(), &x, &g, &opts);
        assert_eq!(r.checked, 7);
        assert!(r.passed);
    }
}
