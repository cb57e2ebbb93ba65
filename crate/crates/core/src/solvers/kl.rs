//! Projection of a probability vector onto the convex hull of a finite set of
//! probability vectors in Kullback–Leibler divergence.

/// `KL(q ‖ p)`; `+∞` when `q` charges a `p`-null coordinate.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi <= 0.0 {
            continue;
        }
        if pi <= 0.0 {
            return f64::INFINITY;
        }
        s += qi * (qi / pi).ln();
    }
    s.max(0.0)
}

#[derive(Debug, Clone)]
pub struct KlProjection {
    pub weights: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Minimizes `λ ↦ KL(q ‖ Σ λ_k p_k)` over the simplex.
///
/// Uses the multiplicative (EM) update `λ_k ← λ_k Σ_c q_c p_k(c) / P_λ(c)`,
/// which is exponentiated-gradient with unit step for this objective and
/// decreases it monotonically.
pub fn kl_project(q: &[f64], extremes: &[Vec<f64>], tol: f64, max_iter: usize) -> KlProjection {
    kl_project_from(q, extremes, None, tol, max_iter)
}

/// Same as [`kl_project`], started from the given mixture weights (which must
/// be strictly positive to keep every extreme reachable by the update).
pub fn kl_project_from(
    q: &[f64],
    extremes: &[Vec<f64>],
    start: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> KlProjection {
    let k = extremes.len();
    assert!(k > 0, "kl_project needs at least one extreme");
    // Extremes that charge nothing q charges can be dropped; any q-charged
    // coordinate that no extreme charges makes the value infinite.
    let support: Vec<usize> = (0..q.len()).filter(|&c| q[c] > 0.0).collect();
    if support.iter().any(|&c| extremes.iter().all(|p| p[c] <= 0.0)) {
        return KlProjection { weights: vec![1.0 / k as f64; k], value: f64::INFINITY, iterations: 0 };
    }
    let mixture = |lam: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; q.len()];
        for (l, p) in lam.iter().zip(extremes) {
            for (mc, pc) in m.iter_mut().zip(p) {
                *mc += l * pc;
            }
        }
        m
    };
    let mut lam = match start {
        Some(w) if w.len() == k && w.iter().all(|&v| v > 0.0) => {
            let t: f64 = w.iter().sum();
            w.iter().map(|v| v / t).collect()
        }
        _ => vec![1.0 / k as f64; k],
    };
    let mut value = kl_divergence(q, &mixture(&lam));
    if k == 1 {
        return KlProjection { weights: lam, value, iterations: 0 };
    }
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let mix = mixture(&lam);
        let mut next: Vec<f64> = lam
            .iter()
            .zip(extremes)
            .map(|(l, p)| l * support.iter().map(|&c| q[c] * p[c] / mix[c]).sum::<f64>())
            .collect();
        let total: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        let nv = kl_divergence(q, &mixture(&next));
        let change = (value - nv).abs();
        lam = next;
        let done = change <= tol * value.abs().max(1e-300) || change <= 1e-16;
        value = nv;
        if done {
            break;
        }
    }
    KlProjection { weights: lam, value, iterations: it }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_projection_is_zero() {
        let p = vec![0.3, 0.7];
        let r = kl_project(&p, &[p.clone()], 1e-11, 10_000);
        assert_eq!(r.weights, vec![1.0]);
        assert!(r.value.abs() < 1e-15);
    }

    #[test]
    fn single_extreme_formula() {
        let r = kl_project(&[0.5, 0.5], &[vec![0.75, 0.25]], 1e-11, 10_000);
        let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((r.value - want).abs() < 1e-15);
        assert!((r.value - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn support_violation_is_infinite() {
        let r = kl_project(&[1.0, 0.0], &[vec![0.0, 1.0]], 1e-11, 10_000);
        assert!(r.value.is_infinite());
    }

    #[test]
    fn point_inside_hull() {
        let ex = vec![vec![0.8, 0.2], vec![0.2, 0.8]];
        let r = kl_project(&[0.5, 0.5], &ex, 1e-11, 100_000);
        assert!(r.value < 1e-10, "{}", r.value);
        assert!((r.weights[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn point_outside_hull_hits_nearest_extreme() {
        let ex = vec![vec![0.6, 0.4], vec![0.4, 0.6]];
        let r = kl_project(&[0.9, 0.1], &ex, 1e-11, 100_000);
        let want = kl_divergence(&[0.9, 0.1], &[0.6, 0.4]);
        assert!((r.value - want).abs() < 1e-9, "{} vs {}", r.value, want);
    }
}
