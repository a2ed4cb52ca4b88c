//! The joint-probability lattice and the exact log-domain forward/backward
//! DP over it.
//!
//! Grid convention: `t ∈ 0..T` frames, `u ∈ 0..=U` emitted labels. At a grid
//! point the model either emits blank (advancing `t`) or the next reference
//! label `y[u]` (advancing `u`, same frame). Every complete alignment ends
//! with the blank at `(T−1, U)`.

use crate::error::Error;
use crate::numerics::{log_add, Vector};
use crate::vocab::TokenSequence;
use crate::Result;

/// (T)×(U+1) grid of log-probability vectors over blank + V tokens.
/// Index 0 of each vector is the blank label; token `t` sits at `1 + t`.
#[derive(Debug, Clone)]
pub struct JointLattice {
    pub t_len: usize,
    pub u_len: usize,
    pub n_symbols: usize,
    /// logprobs[t][u] is a normalized vector of `n_symbols` entries.
    pub logprobs: Vec<Vec<Vector>>,
}

impl JointLattice {
    #[inline]
    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.logprobs[t][u][0]
    }

    #[inline]
    pub fn label(&self, t: usize, u: usize, token: usize) -> f64 {
        self.logprobs[t][u][1 + token]
    }

    fn check(&self, y: &TokenSequence) -> Result<()> {
        if self.t_len == 0 {
            return Err(Error::input("lattice has zero frames"));
        }
        if self.u_len != y.len() + 1 {
            return Err(Error::shape(format!(
                "lattice has {} label rows but the sequence needs {}",
                self.u_len,
                y.len() + 1
            )));
        }
        for &tok in y {
            if 1 + tok >= self.n_symbols {
                return Err(Error::input(format!(
                    "token {tok} outside lattice symbol space {}",
                    self.n_symbols
                )));
            }
        }
        Ok(())
    }
}

/// Gradient of the loss w.r.t. every lattice log-probability.
#[derive(Debug, Clone)]
pub struct LatticeGrad {
    pub dlogprobs: Vec<Vec<Vector>>,
}

fn forward_alphas(lat: &JointLattice, y: &TokenSequence) -> Vec<Vec<f64>> {
    let (t_len, u_len) = (lat.t_len, lat.u_len);
    let mut alpha = vec![vec![f64::NEG_INFINITY; u_len]; t_len];
    alpha[0][0] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = alpha[t - 1][u] + lat.blank(t - 1, u);
            }
            if u > 0 {
                acc = log_add(acc, alpha[t][u - 1] + lat.label(t, u - 1, y[u - 1]));
            }
            alpha[t][u] = acc;
        }
    }
    alpha
}

/// −log P(Y|X): exact marginalization over all blank/label interleavings.
pub fn loss_forward(lat: &JointLattice, y: &TokenSequence) -> Result<f64> {
    lat.check(y)?;
    let alpha = forward_alphas(lat, y);
    let logp = alpha[lat.t_len - 1][lat.u_len - 1] + lat.blank(lat.t_len - 1, lat.u_len - 1);
    if logp.is_nan() {
        return Err(Error::numerical("loss forward produced NaN"));
    }
    Ok(-logp)
}

/// Loss and its gradient w.r.t. every lattice log-probability, from the
/// forward/backward occupancy recursions.
pub fn loss_backward(lat: &JointLattice, y: &TokenSequence) -> Result<(f64, LatticeGrad)> {
    lat.check(y)?;
    let (t_len, u_len) = (lat.t_len, lat.u_len);
    let alpha = forward_alphas(lat, y);

    // beta[t][u]: completion log-prob from (t,u) inclusive; virtual row
    // beta[T][u] seeds the final blank.
    let mut beta = vec![vec![f64::NEG_INFINITY; u_len]; t_len + 1];
    beta[t_len][u_len - 1] = 0.0;
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            let mut acc = lat.blank(t, u) + beta[t + 1][u];
            if u + 1 < u_len {
                acc = log_add(acc, lat.label(t, u, y[u]) + beta[t][u + 1]);
            }
            beta[t][u] = acc;
        }
    }
    let logp = beta[0][0];
    if !logp.is_finite() {
        return Err(Error::numerical(format!(
            "loss backward: total log-probability is {logp}"
        )));
    }

    let mut dlogprobs = vec![vec![vec![0.0; lat.n_symbols]; u_len]; t_len];
    for t in 0..t_len {
        for u in 0..u_len {
            if alpha[t][u] == f64::NEG_INFINITY {
                continue;
            }
            // occupancy of the blank arc out of (t, u)
            let blank_occ = alpha[t][u] + lat.blank(t, u) + beta[t + 1][u] - logp;
            if blank_occ.is_finite() {
                dlogprobs[t][u][0] = -blank_occ.exp();
            }
            if u + 1 < u_len {
                let lab_occ = alpha[t][u] + lat.label(t, u, y[u]) + beta[t][u + 1] - logp;
                if lab_occ.is_finite() {
                    dlogprobs[t][u][1 + y[u]] = -lab_occ.exp();
                }
            }
        }
    }
    for row in dlogprobs.iter().flatten().flatten() {
        if !row.is_finite() {
            return Err(Error::numerical("non-finite lattice gradient"));
        }
    }
    Ok((-logp, LatticeGrad { dlogprobs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, log_softmax, logsumexp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random normalized lattice.
    fn random_lattice(t_len: usize, u_len: usize, n_symbols: usize, seed: u64) -> JointLattice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logprobs = (0..t_len)
            .map(|_| {
                (0..u_len)
                    .map(|_| {
                        let logits: Vec<f64> =
                            (0..n_symbols).map(|_| rng.random_range(-2.0..2.0)).collect();
                        log_softmax(&logits).unwrap()
                    })
                    .collect()
            })
            .collect();
        JointLattice {
            t_len,
            u_len,
            n_symbols,
            logprobs,
        }
    }

    /// Independent oracle: enumerate every alignment (interleaving of T
    /// blanks and U labels whose final symbol is blank), walk the grid and
    /// sum path scores.
    fn enumeration_oracle(lat: &JointLattice, y: &[usize]) -> f64 {
        let t_len = lat.t_len;
        let u_len = y.len();
        let total = t_len + u_len;
        let mut path_scores = Vec::new();
        // choose the positions of the labels among the first total-1 slots
        let mut choice = Vec::new();
        enumerate(total - 1, u_len, &mut choice, &mut |labels: &[usize]| {
            let mut t = 0usize;
            let mut u = 0usize;
            let mut score = 0.0;
            for step in 0..total {
                if step < total - 1 && labels.contains(&step) {
                    score += lat.label(t, u, y[u]);
                    u += 1;
                } else {
                    score += lat.blank(t, u);
                    t += 1;
                }
            }
            assert_eq!(t, t_len);
            assert_eq!(u, u_len);
            path_scores.push(score);
        });
        -logsumexp(&path_scores).unwrap()
    }

    fn enumerate(slots: usize, k: usize, acc: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if acc.len() == k {
            f(acc);
            return;
        }
        let start = acc.last().map(|&x| x + 1).unwrap_or(0);
        for i in start..slots {
            acc.push(i);
            enumerate(slots, k, acc, f);
            acc.pop();
        }
    }

    #[test]
    fn single_path_t1_u0() {
        let lat = random_lattice(1, 1, 3, 1);
        let loss = loss_forward(&lat, &vec![]).unwrap();
        assert!((loss + lat.blank(0, 0)).abs() <= 1e-12);
    }

    #[test]
    fn t2_u1_matches_three_path_enumeration() {
        let lat = random_lattice(2, 2, 3, 2);
        let y = vec![1usize];
        // paths: L B B | B L B  (label in frame 0 or frame 1; final blank fixed)
        let p1 = lat.label(0, 0, 1) + lat.blank(0, 1) + lat.blank(1, 1);
        let p2 = lat.blank(0, 0) + lat.label(1, 0, 1) + lat.blank(1, 1);
        let expect = -logsumexp(&[p1, p2]).unwrap();
        let got = loss_forward(&lat, &y).unwrap();
        assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
        // and the generic oracle agrees
        let oracle = enumeration_oracle(&lat, &y);
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let t_len = rng.random_range(1..=4);
            let u_len = rng.random_range(0..=3.min(t_len + 2));
            let v = rng.random_range(1..=4usize);
            let lat = random_lattice(t_len, u_len + 1, v + 1, 1000 + case);
            let y: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..v)).collect();
            let dp = loss_forward(&lat, &y).unwrap();
            let oracle = enumeration_oracle(&lat, &y);
            assert!(
                (dp - oracle).abs() <= 1e-8,
                "case {case}: dp {dp} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn backward_single_path_gradient() {
        let lat = random_lattice(1, 1, 4, 3);
        let (_, grad) = loss_backward(&lat, &vec![]).unwrap();
        assert!((grad.dlogprobs[0][0][0] + 1.0).abs() <= 1e-12);
        for v in &grad.dlogprobs[0][0][1..] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn backward_matches_forward_loss() {
        let lat = random_lattice(3, 3, 4, 4);
        let y = vec![2usize, 0];
        let fwd = loss_forward(&lat, &y).unwrap();
        let (bwd, _) = loss_backward(&lat, &y).unwrap();
        assert!((fwd - bwd).abs() <= 1e-12);
    }

    #[test]
    fn logit_gradients_are_zero_sum_per_grid_point() {
        // chain d/dlogprob through log-softmax to logits; softmax identity
        // forces each grid point's logit gradient to sum to zero
        let lat = random_lattice(3, 3, 4, 5);
        let y = vec![1usize, 2];
        let (_, grad) = loss_backward(&lat, &y).unwrap();
        for t in 0..lat.t_len {
            for u in 0..lat.u_len {
                let dlp = &grad.dlogprobs[t][u];
                let total: f64 = dlp.iter().sum();
                let probs: Vec<f64> = lat.logprobs[t][u].iter().map(|x| x.exp()).collect();
                let dlogits: Vec<f64> = (0..lat.n_symbols)
                    .map(|v| dlp[v] - probs[v] * total)
                    .collect();
                let s: f64 = dlogits.iter().sum();
                assert!(s.abs() <= 1e-12, "grid ({t},{u}) sums to {s}");
            }
        }
    }

    #[test]
    fn lattice_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..5 {
            let t_len = rng.random_range(1..=3);
            let u_len = rng.random_range(0..=2usize);
            let v = rng.random_range(1..=3usize);
            let lat = random_lattice(t_len, u_len + 1, v + 1, 2000 + case);
            let y: Vec<usize> = (0..u_len).map(|_| rng.random_range(0..v)).collect();
            let (_, grad) = loss_backward(&lat, &y).unwrap();

            // flatten the lattice's log-probs as the parameter vector;
            // perturbations leave the log-domain simplex, which is fine for
            // checking the DP's own derivative
            let theta: Vec<f64> = lat
                .logprobs
                .iter()
                .flatten()
                .flatten()
                .copied()
                .collect();
            let analytic: Vec<f64> = grad
                .dlogprobs
                .iter()
                .flatten()
                .flatten()
                .copied()
                .collect();
            let f = |vals: &[f64]| {
                let mut probe = lat.clone();
                let mut i = 0;
                for t in 0..probe.t_len {
                    for u in 0..probe.u_len {
                        for s in 0..probe.n_symbols {
                            probe.logprobs[t][u][s] = vals[i];
                            i += 1;
                        }
                    }
                }
                loss_forward(&probe, &y)
            };
            let err = grad_check(f, &theta, &analytic, 1e-5).unwrap();
            assert!(err <= 1e-6, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn zero_frames_is_input_error() {
        let lat = JointLattice {
            t_len: 0,
            u_len: 1,
            n_symbols: 2,
            logprobs: vec![],
        };
        assert!(matches!(loss_forward(&lat, &vec![]), Err(Error::Input(_))));
    }
}
