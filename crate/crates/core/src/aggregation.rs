//! Server-side merging of client round updates.
//!
//! Two strategies over flat adapter vectors: dataset-size-weighted
//! averaging, and coordinate-wise Fisher-weighted averaging
//!
//! ```text
//! theta_global[i] = sum_k w_k (F_k[i] + eps) theta_k[i]
//!                   / sum_k w_k (F_k[i] + eps),      w_k = n_k / sum_j n_j
//! ```
//!
//! The epsilon regularizer keeps the denominator positive where all
//! clients report zero Fisher mass and cancels exactly when every client's
//! diagonal is identical, which is what reduces Fisher merging to plain
//! averaging in that case. The FedProx proximal pull is also here: it is a
//! client-side gradient term, not a server strategy.

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;

/// One client's upload for a round: flat adapter parameters, an optional
/// Fisher diagonal of the same length, and the local dataset size.
#[derive(Debug, Clone)]
pub struct RoundUpdate {
    pub client_id: usize,
    pub theta: Vec<f64>,
    pub fisher: Option<FisherDiagonal>,
    pub n_samples: usize,
}

impl RoundUpdate {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} reports zero samples",
                self.client_id
            )));
        }
        if let Some(f) = &self.fisher {
            if f.len() != self.theta.len() {
                return Err(Error::LengthMismatch {
                    what: format!("fisher diagonal of client {}", self.client_id),
                    expected: self.theta.len(),
                    got: f.len(),
                });
            }
        }
        Ok(())
    }

    /// Number of 64-bit values in the serialized payload body.
    pub fn payload_value_count(&self) -> usize {
        self.theta.len() + self.fisher.as_ref().map_or(0, FisherDiagonal::len)
    }

    /// Wire payload: the uploaded values themselves, little-endian `f64`,
    /// theta first, then the Fisher diagonal when present. Framing
    /// metadata (client id, sample count, lengths) travels out of band;
    /// the accounting in [`crate::federation::communication_report`]
    /// counts exactly these bytes.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.payload_value_count());
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(f) = &self.fisher {
            for v in f.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn check_updates(updates: &[RoundUpdate]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::EmptyInput("merge needs at least one update".into()))?;
    let len = first.theta.len();
    for u in updates {
        u.validate()?;
        if u.theta.len() != len {
            return Err(Error::LengthMismatch {
                what: format!("theta of client {}", u.client_id),
                expected: len,
                got: u.theta.len(),
            });
        }
    }
    Ok(len)
}

/// Dataset-size-weighted average: `sum_k (n_k / sum_j n_j) theta_k`.
pub fn fedavg_merge(updates: &[RoundUpdate]) -> Result<Vec<f64>> {
    let len = check_updates(updates)?;
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut out = vec![0.0; len];
    for u in updates {
        let w = u.n_samples as f64 / total;
        for (o, t) in out.iter_mut().zip(&u.theta) {
            *o += w * t;
        }
    }
    Ok(out)
}

/// Coordinate-wise Fisher-weighted merge. Every update must carry a
/// Fisher diagonal; `epsilon` must be positive.
///
/// The regularizer actually added to each diagonal entry is
/// `epsilon * mean(F)` (mean over all clients and coordinates), falling
/// back to `epsilon` itself when the total Fisher mass is zero. Scaling
/// the regularizer with the mass makes the merge exactly invariant to a
/// common positive rescaling of every `F_k` (a fixed absolute epsilon
/// would shift the result by O(epsilon) under rescaling), while the
/// zero-mass fallback still reduces the merge to plain weighted averaging
/// when no client reports any curvature.
pub fn fisher_merge(updates: &[RoundUpdate], epsilon: f64) -> Result<Vec<f64>> {
    let len = check_updates(updates)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fisher_merge needs epsilon > 0, got {epsilon}"
        )));
    }
    for u in updates {
        if u.fisher.is_none() {
            return Err(Error::InvalidArgument(format!(
                "client {} upload has no Fisher diagonal",
                u.client_id
            )));
        }
    }
    let mass_sum: f64 = updates
        .iter()
        .flat_map(|u| u.fisher.as_ref().expect("checked above").values())
        .sum();
    let mass_mean = mass_sum / (updates.len() * len.max(1)) as f64;
    let eps = if mass_mean > 0.0 {
        epsilon * mass_mean
    } else {
        epsilon
    };
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut num = vec![0.0; len];
    let mut den = vec![0.0; len];
    for u in updates {
        let w = u.n_samples as f64 / total;
        let fisher = u.fisher.as_ref().expect("checked above").values();
        for i in 0..len {
            let mass = w * (fisher[i] + eps);
            num[i] += mass * u.theta[i];
            den[i] += mass;
        }
    }
    for i in 0..len {
        num[i] /= den[i];
    }
    Ok(num)
}

/// FedProx pull toward the broadcast model: `mu * (theta - theta_global)`,
/// added to the client's loss gradient each local step.
pub fn proximal_gradient(theta: &[f64], theta_global: &[f64], mu: f64) -> Result<Vec<f64>> {
    if theta.len() != theta_global.len() {
        return Err(Error::LengthMismatch {
            what: "proximal term".into(),
            expected: theta.len(),
            got: theta_global.len(),
        });
    }
    if mu < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "proximal coefficient must be nonnegative, got {mu}"
        )));
    }
    Ok(theta
        .iter()
        .zip(theta_global)
        .map(|(t, g)| mu * (t - g))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;

    fn update(id: usize, theta: Vec<f64>, fisher: Option<Vec<f64>>, n: usize) -> RoundUpdate {
        let len = theta.len();
        RoundUpdate {
            client_id: id,
            theta,
            fisher: fisher.map(|v| FisherDiagonal::new(v, 1).unwrap()),
            n_samples: n.max(1).min(len * 1000 + 1000), // keep sizes sane
        }
    }

    #[test]
    fn fedavg_midpoint() {
        let u = vec![
            update(0, vec![1.0], None, 1),
            update(1, vec![3.0], None, 1),
        ];
        assert_eq!(fedavg_merge(&u).unwrap(), vec![2.0]);
    }

    #[test]
    fn fedavg_size_weighted() {
        // Hand oracle: 0.25 * 1 + 0.75 * 3 = 2.5.
        let u = vec![
            update(0, vec![1.0], None, 1),
            update(1, vec![3.0], None, 3),
        ];
        let got = fedavg_merge(&u).unwrap();
        assert!((got[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn fedavg_single_client_is_identity() {
        let u = vec![update(0, vec![0.1, -0.2, 7.0], None, 5)];
        assert_eq!(fedavg_merge(&u).unwrap(), vec![0.1, -0.2, 7.0]);
    }

    #[test]
    fn fisher_equal_mass_reduces_to_fedavg() {
        let u = vec![
            update(0, vec![1.0], Some(vec![0.37]), 1),
            update(1, vec![3.0], Some(vec![0.37]), 1),
        ];
        let got = fisher_merge(&u, 1e-8).unwrap();
        assert!((got[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_scalar_hand_case() {
        // Hand oracle in the epsilon -> 0 limit:
        // (3*1 + 1*3) / (3 + 1) = 1.5.
        let u = vec![
            update(0, vec![1.0], Some(vec![3.0]), 1),
            update(1, vec![3.0], Some(vec![1.0]), 1),
        ];
        let got = fisher_merge(&u, 1e-12).unwrap();
        assert!((got[0] - 1.5).abs() < 1e-10, "got {}", got[0]);
    }

    #[test]
    fn zero_fisher_client_contributes_only_epsilon() {
        let u = vec![
            update(0, vec![1.0], Some(vec![1.0]), 1),
            update(1, vec![3.0], Some(vec![0.0]), 1),
        ];
        let got = fisher_merge(&u, 1e-8).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-7, "got {}", got[0]);
    }

    #[test]
    fn missing_fisher_or_bad_epsilon_is_rejected() {
        let u = vec![
            update(0, vec![1.0], Some(vec![1.0]), 1),
            update(1, vec![3.0], None, 1),
        ];
        assert!(fisher_merge(&u, 1e-8).is_err());
        let u = vec![update(0, vec![1.0], Some(vec![1.0]), 1)];
        assert!(fisher_merge(&u, 0.0).is_err());
        assert!(fisher_merge(&u, -1.0).is_err());
    }

    #[test]
    fn empty_or_mismatched_updates_are_rejected() {
        assert!(fedavg_merge(&[]).is_err());
        let u = vec![
            update(0, vec![1.0, 2.0], None, 1),
            update(1, vec![3.0], None, 1),
        ];
        assert!(fedavg_merge(&u).is_err());
    }

    #[test]
    fn proximal_cases() {
        assert_eq!(
            proximal_gradient(&[1.0, -1.0], &[0.0, 0.0], 0.0).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            proximal_gradient(&[1.0, -1.0], &[0.0, 0.0], 2.0).unwrap(),
            vec![2.0, -2.0]
        );
        let theta = [0.4, 0.6];
        assert_eq!(
            proximal_gradient(&theta, &theta, 123.0).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(proximal_gradient(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn payload_bytes_count_matches_values() {
        let u = update(3, vec![1.0, 2.0, 3.0], Some(vec![0.1, 0.2, 0.3]), 4);
        assert_eq!(u.payload_value_count(), 6);
        assert_eq!(u.payload_bytes().len(), 48);
        let bare = update(3, vec![1.0, 2.0, 3.0], None, 4);
        assert_eq!(bare.payload_bytes().len(), 8 * bare.payload_value_count());
    }

    proptest! {
        /// Each merged coordinate stays inside the client envelope, both
        /// merges ignore update order, and uniform positive rescaling of
        /// every Fisher diagonal changes nothing.
        #[test]
        fn merge_properties(
            thetas in proptest::collection::vec(
                proptest::collection::vec(-5.0f64..5.0, 4), 2..6),
            fishers_raw in proptest::collection::vec(
                proptest::collection::vec(0.0f64..3.0, 4), 6),
            sizes in proptest::collection::vec(1usize..50, 6),
            scale in 0.01f64..100.0,
        ) {
            let k = thetas.len();
            let updates: Vec<RoundUpdate> = (0..k)
                .map(|i| update(i, thetas[i].clone(), Some(fishers_raw[i].clone()), sizes[i]))
                .collect();

            let merged = fisher_merge(&updates, 1e-8).unwrap();
            for i in 0..4 {
                let lo = thetas.iter().map(|t| t[i]).fold(f64::INFINITY, f64::min);
                let hi = thetas.iter().map(|t| t[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(merged[i] >= lo - 1e-12 && merged[i] <= hi + 1e-12);
            }

            let mut reversed = updates.clone();
            reversed.reverse();
            prop_assert!(max_abs_diff(&fisher_merge(&reversed, 1e-8).unwrap(), &merged) < 1e-12);
            prop_assert!(max_abs_diff(
                &fedavg_merge(&reversed).unwrap(),
                &fedavg_merge(&updates).unwrap()
            ) < 1e-12);

            // Common positive rescaling of all Fisher diagonals must not
            // move the merge.
            let rescaled: Vec<RoundUpdate> = updates
                .iter()
                .map(|u| {
                    let f = u.fisher.as_ref().unwrap().values()
                        .iter().map(|v| v * scale).collect();
                    update(u.client_id, u.theta.clone(), Some(f), u.n_samples)
                })
                .collect();
            let merged_scaled = fisher_merge(&rescaled, 1e-8).unwrap();
            prop_assert!(max_abs_diff(&merged_scaled, &merged) < 1e-12);
        }
    }
}
