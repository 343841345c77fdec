//! Constant-velocity Kalman filter over box measurements, with process and
//! measurement noise rescaled by association confidence.
//!
//! The state is `[u, v, gamma, h, du, dv, dgamma, dh]`: box center, aspect
//! ratio and height plus their per-frame velocities. A match scored with
//! similarity `C` divides both noise matrices by `C + lambda_c`, so a
//! confident match (factor above one) tightens the filter while a dubious
//! one loosens it. Covariance updates use the Joseph form, which stays
//! positive semi-definite under rounding.

use nalgebra::{Cholesky, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::Measurement;

pub type StateVector = SVector<f64, 8>;
pub type StateMatrix = SMatrix<f64, 8, 8>;
pub type MeasurementVector = SVector<f64, 4>;
pub type MeasurementMatrix = SMatrix<f64, 4, 4>;
pub type ObservationMatrix = SMatrix<f64, 4, 8>;
pub type GainMatrix = SMatrix<f64, 8, 4>;

/// 95% quantile of the chi-square distribution with four degrees of
/// freedom: the default gate for squared Mahalanobis distances of box
/// measurements.
pub const CHI2_GATE_4D_95: f64 = 9.4877;

/// State transition of the constant-velocity model with a unit frame step:
/// identity plus ones coupling each position to its velocity.
pub fn constant_velocity_transition() -> StateMatrix {
    let mut f = StateMatrix::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

/// Observation matrix selecting the measured block: `[I4 | 0]`.
pub fn position_observation() -> ObservationMatrix {
    ObservationMatrix::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

/// Gaussian state estimate.
#[derive(Debug, Clone)]
pub struct MotionState {
    pub mean: StateVector,
    pub covariance: StateMatrix,
}

impl MotionState {
    /// Builds a state, rejecting non-finite entries, asymmetry beyond
    /// `1e-9` (relative to the largest entry), and covariances that are not
    /// positive definite.
    pub fn new(mean: StateVector, covariance: StateMatrix) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("motion state", "non-finite entry"));
        }
        let scale = covariance.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let asym = (covariance - covariance.transpose())
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if asym > 1e-9 * scale.max(1.0) {
            return Err(Error::input(
                "motion state",
                format!("covariance asymmetric by {asym}"),
            ));
        }
        if Cholesky::new(covariance).is_none() {
            return Err(Error::input(
                "motion state",
                "covariance is not positive definite",
            ));
        }
        Ok(MotionState { mean, covariance })
    }

    /// Internal constructor for filter outputs: reports failures as
    /// numerical breakdown instead of bad input, and symmetrizes first.
    fn from_filter(mean: StateVector, covariance: StateMatrix, context: &str) -> Result<Self> {
        let covariance = symmetrize(covariance);
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("{context}: non-finite state")));
        }
        if Cholesky::new(covariance).is_none() {
            return Err(Error::numerical(format!(
                "{context}: covariance lost positive definiteness"
            )));
        }
        Ok(MotionState { mean, covariance })
    }
}

fn symmetrize(m: StateMatrix) -> StateMatrix {
    (m + m.transpose()) * 0.5
}

/// Where the base (unscaled) noise matrices come from.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Noise proportional to target height, so large (near) targets tolerate
    /// larger pixel errors than small (far) ones. The weights are standard
    /// deviations per unit height; aspect-ratio terms are absolute.
    Heuristic {
        position_weight: f64,
        velocity_weight: f64,
        gamma_std: f64,
        gamma_velocity_std: f64,
    },
    /// Explicit matrices, for simulation-matched filtering and tests.
    Fixed {
        q: StateMatrix,
        r: MeasurementMatrix,
        initial: StateMatrix,
    },
}

impl NoiseModel {
    pub fn heuristic() -> Self {
        NoiseModel::Heuristic {
            position_weight: 1.0 / 20.0,
            velocity_weight: 1.0 / 160.0,
            gamma_std: 1e-2,
            gamma_velocity_std: 1e-5,
        }
    }

    pub fn fixed(q: StateMatrix, r: MeasurementMatrix, initial: StateMatrix) -> Self {
        NoiseModel::Fixed { q, r, initial }
    }

    /// Base process noise for a target of the given height.
    pub fn process_noise(&self, height: f64) -> StateMatrix {
        match self {
            NoiseModel::Heuristic {
                position_weight,
                velocity_weight,
                gamma_std,
                gamma_velocity_std,
            } => {
                let p = position_weight * height;
                let v = velocity_weight * height;
                let stds = [p, p, *gamma_std, p, v, v, *gamma_velocity_std, v];
                StateMatrix::from_diagonal(&StateVector::from_iterator(
                    stds.iter().map(|s| s * s),
                ))
            }
            NoiseModel::Fixed { q, .. } => *q,
        }
    }

    /// Base measurement noise for a target of the given height.
    pub fn measurement_noise(&self, height: f64) -> MeasurementMatrix {
        match self {
            NoiseModel::Heuristic {
                position_weight,
                gamma_std,
                ..
            } => {
                let p = position_weight * height;
                let stds = [p, p, *gamma_std, p];
                MeasurementMatrix::from_diagonal(&MeasurementVector::from_iterator(
                    stds.iter().map(|s| s * s),
                ))
            }
            NoiseModel::Fixed { r, .. } => *r,
        }
    }

    /// Covariance for a freshly initiated track: measured block at twice the
    /// base position noise, unobserved velocity block inflated to ten times
    /// the base position standard deviation.
    pub fn initial_covariance(&self, height: f64) -> StateMatrix {
        match self {
            NoiseModel::Heuristic {
                position_weight,
                gamma_std,
                gamma_velocity_std,
                ..
            } => {
                let p = 2.0 * position_weight * height;
                let v = 10.0 * position_weight * height;
                let stds = [
                    p,
                    p,
                    2.0 * gamma_std,
                    p,
                    v,
                    v,
                    10.0 * gamma_velocity_std,
                    v,
                ];
                StateMatrix::from_diagonal(&StateVector::from_iterator(
                    stds.iter().map(|s| s * s),
                ))
            }
            NoiseModel::Fixed { initial, .. } => *initial,
        }
    }
}

/// Everything the filter operations need besides the state itself.
#[derive(Debug, Clone)]
pub struct MotionModelConfig {
    pub transition: StateMatrix,
    pub observation: ObservationMatrix,
    pub noise: NoiseModel,
    /// Offset added to the similarity before dividing the noise, keeping the
    /// divisor away from zero. With the default 0.5 a neutral similarity of
    /// 0.5 leaves the noise untouched.
    pub lambda_c: f64,
    /// Inclusive upper bound on squared Mahalanobis distance for admissible
    /// matches.
    pub gate_threshold: f64,
    /// Apply the similarity factor to the measurement noise only, leaving
    /// process noise at its base value.
    pub scale_r_only: bool,
}

impl Default for MotionModelConfig {
    fn default() -> Self {
        MotionModelConfig {
            transition: constant_velocity_transition(),
            observation: position_observation(),
            noise: NoiseModel::heuristic(),
            lambda_c: 0.5,
            gate_threshold: CHI2_GATE_4D_95,
            scale_r_only: false,
        }
    }
}

impl MotionModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_c.is_finite() || self.lambda_c < 0.0 {
            return Err(Error::input(
                "motion config",
                format!("lambda_c must be finite and non-negative, got {}", self.lambda_c),
            ));
        }
        if !self.gate_threshold.is_finite() || self.gate_threshold <= 0.0 {
            return Err(Error::input(
                "motion config",
                format!("gate threshold must be positive, got {}", self.gate_threshold),
            ));
        }
        Ok(())
    }

    /// The noise divisor for a similarity score, clamped into `[0, 1]`.
    fn noise_factor(&self, similarity: f64) -> Result<f64> {
        let c = if similarity.is_finite() {
            similarity.clamp(0.0, 1.0)
        } else {
            return Err(Error::input(
                "motion config",
                format!("non-finite similarity {similarity}"),
            ));
        };
        let factor = c + self.lambda_c;
        if factor <= 1e-12 {
            return Err(Error::input(
                "motion config",
                format!("similarity {c} plus lambda_c {} is not positive", self.lambda_c),
            ));
        }
        Ok(factor)
    }
}

/// Propagates a state one frame ahead. The process noise is divided by
/// `similarity + lambda_c` unless the config scales measurement noise only.
pub fn predict(state: &MotionState, cfg: &MotionModelConfig, similarity: f64) -> Result<MotionState> {
    let factor = cfg.noise_factor(similarity)?;
    let q_base = cfg.noise.process_noise(state.mean[3]);
    let q = if cfg.scale_r_only { q_base } else { q_base / factor };
    let mean = cfg.transition * state.mean;
    let covariance = cfg.transition * state.covariance * cfg.transition.transpose() + q;
    MotionState::from_filter(mean, covariance, "predict")
}

fn scaled_measurement_noise(
    state: &MotionState,
    cfg: &MotionModelConfig,
    similarity: f64,
) -> Result<MeasurementMatrix> {
    let factor = cfg.noise_factor(similarity)?;
    Ok(cfg.noise.measurement_noise(state.mean[3]) / factor)
}

fn gain_and_noise(
    state: &MotionState,
    cfg: &MotionModelConfig,
    similarity: f64,
) -> Result<(GainMatrix, MeasurementMatrix)> {
    let r = scaled_measurement_noise(state, cfg, similarity)?;
    let h = cfg.observation;
    let s = h * state.covariance * h.transpose() + r;
    let chol = Cholesky::new(symmetrize_meas(s)).ok_or_else(|| {
        Error::numerical("update: innovation covariance is not positive definite")
    })?;
    let gain = state.covariance * h.transpose() * chol.inverse();
    Ok((gain, r))
}

fn symmetrize_meas(m: MeasurementMatrix) -> MeasurementMatrix {
    (m + m.transpose()) * 0.5
}

/// The Kalman gain the update would use for this state and similarity.
pub fn kalman_gain(
    state: &MotionState,
    cfg: &MotionModelConfig,
    similarity: f64,
) -> Result<GainMatrix> {
    gain_and_noise(state, cfg, similarity).map(|(k, _)| k)
}

/// Conditions a predicted state on a measurement. The measurement noise is
/// divided by `similarity + lambda_c`; the covariance update uses the
/// Joseph form `(I - KH) P (I - KH)' + K R* K'`.
pub fn update(
    state: &MotionState,
    z: &Measurement,
    cfg: &MotionModelConfig,
    similarity: f64,
) -> Result<MotionState> {
    let (k, r) = gain_and_noise(state, cfg, similarity)?;
    let h = cfg.observation;
    let innovation = z.as_vector() - h * state.mean;
    let mean = state.mean + k * innovation;
    let i_kh = StateMatrix::identity() - k * h;
    let covariance = i_kh * state.covariance * i_kh.transpose() + k * r * k.transpose();
    MotionState::from_filter(mean, covariance, "update")
}

/// Squared Mahalanobis distance of a measurement from the state's predicted
/// measurement, under the state's own projected covariance `H P H'`. This is
/// what the association gate consumes; a confident (tight) filter therefore
/// gates harder than an uncertain one.
pub fn mahalanobis(state: &MotionState, z: &Measurement, cfg: &MotionModelConfig) -> Result<f64> {
    let h = cfg.observation;
    let s = symmetrize_meas(h * state.covariance * h.transpose());
    let chol = Cholesky::new(s).ok_or_else(|| {
        Error::numerical("mahalanobis: projected covariance is not positive definite")
    })?;
    let residual = z.as_vector() - h * state.mean;
    let solved = chol.solve(&residual);
    Ok(residual.dot(&solved).max(0.0))
}

/// Whether a squared distance passes the gate. The boundary is admissible.
pub fn gate(squared_distance: f64, cfg: &MotionModelConfig) -> bool {
    squared_distance <= cfg.gate_threshold
}

/// Normalized estimation error squared against a known true state:
/// `e' P^-1 e` for `e = mean - truth`. Averages to the state dimension for
/// a consistent filter.
pub fn nees(state: &MotionState, truth: &StateVector) -> Result<f64> {
    let chol = Cholesky::new(state.covariance)
        .ok_or_else(|| Error::numerical("nees: covariance is not positive definite"))?;
    let e = state.mean - truth;
    let solved = chol.solve(&e);
    Ok(e.dot(&solved).max(0.0))
}

/// Starts a track from a first measurement: zero velocities and the noise
/// model's inflated initial covariance.
pub fn initiate(z: &Measurement, cfg: &MotionModelConfig) -> MotionState {
    let mut mean = StateVector::zeros();
    mean[0] = z.u;
    mean[1] = z.v;
    mean[2] = z.gamma;
    mean[3] = z.h;
    MotionState {
        mean,
        covariance: cfg.noise.initial_covariance(z.h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fixed_cfg(q_diag: f64, r_diag: f64) -> MotionModelConfig {
        MotionModelConfig {
            noise: NoiseModel::fixed(
                StateMatrix::identity() * q_diag,
                MeasurementMatrix::identity() * r_diag,
                StateMatrix::identity(),
            ),
            ..MotionModelConfig::default()
        }
    }

    fn state_at(mean: [f64; 8], cov: StateMatrix) -> MotionState {
        MotionState::new(StateVector::from_row_slice(&mean), cov).unwrap()
    }

    fn meas(u: f64, v: f64, gamma: f64, h: f64) -> Measurement {
        Measurement::new(u, v, gamma, h).unwrap()
    }

    #[test]
    fn transition_moves_position_by_velocity() {
        let cfg = fixed_cfg(0.0, 1.0);
        let state = state_at(
            [10.0, 20.0, 0.5, 40.0, 3.0, -2.0, 0.0, 1.0],
            StateMatrix::identity(),
        );
        let predicted = predict(&state, &cfg, 0.5).unwrap();
        assert_eq!(predicted.mean[0], 13.0);
        assert_eq!(predicted.mean[1], 18.0);
        assert_eq!(predicted.mean[2], 0.5);
        assert_eq!(predicted.mean[3], 41.0);
        assert_eq!(predicted.mean[4], 3.0);
    }

    #[test]
    fn identity_transition_zero_noise_is_exact_fixpoint() {
        let mut cfg = fixed_cfg(0.0, 1.0);
        cfg.transition = StateMatrix::identity();
        let state = state_at(
            [1.0, 2.0, 0.5, 50.0, 0.1, 0.2, 0.0, 0.3],
            StateMatrix::identity() * 2.0,
        );
        let predicted = predict(&state, &cfg, 0.5).unwrap();
        assert_eq!(predicted.mean, state.mean);
        assert_eq!(predicted.covariance, state.covariance);
    }

    #[test]
    fn neutral_similarity_leaves_noise_untouched() {
        // similarity 0.5 with lambda_c 0.5 divides by exactly 1.0, which is
        // a bitwise no-op for every entry.
        let cfg = fixed_cfg(0.37, 1.0);
        let state = state_at(
            [5.0, 6.0, 0.4, 30.0, 1.0, 1.0, 0.0, 0.0],
            StateMatrix::identity() * 1.5,
        );
        let predicted = predict(&state, &cfg, 0.5).unwrap();
        let expected = symmetrize(
            cfg.transition * state.covariance * cfg.transition.transpose()
                + cfg.noise.process_noise(state.mean[3]),
        );
        assert_eq!(predicted.covariance, expected);
    }

    #[test]
    fn confident_match_shrinks_effective_noise() {
        let cfg = fixed_cfg(1.0, 1.0);
        let state = state_at(
            [0.0, 0.0, 0.5, 40.0, 0.0, 0.0, 0.0, 0.0],
            StateMatrix::identity() * 1e-6,
        );
        let neutral = predict(&state, &cfg, 0.5).unwrap();
        let confident = predict(&state, &cfg, 1.0).unwrap();
        // With negligible prior covariance the predicted covariance is
        // essentially the scaled Q; confident similarity divides by 1.5.
        assert!(confident.covariance[(0, 0)] < neutral.covariance[(0, 0)]);
        assert_relative_eq!(
            confident.covariance[(0, 0)] * 1.5,
            neutral.covariance[(0, 0)],
            max_relative = 1e-5
        );
    }

    #[test]
    fn scale_r_only_leaves_process_noise_fixed() {
        let mut cfg = fixed_cfg(1.0, 1.0);
        cfg.scale_r_only = true;
        let state = state_at(
            [0.0, 0.0, 0.5, 40.0, 0.0, 0.0, 0.0, 0.0],
            StateMatrix::identity(),
        );
        let a = predict(&state, &cfg, 0.1).unwrap();
        let b = predict(&state, &cfg, 0.9).unwrap();
        assert_eq!(a.covariance, b.covariance);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let cfg = fixed_cfg(1.0, 2.0);
        let state = state_at(
            [100.0, 50.0, 0.5, 60.0, 2.0, -1.0, 0.0, 0.5],
            StateMatrix::identity() * 3.0,
        );
        let z = meas(100.0, 50.0, 0.5, 60.0);
        let updated = update(&state, &z, &cfg, 0.5).unwrap();
        assert_eq!(updated.mean, state.mean);
        // Covariance still contracts: the measurement is informative.
        assert!(updated.covariance[(0, 0)] < state.covariance[(0, 0)]);
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let cfg = fixed_cfg(1.0, 1e12);
        let state = state_at(
            [100.0, 50.0, 0.5, 60.0, 2.0, -1.0, 0.0, 0.5],
            StateMatrix::identity() * 3.0,
        );
        let z = meas(140.0, 90.0, 0.8, 80.0);
        let updated = update(&state, &z, &cfg, 0.5).unwrap();
        for i in 0..8 {
            assert_relative_eq!(updated.mean[i], state.mean[i], max_relative = 1e-6, epsilon = 1e-6);
            assert_relative_eq!(
                updated.covariance[(i, i)],
                state.covariance[(i, i)],
                max_relative = 1e-6
            );
        }
    }

    /// Hand-written 2-state (position, velocity) filter with scalar
    /// arithmetic only. With diagonal noise the 8-dim filter decouples into
    /// four such pairs, so dimension (u, du) must reproduce it exactly.
    struct ScalarPair {
        x: [f64; 2],
        p: [[f64; 2]; 2],
    }

    impl ScalarPair {
        fn predict(&mut self, qp: f64, qv: f64) {
            // x = F x with F = [[1,1],[0,1]]
            self.x[0] += self.x[1];
            // P = F P F' + Q, expanded by hand.
            let [[p00, p01], [p10, p11]] = self.p;
            self.p = [
                [p00 + p01 + p10 + p11 + qp, p01 + p11],
                [p10 + p11, p11 + qv],
            ];
        }

        fn update(&mut self, z: f64, r: f64) {
            let [[p00, p01], [p10, p11]] = self.p;
            let s = p00 + r;
            let k = [p00 / s, p10 / s];
            let innov = z - self.x[0];
            self.x[0] += k[0] * innov;
            self.x[1] += k[1] * innov;
            // Joseph form: (I-KH) P (I-KH)' + K r K' with H = [1, 0].
            let a = [[1.0 - k[0], 0.0], [-k[1], 1.0]];
            let ap = [
                [a[0][0] * p00, a[0][0] * p01],
                [a[1][0] * p00 + p10, a[1][0] * p01 + p11],
            ];
            self.p = [
                [
                    ap[0][0] * a[0][0] + k[0] * r * k[0],
                    ap[0][0] * a[1][0] + ap[0][1] + k[0] * r * k[1],
                ],
                [
                    ap[1][0] * a[0][0] + k[1] * r * k[0],
                    ap[1][0] * a[1][0] + ap[1][1] + k[1] * r * k[1],
                ],
            ];
        }
    }

    #[test]
    fn matches_scalar_recursion_on_decoupled_dimension() {
        let (qp, qv, r) = (0.3, 0.05, 0.8);
        let similarity = 0.8; // factor 1.3 exercises the scaling path too
        let factor = 0.8 + 0.5;
        let mut q = StateMatrix::zeros();
        for i in 0..4 {
            q[(i, i)] = qp;
            q[(i + 4, i + 4)] = qv;
        }
        let cfg = MotionModelConfig {
            noise: NoiseModel::fixed(
                q,
                MeasurementMatrix::identity() * r,
                StateMatrix::identity(),
            ),
            ..MotionModelConfig::default()
        };
        let mut state = state_at(
            [10.0, 5.0, 0.5, 40.0, 1.0, 0.0, 0.0, 0.0],
            StateMatrix::identity() * 2.0,
        );
        let mut oracle = ScalarPair {
            x: [10.0, 1.0],
            p: [[2.0, 0.0], [0.0, 2.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10 {
            state = predict(&state, &cfg, similarity).unwrap();
            oracle.predict(qp / factor, qv / factor);
            let z_u = oracle.x[0] + rng.sample::<f64, _>(StandardNormal);
            let z = meas(z_u, state.mean[1], state.mean[2].max(0.1), state.mean[3].max(1.0));
            state = update(&state, &z, &cfg, similarity).unwrap();
            oracle.update(z_u, r / factor);
            assert_relative_eq!(state.mean[0], oracle.x[0], max_relative = 1e-12);
            assert_relative_eq!(state.mean[4], oracle.x[1], max_relative = 1e-12);
            assert_relative_eq!(state.covariance[(0, 0)], oracle.p[0][0], max_relative = 1e-12);
            assert_relative_eq!(state.covariance[(0, 4)], oracle.p[0][1], max_relative = 1e-12);
            assert_relative_eq!(state.covariance[(4, 4)], oracle.p[1][1], max_relative = 1e-12);
        }
    }

    #[test]
    fn mahalanobis_identity_covariance_is_squared_norm() {
        let cfg = fixed_cfg(1.0, 1.0);
        let state = state_at(
            [0.0, 0.0, 1.0, 10.0, 0.0, 0.0, 0.0, 0.0],
            StateMatrix::identity(),
        );
        let z = meas(3.0, 4.0, 1.0, 10.0);
        // Residual (3, 4, 0, 0) under S = I: distance 25.
        assert_relative_eq!(
            mahalanobis(&state, &z, &cfg).unwrap(),
            25.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = fixed_cfg(1.0, 1.0);
        for _ in 0..20 {
            let a = StateMatrix::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let cov = a * a.transpose() + StateMatrix::identity() * 0.5;
            let mean = StateVector::from_fn(|i, _| {
                if i == 2 {
                    rng.random_range(0.3..0.8)
                } else if i == 3 {
                    rng.random_range(20.0..80.0)
                } else {
                    rng.random_range(-50.0..50.0)
                }
            });
            let state = MotionState::new(mean, symmetrize(cov)).unwrap();
            let z = meas(
                mean[0] + rng.random_range(-5.0..5.0),
                mean[1] + rng.random_range(-5.0..5.0),
                (mean[2] + rng.random_range(-0.1..0.1)).max(0.05),
                (mean[3] + rng.random_range(-5.0..5.0)).max(1.0),
            );
            let fast = mahalanobis(&state, &z, &cfg).unwrap();
            let h = cfg.observation;
            let s = h * state.covariance * h.transpose();
            let s_inv = s.try_inverse().unwrap();
            let resid = z.as_vector() - h * state.mean;
            let reference = (resid.transpose() * s_inv * resid)[(0, 0)];
            assert_relative_eq!(fast, reference, max_relative = 1e-9);
        }
    }

    #[test]
    fn gate_boundary_is_inclusive() {
        let cfg = MotionModelConfig::default();
        assert!(gate(0.0, &cfg));
        assert!(gate(9.4877, &cfg));
        assert!(!gate(9.4877 + 1e-9, &cfg));
        assert!(!gate(f64::INFINITY, &cfg));
    }

    #[test]
    fn nees_basics() {
        let truth = StateVector::from_row_slice(&[1.0, 2.0, 0.5, 40.0, 0.0, 0.0, 0.0, 0.0]);
        let exact = MotionState::new(truth, StateMatrix::identity()).unwrap();
        assert_eq!(nees(&exact, &truth).unwrap(), 0.0);

        let mut off = truth;
        off[0] += 1.0;
        let state = MotionState::new(off, StateMatrix::identity()).unwrap();
        assert_relative_eq!(nees(&state, &truth).unwrap(), 1.0, max_relative = 1e-12);

        let state = MotionState::new(off, StateMatrix::identity() * 4.0).unwrap();
        assert_relative_eq!(nees(&state, &truth).unwrap(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn covariance_stays_symmetric_and_positive() {
        let cfg = MotionModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z0 = meas(300.0, 200.0, 0.5, 60.0);
        let mut state = initiate(&z0, &cfg);
        for step in 0..50 {
            let sim = rng.random_range(0.0..1.0);
            state = predict(&state, &cfg, sim).unwrap();
            let z = meas(
                300.0 + step as f64 + rng.random_range(-3.0..3.0),
                200.0 + rng.random_range(-3.0..3.0),
                0.5 + rng.random_range(-0.02..0.02),
                60.0 + rng.random_range(-2.0..2.0),
            );
            state = update(&state, &z, &cfg, sim).unwrap();
            assert_eq!(state.covariance, state.covariance.transpose());
            let eigen = state.covariance.symmetric_eigenvalues();
            assert!(
                eigen.iter().all(|&e| e > 0.0),
                "non-positive eigenvalue at step {step}: {eigen:?}"
            );
        }
    }

    #[test]
    fn gain_invariant_under_joint_noise_scaling() {
        let scale = 3.7;
        let build = |s: f64| {
            let mut q = StateMatrix::zeros();
            for i in 0..4 {
                q[(i, i)] = 0.4 * s;
                q[(i + 4, i + 4)] = 0.02 * s;
            }
            MotionModelConfig {
                noise: NoiseModel::fixed(
                    q,
                    MeasurementMatrix::identity() * (1.3 * s),
                    StateMatrix::identity() * s,
                ),
                ..MotionModelConfig::default()
            }
        };
        let cfg_a = build(1.0);
        let cfg_b = build(scale);
        let z0 = meas(100.0, 100.0, 0.5, 50.0);
        let mut state_a = initiate(&z0, &cfg_a);
        let mut state_b = initiate(&z0, &cfg_b);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut d_ratios = Vec::new();
        for _ in 0..200 {
            state_a = predict(&state_a, &cfg_a, 0.5).unwrap();
            state_b = predict(&state_b, &cfg_b, 0.5).unwrap();
            let z = meas(
                100.0 + rng.random_range(-2.0..2.0),
                100.0 + rng.random_range(-2.0..2.0),
                0.5,
                50.0,
            );
            d_ratios.push(
                mahalanobis(&state_a, &z, &cfg_a).unwrap()
                    / mahalanobis(&state_b, &z, &cfg_b).unwrap(),
            );
            state_a = update(&state_a, &z, &cfg_a, 0.5).unwrap();
            state_b = update(&state_b, &z, &cfg_b, 0.5).unwrap();
        }
        let gain_a = kalman_gain(&state_a, &cfg_a, 0.5).unwrap();
        let gain_b = kalman_gain(&state_b, &cfg_b, 0.5).unwrap();
        for i in 0..8 {
            for j in 0..4 {
                assert_relative_eq!(
                    gain_a[(i, j)],
                    gain_b[(i, j)],
                    max_relative = 1e-6,
                    epsilon = 1e-9
                );
            }
        }
        // The gate distance is NOT invariant: scaling all covariances by s
        // divides every squared distance by s.
        for ratio in &d_ratios[5..] {
            assert_relative_eq!(*ratio, scale, max_relative = 1e-6);
        }
    }

    #[test]
    fn heuristic_noise_scales_quadratically_with_height() {
        let noise = NoiseModel::heuristic();
        let q_small = noise.process_noise(50.0);
        let q_large = noise.process_noise(100.0);
        assert_relative_eq!(q_large[(0, 0)], 4.0 * q_small[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(q_large[(4, 4)], 4.0 * q_small[(4, 4)], max_relative = 1e-12);
        // Aspect-ratio noise is height-independent.
        assert_eq!(q_large[(2, 2)], q_small[(2, 2)]);
    }

    #[test]
    fn initiate_zero_velocity_inflated_uncertainty() {
        let cfg = MotionModelConfig::default();
        let state = initiate(&meas(320.0, 240.0, 0.5, 80.0), &cfg);
        assert_eq!(state.mean[4], 0.0);
        assert_eq!(state.mean[5], 0.0);
        assert_eq!(state.mean[7], 0.0);
        assert!(state.covariance[(4, 4)] > state.covariance[(0, 0)]);
        assert!(Cholesky::new(state.covariance).is_some());
    }

    #[test]
    fn overflowing_state_reports_numerical_failure() {
        let cfg = fixed_cfg(1.0, 1.0);
        let state = MotionState {
            mean: StateVector::from_element(1e308),
            covariance: StateMatrix::identity() * 1e308,
        };
        let res = predict(&state, &cfg, 0.5);
        assert!(matches!(res, Err(Error::Numerical(_))), "got {res:?}");
    }

    #[test]
    fn motion_state_validation() {
        let mean = StateVector::zeros();
        assert!(MotionState::new(mean, StateMatrix::identity()).is_ok());
        // Not positive definite.
        assert!(MotionState::new(mean, StateMatrix::zeros()).is_err());
        // Asymmetric.
        let mut cov = StateMatrix::identity();
        cov[(0, 1)] = 0.5;
        assert!(MotionState::new(mean, cov).is_err());
        // Non-finite.
        let mut cov = StateMatrix::identity();
        cov[(0, 0)] = f64::NAN;
        assert!(MotionState::new(mean, cov).is_err());
    }
}
