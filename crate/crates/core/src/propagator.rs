//! Exact piecewise-constant propagation of the master equation.
//!
//! Each pulse stage has constant drives, so the equation of motion is linear
//! time-invariant and exp(Q·dt) is exact; the kernel is scaling-and-squaring
//! with a Padé(13) approximant. A classical fixed-step RK4 integrator is kept
//! as an independent cross-check, and emission integrals are accumulated
//! through an augmented absorbing row rather than post-hoc quadrature.

use thiserror::Error;

use crate::model::{Generator, ModelError, StateVector, N_LEVELS, OCCUPATION_CLAMP};

#[derive(Debug, Error, PartialEq)]
pub enum PropagateError {
    #[error("duration must be finite and >= 0, got {0} ns")]
    NegativeDuration(f64),
    #[error("integration step must be finite and > 0, got {0} ns")]
    BadStep(f64),
    #[error("non-finite generator entry {value} at ({to}, {from})")]
    NonFiniteGenerator { to: usize, from: usize, value: f64 },
    #[error("emission weight at level {index} must be finite and >= 0, got {value}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("propagation produced an invalid state: {0}")]
    State(#[from] ModelError),
}

/// Final state of a step together with the emission accumulated over it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagation {
    pub final_state: StateVector,
    /// ∫ w·P(t) dt over the step; dimensionless for weights in ns⁻¹.
    pub emission_integral: f64,
}

// Padé(13) numerator coefficients b0..b13 (denominator uses alternating signs).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// 1-norm threshold above which the argument is scaled down before Padé(13).
const THETA13: f64 = 5.371920351148152;

fn mat_mul<const N: usize>(a: &[[f64; N]; N], b: &[[f64; N]; N]) -> [[f64; N]; N] {
    let mut out = [[0.0; N]; N];
    for i in 0..N {
        for k in 0..N {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..N {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn mat_vec<const N: usize>(a: &[[f64; N]; N], x: &[f64; N]) -> [f64; N] {
    let mut out = [0.0; N];
    for i in 0..N {
        let mut acc = 0.0;
        for j in 0..N {
            acc += a[i][j] * x[j];
        }
        out[i] = acc;
    }
    out
}

fn norm_1<const N: usize>(a: &[[f64; N]; N]) -> f64 {
    (0..N)
        .map(|j| (0..N).map(|i| a[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves A·X = B in place by Gaussian elimination with partial pivoting.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [[f64; N]; N]) -> [[f64; N]; N] {
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        if pivot != col {
            a.swap(col, pivot);
            b.swap(col, pivot);
        }
        let diag = a[col][col];
        for row in col + 1..N {
            let factor = a[row][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..N {
                a[row][j] -= factor * a[col][j];
            }
            for j in 0..N {
                b[row][j] -= factor * b[col][j];
            }
        }
    }
    for col in (0..N).rev() {
        let diag = a[col][col];
        for j in 0..N {
            b[col][j] /= diag;
        }
        for row in 0..col {
            let factor = a[row][col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..N {
                b[row][j] -= factor * b[col][j];
            }
        }
    }
    b
}

/// Matrix exponential by scaling-and-squaring with Padé(13).
pub(crate) fn expm<const N: usize>(a: &[[f64; N]; N]) -> [[f64; N]; N] {
    let norm = norm_1(a);
    let squarings = if norm > THETA13 {
        ((norm / THETA13).log2().ceil() as u32).min(64)
    } else {
        0
    };
    let scale = (0.5f64).powi(squarings as i32);
    let mut m = *a;
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let ident = identity::<N>();
    let m2 = mat_mul(&m, &m);
    let m4 = mat_mul(&m2, &m2);
    let m6 = mat_mul(&m2, &m4);

    // u = m·(m6·(b13 m6 + b11 m4 + b9 m2) + b7 m6 + b5 m4 + b3 m2 + b1 I)
    let mut w = lin3(&m6, PADE13[13], &m4, PADE13[11], &m2, PADE13[9]);
    w = mat_mul(&m6, &w);
    add_lin3(&mut w, &m6, PADE13[7], &m4, PADE13[5], &m2, PADE13[3]);
    add_scaled(&mut w, &ident, PADE13[1]);
    let u = mat_mul(&m, &w);

    // v = m6·(b12 m6 + b10 m4 + b8 m2) + b6 m6 + b4 m4 + b2 m2 + b0 I
    let mut v = lin3(&m6, PADE13[12], &m4, PADE13[10], &m2, PADE13[8]);
    v = mat_mul(&m6, &v);
    add_lin3(&mut v, &m6, PADE13[6], &m4, PADE13[4], &m2, PADE13[2]);
    add_scaled(&mut v, &ident, PADE13[0]);

    // exp(m) ≈ (v - u)⁻¹ (v + u)
    let mut vmu = v;
    let mut vpu = v;
    for i in 0..N {
        for j in 0..N {
            vmu[i][j] -= u[i][j];
            vpu[i][j] += u[i][j];
        }
    }
    let mut result = solve(vmu, vpu);
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

fn identity<const N: usize>() -> [[f64; N]; N] {
    let mut out = [[0.0; N]; N];
    for (i, row) in out.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    out
}

fn lin3<const N: usize>(
    a: &[[f64; N]; N],
    ca: f64,
    b: &[[f64; N]; N],
    cb: f64,
    c: &[[f64; N]; N],
    cc: f64,
) -> [[f64; N]; N] {
    let mut out = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..N {
            out[i][j] = ca * a[i][j] + cb * b[i][j] + cc * c[i][j];
        }
    }
    out
}

fn add_lin3<const N: usize>(
    acc: &mut [[f64; N]; N],
    a: &[[f64; N]; N],
    ca: f64,
    b: &[[f64; N]; N],
    cb: f64,
    c: &[[f64; N]; N],
    cc: f64,
) {
    for i in 0..N {
        for j in 0..N {
            acc[i][j] += ca * a[i][j] + cb * b[i][j] + cc * c[i][j];
        }
    }
}

fn add_scaled<const N: usize>(acc: &mut [[f64; N]; N], a: &[[f64; N]; N], c: f64) {
    for i in 0..N {
        for j in 0..N {
            acc[i][j] += c * a[i][j];
        }
    }
}

fn check_generator(g: &Generator) -> Result<(), PropagateError> {
    for (to, row) in g.matrix().iter().enumerate() {
        for (from, &value) in row.iter().enumerate() {
            if !value.is_finite() {
                return Err(PropagateError::NonFiniteGenerator { to, from, value });
            }
        }
    }
    Ok(())
}

/// Clamps roundoff-negative occupations to 0 and validates the result.
fn finalize_state(mut raw: [f64; N_LEVELS]) -> Result<StateVector, PropagateError> {
    for (index, value) in raw.iter_mut().enumerate() {
        if *value < 0.0 {
            if *value < -OCCUPATION_CLAMP {
                return Err(PropagateError::State(ModelError::NegativeOccupation {
                    index,
                    value: *value,
                }));
            }
            *value = 0.0;
        }
    }
    Ok(StateVector::new(raw)?)
}

/// Propagates `p0` under `g` for `dt` nanoseconds via the matrix exponential.
pub fn expm_propagate(
    g: &Generator,
    p0: &StateVector,
    dt_ns: f64,
) -> Result<StateVector, PropagateError> {
    if !dt_ns.is_finite() || dt_ns < 0.0 {
        return Err(PropagateError::NegativeDuration(dt_ns));
    }
    check_generator(g)?;
    if dt_ns == 0.0 {
        return Ok(*p0);
    }
    let mut a = *g.matrix();
    for row in a.iter_mut() {
        for v in row.iter_mut() {
            *v *= dt_ns;
        }
    }
    let e = expm(&a);
    finalize_state(mat_vec(&e, p0.raw()))
}

/// Classical fixed-step fourth-order integration of dP/dt = Q·P.
///
/// The requested step is shortened to divide `dt` evenly. Serves as the
/// independent cross-check for [`expm_propagate`].
pub fn rk4_propagate(
    g: &Generator,
    p0: &StateVector,
    dt_ns: f64,
    step_ns: f64,
) -> Result<StateVector, PropagateError> {
    if !dt_ns.is_finite() || dt_ns < 0.0 {
        return Err(PropagateError::NegativeDuration(dt_ns));
    }
    if !step_ns.is_finite() || step_ns <= 0.0 {
        return Err(PropagateError::BadStep(step_ns));
    }
    check_generator(g)?;
    if dt_ns == 0.0 {
        return Ok(*p0);
    }
    let n_steps = (dt_ns / step_ns).ceil().max(1.0) as u64;
    let h = dt_ns / n_steps as f64;
    let q = g.matrix();
    let mut p = *p0.raw();
    for _ in 0..n_steps {
        p = rk4_step(q, &p, h);
    }
    finalize_state(p)
}

pub(crate) fn rk4_step(
    q: &[[f64; N_LEVELS]; N_LEVELS],
    p: &[f64; N_LEVELS],
    h: f64,
) -> [f64; N_LEVELS] {
    let k1 = mat_vec(q, p);
    let mut tmp = *p;
    axpy(&mut tmp, 0.5 * h, &k1);
    let k2 = mat_vec(q, &tmp);
    tmp = *p;
    axpy(&mut tmp, 0.5 * h, &k2);
    let k3 = mat_vec(q, &tmp);
    tmp = *p;
    axpy(&mut tmp, h, &k3);
    let k4 = mat_vec(q, &tmp);
    let mut out = *p;
    for i in 0..N_LEVELS {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn axpy(acc: &mut [f64; N_LEVELS], c: f64, x: &[f64; N_LEVELS]) {
    for i in 0..N_LEVELS {
        acc[i] += c * x[i];
    }
}

/// Propagates for `dt` while accumulating ∫ w·P dt through a ninth absorbing
/// accumulator row, so the integral shares the exponential's accuracy.
pub fn propagate_with_emission(
    g: &Generator,
    p0: &StateVector,
    dt_ns: f64,
    weights: &[f64; N_LEVELS],
) -> Result<Propagation, PropagateError> {
    if !dt_ns.is_finite() || dt_ns < 0.0 {
        return Err(PropagateError::NegativeDuration(dt_ns));
    }
    for (index, &value) in weights.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(PropagateError::NegativeWeight { index, value });
        }
    }
    check_generator(g)?;
    if dt_ns == 0.0 {
        return Ok(Propagation {
            final_state: *p0,
            emission_integral: 0.0,
        });
    }

    let mut aug = [[0.0; N_LEVELS + 1]; N_LEVELS + 1];
    let q = g.matrix();
    for i in 0..N_LEVELS {
        for j in 0..N_LEVELS {
            aug[i][j] = q[i][j] * dt_ns;
        }
        aug[N_LEVELS][i] = weights[i] * dt_ns;
    }
    let e = expm(&aug);
    let mut x0 = [0.0; N_LEVELS + 1];
    x0[..N_LEVELS].copy_from_slice(p0.raw());
    let x = mat_vec(&e, &x0);

    let mut raw = [0.0; N_LEVELS];
    raw.copy_from_slice(&x[..N_LEVELS]);
    let final_state = finalize_state(raw)?;
    let mut emission = x[N_LEVELS];
    if emission < 0.0 {
        // the accumulator integrates a nonnegative quantity; only roundoff may dip below 0
        if emission < -OCCUPATION_CLAMP {
            return Err(PropagateError::State(ModelError::NegativeOccupation {
                index: N_LEVELS,
                value: emission,
            }));
        }
        emission = 0.0;
    }
    Ok(Propagation {
        final_state,
        emission_integral: emission,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_generator, Channel, DriveSetting, IntrinsicRates, Level, RateSet, MHZ_TO_PER_NS,
    };
    use std::collections::BTreeMap;

    fn dark_generator() -> Generator {
        RateSet::default().generator(&[]).unwrap()
    }

    #[test]
    fn zero_duration_returns_input_exactly() {
        let g = dark_generator();
        let p0 = StateVector::new([0.1, 0.2, 0.3, 0.1, 0.05, 0.05, 0.1, 0.1]).unwrap();
        assert_eq!(expm_propagate(&g, &p0, 0.0).unwrap(), p0);
        assert_eq!(rk4_propagate(&g, &p0, 0.0, 0.5).unwrap(), p0);
    }

    #[test]
    fn zero_generator_is_identity_dynamics() {
        let g = Generator::zero();
        let p0 = StateVector::new([0.3, 0.1, 0.2, 0.1, 0.1, 0.1, 0.05, 0.05]).unwrap();
        let out = rk4_propagate(&g, &p0, 123.0, 0.25).unwrap();
        for (a, b) in out.raw().iter().zip(p0.raw()) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = expm_propagate(&g, &p0, 123.0).unwrap();
        for (a, b) in out.raw().iter().zip(p0.raw()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn singlet_ground_half_life() {
        // dark decay at k_sg0 = 3.3 MHz: half-life ln 2 / 0.0033 ns⁻¹ = 210.04 ns
        let g = dark_generator();
        let p0 = StateVector::pure(Level::SingletGround);
        let out = expm_propagate(&g, &p0, 210.04).unwrap();
        assert!((out.occupation(Level::SingletGround) - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn excited_triplet_lifetime() {
        // k_f_minus = 77 MHz gives a ~13 ns radiative lifetime
        let g = dark_generator();
        let p0 = StateVector::pure(Level::ExcitedMs0);
        let out = rk4_propagate(&g, &p0, 13.0, 0.01).unwrap();
        let expected = 1.0 - (-13.0 * 77.0 * MHZ_TO_PER_NS).exp();
        assert!((out.occupation(Level::GroundMs0) - (1.0 - (-1.0f64).exp())).abs() <= 1e-3);
        assert!((out.occupation(Level::GroundMs0) - expected).abs() <= 1e-9);
    }

    #[test]
    fn expm_matches_rk4_on_driven_generator() {
        let rates = RateSet::default();
        let g = rates
            .generator(&[DriveSetting::new(Channel::GreenFilter, 10.0)])
            .unwrap();
        let p0 = StateVector::new([0.25, 0.25, 0.1, 0.1, 0.05, 0.15, 0.05, 0.05]).unwrap();
        let a = expm_propagate(&g, &p0, 100.0).unwrap();
        let b = rk4_propagate(&g, &p0, 100.0, 0.01).unwrap();
        for i in 0..N_LEVELS {
            assert!((a.raw()[i] - b.raw()[i]).abs() <= 1e-8, "level {i}");
        }
    }

    #[test]
    fn emission_zero_weights() {
        let g = dark_generator();
        let p0 = StateVector::pure(Level::ExcitedMs1);
        let prop = propagate_with_emission(&g, &p0, 50.0, &[0.0; N_LEVELS]).unwrap();
        assert_eq!(prop.emission_integral, 0.0);
    }

    #[test]
    fn emission_counts_radiative_branching() {
        // with k_es0 = 0 every decay out of the m_s = 0 excited level is radiative,
        // so the long-time emission integral with weight k_f_minus equals 1
        let g = dark_generator();
        let p0 = StateVector::pure(Level::ExcitedMs0);
        let mut w = [0.0; N_LEVELS];
        w[Level::ExcitedMs0.index()] = 77.0 * MHZ_TO_PER_NS;
        w[Level::ExcitedMs1.index()] = 77.0 * MHZ_TO_PER_NS;
        let prop = propagate_with_emission(&g, &p0, 2000.0, &w).unwrap();
        assert!((prop.emission_integral - 1.0).abs() < 1e-8);

        // the m_s = ±1 branch loses 30/107 of its decays to the singlet
        let p1 = StateVector::pure(Level::ExcitedMs1);
        let prop = propagate_with_emission(&g, &p1, 2000.0, &w).unwrap();
        assert!((prop.emission_integral - 77.0 / 107.0).abs() < 1e-8);
    }

    #[test]
    fn emission_final_state_matches_expm() {
        let rates = RateSet::default();
        let g = rates
            .generator(&[DriveSetting::new(Channel::Green532, 0.2)])
            .unwrap();
        let p0 = StateVector::ground_mixture();
        let mut w = [0.0; N_LEVELS];
        w[2] = 0.077;
        w[3] = 0.077;
        let prop = propagate_with_emission(&g, &p0, 400.0, &w).unwrap();
        let direct = expm_propagate(&g, &p0, 400.0).unwrap();
        for i in 0..N_LEVELS {
            assert!((prop.final_state.raw()[i] - direct.raw()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn emission_matches_quadrature_of_rk4_trajectory() {
        // trapezoid rule over the RK4 trajectory at 0.01 ns
        let rates = RateSet::default();
        let g = rates
            .generator(&[DriveSetting::new(Channel::Green532, 0.3)])
            .unwrap();
        let p0 = StateVector::new([0.4, 0.3, 0.0, 0.0, 0.0, 0.2, 0.1, 0.0]).unwrap();
        let mut w = [0.0; N_LEVELS];
        w[2] = 0.077;
        w[3] = 0.077;

        let h = 0.01;
        let n = (100.0_f64 / h) as usize;
        let q = g.matrix();
        let mut p = *p0.raw();
        let dot = |p: &[f64; N_LEVELS]| -> f64 { (0..N_LEVELS).map(|i| w[i] * p[i]).sum() };
        let mut integral = 0.5 * dot(&p);
        for k in 1..=n {
            p = rk4_step(q, &p, h);
            integral += if k == n { 0.5 * dot(&p) } else { dot(&p) };
        }
        integral *= h;

        let prop = propagate_with_emission(&g, &p0, 100.0, &w).unwrap();
        assert!(
            ((prop.emission_integral - integral) / integral).abs() <= 1e-6,
            "expm {} vs quadrature {}",
            prop.emission_integral,
            integral
        );
    }

    #[test]
    fn error_paths() {
        let g = dark_generator();
        let p0 = StateVector::ground_mixture();
        assert!(matches!(
            expm_propagate(&g, &p0, -1.0),
            Err(PropagateError::NegativeDuration(_))
        ));
        assert!(matches!(
            rk4_propagate(&g, &p0, 10.0, 0.0),
            Err(PropagateError::BadStep(_))
        ));
        let mut w = [0.0; N_LEVELS];
        w[4] = -0.5;
        assert!(matches!(
            propagate_with_emission(&g, &p0, 10.0, &w),
            Err(PropagateError::NegativeWeight { index: 4, .. })
        ));

        let intrinsic = IntrinsicRates {
            k_f_minus: f64::NAN,
            ..IntrinsicRates::default()
        };
        assert!(build_generator(&intrinsic, &BTreeMap::new(), &[]).is_err());
    }

    #[test]
    fn semigroup_property() {
        let rates = RateSet::default();
        let g = rates
            .generator(&[DriveSetting::new(Channel::BlueFilter, 20.0)])
            .unwrap();
        let p0 = StateVector::ground_mixture();
        let direct = expm_propagate(&g, &p0, 700.0).unwrap();
        let mid = expm_propagate(&g, &p0, 293.0).unwrap();
        let stepped = expm_propagate(&g, &mid, 407.0).unwrap();
        for i in 0..N_LEVELS {
            assert!((direct.raw()[i] - stepped.raw()[i]).abs() <= 1e-10);
        }
    }
}
