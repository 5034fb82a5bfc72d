//! Staged pulse-sequence protocol: initialization, spin inversion, singlet
//! population, ionization, and readout, plus the normalized-PL and PNP-ratio
//! curves built on top of it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Channel, DriveSetting, ModelError, RateSet, StateVector, MHZ_TO_PER_NS, N_LEVELS,
};
use crate::propagator::{propagate_with_emission, PropagateError};

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Propagate(#[from] PropagateError),
    #[error("sequence has no stages")]
    EmptySequence,
    #[error("reference PL at zero ionization power is not positive ({0})")]
    DegenerateReference(f64),
    #[error("power grid is empty")]
    EmptyGrid,
}

/// Instantaneous operations that can precede a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instantaneous {
    /// Perfect microwave π pulse: swaps the two ground-triplet spin projections.
    PiPulse,
}

/// One piecewise-constant segment of the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseStage {
    pub label: String,
    pub duration_ns: f64,
    #[serde(default)]
    pub drives: Vec<DriveSetting>,
    #[serde(default)]
    pub instantaneous_pre: Option<Instantaneous>,
    #[serde(default)]
    pub record_emission: bool,
}

impl PulseStage {
    pub fn dark(label: &str, duration_ns: f64) -> Self {
        PulseStage {
            label: label.to_string(),
            duration_ns,
            drives: Vec::new(),
            instantaneous_pre: None,
            record_emission: false,
        }
    }

    pub fn driven(label: &str, duration_ns: f64, channel: Channel, power_mw: f64) -> Self {
        PulseStage {
            label: label.to_string(),
            duration_ns,
            drives: vec![DriveSetting::new(channel, power_mw)],
            instantaneous_pre: None,
            record_emission: false,
        }
    }
}

/// Ordered stages applied to an initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub stages: Vec<PulseStage>,
    pub initial_state: StateVector,
}

/// Stage durations and powers of the standard protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub init_duration_ns: f64,
    pub init_power_mw: f64,
    pub init_dark_ns: f64,
    pub population_duration_ns: f64,
    pub population_power_mw: f64,
    pub delay_ns: f64,
    pub ion_duration_ns: f64,
    pub readout_window_ns: f64,
    pub readout_power_mw: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            init_duration_ns: 5000.0,
            init_power_mw: 0.2,
            init_dark_ns: 1000.0,
            population_duration_ns: 400.0,
            population_power_mw: 0.2,
            delay_ns: 30.0,
            ion_duration_ns: 100.0,
            readout_window_ns: 300.0,
            readout_power_mw: 0.2,
        }
    }
}

/// Swaps the ground-triplet m_s = 0 and m_s = ±1 occupations.
pub fn apply_pi(state: &StateVector) -> StateVector {
    let mut p = *state.raw();
    p.swap(0, 1);
    // a permutation of a valid state is valid
    StateVector::new(p).expect("pi pulse preserves state validity")
}

/// Builds the standard seven-stage sequence: initialization, dark relaxation,
/// optional π pulse, singlet population pulse, decay delay, ionization pulse,
/// and recorded readout. The π stage is always present so that `with_pi`
/// toggles exactly one `instantaneous_pre` tag and nothing else.
pub fn standard_protocol(
    ion_channel: Channel,
    ion_power_mw: f64,
    with_pi: bool,
    timing: &TimingConfig,
) -> Result<PulseSequence, SequenceError> {
    if !ion_power_mw.is_finite() || ion_power_mw < 0.0 {
        return Err(SequenceError::Model(ModelError::NegativePower(
            ion_power_mw,
        )));
    }
    let mut pi_stage = PulseStage::dark("pi", 0.0);
    pi_stage.instantaneous_pre = with_pi.then_some(Instantaneous::PiPulse);
    let mut readout = PulseStage::driven(
        "readout",
        timing.readout_window_ns,
        Channel::Green532,
        timing.readout_power_mw,
    );
    readout.record_emission = true;
    Ok(PulseSequence {
        stages: vec![
            PulseStage::driven(
                "init",
                timing.init_duration_ns,
                Channel::Green532,
                timing.init_power_mw,
            ),
            PulseStage::dark("init_dark", timing.init_dark_ns),
            pi_stage,
            PulseStage::driven(
                "population",
                timing.population_duration_ns,
                Channel::Green532,
                timing.population_power_mw,
            ),
            PulseStage::dark("delay", timing.delay_ns),
            PulseStage::driven("ion", timing.ion_duration_ns, ion_channel, ion_power_mw),
            readout,
        ],
        initial_state: StateVector::ground_mixture(),
    })
}

/// State and accumulated emission at the end of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub label: String,
    pub t_end_ns: f64,
    pub state: StateVector,
    pub emission: f64,
    pub recorded: bool,
}

/// Full trace of a sequence run.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRun {
    pub final_state: StateVector,
    pub stages: Vec<StageRecord>,
}

impl SequenceRun {
    /// Total emission over the stages flagged `record_emission`.
    pub fn recorded_emission(&self) -> f64 {
        self.stages
            .iter()
            .filter(|s| s.recorded)
            .map(|s| s.emission)
            .sum()
    }
}

/// PL collection weights: NV⁻ excited-triplet radiative decay only, in ns⁻¹.
pub fn emission_weights(rates: &RateSet) -> [f64; N_LEVELS] {
    let mut w = [0.0; N_LEVELS];
    w[2] = rates.intrinsic.k_f_minus * MHZ_TO_PER_NS;
    w[3] = rates.intrinsic.k_f_minus * MHZ_TO_PER_NS;
    w
}

/// Runs a sequence, collecting PL with the standard NV⁻ triplet weights.
pub fn run_sequence(seq: &PulseSequence, rates: &RateSet) -> Result<SequenceRun, SequenceError> {
    run_sequence_with_weights(seq, rates, &emission_weights(rates))
}

/// Runs a sequence with caller-supplied collection weights (ns⁻¹ per level).
pub fn run_sequence_with_weights(
    seq: &PulseSequence,
    rates: &RateSet,
    weights: &[f64; N_LEVELS],
) -> Result<SequenceRun, SequenceError> {
    if seq.stages.is_empty() {
        return Err(SequenceError::EmptySequence);
    }
    let mut state = seq.initial_state;
    let mut t = 0.0;
    let mut records = Vec::with_capacity(seq.stages.len());
    for stage in &seq.stages {
        if let Some(Instantaneous::PiPulse) = stage.instantaneous_pre {
            state = apply_pi(&state);
        }
        let generator = rates.generator(&stage.drives)?;
        let prop = propagate_with_emission(&generator, &state, stage.duration_ns, weights)?;
        state = prop.final_state;
        t += stage.duration_ns;
        records.push(StageRecord {
            label: stage.label.clone(),
            t_end_ns: t,
            state,
            emission: prop.emission_integral,
            recorded: stage.record_emission,
        });
    }
    Ok(SequenceRun {
        final_state: state,
        stages: records,
    })
}

fn readout_pl(
    ion_channel: Channel,
    power_mw: f64,
    with_pi: bool,
    rates: &RateSet,
    timing: &TimingConfig,
) -> Result<f64, SequenceError> {
    let seq = standard_protocol(ion_channel, power_mw, with_pi, timing)?;
    Ok(run_sequence(&seq, rates)?.recorded_emission())
}

/// Readout PL versus ionization power, normalized by the PL at zero
/// ionization power with the same initialization.
pub fn normalized_pl(
    ion_channel: Channel,
    powers_mw: &[f64],
    with_pi: bool,
    rates: &RateSet,
    timing: &TimingConfig,
) -> Result<Vec<f64>, SequenceError> {
    if powers_mw.is_empty() {
        return Err(SequenceError::EmptyGrid);
    }
    let reference = readout_pl(ion_channel, 0.0, with_pi, rates, timing)?;
    if !(reference > 0.0) {
        return Err(SequenceError::DegenerateReference(reference));
    }
    powers_mw
        .iter()
        .map(|&p| Ok(readout_pl(ion_channel, p, with_pi, rates, timing)? / reference))
        .collect()
}

/// Normalized PL for both spin initializations and their pointwise ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub channel: Channel,
    pub powers_mw: Vec<f64>,
    pub pl_pi: Vec<f64>,
    pub pl_nopi: Vec<f64>,
    pub pnp: Vec<f64>,
}

/// PNP ratio (with-π over without-π normalized PL) versus ionization power.
pub fn pnp_curve(
    ion_channel: Channel,
    powers_mw: &[f64],
    rates: &RateSet,
    timing: &TimingConfig,
) -> Result<CurveSet, SequenceError> {
    let pl_pi = normalized_pl(ion_channel, powers_mw, true, rates, timing)?;
    let pl_nopi = normalized_pl(ion_channel, powers_mw, false, rates, timing)?;
    let pnp = pl_pi
        .iter()
        .zip(&pl_nopi)
        .map(|(a, b)| a / b)
        .collect();
    Ok(CurveSet {
        channel: ion_channel,
        powers_mw: powers_mw.to_vec(),
        pl_pi,
        pl_nopi,
        pnp,
    })
}

/// Ground-singlet occupation at the start of the ionization stage for every
/// (population-pulse duration, power) grid point. Rows follow `durations_ns`.
pub fn population_sweep(
    durations_ns: &[f64],
    powers_mw: &[f64],
    rates: &RateSet,
    timing: &TimingConfig,
) -> Result<Vec<Vec<f64>>, SequenceError> {
    if durations_ns.is_empty() || powers_mw.is_empty() {
        return Err(SequenceError::EmptyGrid);
    }
    let mut matrix = Vec::with_capacity(durations_ns.len());
    for &duration in durations_ns {
        let mut row = Vec::with_capacity(powers_mw.len());
        for &power in powers_mw {
            let sweep_timing = TimingConfig {
                population_duration_ns: duration,
                population_power_mw: power,
                ..*timing
            };
            let seq = standard_protocol(Channel::Green532, 0.0, true, &sweep_timing)?;
            let prefix = PulseSequence {
                stages: seq.stages[..5].to_vec(),
                initial_state: seq.initial_state,
            };
            let run = run_sequence(&prefix, rates)?;
            row.push(run.final_state.occupation(crate::model::Level::SingletGround));
        }
        matrix.push(row);
    }
    Ok(matrix)
}
