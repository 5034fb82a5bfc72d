//! 8-level NV charge/spin/orbital model: state vector, rate tables, and the
//! trace-preserving generator of the rate-equation master equation.
//!
//! Level index order is fixed across the crate:
//!
//! | index | level                                  |
//! |-------|----------------------------------------|
//! | 0     | NV⁻ ground triplet, m_s = 0            |
//! | 1     | NV⁻ ground triplet, m_s = ±1           |
//! | 2     | NV⁻ excited triplet, m_s = 0           |
//! | 3     | NV⁻ excited triplet, m_s = ±1          |
//! | 4     | NV⁻ excited singlet                    |
//! | 5     | NV⁻ ground singlet (metastable)        |
//! | 6     | NV⁰ ground                             |
//! | 7     | NV⁰ excited                            |
//!
//! Rates are stored in MHz (intrinsic) and MHz/mW (optical), matching the
//! published tables; the generator converts to ns⁻¹ internally.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of levels in the model.
pub const N_LEVELS: usize = 8;

/// 1 MHz expressed in ns⁻¹.
pub const MHZ_TO_PER_NS: f64 = 1e-3;

/// hc in eV·nm, used for wavelength/energy conversion.
pub const HC_EV_NM: f64 = 1239.84;

/// Entries this far below zero are treated as roundoff and clamped to 0.
pub const OCCUPATION_CLAMP: f64 = 1e-12;

/// Allowed deviation of the total occupation from 1.
pub const TRACE_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("channel `{0}` has no rate coefficients in this rate set")]
    UnknownChannel(Channel),
    #[error("unrecognized channel name `{0}`")]
    BadChannelName(String),
    #[error("drive power must be finite and >= 0, got {0} mW")]
    NegativePower(f64),
    #[error("rate coefficient `{name}` must be finite and >= 0, got {value}")]
    NegativeRate { name: &'static str, value: f64 },
    #[error("power_scaling must lie in (0, 1], got {0}")]
    BadPowerScaling(f64),
    #[error("occupation {value:e} at level {index} is below the -1e-12 clamp tolerance")]
    NegativeOccupation { index: usize, value: f64 },
    #[error("occupations sum to {0}, expected 1 within 1e-10")]
    NotNormalized(f64),
    #[error("argument must be positive and finite, got {0}")]
    NonPositive(f64),
    #[error("rate document declares units `{0}`, expected MHz / MHz/mW")]
    BadUnits(String),
}

/// One of the eight model levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    GroundMs0,
    GroundMs1,
    ExcitedMs0,
    ExcitedMs1,
    SingletExcited,
    SingletGround,
    Nv0Ground,
    Nv0Excited,
}

impl Level {
    pub const ALL: [Level; N_LEVELS] = [
        Level::GroundMs0,
        Level::GroundMs1,
        Level::ExcitedMs0,
        Level::ExcitedMs1,
        Level::SingletExcited,
        Level::SingletGround,
        Level::Nv0Ground,
        Level::Nv0Excited,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }
}

/// Occupation probabilities of the eight levels.
///
/// Valid states sum to 1 within 1e-10; entries may carry numerical noise down
/// to -1e-12, which [`StateVector::populations`] clamps to 0 on read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; N_LEVELS]", into = "[f64; N_LEVELS]")]
pub struct StateVector([f64; N_LEVELS]);

impl StateVector {
    pub fn new(p: [f64; N_LEVELS]) -> Result<Self, ModelError> {
        for (index, &value) in p.iter().enumerate() {
            if !value.is_finite() || value < -OCCUPATION_CLAMP {
                return Err(ModelError::NegativeOccupation { index, value });
            }
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > TRACE_TOL {
            return Err(ModelError::NotNormalized(total));
        }
        Ok(StateVector(p))
    }

    /// All population in a single level.
    pub fn pure(level: Level) -> Self {
        let mut p = [0.0; N_LEVELS];
        p[level.index()] = 1.0;
        StateVector(p)
    }

    /// Equal mixture of the two ground-triplet spin projections.
    pub fn ground_mixture() -> Self {
        let mut p = [0.0; N_LEVELS];
        p[0] = 0.5;
        p[1] = 0.5;
        StateVector(p)
    }

    /// Occupations clamped at 0 on read.
    pub fn populations(&self) -> [f64; N_LEVELS] {
        self.0.map(|x| x.max(0.0))
    }

    /// Raw occupations, including any negative roundoff noise.
    pub fn raw(&self) -> &[f64; N_LEVELS] {
        &self.0
    }

    pub fn occupation(&self, level: Level) -> f64 {
        self.0[level.index()].max(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<[f64; N_LEVELS]> for StateVector {
    type Error = ModelError;
    fn try_from(p: [f64; N_LEVELS]) -> Result<Self, Self::Error> {
        StateVector::new(p)
    }
}

impl From<StateVector> for [f64; N_LEVELS] {
    fn from(s: StateVector) -> Self {
        s.0
    }
}

/// Intrinsic (power-independent) decay rates, in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicRates {
    /// NV⁻ radiative decay.
    pub k_f_minus: f64,
    /// NV⁰ radiative decay.
    pub k_f_0: f64,
    /// ISC from the excited triplet, m_s = 0 branch.
    pub k_es0: f64,
    /// ISC from the excited triplet, m_s = ±1 branch.
    pub k_es1: f64,
    /// Excited-singlet decay.
    pub k_s: f64,
    /// Ground singlet → ground triplet m_s = 0.
    pub k_sg0: f64,
    /// Ground singlet → ground triplet m_s = ±1.
    pub k_sg1: f64,
}

impl Default for IntrinsicRates {
    fn default() -> Self {
        IntrinsicRates {
            k_f_minus: 77.0,
            k_f_0: 53.0,
            k_es0: 0.0,
            k_es1: 30.0,
            k_s: 10_000.0,
            k_sg0: 3.3,
            k_sg1: 0.0,
        }
    }
}

impl IntrinsicRates {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in self.fields() {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::NegativeRate { name, value });
            }
        }
        Ok(())
    }

    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("k_f_minus", self.k_f_minus),
            ("k_f_0", self.k_f_0),
            ("k_es0", self.k_es0),
            ("k_es1", self.k_es1),
            ("k_s", self.k_s),
            ("k_sg0", self.k_sg0),
            ("k_sg1", self.k_sg1),
        ]
    }
}

/// Per-channel optical rate coefficients, in MHz/mW (effective rate =
/// coefficient × commanded power × `power_scaling`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalCoefficients {
    /// NV⁻ triplet excitation (TECS).
    pub k_e_minus: f64,
    /// NV⁰ excitation.
    pub k_e_0: f64,
    /// Singlet ground → singlet excited excitation.
    pub k_ss: f64,
    /// Ionization from the NV⁻ excited triplet.
    pub k_i: f64,
    /// Recombination from the NV⁰ excited state (per spin projection).
    pub k_r: f64,
    /// NV⁻ stimulated-emission depletion.
    pub k_d_minus: f64,
    /// NV⁰ stimulated-emission depletion.
    pub k_d_0: f64,
    /// Ionization from the ground singlet (SICS).
    pub k_sics: f64,
    /// Commanded-power multiplier for this channel, in (0, 1].
    pub power_scaling: f64,
}

impl Default for OpticalCoefficients {
    fn default() -> Self {
        OpticalCoefficients {
            k_e_minus: 0.0,
            k_e_0: 0.0,
            k_ss: 0.0,
            k_i: 0.0,
            k_r: 0.0,
            k_d_minus: 0.0,
            k_d_0: 0.0,
            k_sics: 0.0,
            power_scaling: 1.0,
        }
    }
}

impl OpticalCoefficients {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in self.coefficients() {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::NegativeRate { name, value });
            }
        }
        if !self.power_scaling.is_finite() || self.power_scaling <= 0.0 || self.power_scaling > 1.0
        {
            return Err(ModelError::BadPowerScaling(self.power_scaling));
        }
        Ok(())
    }

    fn coefficients(&self) -> [(&'static str, f64); 8] {
        [
            ("k_e_minus", self.k_e_minus),
            ("k_e_0", self.k_e_0),
            ("k_ss", self.k_ss),
            ("k_i", self.k_i),
            ("k_r", self.k_r),
            ("k_d_minus", self.k_d_minus),
            ("k_d_0", self.k_d_0),
            ("k_sics", self.k_sics),
        ]
    }
}

/// Built-in laser channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// 532 nm excitation / population / readout laser.
    Green532,
    /// 550 ± 20 nm band-pass filtered supercontinuum.
    GreenFilter,
    /// 500 ± 20 nm band-pass filtered supercontinuum.
    BlueFilter,
    /// 650 ± 20 nm band-pass filtered supercontinuum.
    RedFilter,
    /// 676 ± 4 nm band-pass filtered supercontinuum (control).
    LongRedFilter,
    /// 976 nm CW laser (control).
    Nir,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Green532,
        Channel::GreenFilter,
        Channel::BlueFilter,
        Channel::RedFilter,
        Channel::LongRedFilter,
        Channel::Nir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Green532 => "green532",
            Channel::GreenFilter => "green_filter",
            Channel::BlueFilter => "blue_filter",
            Channel::RedFilter => "red_filter",
            Channel::LongRedFilter => "long_red_filter",
            Channel::Nir => "nir",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let normalized = s.trim().to_ascii_lowercase().replace('-', "_");
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == normalized)
            .ok_or_else(|| ModelError::BadChannelName(s.to_string()))
    }
}

/// One active laser: a channel plus its commanded power in mW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSetting {
    pub channel: Channel,
    pub power_mw: f64,
}

impl DriveSetting {
    pub fn new(channel: Channel, power_mw: f64) -> Self {
        DriveSetting { channel, power_mw }
    }
}

/// Intrinsic rates plus Table II values for `channel`, with the fitted cells
/// filled in with the published best-fit values.
pub fn default_rates(channel: Channel) -> (IntrinsicRates, OpticalCoefficients) {
    let intrinsic = IntrinsicRates::default();
    let green_blue = OpticalCoefficients {
        k_e_minus: 135.0,
        k_e_0: 243.0,
        k_ss: 0.0,
        k_i: 43.0,
        k_r: 17.75,
        k_d_minus: 0.0,
        k_d_0: 0.0,
        k_sics: 0.0,
        power_scaling: 1.0,
    };
    let optics = match channel {
        Channel::Green532 => OpticalCoefficients {
            k_sics: 20.0,
            ..green_blue
        },
        Channel::GreenFilter => OpticalCoefficients {
            k_sics: 20.0,
            power_scaling: 0.11,
            ..green_blue
        },
        Channel::BlueFilter => OpticalCoefficients {
            k_sics: 22.8,
            power_scaling: 0.129,
            ..green_blue
        },
        Channel::RedFilter => OpticalCoefficients {
            k_e_minus: 26.0,
            k_e_0: 0.0,
            k_ss: 0.0,
            k_i: 8.2,
            k_r: 0.008,
            k_d_minus: 10.0,
            k_d_0: 18.0,
            k_sics: 0.006,
            power_scaling: 0.11,
        },
        Channel::LongRedFilter => OpticalCoefficients {
            k_e_minus: 0.0,
            k_e_0: 0.0,
            k_ss: 0.0,
            k_i: 28.0,
            k_r: 0.0,
            k_d_minus: 30.0,
            k_d_0: 12.0,
            k_sics: 0.08,
            power_scaling: 1.0,
        },
        Channel::Nir => OpticalCoefficients {
            k_e_minus: 0.0,
            k_e_0: 0.0,
            k_ss: 0.92,
            k_i: 13.0,
            k_r: 0.2,
            k_d_minus: 0.0,
            k_d_0: 0.0,
            k_sics: 0.002,
            power_scaling: 1.0,
        },
    };
    (intrinsic, optics)
}

/// Intrinsic rates plus the per-channel optical coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub intrinsic: IntrinsicRates,
    pub channels: BTreeMap<Channel, OpticalCoefficients>,
}

impl Default for RateSet {
    fn default() -> Self {
        let intrinsic = IntrinsicRates::default();
        let channels = Channel::ALL
            .into_iter()
            .map(|c| (c, default_rates(c).1))
            .collect();
        RateSet {
            intrinsic,
            channels,
        }
    }
}

impl RateSet {
    pub fn optics(&self, channel: Channel) -> Result<&OpticalCoefficients, ModelError> {
        self.channels
            .get(&channel)
            .ok_or(ModelError::UnknownChannel(channel))
    }

    pub fn optics_mut(&mut self, channel: Channel) -> Result<&mut OpticalCoefficients, ModelError> {
        self.channels
            .get_mut(&channel)
            .ok_or(ModelError::UnknownChannel(channel))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.intrinsic.validate()?;
        for optics in self.channels.values() {
            optics.validate()?;
        }
        Ok(())
    }

    pub fn generator(&self, drives: &[DriveSetting]) -> Result<Generator, ModelError> {
        build_generator(&self.intrinsic, &self.channels, drives)
    }
}

/// Rate matrix Q in ns⁻¹ such that dP/dt = Q·P.
///
/// `q[i][j]` for i ≠ j is the flow rate from level j into level i; every
/// column sums to 0 (probability conservation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Generator {
    q: [[f64; N_LEVELS]; N_LEVELS],
}

impl Generator {
    pub fn zero() -> Self {
        Generator {
            q: [[0.0; N_LEVELS]; N_LEVELS],
        }
    }

    pub fn matrix(&self) -> &[[f64; N_LEVELS]; N_LEVELS] {
        &self.q
    }

    pub fn entry(&self, to: usize, from: usize) -> f64 {
        self.q[to][from]
    }

    pub fn column_sum(&self, from: usize) -> f64 {
        (0..N_LEVELS).map(|i| self.q[i][from]).sum()
    }

    fn add_transition(&mut self, from: Level, to: Level, rate_mhz: f64) {
        let r = rate_mhz * MHZ_TO_PER_NS;
        self.q[to.index()][from.index()] += r;
        self.q[from.index()][from.index()] -= r;
    }
}

/// Effective optical rates in MHz after summing coefficient × power ×
/// power_scaling over all active drives.
#[derive(Debug, Clone, Copy, Default)]
struct EffectiveOptical {
    k_e_minus: f64,
    k_e_0: f64,
    k_ss: f64,
    k_i: f64,
    k_r: f64,
    k_d_minus: f64,
    k_d_0: f64,
    k_sics: f64,
}

/// Assembles the master-equation generator for the given drive settings.
///
/// Transitions encoded (rates in MHz, converted to ns⁻¹):
/// triplet excitation (g,0)→(e,0) and (g,1)→(e,1) at k_e_minus; radiative
/// plus stimulated decay (e,i)→(g,i) at k_f_minus + k_d_minus; spin-selective
/// ISC (e,0)→singlet-excited at k_es0 and (e,1)→ at k_es1; singlet cascade
/// k_s then k_sg0/k_sg1; singlet re-excitation k_ss; triplet ionization k_i
/// and singlet ionization k_sics into NV⁰ ground; NV⁰ cycling k_e_0 and
/// k_f_0 + k_d_0; recombination into each ground spin projection at k_r.
pub fn build_generator(
    intrinsic: &IntrinsicRates,
    optics: &BTreeMap<Channel, OpticalCoefficients>,
    drives: &[DriveSetting],
) -> Result<Generator, ModelError> {
    intrinsic.validate()?;
    let mut eff = EffectiveOptical::default();
    for drive in drives {
        if !drive.power_mw.is_finite() || drive.power_mw < 0.0 {
            return Err(ModelError::NegativePower(drive.power_mw));
        }
        let coeffs = optics
            .get(&drive.channel)
            .ok_or(ModelError::UnknownChannel(drive.channel))?;
        coeffs.validate()?;
        let power = drive.power_mw * coeffs.power_scaling;
        eff.k_e_minus += coeffs.k_e_minus * power;
        eff.k_e_0 += coeffs.k_e_0 * power;
        eff.k_ss += coeffs.k_ss * power;
        eff.k_i += coeffs.k_i * power;
        eff.k_r += coeffs.k_r * power;
        eff.k_d_minus += coeffs.k_d_minus * power;
        eff.k_d_0 += coeffs.k_d_0 * power;
        eff.k_sics += coeffs.k_sics * power;
    }

    use Level::*;
    let mut g = Generator::zero();
    g.add_transition(GroundMs0, ExcitedMs0, eff.k_e_minus);
    g.add_transition(GroundMs1, ExcitedMs1, eff.k_e_minus);
    g.add_transition(ExcitedMs0, GroundMs0, intrinsic.k_f_minus + eff.k_d_minus);
    g.add_transition(ExcitedMs1, GroundMs1, intrinsic.k_f_minus + eff.k_d_minus);
    g.add_transition(ExcitedMs0, SingletExcited, intrinsic.k_es0);
    g.add_transition(ExcitedMs1, SingletExcited, intrinsic.k_es1);
    g.add_transition(ExcitedMs0, Nv0Ground, eff.k_i);
    g.add_transition(ExcitedMs1, Nv0Ground, eff.k_i);
    g.add_transition(SingletExcited, SingletGround, intrinsic.k_s);
    g.add_transition(SingletGround, GroundMs0, intrinsic.k_sg0);
    g.add_transition(SingletGround, GroundMs1, intrinsic.k_sg1);
    g.add_transition(SingletGround, SingletExcited, eff.k_ss);
    g.add_transition(SingletGround, Nv0Ground, eff.k_sics);
    g.add_transition(Nv0Ground, Nv0Excited, eff.k_e_0);
    g.add_transition(Nv0Excited, Nv0Ground, intrinsic.k_f_0 + eff.k_d_0);
    g.add_transition(Nv0Excited, GroundMs0, eff.k_r);
    g.add_transition(Nv0Excited, GroundMs1, eff.k_r);
    Ok(g)
}

/// Photon energy in eV for a wavelength in nm.
pub fn wavelength_to_energy(lambda_nm: f64) -> Result<f64, ModelError> {
    if !lambda_nm.is_finite() || lambda_nm <= 0.0 {
        return Err(ModelError::NonPositive(lambda_nm));
    }
    Ok(HC_EV_NM / lambda_nm)
}

/// Wavelength in nm for a photon energy in eV.
pub fn energy_to_wavelength(energy_ev: f64) -> Result<f64, ModelError> {
    if !energy_ev.is_finite() || energy_ev <= 0.0 {
        return Err(ModelError::NonPositive(energy_ev));
    }
    Ok(HC_EV_NM / energy_ev)
}

/// Units declaration carried alongside serialized rate sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateUnits {
    #[serde(default = "RateUnits::default_intrinsic")]
    pub intrinsic: String,
    #[serde(default = "RateUnits::default_optical")]
    pub optical: String,
    #[serde(default = "RateUnits::default_power_scaling")]
    pub power_scaling: String,
}

impl RateUnits {
    fn default_intrinsic() -> String {
        "MHz".to_string()
    }
    fn default_optical() -> String {
        "MHz/mW".to_string()
    }
    fn default_power_scaling() -> String {
        "dimensionless".to_string()
    }
}

impl Default for RateUnits {
    fn default() -> Self {
        RateUnits {
            intrinsic: Self::default_intrinsic(),
            optical: Self::default_optical(),
            power_scaling: Self::default_power_scaling(),
        }
    }
}

/// Complete rate-set document with a units annotation; the JSON wire format
/// for presets. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesDocument {
    pub intrinsic: IntrinsicRates,
    pub channels: BTreeMap<Channel, OpticalCoefficients>,
    #[serde(default)]
    pub units: RateUnits,
}

impl RatesDocument {
    pub fn from_rate_set(rates: &RateSet) -> Self {
        RatesDocument {
            intrinsic: rates.intrinsic,
            channels: rates.channels.clone(),
            units: RateUnits::default(),
        }
    }

    pub fn into_rate_set(self) -> Result<RateSet, ModelError> {
        if self.units != RateUnits::default() {
            return Err(ModelError::BadUnits(format!(
                "{}/{}/{}",
                self.units.intrinsic, self.units.optical, self.units.power_scaling
            )));
        }
        let rates = RateSet {
            intrinsic: self.intrinsic,
            channels: self.channels,
        };
        rates.validate()?;
        Ok(rates)
    }
}

/// Partial intrinsic-rate override; absent fields keep their current value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicOverride {
    pub k_f_minus: Option<f64>,
    pub k_f_0: Option<f64>,
    pub k_es0: Option<f64>,
    pub k_es1: Option<f64>,
    pub k_s: Option<f64>,
    pub k_sg0: Option<f64>,
    pub k_sg1: Option<f64>,
}

/// Partial per-channel override; absent fields keep their current value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalOverride {
    pub k_e_minus: Option<f64>,
    pub k_e_0: Option<f64>,
    pub k_ss: Option<f64>,
    pub k_i: Option<f64>,
    pub k_r: Option<f64>,
    pub k_d_minus: Option<f64>,
    pub k_d_0: Option<f64>,
    pub k_sics: Option<f64>,
    pub power_scaling: Option<f64>,
}

/// Partial rate-set override document (`--rates` files). Unknown keys are
/// rejected; a `units` member, if present, must match the crate's units.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesOverride {
    #[serde(default)]
    pub intrinsic: Option<IntrinsicOverride>,
    #[serde(default)]
    pub channels: BTreeMap<Channel, OpticalOverride>,
    #[serde(default)]
    pub units: Option<RateUnits>,
}

impl RatesOverride {
    pub fn apply(&self, rates: &mut RateSet) -> Result<(), ModelError> {
        if let Some(units) = &self.units {
            if *units != RateUnits::default() {
                return Err(ModelError::BadUnits(format!(
                    "{}/{}/{}",
                    units.intrinsic, units.optical, units.power_scaling
                )));
            }
        }
        if let Some(intr) = &self.intrinsic {
            let t = &mut rates.intrinsic;
            macro_rules! set {
                ($field:ident) => {
                    if let Some(v) = intr.$field {
                        t.$field = v;
                    }
                };
            }
            set!(k_f_minus);
            set!(k_f_0);
            set!(k_es0);
            set!(k_es1);
            set!(k_s);
            set!(k_sg0);
            set!(k_sg1);
        }
        for (channel, over) in &self.channels {
            let optics = rates
                .channels
                .entry(*channel)
                .or_insert_with(|| default_rates(*channel).1);
            macro_rules! set {
                ($field:ident) => {
                    if let Some(v) = over.$field {
                        optics.$field = v;
                    }
                };
            }
            set!(k_e_minus);
            set!(k_e_0);
            set!(k_ss);
            set!(k_i);
            set!(k_r);
            set!(k_d_minus);
            set!(k_d_0);
            set!(k_sics);
            set!(power_scaling);
        }
        rates.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let intr = IntrinsicRates::default();
        assert_eq!(intr.k_f_minus, 77.0);
        assert_eq!(intr.k_f_0, 53.0);
        assert_eq!(intr.k_es0, 0.0);
        assert_eq!(intr.k_es1, 30.0);
        assert_eq!(intr.k_s, 10_000.0);
        assert_eq!(intr.k_sg0, 3.3);
        assert_eq!(intr.k_sg1, 0.0);

        let (_, green) = default_rates(Channel::Green532);
        assert_eq!(green.k_e_minus, 135.0);
        assert_eq!(green.k_e_0, 243.0);
        assert_eq!(green.k_i, 43.0);
        assert_eq!(green.k_r, 17.75);
        assert_eq!(green.k_sics, 20.0);
        assert_eq!(green.power_scaling, 1.0);

        let (_, red) = default_rates(Channel::RedFilter);
        assert_eq!(red.k_e_minus, 26.0);
        assert_eq!(red.k_i, 8.2);
        assert_eq!(red.k_r, 0.008);
        assert_eq!(red.k_sics, 0.006);
        assert_eq!(red.power_scaling, 0.11);
        assert_eq!(red.k_d_minus, 10.0);
        assert_eq!(red.k_d_0, 18.0);

        let (_, nir) = default_rates(Channel::Nir);
        assert_eq!(nir.k_e_minus, 0.0);
        assert_eq!(nir.k_e_0, 0.0);
        assert_eq!(nir.k_ss, 0.92);
        assert_eq!(nir.k_i, 13.0);
        assert_eq!(nir.k_r, 0.2);
        assert_eq!(nir.k_sics, 0.002);

        let (_, gf) = default_rates(Channel::GreenFilter);
        assert_eq!((gf.k_sics, gf.power_scaling), (20.0, 0.11));
        let (_, bf) = default_rates(Channel::BlueFilter);
        assert_eq!((bf.k_sics, bf.power_scaling), (22.8, 0.129));
        let (_, lr) = default_rates(Channel::LongRedFilter);
        assert_eq!((lr.k_i, lr.k_r, lr.k_sics, lr.power_scaling), (28.0, 0.0, 0.08, 1.0));
        assert_eq!((lr.k_d_minus, lr.k_d_0), (30.0, 12.0));
    }

    #[test]
    fn dark_generator_has_radiative_entry_and_no_excitation() {
        let rates = RateSet::default();
        let g = rates.generator(&[]).unwrap();
        assert_eq!(g.entry(0, 2), 77.0 * MHZ_TO_PER_NS);
        assert_eq!(g.entry(1, 3), 77.0 * MHZ_TO_PER_NS);
        // no drives: every excitation entry vanishes
        assert_eq!(g.entry(2, 0), 0.0);
        assert_eq!(g.entry(3, 1), 0.0);
        assert_eq!(g.entry(7, 6), 53.0 * MHZ_TO_PER_NS);
        assert_eq!(g.entry(4, 5), 0.0);
        assert_eq!(g.entry(6, 5), 0.0);
    }

    #[test]
    fn zero_rates_give_zero_generator() {
        let intrinsic = IntrinsicRates {
            k_f_minus: 0.0,
            k_f_0: 0.0,
            k_es0: 0.0,
            k_es1: 0.0,
            k_s: 0.0,
            k_sg0: 0.0,
            k_sg1: 0.0,
        };
        let g = build_generator(&intrinsic, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(g.matrix(), &[[0.0; N_LEVELS]; N_LEVELS]);
    }

    #[test]
    fn driven_generator_columns_sum_to_zero() {
        let rates = RateSet::default();
        let g = rates
            .generator(&[DriveSetting::new(Channel::Green532, 0.2)])
            .unwrap();
        for j in 0..N_LEVELS {
            assert!(g.column_sum(j).abs() <= 1e-14, "column {j}");
        }
        // spot-check the effective excitation rate: 135 MHz/mW * 0.2 mW
        assert!((g.entry(2, 0) - 27.0 * MHZ_TO_PER_NS).abs() < 1e-15);
        // singlet ionization: 20 MHz/mW * 0.2 mW
        assert!((g.entry(6, 5) - 4.0 * MHZ_TO_PER_NS).abs() < 1e-15);
    }

    #[test]
    fn drive_errors() {
        let rates = RateSet::default();
        let err = rates
            .generator(&[DriveSetting::new(Channel::Nir, -1.0)])
            .unwrap_err();
        assert_eq!(err, ModelError::NegativePower(-1.0));

        let mut thin = RateSet::default();
        thin.channels.remove(&Channel::Nir);
        let err = thin
            .generator(&[DriveSetting::new(Channel::Nir, 1.0)])
            .unwrap_err();
        assert_eq!(err, ModelError::UnknownChannel(Channel::Nir));
    }

    #[test]
    fn energy_conversion_anchors() {
        assert!((wavelength_to_energy(674.0).unwrap() - 1.84).abs() <= 0.01);
        assert!((wavelength_to_energy(550.0).unwrap() - 2.25).abs() <= 0.01);
        assert!((wavelength_to_energy(650.0).unwrap() - 1.91).abs() <= 0.01);
        assert!(wavelength_to_energy(0.0).is_err());
        assert!(energy_to_wavelength(-2.0).is_err());
    }

    #[test]
    fn state_vector_validation() {
        assert!(StateVector::new([0.125; 8]).is_ok());
        let mut p = [0.125; 8];
        p[3] = 0.125 + 2e-10;
        assert!(matches!(
            StateVector::new(p),
            Err(ModelError::NotNormalized(_))
        ));
        let mut p = [0.125; 8];
        p[0] -= 1e-6;
        p[1] += 1e-6 - 1e-13; // tiny negative noise is fine
        assert!(StateVector::new(p).is_ok());
        let mut p = [0.125; 8];
        p[0] = -1e-6;
        p[1] = 0.25 + 1e-6;
        assert!(matches!(
            StateVector::new(p),
            Err(ModelError::NegativeOccupation { index: 0, .. })
        ));
    }

    #[test]
    fn rates_document_round_trip_rejects_unknown_keys() {
        let rates = RateSet::default();
        let doc = RatesDocument::from_rate_set(&rates);
        let json = serde_json::to_string_pretty(&doc).unwrap();
        let back: RatesDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_rate_set().unwrap(), rates);

        let bad = r#"{"intrinsic": {"k_f_minus": 77.0, "k_f_0": 53.0, "k_es0": 0.0,
            "k_es1": 30.0, "k_s": 10000.0, "k_sg0": 3.3, "k_sg1": 0.0, "bogus": 1.0},
            "channels": {}}"#;
        assert!(serde_json::from_str::<RatesDocument>(bad).is_err());
    }

    #[test]
    fn overrides_apply_partially() {
        let mut rates = RateSet::default();
        let over: RatesOverride = serde_json::from_str(
            r#"{"channels": {"red_filter": {"k_sics": 1.5}}, "intrinsic": {"k_sg0": 4.0}}"#,
        )
        .unwrap();
        over.apply(&mut rates).unwrap();
        assert_eq!(rates.optics(Channel::RedFilter).unwrap().k_sics, 1.5);
        assert_eq!(rates.optics(Channel::RedFilter).unwrap().k_e_minus, 26.0);
        assert_eq!(rates.intrinsic.k_sg0, 4.0);

        let bad: Result<RatesOverride, _> =
            serde_json::from_str(r#"{"channels": {"red_filter": {"k_sic": 1.5}}}"#);
        assert!(bad.is_err());
    }
}
