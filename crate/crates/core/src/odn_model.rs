//! Optical distribution network elements and topologies.
//!
//! Every element maps to a [`TransferOperator`] at a given quantum-channel
//! wavelength. Randomized element properties (coupling angles, the LP11
//! polarization scramble, splitter port weights) are drawn from per-element
//! seeds so a `(topology, wavelength, seed)` triple is fully deterministic.

use crate::modal_optics::{
    compose, db_to_amplitude, db_to_power, encode_jones, haar_su2, polarization_rotation,
    Basis, Jones2, ModalState, PathResponse, SpatialMode, TransferOperator, C64,
};
use crate::rng::{derive_seed, seeded};
use nalgebra::Matrix4;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};
use thiserror::Error;

/// Reference wavelength of the quantum channel in nm.
pub const LAMBDA_REF_NM: f64 = 848.0;
/// Valid quantum-channel wavelength window in nm.
pub const QUANTUM_BAND_NM: (f64, f64) = (830.0, 870.0);

pub const DEFAULT_FIBER_LOSS_DB_KM: f64 = 1.8;
pub const DEFAULT_DMD_NS_KM: f64 = 2.02;
/// Intermodal phase slope per km of span, rad/pm. Free product Δn_eff·L.
pub const DEFAULT_PHASE_SCALE_RAD_PM_KM: f64 = 0.9;
pub const DEFAULT_SPAN_COUPLING: f64 = 0.5;
pub const DEFAULT_SPLITTER_EXCESS_DB: f64 = 1.0;
pub const DEFAULT_SPLITTER_PHASE_SCALE_RAD_PM: f64 = 0.9;
pub const DEFAULT_LP11_EXTINCTION_DB: f64 = 20.0;
pub const DEFAULT_LP01_INSERTION_DB: f64 = 0.2;
pub const DEFAULT_CONNECTOR_MIXING_RAD: f64 = 0.05;
pub const DEFAULT_CONNECTOR_LOSS_DB: f64 = 0.0;
/// Spans are cut into coupling sections no longer than this.
pub const SECTION_KM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum OdnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("wavelength {0} nm outside the quantum band")]
    Wavelength(f64),
}

fn default_loss_coeff() -> f64 {
    DEFAULT_FIBER_LOSS_DB_KM
}
fn default_dmd() -> f64 {
    DEFAULT_DMD_NS_KM
}
fn default_span_coupling() -> f64 {
    DEFAULT_SPAN_COUPLING
}
fn default_ports() -> usize {
    4
}
fn default_excess() -> f64 {
    DEFAULT_SPLITTER_EXCESS_DB
}
fn default_splitter_phase_scale() -> f64 {
    DEFAULT_SPLITTER_PHASE_SCALE_RAD_PM
}
fn default_extinction() -> f64 {
    DEFAULT_LP11_EXTINCTION_DB
}
fn default_insertion() -> f64 {
    DEFAULT_LP01_INSERTION_DB
}
fn default_mixing() -> f64 {
    DEFAULT_CONNECTOR_MIXING_RAD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberSpan {
    pub length_km: f64,
    #[serde(default = "default_loss_coeff")]
    pub loss_db_per_km: f64,
    #[serde(default = "default_dmd")]
    pub dmd_ns_per_km: f64,
    /// Scales the seed-drawn LP01↔LP11 coupling angle, in [0, 1].
    #[serde(default = "default_span_coupling")]
    pub coupling_strength: f64,
    /// rad/pm. `None` derives it from the length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermodal_phase_scale: Option<f64>,
    /// Environmental drift state, advanced by [`drift_step`].
    #[serde(default, skip_serializing_if = "is_zero")]
    pub coupling_offset: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub phase_offset: f64,
    #[serde(default, skip_serializing_if = "is_zero3")]
    pub sop_rotation: [f64; 3],
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}
fn is_zero3(x: &[f64; 3]) -> bool {
    x.iter().all(|v| *v == 0.0)
}

impl FiberSpan {
    pub fn new(length_km: f64) -> Self {
        Self {
            length_km,
            loss_db_per_km: DEFAULT_FIBER_LOSS_DB_KM,
            dmd_ns_per_km: DEFAULT_DMD_NS_KM,
            coupling_strength: DEFAULT_SPAN_COUPLING,
            intermodal_phase_scale: None,
            coupling_offset: 0.0,
            phase_offset: 0.0,
            sop_rotation: [0.0; 3],
        }
    }

    pub fn phase_scale(&self) -> f64 {
        self.intermodal_phase_scale
            .unwrap_or(DEFAULT_PHASE_SCALE_RAD_PM_KM * self.length_km)
    }

    pub fn loss_db(&self) -> f64 {
        self.loss_db_per_km * self.length_km
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splitter {
    #[serde(default = "default_ports")]
    pub num_ports: usize,
    /// Defaults to `10·log10(num_ports)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_split_db: Option<f64>,
    #[serde(default = "default_excess")]
    pub excess_loss_db: f64,
    #[serde(default)]
    pub speckle_seed: u64,
    /// Intermodal phase slope of the input pigtail and junction, rad/pm.
    #[serde(default = "default_splitter_phase_scale")]
    pub intermodal_phase_scale: f64,
}

impl Splitter {
    pub fn new(num_ports: usize, speckle_seed: u64) -> Self {
        Self {
            num_ports,
            nominal_split_db: None,
            excess_loss_db: DEFAULT_SPLITTER_EXCESS_DB,
            speckle_seed,
            intermodal_phase_scale: DEFAULT_SPLITTER_PHASE_SCALE_RAD_PM,
        }
    }

    pub fn nominal_db(&self) -> f64 {
        self.nominal_split_db
            .unwrap_or(10.0 * (self.num_ports as f64).log10())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFilter {
    #[serde(default = "default_extinction")]
    pub lp11_extinction_db: f64,
    #[serde(default = "default_insertion")]
    pub lp01_insertion_loss_db: f64,
    /// Bend-induced LP11 to LP01 exchange ahead of the stripping, rad.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub conversion_angle: f64,
}

impl Default for ModeFilter {
    fn default() -> Self {
        Self {
            lp11_extinction_db: DEFAULT_LP11_EXTINCTION_DB,
            lp01_insertion_loss_db: DEFAULT_LP01_INSERTION_DB,
            conversion_angle: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connector {
    #[serde(default)]
    pub insertion_loss_db: f64,
    #[serde(default = "default_mixing")]
    pub mixing_angle: f64,
}

impl Default for Connector {
    fn default() -> Self {
        Self {
            insertion_loss_db: DEFAULT_CONNECTOR_LOSS_DB,
            mixing_angle: DEFAULT_CONNECTOR_MIXING_RAD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attenuator {
    pub loss_db: f64,
}

/// One network element. Serialized with a `type` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ElementSpec {
    FiberSpan(FiberSpan),
    Splitter(Splitter),
    ModeFilter(ModeFilter),
    Connector(Connector),
    Attenuator(Attenuator),
}

impl ElementSpec {
    fn kind_tag(&self) -> u64 {
        match self {
            ElementSpec::FiberSpan(_) => 1,
            ElementSpec::Splitter(_) => 2,
            ElementSpec::ModeFilter(_) => 3,
            ElementSpec::Connector(_) => 4,
            ElementSpec::Attenuator(_) => 5,
        }
    }

    pub fn validate(&self) -> Result<(), OdnError> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(OdnError::Config(format!("{name} must be >= 0, got {v}")))
            }
        };
        match self {
            ElementSpec::FiberSpan(s) => {
                nonneg("length_km", s.length_km)?;
                nonneg("loss_db_per_km", s.loss_db_per_km)?;
                nonneg("dmd_ns_per_km", s.dmd_ns_per_km)?;
                if !(0.0..=1.0).contains(&s.coupling_strength) {
                    return Err(OdnError::Config(format!(
                        "coupling_strength must lie in [0, 1], got {}",
                        s.coupling_strength
                    )));
                }
                Ok(())
            }
            ElementSpec::Splitter(s) => {
                if s.num_ports < 2 {
                    return Err(OdnError::Config("splitter needs at least 2 ports".into()));
                }
                if s.nominal_db() < 10.0 * (s.num_ports as f64).log10() - 1e-12 {
                    return Err(OdnError::Config(
                        "nominal split loss below the ideal 10·log10(N)".into(),
                    ));
                }
                nonneg("excess_loss_db", s.excess_loss_db)
            }
            ElementSpec::ModeFilter(m) => {
                nonneg("lp11_extinction_db", m.lp11_extinction_db)?;
                nonneg("lp01_insertion_loss_db", m.lp01_insertion_loss_db)
            }
            ElementSpec::Connector(c) => nonneg("insertion_loss_db", c.insertion_loss_db),
            ElementSpec::Attenuator(a) => nonneg("loss_db", a.loss_db),
        }
    }

    /// Mode-flat loss this element contributes to the nominal budget.
    pub fn nominal_loss_db(&self) -> f64 {
        match self {
            ElementSpec::FiberSpan(s) => s.loss_db(),
            ElementSpec::Splitter(s) => s.nominal_db() + s.excess_loss_db,
            ElementSpec::ModeFilter(m) => m.lp01_insertion_loss_db,
            ElementSpec::Connector(c) => c.insertion_loss_db,
            ElementSpec::Attenuator(a) => a.loss_db,
        }
    }
}

/// Ordered element list from Alice to Bob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdnTopology {
    pub label: String,
    #[serde(default)]
    pub selected_port: usize,
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
}

impl OdnTopology {
    pub fn new(label: impl Into<String>, elements: Vec<ElementSpec>) -> Self {
        Self {
            label: label.into(),
            selected_port: 0,
            elements,
        }
    }

    pub fn with_port(mut self, port: usize) -> Self {
        self.selected_port = port;
        self
    }

    pub fn splitter(&self) -> Option<&Splitter> {
        self.elements.iter().find_map(|e| match e {
            ElementSpec::Splitter(s) => Some(s),
            _ => None,
        })
    }

    pub fn splitter_mut(&mut self) -> Option<&mut Splitter> {
        self.elements.iter_mut().find_map(|e| match e {
            ElementSpec::Splitter(s) => Some(s),
            _ => None,
        })
    }

    pub fn spans(&self) -> impl Iterator<Item = &FiberSpan> {
        self.elements.iter().filter_map(|e| match e {
            ElementSpec::FiberSpan(s) => Some(s),
            _ => None,
        })
    }

    pub fn total_span_km(&self) -> f64 {
        self.spans().map(|s| s.length_km).sum()
    }

    pub fn nominal_loss_db(&self) -> f64 {
        self.elements.iter().map(ElementSpec::nominal_loss_db).sum()
    }

    /// Appends a mode-flat attenuator at Bob's end.
    pub fn with_attenuator(mut self, loss_db: f64) -> Self {
        self.elements
            .push(ElementSpec::Attenuator(Attenuator { loss_db }));
        self
    }

    pub fn validate(&self) -> Result<(), OdnError> {
        let mut splitters = 0;
        for e in &self.elements {
            e.validate()?;
            if let ElementSpec::Splitter(s) = e {
                splitters += 1;
                if self.selected_port >= s.num_ports {
                    return Err(OdnError::Config(format!(
                        "selected port {} out of range for a 1x{} splitter",
                        self.selected_port, s.num_ports
                    )));
                }
            }
        }
        if splitters > 1 {
            return Err(OdnError::Config("at most one splitter per topology".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, OdnError> {
        let t: OdnTopology = toml::from_str(text).map_err(|e| OdnError::Config(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }
}

fn check_band(lambda_nm: f64) -> Result<(), OdnError> {
    if lambda_nm >= QUANTUM_BAND_NM.0 && lambda_nm <= QUANTUM_BAND_NM.1 {
        Ok(())
    } else {
        Err(OdnError::Wavelength(lambda_nm))
    }
}

fn detuning_pm(lambda_nm: f64) -> f64 {
    (lambda_nm - LAMBDA_REF_NM) * 1000.0
}

/// One coupling section of a span: modal propagation (carrying the
/// section's share of DMD) followed by lumped coupling, SOP rotation and
/// loss at its end.
struct SpanSection {
    propagate: TransferOperator,
    mix: TransferOperator,
}

fn span_sections(s: &FiberSpan, lambda_nm: f64, seed: u64) -> Vec<SpanSection> {
    let k = ((s.length_km / SECTION_KM).ceil() as usize).max(1);
    let share = 1.0 / k as f64;
    let mut rng = seeded(seed);
    let sop = polarization_rotation(s.sop_rotation);
    let sop = TransferOperator::block_diagonal(&sop, &sop);
    let g = db_to_amplitude(s.loss_db() * share);
    let loss = TransferOperator::mode_gains(g, g);
    let detune = detuning_pm(lambda_nm);
    (0..k)
        .map(|i| {
            let u_angle: f64 = rng.random();
            let cross_phase = TAU * rng.random::<f64>();
            let phi0 = TAU * rng.random::<f64>();
            let scramble = haar_su2([rng.random(), rng.random(), rng.random()]);
            // Independent sections add coupling angles as a random walk.
            let angle = (s.coupling_strength * FRAC_PI_2 * u_angle + s.coupling_offset) * share.sqrt();
            let phi = phi0 + (s.phase_offset + s.phase_scale() * detune) * share;
            let lp11_path = scramble * C64::from_polar(1.0, phi);
            let propagate = TransferOperator::block_diagonal(&Jones2::identity(), &lp11_path)
                .with_delay([0.0, s.dmd_ns_per_km * s.length_km * share * 1e-9]);
            let couple = TransferOperator::mode_coupling(angle, cross_phase);
            // SOP rotation is applied once per span, at its end.
            let mix = if i + 1 == k {
                compose(&loss, &compose(&sop, &couple))
            } else {
                compose(&loss, &couple)
            };
            SpanSection { propagate, mix }
        })
        .collect()
}

fn span_transfer(s: &FiberSpan, lambda_nm: f64, seed: u64) -> TransferOperator {
    let acc = span_sections(s, lambda_nm, seed)
        .iter()
        .fold(TransferOperator::identity(), |acc, sec| {
            compose(&sec.mix, &compose(&sec.propagate, &acc))
        });
    acc.with_delay([0.0, s.dmd_ns_per_km * s.length_km * 1e-9])
}

/// Port weights of a splitter: column 0 maps input LP01, column 1 input
/// LP11, rows 0..N are output LP01 and N..2N output LP11 per port.
fn splitter_weights(s: &Splitter) -> Vec<[C64; 2]> {
    let n = s.num_ports;
    let mut rng = seeded(derive_seed(s.speckle_seed, 0x5911));
    let amp = 1.0 / (n as f64).sqrt();
    let mut col0 = vec![C64::new(0.0, 0.0); 2 * n];
    for (p, w) in col0.iter_mut().take(n).enumerate() {
        *w = C64::from_polar(amp, TAU * p as f64 / n as f64);
    }
    let mut col1: Vec<C64> = (0..2 * n)
        .map(|_| {
            C64::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            )
        })
        .collect();
    let proj: C64 = col0.iter().zip(&col1).map(|(a, b)| a.conj() * b).sum();
    for (b, a) in col1.iter_mut().zip(&col0) {
        *b -= proj * a;
    }
    let norm = col1.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
    for b in &mut col1 {
        *b /= norm;
    }
    col0.into_iter().zip(col1).map(|(a, b)| [a, b]).collect()
}

fn splitter_transfer(s: &Splitter, port: usize, lambda_nm: f64) -> TransferOperator {
    let n = s.num_ports;
    let weights = splitter_weights(s);
    let mut rng = seeded(derive_seed(s.speckle_seed, 0x111));
    let phi0 = TAU * rng.random::<f64>();
    let scramble = haar_su2([rng.random(), rng.random(), rng.random()]);
    let phi = phi0 + s.intermodal_phase_scale * detuning_pm(lambda_nm);
    let mixing = TransferOperator::block_diagonal(
        &Jones2::identity(),
        &(scramble * C64::from_polar(1.0, phi)),
    );

    // Renormalize so the N nominal LP01 weights carry 1/N each.
    let t = db_to_amplitude(s.excess_loss_db + s.nominal_db() - 10.0 * (n as f64).log10());
    let [w01, w11] = weights[port];
    let [x01, x11] = weights[port + n];
    let mut m = Matrix4::zeros();
    for p in 0..2 {
        m[(p, p)] = w01 * t;
        m[(p, p + 2)] = w11 * t;
        m[(p + 2, p)] = x01 * t;
        m[(p + 2, p + 2)] = x11 * t;
    }
    compose(&TransferOperator::from_matrix(m), &mixing)
}

fn connector_transfer(c: &Connector, seed: u64) -> TransferOperator {
    let mut rng = seeded(seed);
    let phase = TAU * rng.random::<f64>();
    compose(
        &TransferOperator::flat_loss_db(c.insertion_loss_db),
        &TransferOperator::mode_coupling(c.mixing_angle, phase),
    )
}

fn filter_transfer(m: &ModeFilter) -> TransferOperator {
    let lp01 = db_to_amplitude(m.lp01_insertion_loss_db);
    let strip = TransferOperator::mode_gains(lp01, lp01 * db_to_amplitude(m.lp11_extinction_db));
    if m.conversion_angle == 0.0 {
        strip
    } else {
        compose(&strip, &TransferOperator::mode_coupling(m.conversion_angle, 0.0))
    }
}

/// Operator of a single element. Splitters use port 0; see
/// [`element_transfer_at_port`].
pub fn element_transfer(
    e: &ElementSpec,
    lambda_nm: f64,
    seed: u64,
) -> Result<TransferOperator, OdnError> {
    element_transfer_at_port(e, 0, lambda_nm, seed)
}

pub fn element_transfer_at_port(
    e: &ElementSpec,
    port: usize,
    lambda_nm: f64,
    seed: u64,
) -> Result<TransferOperator, OdnError> {
    e.validate()?;
    check_band(lambda_nm)?;
    Ok(match e {
        ElementSpec::FiberSpan(s) => span_transfer(s, lambda_nm, seed),
        ElementSpec::Splitter(s) => {
            if port >= s.num_ports {
                return Err(OdnError::Config(format!("port {port} out of range")));
            }
            splitter_transfer(s, port, lambda_nm)
        }
        ElementSpec::ModeFilter(m) => filter_transfer(m),
        ElementSpec::Connector(c) => connector_transfer(c, seed),
        ElementSpec::Attenuator(a) => TransferOperator::flat_loss_db(a.loss_db),
    })
}

/// Left-to-right composition of all elements. Element seeds are derived
/// from `seed`, the element kind and its ordinal among elements of that
/// kind, so inserting a filter or attenuator leaves other realizations
/// untouched.
pub fn chain_transfer(
    t: &OdnTopology,
    lambda_nm: f64,
    seed: u64,
) -> Result<TransferOperator, OdnError> {
    t.validate()?;
    check_band(lambda_nm)?;
    let mut ordinals = [0u64; 6];
    let mut acc = TransferOperator::identity();
    for e in &t.elements {
        let kind = e.kind_tag();
        let ordinal = ordinals[kind as usize];
        ordinals[kind as usize] += 1;
        let es = derive_seed(derive_seed(seed, kind), ordinal);
        let op = element_transfer_at_port(e, t.selected_port, lambda_nm, es)?;
        acc = compose(&op, &acc);
    }
    Ok(acc)
}

/// Delay-resolved response of the whole chain, with the same element
/// seeding as [`chain_transfer`]. Replicas separated by modal delay add
/// in power at the receiver.
pub fn chain_response(
    t: &OdnTopology,
    lambda_nm: f64,
    seed: u64,
) -> Result<PathResponse, OdnError> {
    t.validate()?;
    check_band(lambda_nm)?;
    let mut ordinals = [0u64; 6];
    let mut acc = PathResponse::identity();
    for e in &t.elements {
        let kind = e.kind_tag();
        let ordinal = ordinals[kind as usize];
        ordinals[kind as usize] += 1;
        let es = derive_seed(derive_seed(seed, kind), ordinal);
        acc = match e {
            // Light coupled near the end of a span has picked up only part
            // of the span's DMD.
            ElementSpec::FiberSpan(s) => span_sections(s, lambda_nm, es)
                .iter()
                .fold(acc, |acc, sec| acc.then(&sec.propagate).then(&sec.mix)),
            _ => acc.then(&element_transfer_at_port(e, t.selected_port, lambda_nm, es)?),
        };
    }
    Ok(acc)
}

/// One row of a port transmission sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortTransmission {
    pub lambda_nm: f64,
    pub port: usize,
    pub db: f64,
}

/// LP01 power transmission per splitter port vs wavelength, averaged over
/// the four BB84 input polarizations.
pub fn port_transmission_sweep(
    t: &OdnTopology,
    lambda_range_nm: (f64, f64),
    step_pm: f64,
    lp11_launch_fraction: f64,
    seed: u64,
) -> Result<Vec<PortTransmission>, OdnError> {
    let ports = t
        .splitter()
        .ok_or_else(|| OdnError::Config("topology has no splitter".into()))?
        .num_ports;
    if !(step_pm > 0.0) {
        return Err(OdnError::Config("step must be > 0".into()));
    }
    let (lo, hi) = lambda_range_nm;
    let n_steps = ((hi - lo) * 1000.0 / step_pm + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity((n_steps + 1) * ports);
    for k in 0..=n_steps {
        let lambda = lo + k as f64 * step_pm / 1000.0;
        for port in 0..ports {
            let r = chain_response(&t.clone().with_port(port), lambda, seed)?;
            let mut p = 0.0;
            for basis in Basis::ALL {
                for bit in 0..2 {
                    let s = ModalState::launch(encode_jones(basis, bit), lp11_launch_fraction);
                    p += r.mode_power(&s, SpatialMode::Lp01) / 4.0;
                }
            }
            rows.push(PortTransmission {
                lambda_nm: lambda,
                port,
                db: 10.0 * p.log10(),
            });
        }
    }
    Ok(rows)
}

/// Environmental drift profile of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DriftProfile {
    Lab,
    Kos,
    Roof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    /// rad/√s, per Poincaré-sphere axis.
    pub sop_rotation_rate: f64,
    /// rad/√s, applied to both coupling angle and intermodal phase.
    pub coupling_walk_rate: f64,
    pub profile: DriftProfile,
}

impl DriftParams {
    pub fn preset(profile: DriftProfile) -> Self {
        let (sop, walk) = match profile {
            DriftProfile::Lab => (0.0, 0.0),
            DriftProfile::Kos => (2.0e-3, 2.0e-3),
            DriftProfile::Roof => (8.0e-3, 8.0e-3),
        };
        Self {
            sop_rotation_rate: sop,
            coupling_walk_rate: walk,
            profile,
        }
    }

    pub fn validate(&self) -> Result<(), OdnError> {
        if !(self.sop_rotation_rate >= 0.0 && self.coupling_walk_rate >= 0.0) {
            return Err(OdnError::Config("drift rates must be >= 0".into()));
        }
        if self.profile == DriftProfile::Lab
            && (self.sop_rotation_rate != 0.0 || self.coupling_walk_rate != 0.0)
        {
            return Err(OdnError::Config("LAB profile has zero drift".into()));
        }
        Ok(())
    }
}

/// Advances the environmental state of every fiber span by `dt` seconds.
pub fn drift_step<R: Rng + ?Sized>(
    t: &OdnTopology,
    d: &DriftParams,
    dt: f64,
    rng: &mut R,
) -> Result<OdnTopology, OdnError> {
    if !(dt > 0.0) {
        return Err(OdnError::Config("dt must be > 0".into()));
    }
    d.validate()?;
    if d.profile == DriftProfile::Lab {
        return Ok(t.clone());
    }
    let walk = Normal::new(0.0, d.coupling_walk_rate * dt.sqrt()).expect("finite sigma");
    let sop = Normal::new(0.0, d.sop_rotation_rate * dt.sqrt()).expect("finite sigma");
    let mut out = t.clone();
    for e in &mut out.elements {
        if let ElementSpec::FiberSpan(s) = e {
            s.coupling_offset += walk.sample(rng);
            s.phase_offset += walk.sample(rng);
            for r in &mut s.sop_rotation {
                *r += sop.sample(rng);
            }
        }
    }
    Ok(out)
}

pub fn linear_transmission(db: f64) -> f64 {
    db_to_power(-db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal_optics::{apply, power_to_db};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lp01_state(f: f64) -> ModalState {
        ModalState::launch(encode_jones(Basis::AD, 0), f)
    }

    #[test]
    fn span_defaults_match_loss_and_dmd() {
        let mut s = FiberSpan::new(1.0);
        s.coupling_strength = 0.0;
        let op = element_transfer(&ElementSpec::FiberSpan(s), 848.0, 1).unwrap();
        let out = apply(&op, &lp01_state(0.0));
        assert_abs_diff_eq!(out.power(), 0.660_693_448, epsilon = 1e-9);
        assert_abs_diff_eq!(op.delay_inc[1], 2.02e-9, epsilon = 1e-21);
        assert_eq!(op.delay_inc[0], 0.0);
        let out11 = apply(&op, &ModalState::single_mode(SpatialMode::Lp11, encode_jones(Basis::RL, 0)));
        assert_abs_diff_eq!(out11.mode_power(SpatialMode::Lp11), 0.660_693_448, epsilon = 1e-9);
    }

    #[test]
    fn zero_attenuator_is_identity() {
        let op = element_transfer(&ElementSpec::Attenuator(Attenuator { loss_db: 0.0 }), 848.0, 0)
            .unwrap();
        assert_eq!(op, TransferOperator::identity());
    }

    #[test]
    fn mode_filter_powers() {
        let f = ModeFilter {
            lp11_extinction_db: 20.0,
            lp01_insertion_loss_db: 0.2,
            conversion_angle: 0.0,
        };
        let op = element_transfer(&ElementSpec::ModeFilter(f), 848.0, 0).unwrap();
        let s = ModalState::launch(encode_jones(Basis::AD, 0), 0.2);
        let out = apply(&op, &s);
        assert_abs_diff_eq!(out.mode_power(SpatialMode::Lp01), 0.8 * 10f64.powf(-0.02), epsilon = 1e-12);
        assert_abs_diff_eq!(
            out.mode_power(SpatialMode::Lp11),
            0.2 * 1e-2 * 10f64.powf(-0.02),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(out.mode_power(SpatialMode::Lp01), 0.764, epsilon = 1e-3);
    }

    #[test]
    fn empty_topology_is_identity() {
        let t = OdnTopology::new("empty", vec![]);
        assert_eq!(chain_transfer(&t, 848.0, 9).unwrap(), TransferOperator::identity());
    }

    #[test]
    fn out_of_band_wavelength_rejected() {
        let t = OdnTopology::new("x", vec![ElementSpec::FiberSpan(FiberSpan::new(1.0))]);
        assert_eq!(chain_transfer(&t, 1310.0, 0), Err(OdnError::Wavelength(1310.0)));
    }

    #[test]
    fn invalid_elements_are_config_errors() {
        let mut s = FiberSpan::new(1.0);
        s.coupling_strength = 1.5;
        assert!(matches!(ElementSpec::FiberSpan(s).validate(), Err(OdnError::Config(_))));
        let t = OdnTopology::new(
            "two",
            vec![
                ElementSpec::Splitter(Splitter::new(4, 1)),
                ElementSpec::Splitter(Splitter::new(4, 2)),
            ],
        );
        assert!(matches!(t.validate(), Err(OdnError::Config(_))));
        let t = OdnTopology::new("port", vec![ElementSpec::Splitter(Splitter::new(4, 1))]).with_port(4);
        assert!(matches!(t.validate(), Err(OdnError::Config(_))));
        assert!(matches!(
            ElementSpec::Splitter(Splitter::new(1, 0)).validate(),
            Err(OdnError::Config(_))
        ));
    }

    #[test]
    fn unknown_tag_is_config_error() {
        let text = "label = \"bad\"\n[[elements]]\ntype = \"Amplifier\"\ngain_db = 3.0\n";
        assert!(matches!(OdnTopology::from_toml(text), Err(OdnError::Config(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let mut span = FiberSpan::new(0.27);
        span.sop_rotation = [0.1, 0.0, -0.2];
        let t = OdnTopology::new(
            "custom",
            vec![
                ElementSpec::Splitter(Splitter::new(4, 7)),
                ElementSpec::Connector(Connector::default()),
                ElementSpec::FiberSpan(span),
                ElementSpec::ModeFilter(ModeFilter::default()),
            ],
        )
        .with_port(2);
        let back = OdnTopology::from_toml(&t.to_toml()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn determinism_is_bitwise() {
        let t = OdnTopology::new(
            "d",
            vec![
                ElementSpec::Splitter(Splitter::new(4, 3)),
                ElementSpec::FiberSpan(FiberSpan::new(1.0)),
                ElementSpec::Connector(Connector::default()),
            ],
        );
        let a = chain_transfer(&t, 848.003, 42).unwrap();
        let b = chain_transfer(&t, 848.003, 42).unwrap();
        assert_eq!(a, b);
        let c = chain_transfer(&t, 848.003, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pure_lp01_splitter_is_flat_at_nominal() {
        let mut span = FiberSpan::new(0.002);
        span.coupling_strength = 0.0;
        let mut conn = Connector::default();
        conn.mixing_angle = 0.0;
        let t = OdnTopology::new(
            "flat",
            vec![
                ElementSpec::FiberSpan(span),
                ElementSpec::Connector(conn),
                ElementSpec::Splitter(Splitter::new(4, 11)),
            ],
        );
        let expected = -(0.002 * 1.8 + 10.0 * 4f64.log10() + DEFAULT_SPLITTER_EXCESS_DB);
        let rows = port_transmission_sweep(&t, (847.99, 848.01), 1.0, 0.0, 5).unwrap();
        assert_eq!(rows.len(), 21 * 4);
        for r in rows {
            assert_abs_diff_eq!(r.db, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn ports_sum_below_excess_and_speckle_is_deep() {
        let t = OdnTopology::new(
            "speckle",
            vec![ElementSpec::Splitter(Splitter::new(4, 3))],
        );
        let rows = port_transmission_sweep(&t, (847.995, 848.005), 0.5, 0.3, 1).unwrap();
        let bound = db_to_power(DEFAULT_SPLITTER_EXCESS_DB);
        let mut min_db = f64::INFINITY;
        let mut max_db = f64::NEG_INFINITY;
        for chunk in rows.chunks(4) {
            let total: f64 = chunk.iter().map(|r| linear_transmission(r.db)).sum();
            assert!(total <= bound * (1.0 + 1e-9), "{total} > {bound}");
            for r in chunk {
                min_db = min_db.min(r.db);
                max_db = max_db.max(r.db);
            }
        }
        assert!(max_db - min_db > 3.0, "spread {}", max_db - min_db);
    }

    #[test]
    fn sweep_without_splitter_fails() {
        let t = OdnTopology::new("s", vec![ElementSpec::FiberSpan(FiberSpan::new(1.0))]);
        assert!(matches!(
            port_transmission_sweep(&t, (848.0, 848.01), 1.0, 0.1, 0),
            Err(OdnError::Config(_))
        ));
    }

    #[test]
    fn attenuator_scales_every_port_exactly() {
        let t = OdnTopology::new(
            "a",
            vec![
                ElementSpec::Splitter(Splitter::new(4, 5)),
                ElementSpec::FiberSpan(FiberSpan::new(1.0)),
            ],
        );
        let base = port_transmission_sweep(&t, (848.0, 848.002), 1.0, 0.1, 3).unwrap();
        let att = port_transmission_sweep(&t.clone().with_attenuator(7.5), (848.0, 848.002), 1.0, 0.1, 3)
            .unwrap();
        for (a, b) in base.iter().zip(&att) {
            assert_abs_diff_eq!(a.db - b.db, 7.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn lab_drift_is_identity() {
        let t = OdnTopology::new("l", vec![ElementSpec::FiberSpan(FiberSpan::new(0.27))]);
        let mut rng = seeded(1);
        let out = drift_step(&t, &DriftParams::preset(DriftProfile::Lab), 10.0, &mut rng).unwrap();
        assert_eq!(out, t);
        assert!(drift_step(&t, &DriftParams::preset(DriftProfile::Kos), 0.0, &mut rng).is_err());
    }

    #[test]
    fn drift_increments_are_unbiased() {
        let t = OdnTopology::new("k", vec![ElementSpec::FiberSpan(FiberSpan::new(0.27))]);
        let d = DriftParams::preset(DriftProfile::Roof);
        let dt = 4.0;
        let mut rng = seeded(77);
        let n = 10_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let out = drift_step(&t, &d, dt, &mut rng).unwrap();
            let ElementSpec::FiberSpan(s) = &out.elements[0] else { unreachable!() };
            sum += s.sop_rotation[0];
            sum_sq += s.sop_rotation[0] * s.sop_rotation[0];
        }
        let sigma = d.sop_rotation_rate * dt.sqrt();
        let mean = sum / n as f64;
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        let var = sum_sq / n as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05);
    }

    fn arb_element() -> impl Strategy<Value = ElementSpec> {
        prop_oneof![
            (0.0f64..2.0, 0.0f64..1.0, proptest::option::of(0.0f64..10.0)).prop_map(|(l, c, p)| {
                let mut s = FiberSpan::new(l);
                s.coupling_strength = c;
                s.intermodal_phase_scale = p;
                ElementSpec::FiberSpan(s)
            }),
            (2usize..9, 0.0f64..4.0, any::<u64>(), 0.0f64..5.0).prop_map(|(n, x, seed, ps)| {
                let mut s = Splitter::new(n, seed);
                s.excess_loss_db = x;
                s.intermodal_phase_scale = ps;
                ElementSpec::Splitter(s)
            }),
            (0.0f64..40.0, 0.0f64..2.0, -1.0f64..1.0).prop_map(|(e, i, c)| ElementSpec::ModeFilter(ModeFilter {
                lp11_extinction_db: e,
                lp01_insertion_loss_db: i,
                conversion_angle: c,
            })),
            (0.0f64..2.0, -1.0f64..1.0).prop_map(|(l, m)| ElementSpec::Connector(Connector {
                insertion_loss_db: l,
                mixing_angle: m
            })),
            (0.0f64..60.0).prop_map(|l| ElementSpec::Attenuator(Attenuator { loss_db: l })),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn every_element_is_passive(e in arb_element(), lambda in 830.0f64..870.0, seed in any::<u64>()) {
            let op = element_transfer(&e, lambda, seed).unwrap();
            prop_assert!(op.max_singular_value() <= 1.0 + 1e-9);
            prop_assert!(op.delay_inc[1] >= op.delay_inc[0]);
        }
    }

    proptest! {
        #[test]
        fn stronger_filter_never_raises_lp11(ext in 0.0f64..30.0, extra in 0.0f64..20.0, seed in any::<u64>()) {
            let build = |x: f64| OdnTopology::new("f", vec![
                ElementSpec::Splitter(Splitter::new(4, seed)),
                ElementSpec::FiberSpan(FiberSpan::new(1.0)),
                ElementSpec::ModeFilter(ModeFilter { lp11_extinction_db: x, lp01_insertion_loss_db: 0.2, conversion_angle: 0.0 }),
            ]);
            let s = lp01_state(0.1);
            let weak = apply(&chain_transfer(&build(ext), 848.0, seed).unwrap(), &s);
            let strong = apply(&chain_transfer(&build(ext + extra), 848.0, seed).unwrap(), &s);
            prop_assert!(strong.mode_power(SpatialMode::Lp11) <= weak.mode_power(SpatialMode::Lp11) * (1.0 + 1e-12));
            prop_assert!((strong.mode_power(SpatialMode::Lp01) - weak.mode_power(SpatialMode::Lp01)).abs() < 1e-12);
        }
    }

    #[test]
    fn scenario_loss_of_straight_line() {
        let mut span = FiberSpan::new(1.0);
        span.coupling_strength = 0.0;
        let mut conn = Connector::default();
        conn.mixing_angle = 0.0;
        let t = OdnTopology::new(
            "1",
            vec![
                ElementSpec::FiberSpan(span),
                ElementSpec::Connector(conn),
                ElementSpec::ModeFilter(ModeFilter::default()),
            ],
        );
        let out = apply(&chain_transfer(&t, 848.0, 0).unwrap(), &lp01_state(0.0));
        assert_abs_diff_eq!(power_to_db(out.power()), 1.8 + 0.2, epsilon = 1e-9);
    }
}
