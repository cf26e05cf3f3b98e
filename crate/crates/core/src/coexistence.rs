//! Classical channel overlay and the receiver filter chain: residual Raman,
//! leakage and spontaneous-emission counts at Bob's detectors.

use crate::odn_model::{ElementSpec, OdnTopology, LAMBDA_REF_NM};
use crate::qkd_link::DetectorConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Aggregate launch power of the default overlay.
pub const DEFAULT_AGGREGATE_DBM: f64 = 10.1;
pub const DEFAULT_CHANNEL_COUNT: usize = 50;
pub const DEFAULT_CHANNEL_RANGE_NM: (f64, f64) = (1307.2, 1618.7);
/// Raman counts/s per mW per km at the detector input, before filtering.
pub const DEFAULT_RAMAN_COEFFICIENT: f64 = 3.0e3;

const PLANCK: f64 = 6.626_070_15e-34;
const LIGHT_SPEED: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum CoexistenceError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalChannel {
    pub wavelength_nm: f64,
    pub power_dbm: f64,
}

impl ClassicalChannel {
    pub fn power_mw(&self) -> f64 {
        10f64.powf(self.power_dbm / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalChannelPlan {
    pub channels: Vec<ClassicalChannel>,
    /// Metadata only; the noise model uses average power.
    #[serde(default = "default_modulation")]
    pub modulation: String,
}

fn default_modulation() -> String {
    "10G-OOK".into()
}

impl Default for ClassicalChannelPlan {
    fn default() -> Self {
        Self::evenly_spaced(
            DEFAULT_CHANNEL_COUNT,
            DEFAULT_CHANNEL_RANGE_NM,
            DEFAULT_AGGREGATE_DBM,
        )
    }
}

impl ClassicalChannelPlan {
    pub fn empty() -> Self {
        Self {
            channels: Vec::new(),
            modulation: default_modulation(),
        }
    }

    /// `n` equal-power channels spread evenly over `range`, summing to
    /// `aggregate_dbm`.
    pub fn evenly_spaced(n: usize, range: (f64, f64), aggregate_dbm: f64) -> Self {
        if n == 0 {
            return Self::empty();
        }
        let per = aggregate_dbm - 10.0 * (n as f64).log10();
        let step = if n > 1 {
            (range.1 - range.0) / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            channels: (0..n)
                .map(|i| ClassicalChannel {
                    wavelength_nm: range.0 + step * i as f64,
                    power_dbm: per,
                })
                .collect(),
            modulation: default_modulation(),
        }
    }

    pub fn total_power_mw(&self) -> f64 {
        self.channels.iter().map(ClassicalChannel::power_mw).sum()
    }

    pub fn total_power_dbm(&self) -> f64 {
        10.0 * self.total_power_mw().log10()
    }

    /// Every channel shifted by `delta_db`.
    pub fn scaled(&self, delta_db: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.channels {
            c.power_dbm += delta_db;
        }
        out
    }

    pub fn validate(&self) -> Result<(), CoexistenceError> {
        for c in &self.channels {
            if !(c.wavelength_nm > 0.0 && c.power_dbm.is_finite()) {
                return Err(CoexistenceError::Config(format!("bad channel {c:?}")));
            }
        }
        Ok(())
    }
}

/// Flat-top filter stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    pub name: String,
    pub center_nm: f64,
    pub fwhm_nm: f64,
    pub in_band_loss_db: f64,
    pub rejection_db: f64,
}

impl FilterStage {
    pub fn in_band(&self, lambda_nm: f64) -> bool {
        (lambda_nm - self.center_nm).abs() <= 0.5 * self.fwhm_nm
    }

    pub fn loss_db(&self, lambda_nm: f64) -> f64 {
        if self.in_band(lambda_nm) {
            self.in_band_loss_db
        } else {
            self.in_band_loss_db + self.rejection_db
        }
    }

    pub fn validate(&self) -> Result<(), CoexistenceError> {
        if !(self.fwhm_nm > 0.0) || !(self.rejection_db >= 0.0) || !(self.in_band_loss_db >= 0.0) {
            return Err(CoexistenceError::Config(format!(
                "stage {}: need fwhm > 0, rejection >= 0, loss >= 0",
                self.name
            )));
        }
        Ok(())
    }

    /// Free-space bandpass at the receiver.
    pub fn receiver_bpf() -> Self {
        Self {
            name: "bpf".into(),
            center_nm: 845.0,
            fwhm_nm: 10.0,
            in_band_loss_db: 0.4,
            rejection_db: 60.0,
        }
    }

    /// 850/1310-1625 waveband splitter.
    pub fn waveband_splitter(name: &str) -> Self {
        Self {
            name: name.into(),
            center_nm: 850.0,
            fwhm_nm: 40.0,
            in_band_loss_db: 0.5,
            rejection_db: 35.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterChain {
    pub stages: Vec<FilterStage>,
}

impl FilterChain {
    /// Receiver without the classical overlay: the bandpass only.
    pub fn receiver() -> Self {
        Self {
            stages: vec![FilterStage::receiver_bpf()],
        }
    }

    /// Overlay multiplexer and demultiplexer plus the receiver bandpass.
    pub fn coexistence() -> Self {
        Self {
            stages: vec![
                FilterStage::waveband_splitter("mux"),
                FilterStage::waveband_splitter("demux"),
                FilterStage::receiver_bpf(),
            ],
        }
    }

    pub fn without(&self, name: &str) -> Self {
        Self {
            stages: self.stages.iter().filter(|s| s.name != name).cloned().collect(),
        }
    }

    pub fn loss_db(&self, lambda_nm: f64) -> f64 {
        self.stages.iter().map(|s| s.loss_db(lambda_nm)).sum()
    }

    pub fn transmission(&self, lambda_nm: f64) -> f64 {
        10f64.powf(-self.loss_db(lambda_nm) / 10.0)
    }

    /// Loss charged to the quantum signal.
    pub fn quantum_loss_db(&self) -> f64 {
        self.loss_db(LAMBDA_REF_NM)
    }

    pub fn validate(&self) -> Result<(), CoexistenceError> {
        self.stages.iter().try_for_each(FilterStage::validate)
    }
}

/// Coefficients of the noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseCoefficients {
    /// Raman counts/s per mW of launch power per km of fiber, inside the
    /// 10 nm acceptance, before filter transmission and detector efficiency.
    pub raman_coefficient: f64,
    /// Optional relative weight of the Raman coefficient against channel
    /// wavelength, linearly interpolated; empty means flat.
    pub raman_profile: Vec<(f64, f64)>,
    /// Out-of-band response of the silicon detectors per incident photon.
    pub leakage_response: f64,
    /// Spontaneous-emission tail rate at the detectors with no filtering.
    pub ase_unfiltered_rate: f64,
    /// Representative wavelength of the tail.
    pub ase_wavelength_nm: f64,
}

impl Default for NoiseCoefficients {
    fn default() -> Self {
        Self {
            raman_coefficient: DEFAULT_RAMAN_COEFFICIENT,
            raman_profile: Vec::new(),
            leakage_response: 1e-9,
            ase_unfiltered_rate: 2.0e4,
            ase_wavelength_nm: 865.0,
        }
    }
}

impl NoiseCoefficients {
    pub fn raman_weight(&self, lambda_nm: f64) -> f64 {
        let p = &self.raman_profile;
        match p.len() {
            0 => 1.0,
            1 => p[0].1,
            _ => {
                if lambda_nm <= p[0].0 {
                    return p[0].1;
                }
                for w in p.windows(2) {
                    if lambda_nm <= w[1].0 {
                        let f = (lambda_nm - w[0].0) / (w[1].0 - w[0].0);
                        return w[0].1 + f * (w[1].1 - w[0].1);
                    }
                }
                p[p.len() - 1].1
            }
        }
    }
}

/// Full overlay configuration as loaded from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoexistenceConfig {
    pub plan: ClassicalChannelPlan,
    pub chain: FilterChain,
    pub coefficients: NoiseCoefficients,
}

impl Default for CoexistenceConfig {
    fn default() -> Self {
        Self {
            plan: ClassicalChannelPlan::default(),
            chain: FilterChain::coexistence(),
            coefficients: NoiseCoefficients::default(),
        }
    }
}

impl CoexistenceConfig {
    pub fn from_toml(s: &str) -> Result<Self, CoexistenceError> {
        let c: Self = toml::from_str(s).map_err(|e| CoexistenceError::Config(e.to_string()))?;
        c.plan.validate()?;
        c.chain.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn photons_per_second(power_mw: f64, lambda_nm: f64) -> f64 {
    power_mw * 1e-3 * lambda_nm * 1e-9 / (PLANCK * LIGHT_SPEED)
}

/// Total Raman plus leakage counts/s summed over the receiver's detectors.
pub fn noise_count_rate(
    plan: &ClassicalChannelPlan,
    topology: &OdnTopology,
    chain: &FilterChain,
    det: &DetectorConfig,
    coeffs: &NoiseCoefficients,
) -> f64 {
    let span_km: f64 = topology
        .elements
        .iter()
        .filter_map(|e| match e {
            ElementSpec::FiberSpan(s) => Some(s.length_km),
            _ => None,
        })
        .sum();
    let in_band = chain.transmission(845.0);
    plan.channels
        .iter()
        .map(|c| {
            let p = c.power_mw();
            let raman = p * coeffs.raman_coefficient * coeffs.raman_weight(c.wavelength_nm) * span_km;
            let leak = photons_per_second(p, c.wavelength_nm)
                * chain.transmission(c.wavelength_nm)
                * coeffs.leakage_response;
            (raman * in_band + leak) * det.efficiency
        })
        .sum()
}

/// Residual spontaneous-emission counts/s after the chain.
pub fn spontaneous_emission_floor(chain: &FilterChain, coeffs: &NoiseCoefficients) -> f64 {
    coeffs.ase_unfiltered_rate * chain.transmission(coeffs.ase_wavelength_nm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odn_model::FiberSpan;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fiber(km: f64) -> OdnTopology {
        OdnTopology::new("f", vec![ElementSpec::FiberSpan(FiberSpan::new(km))])
    }

    #[test]
    fn default_plan_matches_aggregate() {
        let p = ClassicalChannelPlan::default();
        assert_eq!(p.channels.len(), 50);
        assert_relative_eq!(p.total_power_dbm(), 10.1, epsilon = 1e-12);
        assert_relative_eq!(p.channels[0].wavelength_nm, 1307.2);
        assert_relative_eq!(p.channels[49].wavelength_nm, 1618.7, epsilon = 1e-9);
    }

    #[test]
    fn empty_plan_is_silent() {
        let r = noise_count_rate(
            &ClassicalChannelPlan::empty(),
            &fiber(1.0),
            &FilterChain::coexistence(),
            &DetectorConfig::default(),
            &NoiseCoefficients::default(),
        );
        assert_eq!(r, 0.0);
    }

    #[test]
    fn doubling_power_doubles_rate() {
        let args = (fiber(1.0), FilterChain::coexistence(), DetectorConfig::default());
        let c = NoiseCoefficients::default();
        let p = ClassicalChannelPlan::default();
        let a = noise_count_rate(&p, &args.0, &args.1, &args.2, &c);
        let b = noise_count_rate(&p.scaled(10.0 * 2f64.log10()), &args.0, &args.1, &args.2, &c);
        assert_relative_eq!(b, 2.0 * a, max_relative = 1e-12);
    }

    #[test]
    fn ase_floor_is_filtered_by_bpf() {
        let c = NoiseCoefficients::default();
        let with = spontaneous_emission_floor(&FilterChain::coexistence(), &c);
        let without = spontaneous_emission_floor(&FilterChain::coexistence().without("bpf"), &c);
        assert!(with <= 3.5, "{with}");
        assert!(without > with);
        let mut hard = FilterChain::coexistence();
        hard.stages[2].rejection_db = f64::INFINITY;
        assert_eq!(spontaneous_emission_floor(&hard, &c), 0.0);
    }

    #[test]
    fn removing_a_stage_never_lowers_noise() {
        let chain = FilterChain::coexistence();
        let c = NoiseCoefficients::default();
        let p = ClassicalChannelPlan::default();
        let det = DetectorConfig::default();
        let full = noise_count_rate(&p, &fiber(2.0), &chain, &det, &c);
        for s in &chain.stages {
            let r = noise_count_rate(&p, &fiber(2.0), &chain.without(&s.name), &det, &c);
            assert!(r >= full);
        }
    }

    #[test]
    fn quantum_band_sits_inside_every_stage() {
        for s in &FilterChain::coexistence().stages {
            assert!(s.in_band(LAMBDA_REF_NM));
        }
        assert_relative_eq!(FilterChain::receiver().quantum_loss_db(), 0.4);
        assert_relative_eq!(FilterChain::coexistence().quantum_loss_db(), 1.4);
    }

    #[test]
    fn invalid_stage_rejected() {
        let mut c = CoexistenceConfig::default();
        c.chain.stages[0].fwhm_nm = 0.0;
        assert!(CoexistenceConfig::from_toml(&c.to_toml()).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let c = CoexistenceConfig::default();
        assert_eq!(CoexistenceConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn raman_profile_interpolates() {
        let c = NoiseCoefficients {
            raman_profile: vec![(1300.0, 1.0), (1600.0, 0.4)],
            ..NoiseCoefficients::default()
        };
        assert_relative_eq!(c.raman_weight(1450.0), 0.7, epsilon = 1e-12);
        assert_relative_eq!(c.raman_weight(1200.0), 1.0);
        assert_relative_eq!(c.raman_weight(1700.0), 0.4);
    }

    proptest! {
        #[test]
        fn noise_is_additive_over_channels(
            chans in prop::collection::vec((1260.0f64..1650.0, -20.0f64..10.0), 1..20),
            split in 0usize..20,
        ) {
            let plan = ClassicalChannelPlan {
                channels: chans.iter().map(|&(wavelength_nm, power_dbm)| ClassicalChannel { wavelength_nm, power_dbm }).collect(),
                modulation: "x".into(),
            };
            let k = split.min(plan.channels.len());
            let a = ClassicalChannelPlan { channels: plan.channels[..k].to_vec(), ..plan.clone() };
            let b = ClassicalChannelPlan { channels: plan.channels[k..].to_vec(), ..plan.clone() };
            let (t, ch, det, c) = (fiber(1.5), FilterChain::coexistence(), DetectorConfig::default(), NoiseCoefficients::default());
            let whole = noise_count_rate(&plan, &t, &ch, &det, &c);
            let parts = noise_count_rate(&a, &t, &ch, &det, &c) + noise_count_rate(&b, &t, &ch, &det, &c);
            prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
        }
    }
}
