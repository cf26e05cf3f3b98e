//! Named scenarios of the evaluated layouts and the free-parameter set they
//! are built from.

use crate::coexistence::{CoexistenceConfig, FilterChain, NoiseCoefficients};
use crate::odn_model::{
    Connector, DriftParams, DriftProfile, ElementSpec, FiberSpan, ModeFilter, OdnTopology, Splitter,
};
use crate::postproc::PostprocConfig;
use crate::qkd_link::{DetectorConfig, EncoderConfig};
use serde::{Deserialize, Serialize};

/// Free model parameters. Everything else is fixed by the hardware
/// description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub lp11_launch_fraction: f64,
    pub span_coupling: f64,
    /// Intermodal phase slope of fiber, rad/pm per km.
    pub fiber_phase_scale: f64,
    /// Intermodal phase slope of the splitter pigtail, rad/pm.
    pub splitter_phase_scale: f64,
    pub splitter_excess_db: f64,
    /// Polarimeter insertion loss ahead of the SPADs.
    pub receiver_loss_db: f64,
    pub lp11_collection: f64,
    pub filter_extinction_db: f64,
    pub filter_insertion_db: f64,
    pub filter_conversion_rad: f64,
    pub connector_mixing_rad: f64,
    /// Mixing angle of the splices along the installed loop.
    pub splice_mixing_rad: f64,
    pub raman_coefficient: f64,
    pub kos_drift: f64,
    pub roof_drift: f64,
    /// Speckle and fiber realization of the lab network.
    pub realization_seed: u64,
}

impl Default for ModelParams {
    /// Calibrated set; see `runner::calibrate`.
    fn default() -> Self {
        Self {
            lp11_launch_fraction: 0.163,
            span_coupling: 0.138,
            fiber_phase_scale: 0.9,
            splitter_phase_scale: 0.9,
            splitter_excess_db: 9.97,
            receiver_loss_db: 4.58,
            lp11_collection: 0.105,
            filter_extinction_db: 29.1,
            filter_insertion_db: 0.2,
            filter_conversion_rad: 0.632,
            connector_mixing_rad: 0.732,
            splice_mixing_rad: 0.070,
            raman_coefficient: 1723.0,
            kos_drift: 1.2e-3,
            roof_drift: 4.0e-3,
            realization_seed: 922,
        }
    }
}

impl ModelParams {
    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("params serialize")
    }

    pub fn span(&self, km: f64) -> FiberSpan {
        let mut s = FiberSpan::new(km);
        s.coupling_strength = self.span_coupling;
        s.intermodal_phase_scale = Some(self.fiber_phase_scale * km);
        s
    }

    pub fn splitter(&self) -> Splitter {
        let mut s = Splitter::new(4, self.realization_seed);
        s.excess_loss_db = self.splitter_excess_db;
        s.intermodal_phase_scale = self.splitter_phase_scale;
        s
    }

    pub fn mode_filter(&self) -> ModeFilter {
        ModeFilter {
            lp11_extinction_db: self.filter_extinction_db,
            lp01_insertion_loss_db: self.filter_insertion_db,
            conversion_angle: self.filter_conversion_rad,
        }
    }

    pub fn joint(&self) -> ElementSpec {
        ElementSpec::Connector(Connector {
            insertion_loss_db: 0.0,
            mixing_angle: self.connector_mixing_rad,
        })
    }

    pub fn splice(&self) -> ElementSpec {
        ElementSpec::Connector(Connector {
            insertion_loss_db: 0.0,
            mixing_angle: self.splice_mixing_rad,
        })
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            optics_loss_db: self.receiver_loss_db,
            lp11_collection: self.lp11_collection,
            ..DetectorConfig::default()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            lp11_launch_fraction: self.lp11_launch_fraction,
            ..EncoderConfig::default()
        }
    }

    pub fn drift(&self, profile: DriftProfile) -> DriftParams {
        let rate = match profile {
            DriftProfile::Lab => 0.0,
            DriftProfile::Kos => self.kos_drift,
            DriftProfile::Roof => self.roof_drift,
        };
        DriftParams {
            sop_rotation_rate: rate,
            coupling_walk_rate: rate,
            profile,
        }
    }
}

/// Everything needed to simulate one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub topology: OdnTopology,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub postproc: PostprocConfig,
    /// Receiver filtering without the classical overlay.
    #[serde(default = "FilterChain::receiver")]
    pub receiver_chain: FilterChain,
    #[serde(default)]
    pub coexistence: CoexistenceConfig,
    /// Overlay enabled unless overridden by the caller.
    #[serde(default)]
    pub coexist: bool,
    #[serde(default = "lab_drift")]
    pub drift: DriftParams,
    /// Seed of the element realizations (speckle, fiber coupling).
    #[serde(default)]
    pub realization_seed: u64,
}

fn lab_drift() -> DriftParams {
    DriftParams::preset(DriftProfile::Lab)
}

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

/// Segment lengths of the installed loops, metres.
pub const KOS_SEGMENTS_M: [f64; 6] = [20.0, 35.0, 60.0, 45.0, 80.0, 30.0];
pub const ROOF_SEGMENTS_M: [f64; 12] =
    [30.0, 45.0, 60.0, 70.0, 25.0, 60.0, 80.0, 55.0, 75.0, 62.0, 50.0, 80.0];

/// Which of the four marked components a topology contains:
/// `[split, M1, drop, M2]`.
pub fn component_marks(t: &OdnTopology) -> [bool; 4] {
    let e = &t.elements;
    let split = e.iter().position(|x| matches!(x, ElementSpec::Splitter(_)));
    let first_span = e.iter().position(|x| matches!(x, ElementSpec::FiberSpan(_)));
    let last_span = e.iter().rposition(|x| matches!(x, ElementSpec::FiberSpan(_)));
    let filters: Vec<usize> = e
        .iter()
        .enumerate()
        .filter(|(_, x)| matches!(x, ElementSpec::ModeFilter(_)))
        .map(|(i, _)| i)
        .collect();
    let m1 = match (split, first_span) {
        (Some(s), Some(f)) => filters.iter().any(|&i| i > s && i < f),
        _ => false,
    };
    let m2 = last_span.is_some_and(|l| filters.iter().any(|&i| i > l));
    [split.is_some(), m1, first_span.is_some(), m2]
}

/// Component marks of the five evaluated layouts.
pub const TABLE_MARKS: [[bool; 4]; 5] = [
    [false, false, true, true],
    [true, true, true, false],
    [true, true, true, true],
    [true, true, true, true],
    [true, false, true, true],
];

pub const PRESET_NAMES: [&str; 5] = [
    "straight-line",
    "colorless-distribution",
    "tree",
    "co-existence",
    "field-installed",
];

#[derive(Debug, Clone, Copy)]
struct Layout {
    split: bool,
    m1: bool,
    m2: bool,
}

fn lab_topology(p: &ModelParams, label: &str, l: Layout) -> OdnTopology {
    let mut el = vec![p.joint()];
    if l.split {
        el.push(ElementSpec::Splitter(p.splitter()));
        el.push(p.joint());
    }
    if l.m1 {
        el.push(ElementSpec::ModeFilter(p.mode_filter()));
    }
    el.push(ElementSpec::FiberSpan(p.span(1.0)));
    el.push(p.joint());
    if l.m2 {
        el.push(ElementSpec::ModeFilter(p.mode_filter()));
    }
    OdnTopology::new(label, el)
}

fn scenario(p: &ModelParams, label: &str, topology: OdnTopology) -> Scenario {
    Scenario {
        label: label.into(),
        topology,
        encoder: p.encoder(),
        detector: p.detector(),
        postproc: PostprocConfig::default(),
        receiver_chain: FilterChain::receiver(),
        coexistence: CoexistenceConfig {
            coefficients: NoiseCoefficients {
                raman_coefficient: p.raman_coefficient,
                ..NoiseCoefficients::default()
            },
            ..CoexistenceConfig::default()
        },
        coexist: false,
        drift: lab_drift(),
        realization_seed: p.realization_seed,
    }
}

/// Lab layout with an arbitrary choice of splitter and mode filters.
pub fn lab_layout(p: &ModelParams, split: bool, m1: bool, m2: bool) -> Scenario {
    let label = format!(
        "lab{}{}{}",
        if split { "-split" } else { "" },
        if m1 { "-m1" } else { "" },
        if m2 { "-m2" } else { "" }
    );
    scenario(p, &label, lab_topology(p, &label, Layout { split, m1, m2 }))
}

/// Installed loop looped back to the lab: splitter, segments joined by
/// connectors, M2.
pub fn field_scenario(p: &ModelParams, profile: DriftProfile) -> Scenario {
    let segments: &[f64] = match profile {
        DriftProfile::Roof => &ROOF_SEGMENTS_M,
        _ => &KOS_SEGMENTS_M,
    };
    let mut el = vec![p.joint(), ElementSpec::Splitter(p.splitter()), p.joint()];
    for (i, m) in segments.iter().enumerate() {
        if i > 0 {
            el.push(p.splice());
        }
        el.push(ElementSpec::FiberSpan(p.span(m / 1000.0)));
    }
    el.push(p.joint());
    el.push(ElementSpec::ModeFilter(p.mode_filter()));
    let label = match profile {
        DriftProfile::Roof => "field-roof",
        _ => "field-kos",
    };
    let mut s = scenario(p, label, OdnTopology::new(label, el));
    s.drift = p.drift(if profile == DriftProfile::Lab { DriftProfile::Kos } else { profile });
    s
}

/// Preset `1..=5`.
pub fn preset(index: usize, p: &ModelParams) -> Option<Scenario> {
    let name = PRESET_NAMES.get(index.checked_sub(1)?)?;
    let mut s = match index {
        1 => lab_layout(p, false, false, true),
        2 => lab_layout(p, true, true, false),
        3 | 4 => lab_layout(p, true, true, true),
        5 => field_scenario(p, DriftProfile::Kos),
        _ => return None,
    };
    s.label = (*name).into();
    s.topology.label = (*name).into();
    s.coexist = index == 4;
    Some(s)
}

/// Preset by number or name.
pub fn preset_by_name(name: &str, p: &ModelParams) -> Option<Scenario> {
    if let Ok(i) = name.parse::<usize>() {
        return preset(i, p);
    }
    PRESET_NAMES
        .iter()
        .position(|n| *n == name)
        .and_then(|i| preset(i + 1, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table_marks() {
        let p = ModelParams::default();
        for (i, marks) in TABLE_MARKS.iter().enumerate() {
            let s = preset(i + 1, &p).unwrap();
            assert_eq!(&component_marks(&s.topology), marks, "preset {}", i + 1);
            s.topology.validate().unwrap();
        }
        assert!(preset(0, &p).is_none());
        assert!(preset(6, &p).is_none());
        assert!(preset(4, &p).unwrap().coexist);
    }

    #[test]
    fn rows_two_and_three_differ_only_by_m2() {
        let p = ModelParams::default();
        let two = preset(2, &p).unwrap().topology.elements;
        let mut three = preset(3, &p).unwrap().topology.elements;
        assert!(matches!(three.pop(), Some(ElementSpec::ModeFilter(_))));
        assert_eq!(two, three);
    }

    #[test]
    fn field_loops_have_documented_reach() {
        let p = ModelParams::default();
        let kos = field_scenario(&p, DriftProfile::Kos);
        let roof = field_scenario(&p, DriftProfile::Roof);
        assert!((kos.topology.total_span_km() - 0.270).abs() < 1e-12);
        assert!((roof.topology.total_span_km() - 0.692).abs() < 1e-12);
        assert_eq!(kos.topology.spans().count(), 6);
        assert_eq!(roof.topology.spans().count(), 12);
    }

    #[test]
    fn lookup_by_name_and_number() {
        let p = ModelParams::default();
        assert_eq!(preset_by_name("tree", &p).unwrap().label, "tree");
        assert_eq!(preset_by_name("1", &p).unwrap().label, "straight-line");
        assert!(preset_by_name("ring", &p).is_none());
    }

    #[test]
    fn params_and_scenarios_roundtrip() {
        let p = ModelParams::default();
        assert_eq!(ModelParams::from_toml(&p.to_toml()).unwrap(), p);
        let s = preset(5, &p).unwrap();
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }
}
