//! Weak-coherent polarization transmitter and four-SPAD passive receiver.
//!
//! Symbols are generated from a counter-based stream so that payload
//! content at index `i` is a pure function of `(seed, i)`; long acquisitions
//! never need to materialize the symbol list. Detection uses thinning: a
//! geometric skip over symbol slots at the largest per-symbol click
//! probability, followed by an exact acceptance step, so the cost scales
//! with the number of clicks rather than the number of symbols.

use crate::modal_optics::{
    db_to_power, encode_jones, project_polarization, Basis, ModalState, PathResponse, SpatialMode,
};
use crate::rng::{derive_seed, splitmix64};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;
use thiserror::Error;

/// Sync block with vacuum slots on a Golomb ruler {0,1,4,10,12,17}.
pub const DEFAULT_SYNC_PATTERN: &str = "001101111101011110";

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed time-tag file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub wavelength_nm: f64,
    pub symbol_rate_hz: f64,
    pub mean_photon_number: f64,
    pub frame_length: usize,
    pub sync_pattern: String,
    /// Power fraction launched into LP11 at Alice's output joint.
    pub lp11_launch_fraction: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            wavelength_nm: 848.0,
            symbol_rate_hz: 445e6,
            mean_photon_number: 0.1,
            frame_length: 128,
            sync_pattern: DEFAULT_SYNC_PATTERN.to_string(),
            lp11_launch_fraction: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn symbol_period(&self) -> f64 {
        1.0 / self.symbol_rate_hz
    }

    pub fn sync_bits(&self) -> Vec<u8> {
        self.sync_pattern
            .bytes()
            .map(|b| if b == b'1' { 1 } else { 0 })
            .collect()
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.mean_photon_number > 0.0) {
            return Err(LinkError::Config("mean photon number must be > 0".into()));
        }
        if !(self.symbol_rate_hz > 0.0) {
            return Err(LinkError::Config("symbol rate must be > 0".into()));
        }
        if self.sync_pattern.bytes().any(|b| b != b'0' && b != b'1') {
            return Err(LinkError::Config("sync pattern must be a bit string".into()));
        }
        if self.sync_pattern.len() >= self.frame_length {
            return Err(LinkError::Config(
                "sync pattern must be shorter than the frame".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lp11_launch_fraction) {
            return Err(LinkError::Config("LP11 launch fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Per detector, counts/s.
    pub dark_rate: f64,
    pub timing_jitter_sigma: f64,
    pub dead_time: f64,
    /// Insertion loss of Bob's polarimeter ahead of the SPADs, dB.
    pub optics_loss_db: f64,
    /// Fraction of LP11 power the polarimeter delivers to the SPADs
    /// relative to LP01.
    pub lp11_collection: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency: 0.38,
            dark_rate: 350.0,
            timing_jitter_sigma: 50e-12,
            dead_time: 50e-9,
            optics_loss_db: 0.0,
            lp11_collection: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(LinkError::Config("efficiency must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.lp11_collection) {
            return Err(LinkError::Config("LP11 collection must lie in [0, 1]".into()));
        }
        if !(self.dark_rate >= 0.0) {
            return Err(LinkError::Config("dark rate must be >= 0".into()));
        }
        if !(self.timing_jitter_sigma >= 0.0 && self.dead_time >= 0.0 && self.optics_loss_db >= 0.0)
        {
            return Err(LinkError::Config("jitter, dead time and loss must be >= 0".into()));
        }
        Ok(())
    }
}

/// One SPAD of the four-detector polarimeter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    A,
    D,
    R,
    L,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::A, Detector::D, Detector::R, Detector::L];

    pub fn basis(self) -> Basis {
        match self {
            Detector::A | Detector::D => Basis::AD,
            Detector::R | Detector::L => Basis::RL,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Detector::A | Detector::R => 0,
            Detector::D | Detector::L => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_state(basis: Basis, bit: u8) -> Self {
        match (basis, bit & 1) {
            (Basis::AD, 0) => Detector::A,
            (Basis::AD, _) => Detector::D,
            (Basis::RL, 0) => Detector::R,
            (Basis::RL, _) => Detector::L,
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Detector {
    type Err = LinkError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "0" => Ok(Detector::A),
            "D" | "1" => Ok(Detector::D),
            "R" | "2" => Ok(Detector::R),
            "L" | "3" => Ok(Detector::L),
            other => Err(LinkError::Format(format!("unknown detector {other:?}"))),
        }
    }
}

/// Diagnostic only; postprocessing never looks at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    SignalLp01,
    SignalLp11,
    Dark,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub time_tag: f64,
    pub detector: Detector,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymbolRecord {
    pub index: u64,
    pub basis: Basis,
    pub bit: u8,
    pub is_sync: bool,
}

impl SymbolRecord {
    /// State actually launched; `None` for vacuum sync slots.
    pub fn launched_state(&self) -> Option<(Basis, u8)> {
        if self.is_sync && self.bit == 0 {
            None
        } else {
            Some((self.basis, self.bit))
        }
    }
}

/// Random-access view over Alice's symbols.
pub trait SymbolSequence: Sync {
    fn len(&self) -> u64;
    fn get(&self, index: u64) -> SymbolRecord;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SymbolSequence for [SymbolRecord] {
    fn len(&self) -> u64 {
        <[SymbolRecord]>::len(self) as u64
    }
    fn get(&self, index: u64) -> SymbolRecord {
        self[index as usize]
    }
}

impl SymbolSequence for Vec<SymbolRecord> {
    fn len(&self) -> u64 {
        self.as_slice().len() as u64
    }
    fn get(&self, index: u64) -> SymbolRecord {
        self[index as usize]
    }
}

/// Counter-based symbol source: payload of slot `i` is derived from
/// `(seed, i)`; the sync block opens every frame.
#[derive(Debug, Clone)]
pub struct SymbolStream {
    seed: u64,
    n_symbols: u64,
    frame_length: u64,
    sync: Vec<u8>,
}

impl SymbolStream {
    pub fn new(enc: &EncoderConfig, n_symbols: u64, seed: u64) -> Result<Self, LinkError> {
        enc.validate()?;
        if n_symbols < enc.frame_length as u64 {
            return Err(LinkError::Config(format!(
                "need at least one frame ({} symbols), got {n_symbols}",
                enc.frame_length
            )));
        }
        Ok(Self {
            seed,
            n_symbols,
            frame_length: enc.frame_length as u64,
            sync: enc.sync_bits(),
        })
    }

    pub fn to_vec(&self) -> Vec<SymbolRecord> {
        (0..self.n_symbols).map(|i| self.get(i)).collect()
    }
}

impl SymbolSequence for SymbolStream {
    fn len(&self) -> u64 {
        self.n_symbols
    }

    fn get(&self, index: u64) -> SymbolRecord {
        let slot = (index % self.frame_length) as usize;
        if let Some(&b) = self.sync.get(slot) {
            return SymbolRecord {
                index,
                basis: Basis::AD,
                bit: b,
                is_sync: true,
            };
        }
        let h = splitmix64(self.seed ^ index.wrapping_mul(0xD134_2543_DE82_EF95));
        SymbolRecord {
            index,
            basis: if h & 1 == 0 { Basis::AD } else { Basis::RL },
            bit: ((h >> 1) & 1) as u8,
            is_sync: false,
        }
    }
}

/// Materialized frames with uniform payload and the sync block at each
/// frame head.
pub fn generate_frames<R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    n_symbols: u64,
    rng: &mut R,
) -> Result<Vec<SymbolRecord>, LinkError> {
    Ok(SymbolStream::new(cfg, n_symbols, rng.random())?.to_vec())
}

/// One detectable replica: arrival delay, spatial mode and detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickChannel {
    pub delay: f64,
    pub mode: SpatialMode,
    pub detector: Detector,
}

/// Mean photo-detections per symbol for every launched state on every
/// replica channel of the link.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickTable {
    pub channels: Vec<ClickChannel>,
    /// `[state][channel]`, state index = `2·basis + bit`.
    pub means: [Vec<f64>; 4],
}

pub fn state_index(basis: Basis, bit: u8) -> usize {
    2 * (basis as usize) + (bit & 1) as usize
}

impl ClickTable {
    pub fn new(channel: &PathResponse, enc: &EncoderConfig, det: &DetectorConfig) -> Self {
        let scale = enc.mean_photon_number * det.efficiency * db_to_power(det.optics_loss_db) * 0.5;
        let mut channels = Vec::new();
        for p in &channel.paths {
            for mode in SpatialMode::ALL {
                for d in Detector::ALL {
                    channels.push(ClickChannel { delay: p.delay, mode, detector: d });
                }
            }
        }
        let mut means: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(channels.len()));
        for basis in Basis::ALL {
            for bit in 0..2u8 {
                let launched = ModalState::launch(encode_jones(basis, bit), enc.lp11_launch_fraction);
                let m = &mut means[state_index(basis, bit)];
                for (_, out) in channel.outputs(&launched) {
                    for mode in SpatialMode::ALL {
                        let collect = match mode {
                            SpatialMode::Lp01 => 1.0,
                            SpatialMode::Lp11 => det.lp11_collection,
                        };
                        for d in Detector::ALL {
                            let analyzer = encode_jones(d.basis(), d.bit());
                            let p = project_polarization(&out, &analyzer, mode).norm_sqr();
                            m.push(scale * collect * p);
                        }
                    }
                }
            }
        }
        Self { channels, means }
    }

    pub fn mean_total(&self, state: usize) -> f64 {
        self.means[state].iter().sum()
    }

    pub fn any_click_probability(&self, state: usize) -> f64 {
        -(-self.mean_total(state)).exp_m1()
    }

    /// Summed mean over channels of one detector.
    pub fn detector_mean(&self, state: usize, d: Detector) -> f64 {
        self.channels
            .iter()
            .zip(&self.means[state])
            .filter(|(c, _)| c.detector == d)
            .map(|(_, m)| m)
            .sum()
    }
}

/// Converts a symbol stream and a channel into time-tagged detections.
///
/// `noise_rate` is the extra background (co-existence) count rate per
/// detector, on top of the detector's own dark rate.
pub fn detect_symbols<S, R>(
    symbols: &S,
    channel: &PathResponse,
    enc: &EncoderConfig,
    det: &DetectorConfig,
    noise_rate: f64,
    rng: &mut R,
) -> Result<Vec<DetectionEvent>, LinkError>
where
    S: SymbolSequence + ?Sized,
    R: Rng + ?Sized,
{
    enc.validate()?;
    det.validate()?;
    if !(noise_rate >= 0.0) {
        return Err(LinkError::Config("noise rate must be >= 0".into()));
    }
    let period = enc.symbol_period();
    let n = symbols.len();
    let duration = n as f64 * period;
    let table = ClickTable::new(channel, enc, det);
    let p_any: [f64; 4] = std::array::from_fn(|s| table.any_click_probability(s));
    let p_max = p_any.iter().cloned().fold(0.0, f64::max);
    let p_each: [Vec<f64>; 4] =
        std::array::from_fn(|s| table.means[s].iter().map(|m| -(-m).exp_m1()).collect());

    let jitter = if det.timing_jitter_sigma > 0.0 {
        Some(Normal::new(0.0, det.timing_jitter_sigma).expect("finite jitter"))
    } else {
        None
    };
    let mut raw: Vec<DetectionEvent> = Vec::new();

    if p_max > 0.0 {
        // Failures before the first success, by inversion; stays exact when
        // p_max underflows 1 - p.
        let log_q = (-p_max).ln_1p();
        let mut i: u64 = 0;
        loop {
            let u: f64 = 1.0 - rng.random::<f64>();
            let gap = if log_q == f64::NEG_INFINITY { 0.0 } else { (u.ln() / log_q).floor() };
            let gap = if gap >= u64::MAX as f64 { u64::MAX } else { gap as u64 };
            i = match i.checked_add(gap) {
                Some(v) if v < n => v,
                _ => break,
            };
            let sym = symbols.get(i);
            if let Some((basis, bit)) = sym.launched_state() {
                let s = state_index(basis, bit);
                if rng.random::<f64>() * p_max < p_any[s] {
                    let slot_time = i as f64 * period;
                    emit_clicks(&p_each[s], p_any[s], slot_time, &table.channels, &jitter, rng, &mut raw);
                }
            }
            i += 1;
            if i >= n {
                break;
            }
        }
    }

    let background = det.dark_rate + noise_rate;
    if background > 0.0 && duration > 0.0 {
        for d in Detector::ALL {
            for (rate, origin) in [(det.dark_rate, Origin::Dark), (noise_rate, Origin::Noise)] {
                let mean = rate * duration;
                if mean <= 0.0 {
                    continue;
                }
                let count = Poisson::new(mean)
                    .map_err(|e| LinkError::Config(e.to_string()))?
                    .sample(rng) as u64;
                for _ in 0..count {
                    raw.push(DetectionEvent {
                        time_tag: rng.random::<f64>() * duration,
                        detector: d,
                        origin,
                    });
                }
            }
        }
    }

    raw.retain(|e| e.time_tag >= 0.0);
    raw.sort_by(|a, b| {
        a.time_tag
            .total_cmp(&b.time_tag)
            .then(a.detector.cmp(&b.detector))
    });
    Ok(apply_dead_time(raw, det.dead_time))
}

/// Samples the set of clicking channels given that at least one clicked.
/// The first is drawn from its exact conditional law, the rest
/// independently.
fn emit_clicks<R: Rng + ?Sized>(
    p: &[f64],
    p_any: f64,
    slot_time: f64,
    channels: &[ClickChannel],
    jitter: &Option<Normal<f64>>,
    rng: &mut R,
    out: &mut Vec<DetectionEvent>,
) {
    let mut u = rng.random::<f64>() * p_any;
    let mut survive = 1.0;
    let mut first = p.len() - 1;
    for (k, &pk) in p.iter().enumerate() {
        let w = survive * pk;
        if u < w {
            first = k;
            break;
        }
        u -= w;
        survive *= 1.0 - pk;
    }
    let mut push = |k: usize, rng: &mut R| {
        let c = channels[k];
        let mut t = slot_time + c.delay;
        if let Some(j) = jitter {
            t += j.sample(rng);
        }
        out.push(DetectionEvent {
            time_tag: t,
            detector: c.detector,
            origin: match c.mode {
                SpatialMode::Lp01 => Origin::SignalLp01,
                SpatialMode::Lp11 => Origin::SignalLp11,
            },
        });
    };
    push(first, rng);
    for k in first + 1..p.len() {
        if p[k] > 0.0 && rng.random::<f64>() < p[k] {
            push(k, rng);
        }
    }
}

/// Non-paralyzable dead time per detector. Input must be time-sorted.
pub fn apply_dead_time(events: Vec<DetectionEvent>, dead_time: f64) -> Vec<DetectionEvent> {
    if dead_time <= 0.0 {
        return events;
    }
    let mut last = [f64::NEG_INFINITY; 4];
    events
        .into_iter()
        .filter(|e| {
            let i = e.detector.index();
            if e.time_tag - last[i] >= dead_time {
                last[i] = e.time_tag;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Seed for the detection stream of trial `trial` under `seed`.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    derive_seed(seed, trial)
}

// Time-tag files: CSV `time_tag_ps,detector` or a little-endian binary
// record stream behind the `SWQT` magic.

const BINARY_MAGIC: &[u8; 4] = b"SWQT";
const BINARY_VERSION: u32 = 1;

/// A time tag as read back from a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeTag {
    pub time_ps: u64,
    pub detector: Detector,
}

impl TimeTag {
    pub fn from_event(e: &DetectionEvent) -> Self {
        Self {
            time_ps: (e.time_tag * 1e12).round() as u64,
            detector: e.detector,
        }
    }

    /// Rehydrates an event; the origin is unknown out-of-process.
    pub fn to_event(self) -> DetectionEvent {
        DetectionEvent {
            time_tag: self.time_ps as f64 * 1e-12,
            detector: self.detector,
            origin: Origin::Noise,
        }
    }
}

pub fn write_tags_csv<W: Write>(events: &[DetectionEvent], mut w: W) -> Result<(), LinkError> {
    writeln!(w, "time_tag_ps,detector")?;
    for e in events {
        let t = TimeTag::from_event(e);
        writeln!(w, "{},{}", t.time_ps, t.detector.index())?;
    }
    Ok(())
}

pub fn read_tags_csv<R: BufRead>(r: R) -> Result<Vec<TimeTag>, LinkError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("time")) {
            continue;
        }
        let (t, d) = line
            .split_once(',')
            .ok_or_else(|| LinkError::Format(format!("line {}: expected two columns", n + 1)))?;
        let time_ps = t
            .trim()
            .parse::<u64>()
            .map_err(|e| LinkError::Format(format!("line {}: {e}", n + 1)))?;
        out.push(TimeTag {
            time_ps,
            detector: d.parse()?,
        });
    }
    Ok(out)
}

pub fn write_tags_binary<W: Write>(events: &[DetectionEvent], mut w: W) -> Result<(), LinkError> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&(events.len() as u64).to_le_bytes())?;
    for e in events {
        let t = TimeTag::from_event(e);
        w.write_all(&t.time_ps.to_le_bytes())?;
        w.write_all(&[t.detector.index() as u8])?;
    }
    Ok(())
}

pub fn read_tags_binary<R: Read>(mut r: R) -> Result<Vec<TimeTag>, LinkError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(LinkError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != BINARY_VERSION {
        return Err(LinkError::Format("unsupported version".into()));
    }
    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count);
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; 9];
    for _ in 0..count {
        r.read_exact(&mut rec)?;
        let time_ps = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let detector = Detector::from_index(rec[8] as usize)
            .ok_or_else(|| LinkError::Format(format!("detector id {}", rec[8])))?;
        out.push(TimeTag { time_ps, detector });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal_optics::TransferOperator;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn quiet_detector() -> DetectorConfig {
        DetectorConfig {
            dark_rate: 0.0,
            timing_jitter_sigma: 0.0,
            dead_time: 0.0,
            ..DetectorConfig::default()
        }
    }

    /// Symbols that all launch state A.
    fn all_a(n: usize) -> Vec<SymbolRecord> {
        (0..n as u64)
            .map(|index| SymbolRecord { index, basis: Basis::AD, bit: 0, is_sync: false })
            .collect()
    }

    #[test]
    fn identity_click_probability_matches_analytic() {
        let enc = EncoderConfig::default();
        let det = quiet_detector();
        let n = 1_000_000;
        let symbols = all_a(n);
        let events = detect_symbols(
            symbols.as_slice(),
            &TransferOperator::identity().into(),
            &enc,
            &det,
            0.0,
            &mut seeded(11),
        )
        .unwrap();
        let period = enc.symbol_period();
        let mut slots: Vec<u64> = events
            .iter()
            .filter(|e| e.detector == Detector::A)
            .map(|e| (e.time_tag / period).floor() as u64)
            .collect();
        slots.dedup();
        let p = -(-0.1f64 * 0.5 * 0.38).exp_m1();
        assert!((p - 0.0188).abs() < 5e-5);
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let k = slots.len() as f64;
        assert!((k - n as f64 * p).abs() < 3.0 * sigma, "{k}");
        assert!(events.iter().all(|e| e.detector != Detector::D));
    }

    #[test]
    fn no_light_no_dark_no_events() {
        let enc = EncoderConfig { mean_photon_number: 1e-300, ..EncoderConfig::default() };
        let symbols = SymbolStream::new(&enc, 100_000, 1).unwrap();
        let events = detect_symbols(
            &symbols,
            &TransferOperator::identity().into(),
            &enc,
            &quiet_detector(),
            0.0,
            &mut seeded(1),
        )
        .unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn dark_counts_only_at_zero_signal() {
        let enc = EncoderConfig::default();
        let det = DetectorConfig { dead_time: 0.0, ..DetectorConfig::default() };
        let n = 200_000_000u64;
        let symbols = SymbolStream::new(&enc, n, 1).unwrap();
        let blocked = TransferOperator::flat_loss_db(400.0).into();
        let events = detect_symbols(&symbols, &blocked, &enc, &det, 0.0, &mut seeded(2)).unwrap();
        let duration = n as f64 * enc.symbol_period();
        let expect = 4.0 * 350.0 * duration;
        assert!((events.len() as f64 - expect).abs() < 4.0 * expect.sqrt());
        assert!(events.iter().all(|e| e.origin == Origin::Dark));
    }

    #[test]
    fn lp11_arrives_after_dmd_delay() {
        let enc = EncoderConfig { lp11_launch_fraction: 1.0, ..EncoderConfig::default() };
        let channel = TransferOperator::identity().with_delay([0.0, 2.02e-9]).into();
        let events = detect_symbols(
            all_a(10_000).as_slice(),
            &channel,
            &enc,
            &quiet_detector(),
            0.0,
            &mut seeded(4),
        )
        .unwrap();
        let period = enc.symbol_period();
        assert!(!events.is_empty());
        for e in &events {
            assert_eq!(e.origin, Origin::SignalLp11);
            let frac = e.time_tag / period - (e.time_tag / period).floor();
            assert!((frac * period - 2.02e-9).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_choice_is_balanced() {
        let enc = EncoderConfig::default();
        let s = SymbolStream::new(&enc, 100_000, 9).unwrap();
        let payload: Vec<_> = s.to_vec().into_iter().filter(|r| !r.is_sync).collect();
        let n = payload.len() as f64;
        let ad = payload.iter().filter(|r| r.basis == Basis::AD).count() as f64;
        let ones = payload.iter().filter(|r| r.bit == 1).count() as f64;
        let sigma = (n * 0.25).sqrt();
        assert!((ad - 0.5 * n).abs() < 3.0 * sigma);
        assert!((ones - 0.5 * n).abs() < 3.0 * sigma);
    }

    #[test]
    fn one_frame_has_one_sync_block() {
        let enc = EncoderConfig::default();
        let s = SymbolStream::new(&enc, enc.frame_length as u64, 0).unwrap();
        let v = s.to_vec();
        let sync: Vec<u8> = v.iter().filter(|r| r.is_sync).map(|r| r.bit).collect();
        assert_eq!(sync, enc.sync_bits());
        assert!(v[..sync.len()].iter().all(|r| r.is_sync));
        assert!(SymbolStream::new(&enc, 10, 0).is_err());
    }

    #[test]
    fn dead_time_suppresses_close_pairs() {
        let mk = |t| DetectionEvent { time_tag: t, detector: Detector::A, origin: Origin::Dark };
        let kept = apply_dead_time(vec![mk(0.0), mk(10e-9), mk(60e-9), mk(70e-9)], 50e-9);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn detection_is_deterministic_per_seed() {
        let enc = EncoderConfig::default();
        let det = DetectorConfig::default();
        let s = SymbolStream::new(&enc, 1_000_000, 3).unwrap();
        let ch = TransferOperator::flat_loss_db(3.0).into();
        let a = detect_symbols(&s, &ch, &enc, &det, 1e3, &mut seeded(7)).unwrap();
        let b = detect_symbols(&s, &ch, &enc, &det, 1e3, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
        let c = detect_symbols(&s, &ch, &enc, &det, 1e3, &mut seeded(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let enc = EncoderConfig { mean_photon_number: -1.0, ..EncoderConfig::default() };
        assert!(enc.validate().is_err());
        let det = DetectorConfig { efficiency: 1.5, ..DetectorConfig::default() };
        assert!(det.validate().is_err());
        assert!("X".parse::<Detector>().is_err());
        assert_eq!("R".parse::<Detector>().unwrap(), Detector::R);
    }

    proptest! {
        #[test]
        fn tag_files_roundtrip(tags in prop::collection::vec((0u64..1 << 50, 0usize..4), 0..200)) {
            let events: Vec<DetectionEvent> = tags.iter().map(|&(ps, d)| DetectionEvent {
                time_tag: ps as f64 * 1e-12, detector: Detector::ALL[d], origin: Origin::Noise }).collect();
            let expect: Vec<TimeTag> = events.iter().map(TimeTag::from_event).collect();
            let mut csv_buf = Vec::new();
            write_tags_csv(&events, &mut csv_buf).unwrap();
            prop_assert_eq!(&read_tags_csv(csv_buf.as_slice()).unwrap(), &expect);
            let mut bin = Vec::new();
            write_tags_binary(&events, &mut bin).unwrap();
            prop_assert_eq!(&read_tags_binary(bin.as_slice()).unwrap(), &expect);
            for (t, &(ps, _)) in expect.iter().zip(&tags) {
                prop_assert_eq!(t.time_ps, ps);
            }
        }
    }

    #[test]
    fn corrupt_binary_rejected() {
        assert!(read_tags_binary(&b"NOPE\x01\0\0\0"[..]).is_err());
    }
}
