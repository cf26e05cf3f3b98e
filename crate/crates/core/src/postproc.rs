//! Receive-side processing: frame synchronization, temporal filtering,
//! basis sifting, QBER estimation and the asymptotic secure-rate bound.

use crate::modal_optics::Basis;
use crate::qkd_link::{DetectionEvent, Detector, EncoderConfig, SymbolRecord, SymbolSequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Error-correction inefficiency used by the secure-rate bound.
pub const DEFAULT_F_EC: f64 = 1.16;
/// Temporal filter width as a fraction of the symbol period.
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.2;
/// Minimum significance of the sync correlation dip.
pub const SYNC_MIN_SIGNIFICANCE: f64 = 6.0;

const PHASE_BINS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocError {
    #[error("frame synchronization failed (significance {0:.2})")]
    SyncFailed(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Event with its assigned symbol slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteredEvent {
    pub symbol_index: i64,
    pub detector: Detector,
    pub time_tag: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiftedPair {
    pub symbol_index: u64,
    pub alice_bit: u8,
    pub bob_bit: u8,
    pub basis: Basis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberEstimate {
    pub estimate: f64,
    pub ci95: (f64, f64),
    pub errors: u64,
    pub total: u64,
}

fn wrap_phase(x: f64) -> f64 {
    // into [-0.5, 0.5)
    x - (x + 0.5).floor()
}

/// Recovers the time offset of symbol slot 0.
///
/// The sub-period phase is the peak of the folded arrival histogram; the
/// integer slot offset is the shift of the frame comb whose vacuum sync
/// slots collect the fewest events. Offsets are resolved modulo one frame,
/// in `[-F/2, F/2)` symbol periods.
pub fn frame_sync<S: SymbolSequence + ?Sized>(
    events: &[DetectionEvent],
    symbols: &S,
    enc: &EncoderConfig,
) -> Result<f64, PostprocError> {
    if events.is_empty() {
        return Err(PostprocError::InsufficientData("no events".into()));
    }
    let _ = symbols.len();
    let period = enc.symbol_period();
    let frame = enc.frame_length;
    let vacuum: Vec<usize> = enc
        .sync_bits()
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == 0)
        .map(|(i, _)| i)
        .collect();
    if vacuum.is_empty() || frame == 0 {
        return Err(PostprocError::InvalidArgument(
            "sync pattern has no vacuum slots".into(),
        ));
    }

    // Sub-period phase.
    let mut hist = [0u64; PHASE_BINS];
    for e in events {
        let ph = wrap_phase(e.time_tag / period) + 0.5;
        let b = ((ph * PHASE_BINS as f64) as usize).min(PHASE_BINS - 1);
        hist[b] += 1;
    }
    let smoothed = |b: usize| {
        hist[(b + PHASE_BINS - 1) % PHASE_BINS] + 2 * hist[b] + hist[(b + 1) % PHASE_BINS]
    };
    let peak = (0..PHASE_BINS).max_by_key(|&b| smoothed(b)).unwrap_or(0);
    let center = (peak as f64 + 0.5) / PHASE_BINS as f64 - 0.5;
    let (mut s, mut c) = (0.0, 0.0);
    for e in events {
        let d = wrap_phase(e.time_tag / period - center);
        if d.abs() <= 0.15 {
            s += (std::f64::consts::TAU * d).sin();
            c += (std::f64::consts::TAU * d).cos();
        }
    }
    let fine = wrap_phase(center + s.atan2(c) / std::f64::consts::TAU) * period;

    // Frame alignment.
    let mut slots = vec![0u64; frame];
    for e in events {
        let x = (e.time_tag - fine) / period;
        let idx = x.round();
        if (x - idx).abs() <= 0.25 {
            slots[(idx as i64).rem_euclid(frame as i64) as usize] += 1;
        }
    }
    let mut scores: Vec<(u64, usize)> = (0..frame)
        .map(|k| (vacuum.iter().map(|&j| slots[(j + k) % frame]).sum(), k))
        .collect();
    scores.sort_unstable();
    let (best, shift) = scores[0];
    let median = scores[frame / 2].0 as f64;
    let significance = (median - best as f64) / median.max(1.0).sqrt();
    if significance < SYNC_MIN_SIGNIFICANCE {
        return Err(PostprocError::SyncFailed(significance));
    }
    let mut k = shift as i64;
    if k >= (frame as i64 + 1) / 2 {
        k -= frame as i64;
    }
    Ok(k as f64 * period + fine)
}

/// Keeps events inside a centered window of `window_fraction` of the symbol
/// period and tags each with its slot index.
pub fn temporal_filter(
    events: &[DetectionEvent],
    offset: f64,
    enc: &EncoderConfig,
    window_fraction: f64,
) -> Result<Vec<FilteredEvent>, PostprocError> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(PostprocError::InvalidArgument(format!(
            "window fraction {window_fraction} outside (0, 1]"
        )));
    }
    let period = enc.symbol_period();
    let half = 0.5 * window_fraction;
    Ok(events
        .iter()
        .filter_map(|e| {
            let x = (e.time_tag - offset) / period;
            let idx = x.round();
            ((x - idx).abs() <= half).then_some(FilteredEvent {
                symbol_index: idx as i64,
                detector: e.detector,
                time_tag: e.time_tag,
            })
        })
        .collect())
}

/// Counts of the sifting stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftStats {
    /// Single-click payload slots (pre-sift raw key).
    pub single_clicks: u64,
    /// Single clicks split by the basis of the clicking detector.
    pub single_clicks_per_basis: [u64; 2],
    pub multi_click_slots: u64,
    pub sync_or_out_of_range: u64,
}

/// Basis sifting. Slots with more than one click are discarded whole.
pub fn sift<S: SymbolSequence + ?Sized>(events: &[FilteredEvent], symbols: &S) -> Vec<SiftedPair> {
    sift_with_stats(events, symbols).0
}

pub fn sift_with_stats<S: SymbolSequence + ?Sized>(
    events: &[FilteredEvent],
    symbols: &S,
) -> (Vec<SiftedPair>, SiftStats) {
    let mut sorted: Vec<FilteredEvent> = events.to_vec();
    if !sorted.windows(2).all(|w| w[0].symbol_index <= w[1].symbol_index) {
        sorted.sort_by_key(|e| e.symbol_index);
    }
    let n = symbols.len() as i64;
    let mut pairs = Vec::new();
    let mut stats = SiftStats::default();
    let mut i = 0;
    while i < sorted.len() {
        let idx = sorted[i].symbol_index;
        let mut j = i + 1;
        while j < sorted.len() && sorted[j].symbol_index == idx {
            j += 1;
        }
        if idx < 0 || idx >= n {
            stats.sync_or_out_of_range += 1;
        } else {
            let sym: SymbolRecord = symbols.get(idx as u64);
            if sym.is_sync {
                stats.sync_or_out_of_range += 1;
            } else if j - i > 1 {
                stats.multi_click_slots += 1;
            } else {
                stats.single_clicks += 1;
                let d = sorted[i].detector;
                stats.single_clicks_per_basis[d.basis() as usize] += 1;
                if d.basis() == sym.basis {
                    pairs.push(SiftedPair {
                        symbol_index: idx as u64,
                        alice_bit: sym.bit,
                        bob_bit: d.bit(),
                        basis: sym.basis,
                    });
                }
            }
        }
        i = j;
    }
    (pairs, stats)
}

/// Wilson score interval for `k` successes out of `n` at z = 1.96.
pub fn wilson_interval(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn qber(pairs: &[SiftedPair]) -> Result<QberEstimate, PostprocError> {
    if pairs.is_empty() {
        return Err(PostprocError::InsufficientData("no sifted pairs".into()));
    }
    let errors = pairs.iter().filter(|p| p.alice_bit != p.bob_bit).count() as u64;
    let total = pairs.len() as u64;
    Ok(QberEstimate {
        estimate: errors as f64 / total as f64,
        ci95: wilson_interval(errors, total),
        errors,
        total,
    })
}

pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Asymptotic BB84 bound `max(0, R·(1 − (1 + f)·H₂(Q)))`.
pub fn secure_rate(sifted_rate: f64, qber: f64, f_ec: f64) -> f64 {
    let q = qber.clamp(0.0, 0.5);
    (sifted_rate * (1.0 - (1.0 + f_ec) * binary_entropy(q))).max(0.0)
}

/// Root of `1 − (1 + f)·H₂(Q)` on (0, 0.5).
pub fn qber_threshold(f_ec: f64) -> f64 {
    let g = |q: f64| 1.0 - (1.0 + f_ec) * binary_entropy(q);
    let (mut lo, mut hi) = (1e-15, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    pub window_fraction: f64,
    pub f_ec: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            window_fraction: DEFAULT_WINDOW_FRACTION,
            f_ec: DEFAULT_F_EC,
        }
    }
}

/// Outcome of one acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    /// Single-click payload detections per second, before sifting.
    pub raw_key_rate: f64,
    /// Single-click detections per second on the A/D and R/L detector pairs.
    pub raw_rate_per_basis: [f64; 2],
    pub sifted_rate: f64,
    /// Sifted bits per second in the A/D and R/L bases.
    pub sifted_rate_per_basis: [f64; 2],
    pub qber: f64,
    pub qber_per_basis: [f64; 2],
    pub qber_ci95: (f64, f64),
    pub secure_rate: f64,
    pub counts: [u64; 4],
    pub sifted_bits: u64,
    pub errors: u64,
    pub ob_db: f64,
    pub duration_s: f64,
    pub sync_offset_s: f64,
    /// False when sync failed or no key was sifted; rates are then zero.
    pub qber_valid: bool,
    pub error: Option<String>,
}

impl TrialReport {
    pub fn failed(duration_s: f64, counts: [u64; 4], err: &PostprocError) -> Self {
        Self {
            raw_key_rate: 0.0,
            raw_rate_per_basis: [0.0; 2],
            sifted_rate: 0.0,
            sifted_rate_per_basis: [0.0; 2],
            qber: 0.5,
            qber_per_basis: [0.5; 2],
            qber_ci95: (0.0, 1.0),
            secure_rate: 0.0,
            counts,
            sifted_bits: 0,
            errors: 0,
            ob_db: 0.0,
            duration_s,
            sync_offset_s: 0.0,
            qber_valid: false,
            error: Some(err.to_string()),
        }
    }

    /// Raw detections per second and basis, averaged over both bases.
    pub fn raw_per_basis(&self) -> f64 {
        0.5 * self.raw_key_rate
    }

    /// Pools independent acquisitions of the same operating point.
    pub fn merge(reports: &[TrialReport], f_ec: f64) -> Option<TrialReport> {
        let first = reports.first()?;
        if reports.len() == 1 {
            return Some(first.clone());
        }
        let duration: f64 = reports.iter().map(|r| r.duration_s).sum();
        let weighted = |f: &dyn Fn(&TrialReport) -> f64| {
            reports.iter().map(|r| f(r) * r.duration_s).sum::<f64>() / duration
        };
        let valid: Vec<&TrialReport> = reports.iter().filter(|r| r.qber_valid).collect();
        let sifted_bits: u64 = valid.iter().map(|r| r.sifted_bits).sum();
        let errors: u64 = valid.iter().map(|r| r.errors).sum();
        let mut counts = [0u64; 4];
        for r in reports {
            for (c, x) in counts.iter_mut().zip(r.counts) {
                *c += x;
            }
        }
        let mut per_basis_bits = [0.0; 2];
        let mut per_basis_err = [0.0; 2];
        for r in &valid {
            for b in 0..2 {
                let n = r.sifted_rate_per_basis[b] * r.duration_s;
                per_basis_bits[b] += n;
                per_basis_err[b] += r.qber_per_basis[b] * n;
            }
        }
        let qber_valid = sifted_bits > 0;
        let qber = if qber_valid {
            errors as f64 / sifted_bits as f64
        } else {
            0.5
        };
        let sifted_rate = sifted_bits as f64 / duration;
        Some(TrialReport {
            raw_key_rate: weighted(&|r| r.raw_key_rate),
            raw_rate_per_basis: [
                weighted(&|r| r.raw_rate_per_basis[0]),
                weighted(&|r| r.raw_rate_per_basis[1]),
            ],
            sifted_rate,
            sifted_rate_per_basis: per_basis_bits.map(|n| n / duration),
            qber,
            qber_per_basis: std::array::from_fn(|b| {
                if per_basis_bits[b] > 0.0 {
                    per_basis_err[b] / per_basis_bits[b]
                } else {
                    0.5
                }
            }),
            qber_ci95: wilson_interval(errors, sifted_bits),
            secure_rate: if qber_valid {
                secure_rate(sifted_rate, qber, f_ec)
            } else {
                0.0
            },
            counts,
            sifted_bits,
            errors,
            ob_db: first.ob_db,
            duration_s: duration,
            sync_offset_s: first.sync_offset_s,
            qber_valid,
            error: if qber_valid {
                None
            } else {
                reports.iter().find_map(|r| r.error.clone())
            },
        })
    }
}

/// Sync → filter → sift → QBER → bound over one acquisition.
pub fn analyze<S: SymbolSequence + ?Sized>(
    events: &[DetectionEvent],
    symbols: &S,
    enc: &EncoderConfig,
    cfg: &PostprocConfig,
) -> TrialReport {
    let duration = symbols.len() as f64 * enc.symbol_period();
    let mut counts = [0u64; 4];
    for e in events {
        counts[e.detector.index()] += 1;
    }
    let offset = match frame_sync(events, symbols, enc) {
        Ok(o) => o,
        Err(e) => return TrialReport::failed(duration, counts, &e),
    };
    let filtered = match temporal_filter(events, offset, enc, cfg.window_fraction) {
        Ok(f) => f,
        Err(e) => return TrialReport::failed(duration, counts, &e),
    };
    let (pairs, stats) = sift_with_stats(&filtered, symbols);
    let est = match qber(&pairs) {
        Ok(q) => q,
        Err(e) => {
            let mut r = TrialReport::failed(duration, counts, &e);
            r.sync_offset_s = offset;
            r.raw_key_rate = stats.single_clicks as f64 / duration;
            r.raw_rate_per_basis = stats.single_clicks_per_basis.map(|c| c as f64 / duration);
            return r;
        }
    };
    let mut per_basis_n = [0u64; 2];
    let mut per_basis_err = [0u64; 2];
    for p in &pairs {
        let b = p.basis as usize;
        per_basis_n[b] += 1;
        if p.alice_bit != p.bob_bit {
            per_basis_err[b] += 1;
        }
    }
    let sifted_rate = est.total as f64 / duration;
    TrialReport {
        raw_key_rate: stats.single_clicks as f64 / duration,
        raw_rate_per_basis: stats.single_clicks_per_basis.map(|c| c as f64 / duration),
        sifted_rate,
        sifted_rate_per_basis: [
            per_basis_n[0] as f64 / duration,
            per_basis_n[1] as f64 / duration,
        ],
        qber: est.estimate,
        qber_per_basis: std::array::from_fn(|b| {
            if per_basis_n[b] == 0 {
                0.5
            } else {
                per_basis_err[b] as f64 / per_basis_n[b] as f64
            }
        }),
        qber_ci95: est.ci95,
        secure_rate: secure_rate(sifted_rate, est.estimate, cfg.f_ec),
        counts,
        sifted_bits: est.total,
        errors: est.errors,
        ob_db: 0.0,
        duration_s: duration,
        sync_offset_s: offset,
        qber_valid: true,
        error: None,
    }
}

/// Symbols `[start, start + len)` of another sequence, re-indexed from 0.
pub struct SymbolWindow<'a, S: ?Sized> {
    inner: &'a S,
    start: u64,
    len: u64,
}

impl<'a, S: SymbolSequence + ?Sized> SymbolWindow<'a, S> {
    pub fn new(inner: &'a S, start: u64, len: u64) -> Self {
        let len = len.min(inner.len().saturating_sub(start));
        Self { inner, start, len }
    }
}

impl<S: SymbolSequence + ?Sized> SymbolSequence for SymbolWindow<'_, S> {
    fn len(&self) -> u64 {
        self.len
    }
    fn get(&self, index: u64) -> SymbolRecord {
        let mut s = self.inner.get(self.start + index);
        s.index = index;
        s
    }
}

/// Streaming mode: cuts the acquisition into batches of `batch_symbols`
/// (a whole number of frames), analyzes them independently in parallel and
/// returns reports in batch order.
pub fn analyze_batches<S: SymbolSequence + ?Sized>(
    events: &[DetectionEvent],
    symbols: &S,
    enc: &EncoderConfig,
    cfg: &PostprocConfig,
    batch_symbols: u64,
) -> Result<Vec<TrialReport>, PostprocError> {
    let frame = enc.frame_length as u64;
    if batch_symbols < frame || batch_symbols % frame != 0 {
        return Err(PostprocError::InvalidArgument(
            "batch must be a positive whole number of frames".into(),
        ));
    }
    let period = enc.symbol_period();
    let n_batches = symbols.len().div_ceil(batch_symbols);
    let mut cuts = Vec::with_capacity(n_batches as usize + 1);
    let mut cursor = 0;
    for b in 0..=n_batches {
        let t = (b * batch_symbols) as f64 * period - 0.5 * period;
        while cursor < events.len() && events[cursor].time_tag < t {
            cursor += 1;
        }
        cuts.push(cursor);
    }
    *cuts.last_mut().expect("non-empty") = events.len();
    Ok((0..n_batches as usize)
        .into_par_iter()
        .map(|b| {
            let start = b as u64 * batch_symbols;
            let t0 = start as f64 * period;
            let local: Vec<DetectionEvent> = events[cuts[b]..cuts[b + 1]]
                .iter()
                .map(|e| DetectionEvent {
                    time_tag: e.time_tag - t0,
                    ..*e
                })
                .collect();
            let window = SymbolWindow::new(symbols, start, batch_symbols);
            analyze(&local, &window, enc, cfg)
        })
        .collect())
}
