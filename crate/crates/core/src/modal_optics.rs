//! Few-mode polarized field algebra.
//!
//! A [`ModalState`] carries four complex amplitudes over the two guided mode
//! groups (LP01, LP11) and two polarizations (H, V), plus the group delay each
//! spatial mode has accumulated. A [`TransferOperator`] is the linear action
//! of one network element at one wavelength. The two-fold LP11 degeneracy is
//! lumped into a single spatial mode.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_SQRT_2;

pub type C64 = Complex64;
pub type Jones2 = Matrix2<C64>;

/// Guided mode group. Indexes `ModalState::delay` and the amplitude blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpatialMode {
    Lp01,
    Lp11,
}

impl SpatialMode {
    pub const ALL: [SpatialMode; 2] = [SpatialMode::Lp01, SpatialMode::Lp11];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            SpatialMode::Lp01 => 0,
            SpatialMode::Lp11 => 1,
        }
    }
}

/// Polarization measurement basis: diagonal (A/D) or circular (R/L).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    AD,
    RL,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::AD, Basis::RL];
}

/// Unit-norm two-component polarization state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub h: C64,
    pub v: C64,
}

impl JonesVector {
    /// Normalizes `(h, v)`. Returns `None` for the zero vector.
    pub fn new(h: C64, v: C64) -> Option<Self> {
        let n = (h.norm_sqr() + v.norm_sqr()).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        Some(Self { h: h / n, v: v / n })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.norm_sqr() + self.v.norm_sqr()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &JonesVector) -> C64 {
        self.h.conj() * other.h + self.v.conj() * other.v
    }

    pub fn as_vector(&self) -> Vector2<C64> {
        Vector2::new(self.h, self.v)
    }
}

/// Polarization state prepared for `(basis, bit)`: A, D, R or L.
pub fn encode_jones(basis: Basis, bit: u8) -> JonesVector {
    let s = C64::new(FRAC_1_SQRT_2, 0.0);
    let v = match (basis, bit & 1) {
        (Basis::AD, 0) => C64::new(FRAC_1_SQRT_2, 0.0),
        (Basis::AD, _) => C64::new(-FRAC_1_SQRT_2, 0.0),
        (Basis::RL, 0) => C64::new(0.0, FRAC_1_SQRT_2),
        (Basis::RL, _) => C64::new(0.0, -FRAC_1_SQRT_2),
    };
    JonesVector { h: s, v }
}

/// Field amplitudes ordered (LP01·H, LP01·V, LP11·H, LP11·V) plus per-mode
/// accumulated group delay in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalState {
    pub amplitudes: Vector4<C64>,
    pub delay: [f64; 2],
}

impl ModalState {
    pub fn new(amplitudes: Vector4<C64>) -> Self {
        Self {
            amplitudes,
            delay: [0.0; 2],
        }
    }

    /// Launches `jones` with `lp11_fraction` of the power in LP11 and the
    /// rest in LP01, both carrying the same polarization.
    pub fn launch(jones: JonesVector, lp11_fraction: f64) -> Self {
        let f = lp11_fraction.clamp(0.0, 1.0);
        let a = (1.0 - f).sqrt();
        let b = f.sqrt();
        Self::new(Vector4::new(
            jones.h * a,
            jones.v * a,
            jones.h * b,
            jones.v * b,
        ))
    }

    pub fn single_mode(mode: SpatialMode, jones: JonesVector) -> Self {
        let mut amplitudes = Vector4::zeros();
        let o = 2 * mode.index();
        amplitudes[o] = jones.h;
        amplitudes[o + 1] = jones.v;
        Self::new(amplitudes)
    }

    pub fn jones(&self, mode: SpatialMode) -> Vector2<C64> {
        let o = 2 * mode.index();
        Vector2::new(self.amplitudes[o], self.amplitudes[o + 1])
    }

    pub fn mode_power(&self, mode: SpatialMode) -> f64 {
        let o = 2 * mode.index();
        self.amplitudes[o].norm_sqr() + self.amplitudes[o + 1].norm_sqr()
    }

    pub fn power(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Arrival-time gap between the LP11 and LP01 replicas.
    pub fn delay_gap(&self) -> f64 {
        self.delay[1] - self.delay[0]
    }
}

/// Linear action of an element: 4×4 field matrix plus per-mode delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOperator {
    pub matrix: Matrix4<C64>,
    pub delay_inc: [f64; 2],
}

impl Default for TransferOperator {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransferOperator {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
            delay_inc: [0.0; 2],
        }
    }

    pub fn from_matrix(matrix: Matrix4<C64>) -> Self {
        Self {
            matrix,
            delay_inc: [0.0; 2],
        }
    }

    pub fn with_delay(mut self, delay_inc: [f64; 2]) -> Self {
        self.delay_inc = delay_inc;
        self
    }

    /// Mode-dependent amplitude transmission, polarization independent.
    pub fn mode_gains(lp01: f64, lp11: f64) -> Self {
        let mut m = Matrix4::zeros();
        m[(0, 0)] = C64::from(lp01);
        m[(1, 1)] = C64::from(lp01);
        m[(2, 2)] = C64::from(lp11);
        m[(3, 3)] = C64::from(lp11);
        Self::from_matrix(m)
    }

    /// Mode-flat power loss in dB.
    pub fn flat_loss_db(db: f64) -> Self {
        let g = db_to_amplitude(db);
        Self::mode_gains(g, g)
    }

    /// Block-diagonal operator: a separate Jones matrix per spatial mode.
    pub fn block_diagonal(lp01: &Jones2, lp11: &Jones2) -> Self {
        let mut m = Matrix4::zeros();
        for r in 0..2 {
            for c in 0..2 {
                m[(r, c)] = lp01[(r, c)];
                m[(r + 2, c + 2)] = lp11[(r, c)];
            }
        }
        Self::from_matrix(m)
    }

    /// Lossless exchange between LP01 and LP11 by `angle` (rad), same in
    /// both polarizations, with `phase` on the cross terms.
    pub fn mode_coupling(angle: f64, phase: f64) -> Self {
        let c = C64::from(angle.cos());
        let s = C64::from_polar(angle.sin(), phase);
        let mut m = Matrix4::zeros();
        for p in 0..2 {
            m[(p, p)] = c;
            m[(p + 2, p + 2)] = c;
            m[(p, p + 2)] = -s.conj();
            m[(p + 2, p)] = s;
        }
        Self::from_matrix(m)
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &TransferOperator) -> TransferOperator {
        compose(self, first)
    }

    /// Largest singular value of the field matrix.
    pub fn max_singular_value(&self) -> f64 {
        let svd = self.matrix.svd(false, false);
        svd.singular_values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn singular_values(&self) -> [f64; 4] {
        let svd = self.matrix.svd(false, false);
        let mut out = [0.0; 4];
        for (o, s) in out.iter_mut().zip(svd.singular_values.iter()) {
            *o = *s;
        }
        out
    }

    pub fn is_passive(&self, tol: f64) -> bool {
        self.max_singular_value() <= 1.0 + tol
    }
}

pub fn apply(op: &TransferOperator, s: &ModalState) -> ModalState {
    ModalState {
        amplitudes: op.matrix * s.amplitudes,
        delay: [s.delay[0] + op.delay_inc[0], s.delay[1] + op.delay_inc[1]],
    }
}

/// `compose(a, b)` acts as `b` first, then `a`.
pub fn compose(a: &TransferOperator, b: &TransferOperator) -> TransferOperator {
    TransferOperator {
        matrix: a.matrix * b.matrix,
        delay_inc: [
            a.delay_inc[0] + b.delay_inc[0],
            a.delay_inc[1] + b.delay_inc[1],
        ],
    }
}

/// `<analyzer| s_mode>` for the Jones sub-vector of one spatial mode.
pub fn project_polarization(s: &ModalState, analyzer: &JonesVector, mode: SpatialMode) -> C64 {
    let j = s.jones(mode);
    analyzer.h.conj() * j[0] + analyzer.v.conj() * j[1]
}

/// SU(2) rotation about `axis` on the Poincaré sphere by `|axis|` radians.
pub fn polarization_rotation(axis: [f64; 3]) -> Jones2 {
    let angle = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if angle == 0.0 {
        return Jones2::identity();
    }
    let (nx, ny, nz) = (axis[0] / angle, axis[1] / angle, axis[2] / angle);
    let c = (angle / 2.0).cos();
    let s = (angle / 2.0).sin();
    let i = C64::i();
    // cos(θ/2)·I − i·sin(θ/2)·(n·σ)
    Jones2::new(
        C64::from(c) - i * s * nz,
        -i * s * C64::new(nx, -ny),
        -i * s * C64::new(nx, ny),
        C64::from(c) + i * s * nz,
    )
}

/// Uniformly distributed SU(2) element from three uniforms in [0, 1).
pub fn haar_su2(u: [f64; 3]) -> Jones2 {
    use std::f64::consts::TAU;
    let r1 = u[0].sqrt();
    let r0 = (1.0 - u[0]).sqrt();
    let a = C64::from_polar(r0, TAU * u[1]);
    let b = C64::from_polar(r1, TAU * u[2]);
    Jones2::new(a, -b.conj(), b, a.conj())
}

pub fn db_to_power(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(-db / 20.0)
}

pub fn power_to_db(t: f64) -> f64 {
    -10.0 * t.log10()
}

/// Replicas arriving within this spacing are treated as one coherent field.
pub const COHERENCE_WINDOW_S: f64 = 10e-12;

/// One arrival-time class of a channel: the field matrix of every route
/// whose accumulated group delay falls in the same coherence window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayPath {
    pub delay: f64,
    pub matrix: Matrix4<C64>,
}

/// Delay-resolved channel response. Routes that arrive together add as
/// fields; routes separated by more than [`COHERENCE_WINDOW_S`] add as
/// powers. Group delay is assigned by the output mode of each element.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResponse {
    pub paths: Vec<DelayPath>,
}

impl Default for PathResponse {
    fn default() -> Self {
        Self::identity()
    }
}

fn mode_projector(mode: SpatialMode) -> Matrix4<C64> {
    let mut m = Matrix4::zeros();
    let o = 2 * mode.index();
    m[(o, o)] = C64::from(1.0);
    m[(o + 1, o + 1)] = C64::from(1.0);
    m
}

impl PathResponse {
    pub fn identity() -> Self {
        TransferOperator::identity().into()
    }

    /// Appends `op` after the current response.
    pub fn then(&self, op: &TransferOperator) -> Self {
        let parts = PathResponse::from(op);
        let mut out: Vec<DelayPath> = Vec::with_capacity(self.paths.len() * parts.paths.len());
        for p in &self.paths {
            for q in &parts.paths {
                out.push(DelayPath {
                    delay: p.delay + q.delay,
                    matrix: q.matrix * p.matrix,
                });
            }
        }
        Self::merged(out)
    }

    fn merged(mut paths: Vec<DelayPath>) -> Self {
        paths.sort_by(|a, b| a.delay.total_cmp(&b.delay));
        let mut out: Vec<DelayPath> = Vec::with_capacity(paths.len());
        let mut anchor = f64::NEG_INFINITY;
        for p in paths {
            match out.last_mut() {
                Some(last) if p.delay - anchor <= COHERENCE_WINDOW_S => {
                    last.matrix += p.matrix;
                }
                _ => {
                    anchor = p.delay;
                    out.push(p);
                }
            }
        }
        out.retain(|p| p.matrix.iter().any(|z| z.norm_sqr() > 0.0));
        if out.is_empty() {
            out.push(DelayPath {
                delay: 0.0,
                matrix: Matrix4::zeros(),
            });
        }
        Self { paths: out }
    }

    /// Output replicas `(delay, state)` for an input state.
    pub fn outputs(&self, s: &ModalState) -> Vec<(f64, ModalState)> {
        self.paths
            .iter()
            .map(|p| (p.delay, ModalState::new(p.matrix * s.amplitudes)))
            .collect()
    }

    /// Output power summed over all replicas.
    pub fn output_power(&self, s: &ModalState) -> f64 {
        self.outputs(s).iter().map(|(_, o)| o.power()).sum()
    }

    pub fn mode_power(&self, s: &ModalState, mode: SpatialMode) -> f64 {
        self.outputs(s).iter().map(|(_, o)| o.mode_power(mode)).sum()
    }

    /// Largest eigenvalue of `Σ Mₖ†Mₖ`, the worst-case power gain.
    pub fn max_power_gain(&self) -> f64 {
        let g: Matrix4<C64> = self
            .paths
            .iter()
            .map(|p| p.matrix.adjoint() * p.matrix)
            .fold(Matrix4::zeros(), |a, b| a + b);
        g.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_passive(&self, tol: f64) -> bool {
        self.max_power_gain() <= 1.0 + tol
    }
}

impl From<&TransferOperator> for PathResponse {
    fn from(op: &TransferOperator) -> Self {
        if (op.delay_inc[0] - op.delay_inc[1]).abs() <= COHERENCE_WINDOW_S {
            return Self {
                paths: vec![DelayPath {
                    delay: op.delay_inc[0],
                    matrix: op.matrix,
                }],
            };
        }
        Self::merged(
            SpatialMode::ALL
                .iter()
                .map(|&m| DelayPath {
                    delay: op.delay_inc[m.index()],
                    matrix: mode_projector(m) * op.matrix,
                })
                .collect(),
        )
    }
}

impl From<TransferOperator> for PathResponse {
    fn from(op: TransferOperator) -> Self {
        (&op).into()
    }
}
