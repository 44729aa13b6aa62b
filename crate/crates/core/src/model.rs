//! Lead-device-lead tight-binding systems.
//!
//! Sites are ordered left lead, device, right lead. All energies are in units
//! of the chain hopping magnitude and hbar = 1, so times are in inverse
//! energy units.

use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{eigh, ensure_hermitian, real, CMatrix, C64};

/// Hermiticity tolerance accepted for user supplied Hamiltonians.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lead {
    Left,
    Right,
}

impl Lead {
    pub const BOTH: [Lead; 2] = [Lead::Left, Lead::Right];

    pub fn region(self) -> Region {
        match self {
            Lead::Left => Region::Left,
            Lead::Right => Region::Right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Left,
    Device,
    Right,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Left, Region::Device, Region::Right];

    fn slot(self) -> usize {
        match self {
            Region::Left => 0,
            Region::Device => 1,
            Region::Right => 2,
        }
    }
}

/// Index ranges of the three blocks; disjoint and covering `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub n_left: usize,
    pub n_device: usize,
    pub n_right: usize,
}

impl Partition {
    pub fn new(n_left: usize, n_device: usize, n_right: usize) -> Result<Self> {
        if n_device == 0 {
            return Err(Error::InvalidInput(
                "device region must contain at least one site".into(),
            ));
        }
        Ok(Self {
            n_left,
            n_device,
            n_right,
        })
    }

    pub fn total(&self) -> usize {
        self.n_left + self.n_device + self.n_right
    }

    pub fn range(&self, region: Region) -> Range<usize> {
        match region {
            Region::Left => 0..self.n_left,
            Region::Device => self.n_left..self.n_left + self.n_device,
            Region::Right => self.n_left + self.n_device..self.total(),
        }
    }

    pub fn device(&self) -> Range<usize> {
        self.range(Region::Device)
    }

    pub fn lead(&self, lead: Lead) -> Range<usize> {
        self.range(lead.region())
    }

    pub fn lead_len(&self, lead: Lead) -> usize {
        self.lead(lead).len()
    }
}

/// Full-system single-particle Hamiltonian with partition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TightBindingSystem {
    h0: CMatrix,
    partition: Partition,
}

/// Nearest-neighbour chain with uniform hopping and on-site energy.
pub fn build_chain_system(
    n_left: usize,
    n_device: usize,
    n_right: usize,
    hopping: f64,
    onsite: f64,
) -> Result<TightBindingSystem> {
    if n_left == 0 || n_device == 0 || n_right == 0 {
        return Err(Error::InvalidInput(format!(
            "chain site counts must all be >= 1, got ({n_left}, {n_device}, {n_right})"
        )));
    }
    if !hopping.is_finite() || !onsite.is_finite() {
        return Err(Error::InvalidInput(
            "chain parameters must be finite".into(),
        ));
    }
    if hopping == 0.0 {
        return Err(Error::InvalidInput("hopping must be nonzero".into()));
    }
    let partition = Partition::new(n_left, n_device, n_right)?;
    let n = partition.total();
    let mut h0 = CMatrix::zeros(n, n);
    for i in 0..n {
        h0[(i, i)] = real(onsite);
        if i + 1 < n {
            h0[(i, i + 1)] = real(hopping);
            h0[(i + 1, i)] = real(hopping);
        }
    }
    Ok(TightBindingSystem { h0, partition })
}

impl TightBindingSystem {
    /// Wraps an arbitrary Hermitian Hamiltonian. Lead blocks may be empty,
    /// which gives an isolated device.
    pub fn from_hamiltonian(h0: CMatrix, partition: Partition) -> Result<Self> {
        if h0.nrows() != partition.total() || h0.ncols() != partition.total() {
            return Err(Error::DimensionMismatch {
                context: "Hamiltonian vs partition",
                expected: partition.total(),
                found: h0.nrows(),
            });
        }
        if h0.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput(
                "Hamiltonian has non-finite entries".into(),
            ));
        }
        ensure_hermitian(&h0, "Hamiltonian", HERMITIAN_TOL)?;
        Ok(Self { h0, partition })
    }

    pub fn h0(&self) -> &CMatrix {
        &self.h0
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.partition.total()
    }

    /// Replaces the hopping on bond (i, j) and its Hermitian partner.
    pub fn with_bond(mut self, i: usize, j: usize, value: f64) -> Result<Self> {
        let n = self.dim();
        if i >= n || j >= n || i == j || !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "invalid bond ({i}, {j}) = {value}"
            )));
        }
        self.h0[(i, j)] = real(value);
        self.h0[(j, i)] = real(value);
        Ok(self)
    }

    /// The isolated device: D block of h0 with empty leads.
    pub fn device_only(&self) -> Result<Self> {
        let d = self.partition.device();
        let h = self
            .h0
            .view((d.start, d.start), (d.len(), d.len()))
            .into_owned();
        Self::from_hamiltonian(h, Partition::new(0, d.len(), 0)?)
    }

    /// Largest |h_ij| over off-diagonal entries inside the lead blocks, used
    /// as the hopping scale for the recurrence estimate.
    pub fn lead_hopping_scale(&self) -> f64 {
        let mut scale = 0.0f64;
        for lead in Lead::BOTH {
            let r = self.partition.lead(lead);
            for i in r.clone() {
                for j in r.clone() {
                    if i != j {
                        scale = scale.max(self.h0[(i, j)].norm());
                    }
                }
            }
        }
        if scale == 0.0 {
            // single-site leads: fall back to the device coupling
            for lead in Lead::BOTH {
                for i in self.partition.lead(lead) {
                    for j in self.partition.device() {
                        scale = scale.max(self.h0[(i, j)].norm());
                    }
                }
            }
        }
        scale
    }

    /// Time at which reflections from the far lead ends reach the device:
    /// t_rec = n_lead / |hopping|, half the round trip at group velocity 2|hopping|.
    pub fn recurrence_time(&self) -> f64 {
        let n_lead = self
            .partition
            .lead_len(Lead::Left)
            .min(self.partition.lead_len(Lead::Right));
        let scale = self.lead_hopping_scale();
        if scale == 0.0 || n_lead == 0 {
            f64::INFINITY
        } else {
            n_lead as f64 / scale
        }
    }

    /// Short content hash identifying the Hamiltonian and partition.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for n in [
            self.partition.n_left,
            self.partition.n_device,
            self.partition.n_right,
        ] {
            hasher.update((n as u64).to_le_bytes());
        }
        for z in self.h0.iter() {
            hasher.update(z.re.to_le_bytes());
            hasher.update(z.im.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasShape {
    /// Sudden switch at t = 0+. Not analytic in t.
    Step,
    /// 1 - exp(-t/tau), analytic for t > 0.
    #[default]
    ExponentialRamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceBias {
    Unbiased,
    /// Linear interpolation between the two lead shifts across the device.
    #[default]
    Linear,
}

/// On-site energy shifts applied uniformly to each lead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasProfile {
    pub amplitude_left: f64,
    pub amplitude_right: f64,
    #[serde(default = "default_ramp_time")]
    pub ramp_time: f64,
    #[serde(default)]
    pub shape: BiasShape,
    #[serde(default)]
    pub device: DeviceBias,
}

fn default_ramp_time() -> f64 {
    1.0
}

impl Default for BiasProfile {
    fn default() -> Self {
        Self::zero()
    }
}

impl BiasProfile {
    pub fn zero() -> Self {
        Self {
            amplitude_left: 0.0,
            amplitude_right: 0.0,
            ramp_time: 1.0,
            shape: BiasShape::ExponentialRamp,
            device: DeviceBias::Linear,
        }
    }

    /// Symmetric step bias: left lead raised by V/2, right lowered by V/2.
    pub fn symmetric_step(v: f64) -> Self {
        Self {
            amplitude_left: 0.5 * v,
            amplitude_right: -0.5 * v,
            ramp_time: 1.0,
            shape: BiasShape::Step,
            device: DeviceBias::Linear,
        }
    }

    pub fn symmetric_ramp(v: f64, ramp_time: f64) -> Self {
        Self {
            shape: BiasShape::ExponentialRamp,
            ramp_time,
            ..Self::symmetric_step(v)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amplitude_left.is_finite() || !self.amplitude_right.is_finite() {
            return Err(Error::InvalidInput("bias amplitudes must be finite".into()));
        }
        if self.shape == BiasShape::ExponentialRamp
            && !(self.ramp_time > 0.0 && self.ramp_time.is_finite())
        {
            return Err(Error::InvalidInput("ramp time must be positive".into()));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude_left == 0.0 && self.amplitude_right == 0.0
    }

    /// Switching function in [0, 1]; identically zero for t <= 0.
    pub fn envelope(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self.shape {
            BiasShape::Step => 1.0,
            BiasShape::ExponentialRamp => -(-t / self.ramp_time).exp_m1(),
        }
    }

    /// Right limit of the envelope, lim_{s -> t+}. Differs from `envelope`
    /// only for the step at t = 0; integrators use it at the left end of a
    /// step so the bias is on throughout (0, dt].
    pub fn envelope_after(&self, t: f64) -> f64 {
        match self.shape {
            BiasShape::Step if t >= 0.0 => 1.0,
            _ => self.envelope(t),
        }
    }

    fn shifts_with(&self, partition: &Partition, env: f64) -> Vec<f64> {
        let mut shifts = vec![0.0; partition.total()];
        if env == 0.0 {
            return shifts;
        }
        let vl = self.amplitude_left * env;
        let vr = self.amplitude_right * env;
        for i in partition.lead(Lead::Left) {
            shifts[i] = vl;
        }
        for i in partition.lead(Lead::Right) {
            shifts[i] = vr;
        }
        if self.device == DeviceBias::Linear {
            let nd = partition.n_device as f64;
            for (j, i) in partition.device().enumerate() {
                let frac = (j as f64 + 1.0) / (nd + 1.0);
                shifts[i] = vl + (vr - vl) * frac;
            }
        }
        shifts
    }

    pub fn site_shifts(&self, partition: &Partition, t: f64) -> Vec<f64> {
        self.shifts_with(partition, self.envelope(t))
    }

    pub fn site_shifts_after(&self, partition: &Partition, t: f64) -> Vec<f64> {
        self.shifts_with(partition, self.envelope_after(t))
    }

    /// Lead shift at time t (right limit), used to move lead chemical potentials.
    pub fn lead_shift_after(&self, lead: Lead, t: f64) -> f64 {
        let env = self.envelope_after(t);
        match lead {
            Lead::Left => self.amplitude_left * env,
            Lead::Right => self.amplitude_right * env,
        }
    }
}

/// h(t) = h0 + diag(bias pattern at t).
pub fn apply_bias(system: &TightBindingSystem, profile: &BiasProfile, t: f64) -> Result<CMatrix> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("time must be finite, got {t}")));
    }
    Ok(shifted(system, &profile.site_shifts(system.partition(), t)))
}

/// As [`apply_bias`] but using the right limit of the bias at t.
pub fn apply_bias_after(system: &TightBindingSystem, profile: &BiasProfile, t: f64) -> CMatrix {
    shifted(system, &profile.site_shifts_after(system.partition(), t))
}

fn shifted(system: &TightBindingSystem, shifts: &[f64]) -> CMatrix {
    let mut h = system.h0().clone();
    for (i, &s) in shifts.iter().enumerate() {
        h[(i, i)] += real(s);
    }
    h
}

/// Zero-temperature occupation of the lowest `n_electrons` eigenstates of h.
///
/// With `fractional` set, a multiplet straddling the Fermi level shares the
/// remaining electrons equally (σ² = σ then no longer holds).
pub fn ground_state_density_matrix(
    system: &TightBindingSystem,
    n_electrons: usize,
    fractional: bool,
) -> Result<CMatrix> {
    filled_density_matrix(system.h0(), n_electrons, fractional)
}

pub fn filled_density_matrix(h: &CMatrix, n_electrons: usize, fractional: bool) -> Result<CMatrix> {
    let n = h.nrows();
    if n_electrons > n {
        return Err(Error::InvalidInput(format!(
            "cannot place {n_electrons} electrons on {n} sites"
        )));
    }
    let (energies, vectors) = eigh(h);
    let mut occupations = vec![0.0; n];
    occupations[..n_electrons].iter_mut().for_each(|o| *o = 1.0);

    if n_electrons > 0 && n_electrons < n {
        let scale = energies.iter().fold(1.0f64, |m, e| m.max(e.abs()));
        let tol = 1e-9 * scale;
        let e_f = energies[n_electrons - 1];
        if (energies[n_electrons] - e_f).abs() <= tol {
            let lo = energies
                .iter()
                .position(|e| (e - e_f).abs() <= tol)
                .unwrap_or(0);
            let hi = energies
                .iter()
                .rposition(|e| (e - e_f).abs() <= tol)
                .unwrap_or(n - 1)
                + 1;
            let multiplicity = hi - lo;
            let occupied = n_electrons - lo;
            if !fractional {
                return Err(Error::FermiDegeneracy {
                    energy: e_f,
                    multiplicity,
                    occupied,
                });
            }
            let share = occupied as f64 / multiplicity as f64;
            occupations[lo..hi].iter_mut().for_each(|o| *o = share);
        }
    }
    Ok(density_from_occupations(&vectors, &occupations))
}

pub(crate) fn density_from_occupations(vectors: &CMatrix, occupations: &[f64]) -> CMatrix {
    let n = vectors.nrows();
    let weights = DVector::from_iterator(occupations.len(), occupations.iter().map(|&o| real(o)));
    let mut scaled = vectors.clone();
    for (k, w) in weights.iter().enumerate() {
        scaled.column_mut(k).scale_mut(w.re);
    }
    let sigma = scaled * vectors.adjoint();
    debug_assert_eq!(sigma.nrows(), n);
    sigma
}

/// Zero-temperature equilibrium density matrix of h at chemical potential mu;
/// levels within 1e-12 of mu are half filled.
pub fn equilibrium_density_matrix(h: &CMatrix, mu: f64) -> CMatrix {
    let (energies, vectors) = eigh(h);
    let occ: Vec<f64> = energies
        .iter()
        .map(|&e| {
            if (e - mu).abs() <= 1e-12 {
                0.5
            } else if e < mu {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    density_from_occupations(&vectors, &occ)
}

/// The nine blocks of a matrix under an L/D/R partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedMatrix {
    partition: Partition,
    blocks: [[CMatrix; 3]; 3],
}

impl PartitionedMatrix {
    pub fn from_matrix(m: &CMatrix, partition: &Partition) -> Result<Self> {
        if m.nrows() != partition.total() || m.ncols() != partition.total() {
            return Err(Error::DimensionMismatch {
                context: "partitioned matrix",
                expected: partition.total(),
                found: m.nrows(),
            });
        }
        let block = |r: Region, c: Region| {
            let rr = partition.range(r);
            let cr = partition.range(c);
            m.view((rr.start, cr.start), (rr.len(), cr.len()))
                .into_owned()
        };
        use Region::*;
        Ok(Self {
            partition: *partition,
            blocks: [
                [block(Left, Left), block(Left, Device), block(Left, Right)],
                [
                    block(Device, Left),
                    block(Device, Device),
                    block(Device, Right),
                ],
                [
                    block(Right, Left),
                    block(Right, Device),
                    block(Right, Right),
                ],
            ],
        })
    }

    pub fn block(&self, row: Region, col: Region) -> &CMatrix {
        &self.blocks[row.slot()][col.slot()]
    }

    pub fn left(&self) -> &CMatrix {
        self.block(Region::Left, Region::Left)
    }

    pub fn device(&self) -> &CMatrix {
        self.block(Region::Device, Region::Device)
    }

    pub fn right(&self) -> &CMatrix {
        self.block(Region::Right, Region::Right)
    }

    pub fn reassemble(&self) -> CMatrix {
        let n = self.partition.total();
        let mut m = CMatrix::zeros(n, n);
        for r in Region::ALL {
            for c in Region::ALL {
                let rr = self.partition.range(r);
                let cr = self.partition.range(c);
                m.view_mut((rr.start, cr.start), (rr.len(), cr.len()))
                    .copy_from(self.block(r, c));
            }
        }
        m
    }
}

/// Trace of one diagonal block.
pub fn block_trace(m: &CMatrix, partition: &Partition, region: Region) -> C64 {
    partition.range(region).map(|i| m[(i, i)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermiticity_defect_max;

    #[test]
    fn chain_structure() {
        let sys = build_chain_system(2, 1, 2, -1.0, 0.0).unwrap();
        let h = sys.h0();
        assert_eq!(h.nrows(), 5);
        for i in 0..5 {
            assert_eq!(h[(i, i)], real(0.0));
            for j in 0..5 {
                let expected = if i.abs_diff(j) == 1 { -1.0 } else { 0.0 };
                if i != j {
                    assert_eq!(h[(i, j)], real(expected));
                }
            }
        }
        // leads touch only the device
        let p = sys.partition();
        for i in p.lead(Lead::Left) {
            for j in p.lead(Lead::Right) {
                assert_eq!(h[(i, j)], real(0.0));
            }
        }
    }

    #[test]
    fn three_site_spectrum() {
        let sys = build_chain_system(1, 1, 1, -1.0, 0.0).unwrap();
        let (e, _) = eigh(sys.h0());
        let s2 = 2f64.sqrt();
        for (got, want) in e.iter().zip([-s2, 0.0, s2]) {
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn chain_rejects_bad_input() {
        assert!(build_chain_system(2, 1, 2, 0.0, 0.0).is_err());
        assert!(build_chain_system(0, 1, 2, -1.0, 0.0).is_err());
        assert!(build_chain_system(1, 1, 1, f64::NAN, 0.0).is_err());
        assert!(build_chain_system(1, 1, 1, -1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn ground_state_diagonal_and_full() {
        let h = CMatrix::from_diagonal(&DVector::from_vec(vec![real(0.0), real(1.0), real(2.0)]));
        let sys =
            TightBindingSystem::from_hamiltonian(h, Partition::new(1, 1, 1).unwrap()).unwrap();
        let s = ground_state_density_matrix(&sys, 1, false).unwrap();
        let expected =
            CMatrix::from_diagonal(&DVector::from_vec(vec![real(1.0), real(0.0), real(0.0)]));
        assert!((s - expected).norm() < 1e-14);
        let full = ground_state_density_matrix(&sys, 3, false).unwrap();
        assert!((full - CMatrix::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn ground_state_three_site_chain() {
        let sys = build_chain_system(1, 1, 1, -1.0, 0.0).unwrap();
        let s = ground_state_density_matrix(&sys, 1, false).unwrap();
        // eigenvector of -sqrt(2) is (1/2, 1/sqrt 2, 1/2)
        assert!((s[(0, 0)].re - 0.25).abs() < 1e-13);
        assert!((s[(1, 1)].re - 0.5).abs() < 1e-13);
        assert!((s[(0, 2)].re - 0.25).abs() < 1e-13);
    }

    #[test]
    fn degeneracy_is_reported_or_shared() {
        // eigenvalues {-1, 0, 0, 1}: two electrons put the Fermi level inside the doublet
        let h = CMatrix::from_diagonal(&DVector::from_vec(vec![
            real(-1.0),
            real(0.0),
            real(0.0),
            real(1.0),
        ]));
        let sys =
            TightBindingSystem::from_hamiltonian(h, Partition::new(1, 2, 1).unwrap()).unwrap();
        match ground_state_density_matrix(&sys, 2, false) {
            Err(Error::FermiDegeneracy {
                multiplicity,
                occupied,
                ..
            }) => {
                assert_eq!(multiplicity, 2);
                assert_eq!(occupied, 1);
            }
            other => panic!("expected degeneracy error, got {other:?}"),
        }
        let s = ground_state_density_matrix(&sys, 2, true).unwrap();
        assert!((s[(1, 1)].re - 0.5).abs() < 1e-13);
        assert!((s[(2, 2)].re - 0.5).abs() < 1e-13);
        assert!((crate::linalg::trace(&s).re - 2.0).abs() < 1e-13);
    }

    #[test]
    fn bias_profiles() {
        let sys = build_chain_system(2, 2, 2, -1.0, 0.0).unwrap();
        let step = BiasProfile {
            amplitude_left: 0.3,
            amplitude_right: 0.0,
            ramp_time: 1.0,
            shape: BiasShape::Step,
            device: DeviceBias::Unbiased,
        };
        assert_eq!(apply_bias(&sys, &step, 0.0).unwrap(), *sys.h0());
        let h = apply_bias(&sys, &step, 0.5).unwrap();
        assert_eq!(h[(0, 0)], real(0.3));
        assert_eq!(h[(1, 1)], real(0.3));
        assert_eq!(h[(2, 2)], real(0.0));
        assert_eq!(apply_bias_after(&sys, &step, 0.0)[(0, 0)], real(0.3));

        let tau = 2.0;
        let ramp = BiasProfile {
            shape: BiasShape::ExponentialRamp,
            ramp_time: tau,
            ..step
        };
        let h = apply_bias(&sys, &ramp, tau).unwrap();
        assert!((h[(0, 0)].re - 0.3 * (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert_eq!(apply_bias(&sys, &ramp, 0.0).unwrap(), *sys.h0());
        assert!(apply_bias(&sys, &ramp, f64::NAN).is_err());
    }

    #[test]
    fn linear_device_bias_interpolates() {
        let p = Partition::new(1, 3, 1).unwrap();
        let b = BiasProfile::symmetric_step(1.0);
        let s = b.site_shifts(&p, 1.0);
        assert_eq!(s, vec![0.5, 0.25, 0.0, -0.25, -0.5]);
    }

    #[test]
    fn partition_round_trip_is_exact() {
        let p = Partition::new(2, 3, 1).unwrap();
        let m = CMatrix::from_fn(6, 6, |i, j| {
            C64::new(i as f64 * 0.37 - j as f64, (i * j) as f64 / 7.0)
        });
        let blocks = PartitionedMatrix::from_matrix(&m, &p).unwrap();
        assert_eq!(blocks.reassemble(), m);
        assert_eq!(blocks.device().nrows(), 3);
        assert_eq!(blocks.block(Region::Left, Region::Right).shape(), (2, 1));
    }

    #[test]
    fn recurrence_time_of_chain() {
        let sys = build_chain_system(20, 4, 20, -1.0, 0.0).unwrap();
        assert_eq!(sys.recurrence_time(), 20.0);
        assert_eq!(hermiticity_defect_max(sys.h0()), 0.0);
    }
}
