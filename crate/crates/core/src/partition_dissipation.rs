//! Dissipative terms Q_α, terminal currents and the steady-state Landauer
//! oracle.
//!
//! Sign convention: J_α > 0 means electrons leave lead α towards the device,
//! J_α = -d/dt tr σ_α = -tr Q_α.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::full_propagator::{propagate_full_with, PropagationParams};
use crate::linalg::{eigh, real, trace, CMatrix, C64, I};
use crate::model::{BiasProfile, Lead, Partition, Region, TightBindingSystem};

/// Imaginary part of tr Q tolerated before a current is rejected.
pub const CURRENT_IMAG_TOL: f64 = 1e-10;

fn block(m: &CMatrix, partition: &Partition, row: Region, col: Region) -> CMatrix {
    let r = partition.range(row);
    let c = partition.range(col);
    m.view((r.start, c.start), (r.len(), c.len())).into_owned()
}

fn check_dims(sigma: &CMatrix, h: &CMatrix, partition: &Partition) -> Result<()> {
    for (m, context) in [(sigma, "density matrix"), (h, "Hamiltonian")] {
        if m.nrows() != partition.total() || m.ncols() != partition.total() {
            return Err(Error::DimensionMismatch {
                context,
                expected: partition.total(),
                found: m.nrows(),
            });
        }
    }
    Ok(())
}

/// Q_α = i (h_Dα σ_αD - σ_Dα h_αD), an n_D x n_D matrix.
pub fn compute_q(
    sigma: &CMatrix,
    h: &CMatrix,
    partition: &Partition,
    lead: Lead,
) -> Result<CMatrix> {
    check_dims(sigma, h, partition)?;
    let a = lead.region();
    let d = Region::Device;
    let h_da = block(h, partition, d, a);
    let h_ad = block(h, partition, a, d);
    let s_ad = block(sigma, partition, a, d);
    let s_da = block(sigma, partition, d, a);
    Ok((h_da * s_ad - s_da * h_ad) * I)
}

/// The same Q_α written as an explicit sum over the eigenstates k_α of the
/// lead block: Q_nm = i Σ_k (h_{n k} σ_{k m} - σ_{n k} h_{k m}).
pub fn compute_q_eigenbasis(
    sigma: &CMatrix,
    h: &CMatrix,
    partition: &Partition,
    lead: Lead,
) -> Result<CMatrix> {
    check_dims(sigma, h, partition)?;
    let a = lead.region();
    let d = Region::Device;
    let n_d = partition.n_device;
    let (_, states) = eigh(&block(h, partition, a, a));
    // rotate the coupling blocks into the lead eigenbasis
    let h_dk = block(h, partition, d, a) * &states;
    let h_kd = states.adjoint() * block(h, partition, a, d);
    let s_kd = states.adjoint() * block(sigma, partition, a, d);
    let s_dk = block(sigma, partition, d, a) * &states;
    let n_k = states.ncols();
    let mut q = CMatrix::zeros(n_d, n_d);
    for n in 0..n_d {
        for m in 0..n_d {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..n_k {
                acc += h_dk[(n, k)] * s_kd[(k, m)] - s_dk[(n, k)] * h_kd[(k, m)];
            }
            q[(n, m)] = I * acc;
        }
    }
    Ok(q)
}

/// J_α = -tr Q_α. An imaginary residue above [`CURRENT_IMAG_TOL`] means the
/// density matrix lost Hermiticity somewhere upstream.
pub fn current(q: &CMatrix) -> Result<f64> {
    if q.nrows() != q.ncols() {
        return Err(Error::DimensionMismatch {
            context: "dissipation matrix",
            expected: q.nrows(),
            found: q.ncols(),
        });
    }
    let tr = trace(q);
    if tr.im.abs() > CURRENT_IMAG_TOL {
        return Err(Error::ImaginaryCurrent {
            residue: tr.im.abs(),
            threshold: CURRENT_IMAG_TOL,
        });
    }
    Ok(-tr.re)
}

/// Dissipative terms and currents at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DissipationRecord {
    pub t: f64,
    pub q_left: CMatrix,
    pub q_right: CMatrix,
    pub j_left: f64,
    pub j_right: f64,
}

impl DissipationRecord {
    pub fn from_state(t: f64, sigma: &CMatrix, h: &CMatrix, partition: &Partition) -> Result<Self> {
        let q_left = compute_q(sigma, h, partition, Lead::Left)?;
        let q_right = compute_q(sigma, h, partition, Lead::Right)?;
        Ok(Self {
            t,
            j_left: current(&q_left)?,
            j_right: current(&q_right)?,
            q_left,
            q_right,
        })
    }

    pub fn q(&self, lead: Lead) -> &CMatrix {
        match lead {
            Lead::Left => &self.q_left,
            Lead::Right => &self.q_right,
        }
    }

    pub fn j(&self, lead: Lead) -> f64 {
        match lead {
            Lead::Left => self.j_left,
            Lead::Right => self.j_right,
        }
    }

    /// Q_L + Q_R
    pub fn q_total(&self) -> CMatrix {
        &self.q_left + &self.q_right
    }
}

/// Q records on a uniform time grid, one per step including t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DissipationLog {
    pub dt: f64,
    pub records: Vec<DissipationRecord>,
}

impl DissipationLog {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            records: Vec::new(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn n_device(&self) -> usize {
        self.records.first().map_or(0, |r| r.q_left.nrows())
    }

    /// Σ_α Q_α at grid step k.
    pub fn total_at(&self, step: usize) -> CMatrix {
        self.records[step].q_total()
    }

    /// Σ_α Q_α at t = (step + 1/2) dt from the four nearest records (cubic
    /// Lagrange, shifted one-sided at the ends of the log).
    pub fn total_at_midpoint(&self, step: usize) -> CMatrix {
        let last = self.n_steps();
        if last < 3 {
            let a = self.total_at(step);
            let b = self.total_at((step + 1).min(last));
            return (a + b) * real(0.5);
        }
        let start = step.saturating_sub(1).min(last - 3);
        // abscissa of the midpoint relative to the first stencil node, in steps
        let x = (step - start) as f64 + 0.5;
        let nodes = [0.0, 1.0, 2.0, 3.0];
        let mut out = CMatrix::zeros(self.n_device(), self.n_device());
        for (i, &xi) in nodes.iter().enumerate() {
            let mut w = 1.0;
            for (j, &xj) in nodes.iter().enumerate() {
                if i != j {
                    w *= (x - xj) / (xi - xj);
                }
            }
            out += self.total_at(start + i) * real(w);
        }
        out
    }
}

/// Transmission and current from the two-probe Green's function formula
/// with the closed-form self-energy of a semi-infinite uniform chain.
#[derive(Debug, Clone, Serialize)]
pub struct LandauerResult {
    pub current: f64,
    pub window: (f64, f64),
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct ChainLead {
    onsite: f64,
    hopping: f64,
    /// (lead surface site, device site, coupling h_{device, lead})
    coupling: C64,
    device_site: usize,
}

impl ChainLead {
    fn band(&self) -> (f64, f64) {
        let w = 2.0 * self.hopping.abs();
        (self.onsite - w, self.onsite + w)
    }

    /// Retarded surface Green's function of the semi-infinite chain.
    fn surface_gf(&self, energy: f64) -> C64 {
        let t2 = self.hopping * self.hopping;
        let x = energy - self.onsite;
        let disc = x * x - 4.0 * t2;
        if disc < 0.0 {
            C64::new(x, -(-disc).sqrt()) / (2.0 * t2)
        } else {
            real((x - x.signum() * disc.sqrt()) / (2.0 * t2))
        }
    }

    fn self_energy(&self, energy: f64) -> C64 {
        self.coupling.norm_sqr() * self.surface_gf(energy)
    }
}

fn chain_lead(system: &TightBindingSystem, lead: Lead) -> Result<ChainLead> {
    let p = system.partition();
    let h = system.h0();
    let range = p.lead(lead);
    if range.is_empty() {
        return Err(Error::UnsupportedLead(format!("{lead:?} lead is empty")));
    }
    // the lead site touching the device
    let surface = match lead {
        Lead::Left => range.end - 1,
        Lead::Right => range.start,
    };
    let onsite = h[(surface, surface)].re;
    for i in range.clone() {
        if (h[(i, i)] - real(onsite)).norm() > 1e-12 {
            return Err(Error::UnsupportedLead(format!(
                "{lead:?} lead on-site energies are not uniform"
            )));
        }
    }
    let mut hopping = None;
    for i in range.clone() {
        for j in range.clone() {
            if j > i {
                let v = h[(i, j)];
                if j == i + 1 {
                    if v.im.abs() > 1e-12 {
                        return Err(Error::UnsupportedLead("complex lead hopping".into()));
                    }
                    match hopping {
                        None => hopping = Some(v.re),
                        Some(t) if (t - v.re).abs() > 1e-12 => {
                            return Err(Error::UnsupportedLead(format!(
                                "{lead:?} lead hopping is not uniform"
                            )))
                        }
                        _ => {}
                    }
                } else if v.norm() > 1e-12 {
                    return Err(Error::UnsupportedLead(format!(
                        "{lead:?} lead is not nearest-neighbour"
                    )));
                }
            }
        }
    }
    let mut coupling = None;
    for i in range.clone() {
        for j in p.device() {
            let v = h[(j, i)];
            if v.norm() > 1e-12 {
                if i != surface || coupling.is_some() {
                    return Err(Error::UnsupportedLead(format!(
                        "{lead:?} lead must couple to the device through a single bond"
                    )));
                }
                coupling = Some((v, j - p.device().start));
            }
        }
    }
    let (coupling, device_site) =
        coupling.ok_or_else(|| Error::UnsupportedLead(format!("{lead:?} lead is decoupled")))?;
    // single-site leads: take the coupling as the chain hopping
    let hopping = hopping.unwrap_or(coupling.norm());
    Ok(ChainLead {
        onsite,
        hopping,
        coupling,
        device_site,
    })
}

/// T(E) = tr[Γ_L G Γ_R G^dagger] for the unbiased system.
pub fn transmission(system: &TightBindingSystem, energy: f64) -> Result<f64> {
    let left = chain_lead(system, Lead::Left)?;
    let right = chain_lead(system, Lead::Right)?;
    Ok(transmission_with(system, &left, &right, energy))
}

fn transmission_with(
    system: &TightBindingSystem,
    left: &ChainLead,
    right: &ChainLead,
    energy: f64,
) -> f64 {
    let p = system.partition();
    let d = p.device();
    let n_d = d.len();
    let h_d = system
        .h0()
        .view((d.start, d.start), (n_d, n_d))
        .into_owned();
    let sl = left.self_energy(energy);
    let sr = right.self_energy(energy);
    let mut a = CMatrix::identity(n_d, n_d) * real(energy) - h_d;
    a[(left.device_site, left.device_site)] -= sl;
    a[(right.device_site, right.device_site)] -= sr;
    let g = match a.lu().try_inverse() {
        Some(g) => g,
        None => return 0.0,
    };
    let gamma_l = -2.0 * sl.im;
    let gamma_r = -2.0 * sr.im;
    // single-bond couplings make Γ_α rank one
    gamma_l * gamma_r * g[(left.device_site, right.device_site)].norm_sqr()
}

/// Zero-temperature current (1/2π) ∫_{μ-V/2}^{μ+V/2} T(E) dE, with the window
/// clipped to the overlap of the lead bands.
pub fn landauer_current(system: &TightBindingSystem, bias: f64, mu: f64) -> Result<LandauerResult> {
    if !bias.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidInput(
            "bias and chemical potential must be finite".into(),
        ));
    }
    let left = chain_lead(system, Lead::Left)?;
    let right = chain_lead(system, Lead::Right)?;
    let (lo_raw, hi_raw) = if bias >= 0.0 {
        (mu - 0.5 * bias, mu + 0.5 * bias)
    } else {
        (mu + 0.5 * bias, mu - 0.5 * bias)
    };
    let (bl, bh) = {
        let (a0, a1) = left.band();
        let (b0, b1) = right.band();
        (a0.max(b0), a1.min(b1))
    };
    let mut warnings = Vec::new();
    let lo = lo_raw.max(bl);
    let hi = hi_raw.min(bh);
    if lo != lo_raw || hi != hi_raw {
        let msg = format!(
            "bias window [{lo_raw:.4}, {hi_raw:.4}] extends outside the lead band [{bl:.4}, {bh:.4}]; clipped"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let integral = if hi > lo {
        adaptive_simpson(
            &|e| transmission_with(system, &left, &right, e),
            lo,
            hi,
            1e-12,
            40,
        )
    } else {
        0.0
    };
    Ok(LandauerResult {
        current: bias.signum() * integral / (2.0 * PI),
        window: (lo, hi),
        warnings,
    })
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// Time-averaged terminal currents over a window of a full-system run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlateauCurrent {
    pub window: (f64, f64),
    pub mean_left: f64,
    pub mean_right: f64,
    /// (J_L - J_R) / 2, positive for electrons flowing left to right.
    pub through: f64,
    pub samples: usize,
}

/// Propagates the full system and averages J_L, J_R over grid times inside
/// `window`.
pub fn transient_plateau_current(
    system: &TightBindingSystem,
    profile: &BiasProfile,
    sigma0: &CMatrix,
    params: &PropagationParams,
    window: (f64, f64),
) -> Result<PlateauCurrent> {
    if !(window.0 < window.1) {
        return Err(Error::InvalidInput(format!(
            "empty averaging window {window:?}"
        )));
    }
    let partition = *system.partition();
    let h = system.h0();
    let (mut sum_l, mut sum_r, mut count) = (0.0, 0.0, 0usize);
    propagate_full_with(system, profile, sigma0, params, |_, t, sigma| {
        if t >= window.0 && t <= window.1 {
            sum_l += current(&compute_q(sigma, h, &partition, Lead::Left)?)?;
            sum_r += current(&compute_q(sigma, h, &partition, Lead::Right)?)?;
            count += 1;
        }
        Ok(())
    })?;
    if count == 0 {
        return Err(Error::InvalidInput(format!(
            "averaging window {window:?} contains no grid times"
        )));
    }
    let mean_left = sum_l / count as f64;
    let mean_right = sum_r / count as f64;
    Ok(PlateauCurrent {
        window,
        mean_left,
        mean_right,
        through: 0.5 * (mean_left - mean_right),
        samples: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_chain_system, ground_state_density_matrix};

    #[test]
    fn decoupled_lead_gives_zero_q() {
        let sys = build_chain_system(3, 2, 3, -1.0, 0.0)
            .unwrap()
            .with_bond(2, 3, 0.0)
            .unwrap();
        let sigma = CMatrix::from_fn(8, 8, |i, j| C64::new(1.0 / (1.0 + (i + j) as f64), 0.0));
        let q = compute_q(&sigma, sys.h0(), sys.partition(), Lead::Left).unwrap();
        assert_eq!(q, CMatrix::zeros(2, 2));
        assert_eq!(current(&q).unwrap(), 0.0);
    }

    #[test]
    fn equilibrium_has_no_dissipation() {
        let sys = build_chain_system(20, 4, 20, -1.0, 0.0).unwrap();
        let sigma = ground_state_density_matrix(&sys, 22, false).unwrap();
        let d = sys.partition().device();
        let h_d = sys
            .h0()
            .view((d.start, d.start), (d.len(), d.len()))
            .into_owned();
        let s_d = sigma
            .view((d.start, d.start), (d.len(), d.len()))
            .into_owned();
        let mut total = CMatrix::zeros(d.len(), d.len());
        for lead in Lead::BOTH {
            let q = compute_q(&sigma, sys.h0(), sys.partition(), lead).unwrap();
            assert!(current(&q).unwrap().abs() < 1e-12, "{lead:?}");
            total += q;
        }
        // stationarity of σ_D: Σ Q_α = -i [h_D, σ_D]
        let comm = (&h_d * &s_d - &s_d * &h_d) * (-I);
        assert!((total - comm).norm() < 1e-12);
    }

    #[test]
    fn block_and_eigenbasis_forms_agree() {
        let sys = build_chain_system(5, 3, 4, -1.0, 0.2).unwrap();
        let sigma = CMatrix::from_fn(12, 12, |i, j| {
            let z = C64::new((i * 3 + j) as f64 * 0.01, (i as f64 - j as f64) * 0.02);
            if i == j {
                real(z.re)
            } else {
                z
            }
        });
        let sigma = (&sigma + sigma.adjoint()) * real(0.5);
        for lead in Lead::BOTH {
            let a = compute_q(&sigma, sys.h0(), sys.partition(), lead).unwrap();
            let b = compute_q_eigenbasis(&sigma, sys.h0(), sys.partition(), lead).unwrap();
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sys = build_chain_system(2, 2, 2, -1.0, 0.0).unwrap();
        let sigma = CMatrix::zeros(5, 5);
        assert!(matches!(
            compute_q(&sigma, sys.h0(), sys.partition(), Lead::Left),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn imaginary_trace_is_an_error() {
        let mut q = CMatrix::zeros(2, 2);
        assert_eq!(current(&q).unwrap(), 0.0);
        q[(0, 0)] = C64::new(0.2, 1e-6);
        assert!(matches!(current(&q), Err(Error::ImaginaryCurrent { .. })));
    }

    #[test]
    fn perfect_chain_is_ballistic() {
        let sys = build_chain_system(5, 4, 5, -1.0, 0.0).unwrap();
        for e in [-1.9, -1.0, 0.0, 0.3, 1.7] {
            assert!(
                (transmission(&sys, e).unwrap() - 1.0).abs() < 1e-12,
                "E = {e}"
            );
        }
        let v = 0.1;
        let res = landauer_current(&sys, v, 0.0).unwrap();
        assert!((res.current - v / (2.0 * PI)).abs() < 1e-12);
        assert!(res.warnings.is_empty());
        assert_eq!(landauer_current(&sys, 0.0, 0.0).unwrap().current, 0.0);
    }

    #[test]
    fn weak_link_suppresses_transmission() {
        let sys = build_chain_system(5, 4, 5, -1.0, 0.0)
            .unwrap()
            .with_bond(6, 7, -0.5)
            .unwrap();
        let t0 = transmission(&sys, 0.0).unwrap();
        assert!(t0 > 0.0 && t0 < 1.0);
        // window outside the band is clipped with a warning
        let res = landauer_current(&sys, 6.0, 0.0).unwrap();
        assert_eq!(res.window, (-2.0, 2.0));
        assert_eq!(res.warnings.len(), 1);
    }

    #[test]
    fn simpson_integrates_smooth_functions() {
        let v = adaptive_simpson(&|x: f64| x.sin(), 0.0, PI, 1e-12, 40);
        assert!((v - 2.0).abs() < 1e-11);
    }

    #[test]
    fn midpoint_interpolation_is_exact_for_cubics() {
        let mut log = DissipationLog::new(0.1);
        for k in 0..6 {
            let t = k as f64 * 0.1;
            let val = 1.0 + t - 2.0 * t * t + 0.5 * t * t * t;
            let q = CMatrix::from_element(1, 1, real(val));
            log.records.push(DissipationRecord {
                t,
                q_left: q.clone(),
                q_right: CMatrix::zeros(1, 1),
                j_left: 0.0,
                j_right: 0.0,
            });
        }
        for step in 0..5 {
            let t = (step as f64 + 0.5) * 0.1;
            let want = 1.0 + t - 2.0 * t * t + 0.5 * t * t * t;
            assert!((log.total_at_midpoint(step)[(0, 0)].re - want).abs() < 1e-14);
        }
    }
}
