//! Device-only propagation,
//!
//!   i dσ_D/dt = [h_D(t), σ_D] - i Σ_α Q_α,
//!
//! with Q_α supplied by a [`DissipationFunctional`].
//!
//! Two closures are provided. `ExactReplay` feeds back the Q_α recorded from a
//! full-system run, which makes the reduced equation exact and is used to
//! validate it. `WideBand` is an approximate Markovian relaxation
//! Q_α = ½{Γ_α, σ_D - σ_eq,α} towards the zero-temperature equilibrium of h_D
//! at the lead chemical potential; it is a modelling choice, not an exact
//! functional of the device density.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::full_propagator::{
    integrate, step_size_check, DensityMatrixTrajectory, Generator, PropagationParams,
    TrajectoryMeta,
};
use crate::linalg::{eigh, ensure_hermitian, norm_bound, real, CMatrix, I};
use crate::model::{equilibrium_density_matrix, BiasProfile, Lead, Partition, TightBindingSystem};
use crate::partition_dissipation::{current, DissipationLog};

/// Broadening matrices and chemical potentials for the wide-band closure.
#[derive(Debug, Clone, PartialEq)]
pub struct WideBand {
    pub gamma_left: CMatrix,
    pub gamma_right: CMatrix,
    /// Chemical potentials of the unbiased leads; the lead bias shift is added
    /// at each refresh.
    pub mu_left: f64,
    pub mu_right: f64,
    /// Rebuild σ_eq,α from the instantaneous h_D every this many steps.
    pub refresh_every: usize,
}

impl WideBand {
    /// γ on the device site adjacent to each lead, zero elsewhere.
    pub fn adjacent(n_device: usize, gamma: f64, mu_left: f64, mu_right: f64) -> Self {
        let mut gamma_left = CMatrix::zeros(n_device, n_device);
        let mut gamma_right = CMatrix::zeros(n_device, n_device);
        gamma_left[(0, 0)] = real(gamma);
        gamma_right[(n_device - 1, n_device - 1)] = real(gamma);
        Self {
            gamma_left,
            gamma_right,
            mu_left,
            mu_right,
            refresh_every: 1,
        }
    }

    pub fn gamma(&self, lead: Lead) -> &CMatrix {
        match lead {
            Lead::Left => &self.gamma_left,
            Lead::Right => &self.gamma_right,
        }
    }

    pub fn mu(&self, lead: Lead) -> f64 {
        match lead {
            Lead::Left => self.mu_left,
            Lead::Right => self.mu_right,
        }
    }

    fn validate(&self, n_device: usize) -> Result<()> {
        for lead in Lead::BOTH {
            let g = self.gamma(lead);
            if g.nrows() != n_device || g.ncols() != n_device {
                return Err(Error::DimensionMismatch {
                    context: "broadening matrix",
                    expected: n_device,
                    found: g.nrows(),
                });
            }
            check_broadening(g)?;
        }
        if self.refresh_every == 0 {
            return Err(Error::InvalidInput("refresh_every must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_broadening(gamma: &CMatrix) -> Result<()> {
    ensure_hermitian(gamma, "broadening matrix", 1e-12)?;
    let (vals, _) = eigh(gamma);
    let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&lowest) = vals.first() {
        if lowest < -1e-12 * scale {
            return Err(Error::NegativeBroadening { eigenvalue: lowest });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum DissipationFunctional {
    /// Q_α = 0: the isolated device.
    Isolated,
    /// Q_α replayed from a full-system log on the same time grid.
    ExactReplay(DissipationLog),
    WideBand(WideBand),
}

impl DissipationFunctional {
    pub fn name(&self) -> &'static str {
        match self {
            DissipationFunctional::Isolated => "isolated",
            DissipationFunctional::ExactReplay(_) => "exact-replay",
            DissipationFunctional::WideBand(_) => "wide-band",
        }
    }
}

/// Q_α = ½{Γ_α, σ_D - σ_eq,α}.
pub fn wide_band_q(sigma_d: &CMatrix, gamma: &CMatrix, sigma_eq: &CMatrix) -> Result<CMatrix> {
    if sigma_d.shape() != gamma.shape() || sigma_eq.shape() != gamma.shape() {
        return Err(Error::DimensionMismatch {
            context: "wide-band closure",
            expected: gamma.nrows(),
            found: sigma_d.nrows(),
        });
    }
    check_broadening(gamma)?;
    Ok(anticommutator_half(gamma, &(sigma_d - sigma_eq)))
}

fn anticommutator_half(a: &CMatrix, b: &CMatrix) -> CMatrix {
    (a * b + b * a) * real(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurrentSample {
    pub t: f64,
    pub j_left: f64,
    pub j_right: f64,
    /// Frobenius norms of Q_L and Q_R.
    pub q_left_norm: f64,
    pub q_right_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ReducedRun {
    pub mode: &'static str,
    pub trajectory: DensityMatrixTrajectory,
    pub currents: Vec<CurrentSample>,
}

struct ReducedGenerator<'a> {
    h_d0: CMatrix,
    partition: Partition,
    profile: &'a BiasProfile,
    functional: &'a DissipationFunctional,
    dt: f64,
    step: usize,
    sigma_eq: Option<[CMatrix; 2]>,
    currents: Vec<CurrentSample>,
}

impl<'a> ReducedGenerator<'a> {
    fn h_device(&self, t: f64) -> CMatrix {
        let shifts = self.profile.site_shifts_after(&self.partition, t);
        let mut h = self.h_d0.clone();
        for (k, i) in self.partition.device().enumerate() {
            h[(k, k)] += real(shifts[i]);
        }
        h
    }

    fn refresh_equilibrium(&mut self, t: f64) {
        if let DissipationFunctional::WideBand(wb) = self.functional {
            let h = self.h_device(t);
            self.sigma_eq = Some(Lead::BOTH.map(|lead| {
                let mu = wb.mu(lead) + self.profile.lead_shift_after(lead, t);
                equilibrium_density_matrix(&h, mu)
            }));
        }
    }

    fn equilibrium(&self, lead: Lead) -> &CMatrix {
        let eq = self
            .sigma_eq
            .as_ref()
            .expect("equilibrium initialised for wide-band mode");
        match lead {
            Lead::Left => &eq[0],
            Lead::Right => &eq[1],
        }
    }

    /// Σ_α Q_α for the state σ at time t inside the current step.
    fn q_total(&self, t: f64, sigma: &CMatrix) -> Option<CMatrix> {
        match self.functional {
            DissipationFunctional::Isolated => None,
            DissipationFunctional::ExactReplay(log) => {
                let stage = ((t - self.step as f64 * self.dt) / self.dt * 2.0).round() as i64;
                Some(match stage {
                    0 => log.total_at(self.step),
                    1 => log.total_at_midpoint(self.step),
                    _ => log.total_at(self.step + 1),
                })
            }
            DissipationFunctional::WideBand(wb) => {
                let mut q =
                    anticommutator_half(&wb.gamma_left, &(sigma - self.equilibrium(Lead::Left)));
                q += anticommutator_half(&wb.gamma_right, &(sigma - self.equilibrium(Lead::Right)));
                Some(q)
            }
        }
    }

    fn currents_at(&self, step: usize, t: f64, sigma: &CMatrix) -> Result<CurrentSample> {
        let (j_left, j_right, q_left_norm, q_right_norm) = match self.functional {
            DissipationFunctional::Isolated => (0.0, 0.0, 0.0, 0.0),
            DissipationFunctional::ExactReplay(log) => {
                let r = &log.records[step];
                (r.j_left, r.j_right, r.q_left.norm(), r.q_right.norm())
            }
            DissipationFunctional::WideBand(wb) => {
                let ql =
                    anticommutator_half(&wb.gamma_left, &(sigma - self.equilibrium(Lead::Left)));
                let qr =
                    anticommutator_half(&wb.gamma_right, &(sigma - self.equilibrium(Lead::Right)));
                (current(&ql)?, current(&qr)?, ql.norm(), qr.norm())
            }
        };
        Ok(CurrentSample {
            t,
            j_left,
            j_right,
            q_left_norm,
            q_right_norm,
        })
    }
}

impl Generator for ReducedGenerator<'_> {
    fn rhs(&mut self, t: f64, sigma: &CMatrix, out: &mut CMatrix) -> Result<()> {
        let h = self.h_device(t);
        let comm = &h * sigma - sigma * &h;
        out.copy_from(&(comm * (-I)));
        if let Some(q) = self.q_total(t, sigma) {
            *out -= q;
        }
        Ok(())
    }

    fn midpoint(&mut self, t_mid: f64) -> Result<(CMatrix, Option<CMatrix>)> {
        let h = self.h_device(t_mid);
        Ok(match self.functional {
            DissipationFunctional::Isolated => (h, None),
            DissipationFunctional::ExactReplay(log) => (h, Some(-log.total_at_midpoint(self.step))),
            DissipationFunctional::WideBand(wb) => {
                let gamma = &wb.gamma_left + &wb.gamma_right;
                let h_eff = h - gamma * (I * 0.5);
                let source = anticommutator_half(&wb.gamma_left, self.equilibrium(Lead::Left))
                    + anticommutator_half(&wb.gamma_right, self.equilibrium(Lead::Right));
                (h_eff, Some(source))
            }
        })
    }

    fn accept(&mut self, step: usize, sigma: &CMatrix) -> Result<()> {
        self.step = step;
        let t = step as f64 * self.dt;
        if let DissipationFunctional::WideBand(wb) = self.functional {
            if step.is_multiple_of(wb.refresh_every) {
                self.refresh_equilibrium(t);
            }
        }
        let sample = self.currents_at(step, t, sigma)?;
        self.currents.push(sample);
        Ok(())
    }
}

/// Propagates σ_D under the closed device equation and records the currents
/// J_α = -tr Q_α at every grid time.
pub fn propagate_reduced(
    sigma_d0: &CMatrix,
    system: &TightBindingSystem,
    profile: &BiasProfile,
    functional: &DissipationFunctional,
    params: &PropagationParams,
) -> Result<ReducedRun> {
    profile.validate()?;
    params.validate()?;
    let partition = *system.partition();
    let n_d = partition.n_device;
    if sigma_d0.nrows() != n_d || sigma_d0.ncols() != n_d {
        return Err(Error::DimensionMismatch {
            context: "initial device density matrix",
            expected: n_d,
            found: sigma_d0.nrows(),
        });
    }
    ensure_hermitian(sigma_d0, "initial device density matrix", 1e-10)?;
    match functional {
        DissipationFunctional::ExactReplay(log) => {
            if log.n_steps() != params.n_steps {
                return Err(Error::ReplayGridMismatch(format!(
                    "log has {} steps, run requests {}",
                    log.n_steps(),
                    params.n_steps
                )));
            }
            if (log.dt - params.dt).abs() > 1e-12 * params.dt {
                return Err(Error::ReplayGridMismatch(format!(
                    "log dt = {}, run dt = {}",
                    log.dt, params.dt
                )));
            }
            if log.n_device() != n_d {
                return Err(Error::ReplayGridMismatch(format!(
                    "log device size {} differs from {n_d}",
                    log.n_device()
                )));
            }
        }
        DissipationFunctional::WideBand(wb) => wb.validate(n_d)?,
        DissipationFunctional::Isolated => {}
    }

    let d = partition.device();
    let h_d0 = system
        .h0()
        .view((d.start, d.start), (n_d, n_d))
        .into_owned();
    let mut warnings = Vec::new();
    let bound = norm_bound(&h_d0)
        + profile
            .amplitude_left
            .abs()
            .max(profile.amplitude_right.abs());
    step_size_check(params.dt, bound, params, &mut warnings)?;

    let mut gen = ReducedGenerator {
        h_d0,
        partition,
        profile,
        functional,
        dt: params.dt,
        step: 0,
        sigma_eq: None,
        currents: Vec::with_capacity(params.n_steps + 1),
    };
    gen.refresh_equilibrium(0.0);
    let first = gen.currents_at(0, 0.0, sigma_d0)?;
    gen.currents.push(first);

    let keep = params.keep_every.max(1);
    let mut steps = Vec::new();
    let mut times = Vec::new();
    let mut matrices = Vec::new();
    integrate(&mut gen, sigma_d0, params, |step, t, sigma: &CMatrix| {
        if step % keep == 0 || step == params.n_steps {
            steps.push(step);
            times.push(t);
            matrices.push(sigma.clone());
        }
        Ok(())
    })?;
    let currents = gen.currents;

    Ok(ReducedRun {
        mode: functional.name(),
        trajectory: DensityMatrixTrajectory {
            partition: Partition {
                n_left: 0,
                n_device: n_d,
                n_right: 0,
            },
            steps,
            times,
            matrices,
            meta: TrajectoryMeta {
                integrator: params.integrator,
                dt: params.dt,
                n_steps: params.n_steps,
                fingerprint: system.fingerprint(),
                warnings,
            },
        },
        currents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::full_propagator::{propagate_full, Integrator};
    use crate::model::{build_chain_system, filled_density_matrix};
    use crate::partition_dissipation::DissipationRecord;

    fn device_block(sigma: &CMatrix, p: &Partition) -> CMatrix {
        let d = p.device();
        sigma
            .view((d.start, d.start), (d.len(), d.len()))
            .into_owned()
    }

    #[test]
    fn isolated_device_matches_decoupled_full_run() {
        // leads cut off: the full run's device block obeys the isolated equation
        let sys = build_chain_system(3, 3, 3, -1.0, 0.0)
            .unwrap()
            .with_bond(2, 3, 0.0)
            .unwrap()
            .with_bond(5, 6, 0.0)
            .unwrap();
        let mut skewed = sys.h0().clone();
        skewed[(3, 3)] = real(0.7);
        skewed[(0, 0)] = real(0.3);
        let sigma0 = filled_density_matrix(&skewed, 4, false).unwrap();
        let profile = BiasProfile::symmetric_ramp(0.4, 0.5);
        for integrator in [Integrator::Rk4, Integrator::CrankNicolson] {
            let params = PropagationParams::new(0.01, 300, integrator);
            let full = propagate_full(&sys, &profile, &sigma0, &params).unwrap();
            let p = *sys.partition();
            let red = propagate_reduced(
                &device_block(&sigma0, &p),
                &sys,
                &profile,
                &DissipationFunctional::Isolated,
                &params,
            )
            .unwrap();
            assert_eq!(red.mode, "isolated");
            for (a, b) in full.matrices.iter().zip(&red.trajectory.matrices) {
                assert!((device_block(a, &p) - b).norm() < 1e-12);
            }
            assert!(red
                .currents
                .iter()
                .all(|c| c.j_left == 0.0 && c.j_right == 0.0));
            assert_eq!(red.currents.len(), 301);
        }
    }

    #[test]
    fn wide_band_equilibrium_is_a_fixed_point() {
        let sys = build_chain_system(2, 3, 2, -1.0, 0.0).unwrap();
        let p = *sys.partition();
        let d = p.device();
        let h_d = sys.h0().view((d.start, d.start), (3, 3)).into_owned();
        let mu = 0.1;
        let sigma_eq = equilibrium_density_matrix(&h_d, mu);
        let functional = DissipationFunctional::WideBand(WideBand::adjacent(3, 0.5, mu, mu));
        for integrator in [Integrator::Rk4, Integrator::CrankNicolson] {
            let params = PropagationParams::new(0.02, 200, integrator);
            let run =
                propagate_reduced(&sigma_eq, &sys, &BiasProfile::zero(), &functional, &params)
                    .unwrap();
            assert!((run.trajectory.last().unwrap() - &sigma_eq).norm() < 1e-12);
            assert!(run
                .currents
                .iter()
                .all(|c| c.j_left.abs() < 1e-13 && c.j_right.abs() < 1e-13));
        }
    }

    #[test]
    fn single_level_relaxes_at_the_broadening_rate() {
        // one level below μ, coupled to the left lead only:
        // dσ/dt = -γ (σ - 1), σ(t) = 1 - (1 - σ0) e^{-γ t}
        let mut h = CMatrix::zeros(3, 3);
        h[(1, 1)] = real(-0.3);
        let sys =
            TightBindingSystem::from_hamiltonian(h, Partition::new(1, 1, 1).unwrap()).unwrap();
        let gamma = 0.8;
        let mut wb = WideBand::adjacent(1, gamma, 0.0, 0.0);
        wb.gamma_right[(0, 0)] = real(0.0);
        let functional = DissipationFunctional::WideBand(wb);
        let sigma0 = CMatrix::from_element(1, 1, real(0.2));
        for (integrator, tol) in [(Integrator::Rk4, 1e-10), (Integrator::CrankNicolson, 1e-5)] {
            let params = PropagationParams::new(0.01, 500, integrator);
            let run = propagate_reduced(&sigma0, &sys, &BiasProfile::zero(), &functional, &params)
                .unwrap();
            for (t, m) in run.trajectory.times.iter().zip(&run.trajectory.matrices) {
                let exact = 1.0 - 0.8 * (-gamma * t).exp();
                assert!((m[(0, 0)].re - exact).abs() < tol, "{integrator:?} t={t}");
            }
            // J_L = -tr Q_L = γ (1 - σ) > 0: electrons enter from the left lead
            let c = run.currents[0];
            assert!((c.j_left - gamma * 0.8).abs() < 1e-14);
            assert!((c.q_left_norm - gamma * 0.8).abs() < 1e-14);
            assert_eq!(c.j_right, 0.0);
        }
    }

    #[test]
    fn negative_broadening_is_rejected() {
        let sys = build_chain_system(1, 2, 1, -1.0, 0.0).unwrap();
        let functional = DissipationFunctional::WideBand(WideBand::adjacent(2, -0.1, 0.0, 0.0));
        let err = propagate_reduced(
            &CMatrix::zeros(2, 2),
            &sys,
            &BiasProfile::zero(),
            &functional,
            &PropagationParams::new(0.01, 10, Integrator::Rk4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NegativeBroadening { eigenvalue } if eigenvalue < 0.0));
        assert!(matches!(
            wide_band_q(
                &CMatrix::zeros(2, 2),
                &(CMatrix::identity(2, 2) * real(-1.0)),
                &CMatrix::zeros(2, 2)
            ),
            Err(Error::NegativeBroadening { .. })
        ));
    }

    #[test]
    fn replay_grid_must_match() {
        let sys = build_chain_system(2, 2, 2, -1.0, 0.0).unwrap();
        let mut log = DissipationLog::new(0.01);
        for k in 0..=10 {
            log.records.push(DissipationRecord {
                t: k as f64 * 0.01,
                q_left: CMatrix::zeros(2, 2),
                q_right: CMatrix::zeros(2, 2),
                j_left: 0.0,
                j_right: 0.0,
            });
        }
        let functional = DissipationFunctional::ExactReplay(log);
        let s0 = CMatrix::zeros(2, 2);
        let zero = BiasProfile::zero();
        for params in [
            PropagationParams::new(0.01, 9, Integrator::Rk4),
            PropagationParams::new(0.02, 10, Integrator::Rk4),
        ] {
            let err = propagate_reduced(&s0, &sys, &zero, &functional, &params).unwrap_err();
            assert!(matches!(err, Error::ReplayGridMismatch(_)), "{err}");
        }
        let ok = propagate_reduced(
            &s0,
            &sys,
            &zero,
            &functional,
            &PropagationParams::new(0.01, 10, Integrator::Rk4),
        );
        assert!(ok.is_ok());
        let big = build_chain_system(2, 3, 2, -1.0, 0.0).unwrap();
        let err = propagate_reduced(
            &CMatrix::zeros(3, 3),
            &big,
            &zero,
            &functional,
            &PropagationParams::new(0.01, 10, Integrator::Rk4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ReplayGridMismatch(_)));
    }
}
