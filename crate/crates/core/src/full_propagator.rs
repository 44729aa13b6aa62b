//! Brute-force propagation of the full-system density matrix,
//! i dσ/dt = [h(t), σ], used as the reference for everything downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    axpy, cayley_factors, ensure_hermitian, norm_bound, CMatrix, SparseMatrix, C64, I,
};
use crate::model::{block_trace, BiasProfile, Lead, Partition, Region, TightBindingSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Rk4,
    CrankNicolson,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Rk4 => "rk4",
            Integrator::CrankNicolson => "crank-nicolson",
        }
    }
}

/// Fixed-step settings shared by the full and reduced propagators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    pub dt: f64,
    pub n_steps: usize,
    pub integrator: Integrator,
    /// Warn when dt * ||h|| exceeds this.
    pub step_warning: f64,
    /// Turn the step-size warning into an error.
    pub escalate_step_warning: bool,
    /// Store every k-th density matrix in the returned trajectory.
    pub keep_every: usize,
}

impl PropagationParams {
    pub fn new(dt: f64, n_steps: usize, integrator: Integrator) -> Self {
        Self {
            dt,
            n_steps,
            integrator,
            step_warning: 0.1,
            escalate_step_warning: false,
            keep_every: 1,
        }
    }

    pub fn keep_every(mut self, k: usize) -> Self {
        self.keep_every = k.max(1);
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.escalate_step_warning = strict;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub integrator: Integrator,
    pub dt: f64,
    pub n_steps: usize,
    pub fingerprint: String,
    pub warnings: Vec<String>,
}

/// Time series of density matrices on a uniform grid.
#[derive(Debug, Clone)]
pub struct DensityMatrixTrajectory {
    pub partition: Partition,
    /// Step indices of the stored matrices.
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub matrices: Vec<CMatrix>,
    pub meta: TrajectoryMeta,
}

impl DensityMatrixTrajectory {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn at_step(&self, step: usize) -> Option<&CMatrix> {
        let pos = self.steps.binary_search(&step).ok()?;
        self.matrices.get(pos)
    }

    pub fn last(&self) -> Option<&CMatrix> {
        self.matrices.last()
    }
}

/// Trace of the lead block at a stored step; sum of lead occupations in any
/// lead basis.
pub fn lead_occupation_sum(
    trajectory: &DensityMatrixTrajectory,
    lead: Lead,
    step: usize,
) -> Result<f64> {
    let sigma = trajectory.at_step(step).ok_or_else(|| {
        Error::InvalidInput(format!("step {step} is not stored in the trajectory"))
    })?;
    Ok(block_trace(sigma, &trajectory.partition, lead.region()).re)
}

/// (tr σ_L, tr σ_D, tr σ_R)
pub fn block_traces(sigma: &CMatrix, partition: &Partition) -> [f64; 3] {
    Region::ALL.map(|r| block_trace(sigma, partition, r).re)
}

/// Right-hand side of a linear matrix ODE dσ/dt = f(t, σ).
pub(crate) trait Generator {
    fn rhs(&mut self, t: f64, sigma: &CMatrix, out: &mut CMatrix) -> Result<()>;

    /// Crank-Nicolson data for the step [t, t + dt]: the effective generator
    /// h_eff at the midpoint (dσ/dt = -i h_eff σ + i σ h_eff^dagger + S) and the
    /// source S. `None` for the source means zero.
    fn midpoint(&mut self, t_mid: f64) -> Result<(CMatrix, Option<CMatrix>)>;

    /// Called after each accepted step with the new step index.
    fn accept(&mut self, _step: usize, _sigma: &CMatrix) -> Result<()> {
        Ok(())
    }
}

pub(crate) struct Rk4Buffers {
    k: [CMatrix; 4],
    stage: CMatrix,
}

impl Rk4Buffers {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| CMatrix::zeros(n, n)),
            stage: CMatrix::zeros(n, n),
        }
    }
}

pub(crate) fn rk4_step<G: Generator>(
    gen: &mut G,
    t: f64,
    dt: f64,
    sigma: &mut CMatrix,
    buf: &mut Rk4Buffers,
) -> Result<()> {
    let half = 0.5 * dt;
    let [k1, k2, k3, k4] = &mut buf.k;
    gen.rhs(t, sigma, k1)?;
    buf.stage.copy_from(sigma);
    axpy(&mut buf.stage, C64::new(half, 0.0), k1);
    gen.rhs(t + half, &buf.stage, k2)?;
    buf.stage.copy_from(sigma);
    axpy(&mut buf.stage, C64::new(half, 0.0), k2);
    gen.rhs(t + half, &buf.stage, k3)?;
    buf.stage.copy_from(sigma);
    axpy(&mut buf.stage, C64::new(dt, 0.0), k3);
    gen.rhs(t + dt, &buf.stage, k4)?;
    let w1 = C64::new(dt / 6.0, 0.0);
    let w2 = C64::new(dt / 3.0, 0.0);
    axpy(sigma, w1, k1);
    axpy(sigma, w2, k2);
    axpy(sigma, w2, k3);
    axpy(sigma, w1, k4);
    Ok(())
}

/// Cayley-form step σ' = U σ U^dagger + dt M S M^dagger with
/// M = (1 + i h dt/2)^-1 and U = M (1 - i h dt/2), h taken at the midpoint.
/// Factors are reused while the midpoint generator is unchanged.
pub(crate) struct CayleyCache {
    key: Option<CMatrix>,
    u: CMatrix,
    m: CMatrix,
}

impl CayleyCache {
    pub(crate) fn new() -> Self {
        Self {
            key: None,
            u: CMatrix::zeros(0, 0),
            m: CMatrix::zeros(0, 0),
        }
    }

    pub(crate) fn step<G: Generator>(
        &mut self,
        gen: &mut G,
        t: f64,
        dt: f64,
        sigma: &mut CMatrix,
    ) -> Result<()> {
        let (h_eff, source) = gen.midpoint(t + 0.5 * dt)?;
        if self.key.as_ref() != Some(&h_eff) {
            let (m, p) = cayley_factors(&h_eff, dt)?;
            self.u = &m * p;
            self.m = m;
            self.key = Some(h_eff);
        }
        let mut next = &self.u * &*sigma * self.u.adjoint();
        if let Some(s) = source {
            next += (&self.m * s * self.m.adjoint()) * C64::new(dt, 0.0);
        }
        *sigma = next;
        Ok(())
    }
}

/// Runs the fixed-step loop, calling `observer(step, t, σ)` for step 0..=n_steps.
pub(crate) fn integrate<G, F>(
    gen: &mut G,
    sigma0: &CMatrix,
    params: &PropagationParams,
    mut observer: F,
) -> Result<()>
where
    G: Generator,
    F: FnMut(usize, f64, &CMatrix) -> Result<()>,
{
    params.validate()?;
    let n = sigma0.nrows();
    let mut sigma = sigma0.clone();
    observer(0, 0.0, &sigma)?;
    let mut buffers = Rk4Buffers::new(n);
    let mut cayley = CayleyCache::new();
    for step in 0..params.n_steps {
        let t = params.time(step);
        match params.integrator {
            Integrator::Rk4 => rk4_step(gen, t, params.dt, &mut sigma, &mut buffers)?,
            Integrator::CrankNicolson => cayley.step(gen, t, params.dt, &mut sigma)?,
        }
        if sigma.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite density matrix at step {}",
                step + 1
            )));
        }
        gen.accept(step + 1, &sigma)?;
        observer(step + 1, params.time(step + 1), &sigma)?;
    }
    Ok(())
}

/// Full-system generator: dσ/dt = -i[h0 + diag(shift(t)), σ].
struct FullGenerator<'a> {
    system: &'a TightBindingSystem,
    profile: &'a BiasProfile,
    h0: SparseMatrix,
    commutator: CMatrix,
}

impl<'a> FullGenerator<'a> {
    fn new(system: &'a TightBindingSystem, profile: &'a BiasProfile) -> Self {
        let n = system.dim();
        Self {
            system,
            profile,
            h0: SparseMatrix::from_dense(system.h0()),
            commutator: CMatrix::zeros(n, n),
        }
    }
}

impl Generator for FullGenerator<'_> {
    fn rhs(&mut self, t: f64, sigma: &CMatrix, out: &mut CMatrix) -> Result<()> {
        self.h0.commutator_into(sigma, &mut self.commutator);
        let shifts = self.profile.site_shifts_after(self.system.partition(), t);
        let n = sigma.nrows();
        for c in 0..n {
            for r in 0..n {
                let diag = C64::new(shifts[r] - shifts[c], 0.0) * sigma[(r, c)];
                out[(r, c)] = -I * (self.commutator[(r, c)] + diag);
            }
        }
        Ok(())
    }

    fn midpoint(&mut self, t_mid: f64) -> Result<(CMatrix, Option<CMatrix>)> {
        Ok((
            crate::model::apply_bias_after(self.system, self.profile, t_mid),
            None,
        ))
    }
}

pub(crate) fn step_size_check(
    dt: f64,
    h_bound: f64,
    params: &PropagationParams,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let product = dt * h_bound;
    if product > params.step_warning {
        let msg = format!(
            "dt * ||h|| = {product:.3} exceeds {:.3}; expect large integration error",
            params.step_warning
        );
        if params.escalate_step_warning {
            return Err(Error::StepSize(msg));
        }
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(())
}

pub(crate) fn max_bias_bound(system: &TightBindingSystem, profile: &BiasProfile) -> f64 {
    norm_bound(system.h0())
        + profile
            .amplitude_left
            .abs()
            .max(profile.amplitude_right.abs())
}

/// Propagates σ0 and streams every step to `observer`. Nothing is stored.
pub fn propagate_full_with<F>(
    system: &TightBindingSystem,
    profile: &BiasProfile,
    sigma0: &CMatrix,
    params: &PropagationParams,
    observer: F,
) -> Result<TrajectoryMeta>
where
    F: FnMut(usize, f64, &CMatrix) -> Result<()>,
{
    profile.validate()?;
    params.validate()?;
    if sigma0.nrows() != system.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial density matrix",
            expected: system.dim(),
            found: sigma0.nrows(),
        });
    }
    ensure_hermitian(sigma0, "initial density matrix", 1e-10)?;

    let mut warnings = Vec::new();
    step_size_check(
        params.dt,
        max_bias_bound(system, profile),
        params,
        &mut warnings,
    )?;
    let t_end = params.time(params.n_steps);
    let t_rec = system.recurrence_time();
    if t_end > t_rec {
        let msg = format!("run ends at t = {t_end:.3}, past the lead recurrence time {t_rec:.3}");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut gen = FullGenerator::new(system, profile);
    integrate(&mut gen, sigma0, params, observer)?;
    Ok(TrajectoryMeta {
        integrator: params.integrator,
        dt: params.dt,
        n_steps: params.n_steps,
        fingerprint: system.fingerprint(),
        warnings,
    })
}

/// Propagates σ0 and keeps every `params.keep_every`-th matrix (always the last).
pub fn propagate_full(
    system: &TightBindingSystem,
    profile: &BiasProfile,
    sigma0: &CMatrix,
    params: &PropagationParams,
) -> Result<DensityMatrixTrajectory> {
    let mut steps = Vec::new();
    let mut times = Vec::new();
    let mut matrices = Vec::new();
    let keep = params.keep_every.max(1);
    let meta = propagate_full_with(system, profile, sigma0, params, |step, t, sigma| {
        if step % keep == 0 || step == params.n_steps {
            steps.push(step);
            times.push(t);
            matrices.push(sigma.clone());
        }
        Ok(())
    })?;
    Ok(DensityMatrixTrajectory {
        partition: *system.partition(),
        steps,
        times,
        matrices,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hermiticity_defect_fro, real, trace};
    use crate::model::{build_chain_system, ground_state_density_matrix, Partition};

    fn two_site(j: f64) -> TightBindingSystem {
        let h = CMatrix::from_row_slice(2, 2, &[real(0.0), real(j), real(j), real(0.0)]);
        TightBindingSystem::from_hamiltonian(h, Partition::new(1, 1, 0).unwrap()).unwrap()
    }

    #[test]
    fn zero_hamiltonian_is_static() {
        let sys = TightBindingSystem::from_hamiltonian(
            CMatrix::zeros(3, 3),
            Partition::new(1, 1, 1).unwrap(),
        )
        .unwrap();
        let sigma0 = CMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                real(0.3 * i as f64)
            } else {
                real(0.1)
            }
        });
        for integrator in [Integrator::Rk4, Integrator::CrankNicolson] {
            let traj = propagate_full(
                &sys,
                &BiasProfile::zero(),
                &sigma0,
                &PropagationParams::new(0.1, 50, integrator),
            )
            .unwrap();
            assert!(traj.matrices.iter().all(|m| (m - &sigma0).norm() < 1e-15));
        }
    }

    #[test]
    fn commuting_diagonal_case_is_static() {
        let h = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            real(-1.0),
            real(0.5),
            real(2.0),
        ]));
        let sys =
            TightBindingSystem::from_hamiltonian(h, Partition::new(1, 1, 1).unwrap()).unwrap();
        let sigma0 = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            real(1.0),
            real(0.25),
            real(0.0),
        ]));
        let traj = propagate_full(
            &sys,
            &BiasProfile::zero(),
            &sigma0,
            &PropagationParams::new(0.01, 200, Integrator::Rk4),
        )
        .unwrap();
        assert!((traj.last().unwrap() - &sigma0).norm() < 1e-14);
    }

    #[test]
    fn two_level_rabi_oscillation() {
        let j = 0.7;
        let sys = two_site(j);
        let sigma0 = CMatrix::from_row_slice(2, 2, &[real(1.0), real(0.0), real(0.0), real(0.0)]);
        for (integrator, tol) in [(Integrator::Rk4, 1e-11), (Integrator::CrankNicolson, 1e-6)] {
            let params = PropagationParams::new(1e-3, 3000, integrator);
            let traj = propagate_full(&sys, &BiasProfile::zero(), &sigma0, &params).unwrap();
            for (t, m) in traj.times.iter().zip(&traj.matrices) {
                let expected = (j * t).cos().powi(2);
                assert!(
                    (m[(0, 0)].re - expected).abs() < tol,
                    "{integrator:?} t={t}"
                );
            }
        }
    }

    #[test]
    fn rejects_non_hermitian_start() {
        let sys = two_site(1.0);
        let mut sigma0 = CMatrix::identity(2, 2);
        sigma0[(0, 1)] = real(0.3);
        let err = propagate_full(
            &sys,
            &BiasProfile::zero(),
            &sigma0,
            &PropagationParams::new(0.01, 1, Integrator::Rk4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotHermitian { .. }));
    }

    #[test]
    fn step_warning_escalates() {
        let sys = two_site(1.0);
        let sigma0 = CMatrix::identity(2, 2);
        let params = PropagationParams::new(0.5, 1, Integrator::Rk4).strict(true);
        let err = propagate_full(&sys, &BiasProfile::zero(), &sigma0, &params).unwrap_err();
        assert!(matches!(err, Error::StepSize(_)));
        let traj =
            propagate_full(&sys, &BiasProfile::zero(), &sigma0, &params.strict(false)).unwrap();
        assert_eq!(traj.meta.warnings.len(), 1);
    }

    #[test]
    fn trace_additivity_and_decoupled_lead() {
        let sys = build_chain_system(20, 4, 20, -1.0, 0.0).unwrap();
        let sigma0 = ground_state_density_matrix(&sys, 22, false).unwrap();
        let params = PropagationParams::new(0.01, 10, Integrator::Rk4);
        let traj =
            propagate_full(&sys, &BiasProfile::symmetric_step(0.5), &sigma0, &params).unwrap();
        let total: f64 = [Lead::Left, Lead::Right]
            .iter()
            .map(|&l| lead_occupation_sum(&traj, l, 0).unwrap())
            .sum::<f64>()
            + block_trace(&traj.matrices[0], &traj.partition, Region::Device).re;
        assert!((total - 22.0).abs() < 1e-12);

        // cut the couplings: the left lead occupation cannot change
        let cut = sys
            .clone()
            .with_bond(19, 20, 0.0)
            .unwrap()
            .with_bond(23, 24, 0.0)
            .unwrap();
        let sigma0 = crate::model::ground_state_density_matrix(&cut, 20, true).unwrap();
        let traj =
            propagate_full(&cut, &BiasProfile::symmetric_step(0.5), &sigma0, &params).unwrap();
        let first = lead_occupation_sum(&traj, Lead::Left, 0).unwrap();
        for step in traj.steps.clone() {
            assert!((lead_occupation_sum(&traj, Lead::Left, step).unwrap() - first).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_every_stores_last() {
        let sys = two_site(1.0);
        let sigma0 = CMatrix::identity(2, 2);
        let traj = propagate_full(
            &sys,
            &BiasProfile::zero(),
            &sigma0,
            &PropagationParams::new(0.01, 10, Integrator::Rk4).keep_every(4),
        )
        .unwrap();
        assert_eq!(traj.steps, vec![0, 4, 8, 10]);
        assert!(lead_occupation_sum(&traj, Lead::Left, 3).is_err());
    }

    #[test]
    fn crank_nicolson_hermitian_and_trace_preserving() {
        let sys = build_chain_system(6, 2, 6, -1.0, 0.0).unwrap();
        let sigma0 = ground_state_density_matrix(&sys, 7, false).unwrap();
        let traj = propagate_full(
            &sys,
            &BiasProfile::symmetric_ramp(0.4, 0.5),
            &sigma0,
            &PropagationParams::new(0.01, 500, Integrator::CrankNicolson),
        )
        .unwrap();
        let last = traj.last().unwrap();
        assert!(hermiticity_defect_fro(last) < 1e-13);
        assert!((trace(last).re - 7.0).abs() < 1e-11);
        assert!((last * last - last).norm() < 1e-10);
    }
}
