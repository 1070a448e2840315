//! Per-frame convex spotforming and the streaming pipeline.
//!
//! Each windowed reference frame is rewritten by solving
//!
//!   minimize    sum_k alpha_k || L^H(w_k) conj(s_k) ||_2
//!   subject to  s = zero-padded DFT of a real N_t x L frame,
//!               sum_k w_{p,k}^2 | V_{p,k}^T s_k - masker_{p,k} |^2 <= d
//!               for every control point p,
//!
//! where L L^H is the region covariance, V the loudspeaker-to-control-point
//! transfers and w the inverse masking curve. The problem is a second-order
//! cone program; a generic sparse interior-point solver cannot exploit the
//! per-bin block structure (the DFT coupling densifies its KKT factor), so
//! frames are solved with an operator-splitting method specialized to this
//! problem:
//!
//! * consensus ADMM over (spectrum, objective splits, budget splits,
//!   support copy), with conjugate pairs folded into bins 0..=N/2;
//! * the spectrum update is a closed-form 2L x 2L solve per bin, factored
//!   once per frame (the factor is penalty-independent);
//! * the support copy is projected onto "spectra of real time-limited
//!   frames" by FFT, which is an exact orthogonal projection;
//! * objective splits use block soft-thresholding, budget splits a ball
//!   projection.
//!
//! The returned frame is post-processed so the contract holds exactly, not
//! just to solver tolerance: the candidate is pulled toward the reference
//! frame until every budget constraint is satisfied (constraints are
//! quadratic along that segment and vanish at the reference, which always
//! reproduces the maskers), and the reference frame itself is returned
//! whenever it scores a better objective. Output frames are real by
//! construction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::sync::Arc;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::acoustics::Point3;
use crate::covariance::{QuadratureOrders, RegionCovariance, TorusDistribution};
use crate::error::{Error, Result};
use crate::framing::{
    fft_forward, fft_inverse, forward_spectrum, make_frames, overlap_add, FrameGrid, TimeFrame,
};
use crate::perceptual::{
    calibrate, control_point_masker, CalibrationStimulus, ControlPoint, MaskingModel,
};

/// Scene-independent data shared by every frame solve: covariance factors,
/// control-point transfers, masking model and the objective band weighting.
#[derive(Debug, Clone)]
pub struct SpotformerModel {
    grid: FrameGrid,
    channels: usize,
    /// Adjoint covariance factors per folded bin: B_k = L^H(w_k), each L x L.
    factors_adj: Arc<Vec<DMatrix<Complex64>>>,
    points: Vec<ControlPoint>,
    masking: MaskingModel,
    /// Objective band weight per full-spectrum bin.
    alpha: Vec<f64>,
}

impl SpotformerModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: &FrameGrid,
        loudspeakers: &[Point3],
        dist: &TorusDistribution,
        orders: QuadratureOrders,
        reverb_beta: f64,
        control_positions: &[Point3],
        stimulus: &CalibrationStimulus,
        alpha_cutoff_hz: f64,
        c: f64,
    ) -> Result<Self> {
        if loudspeakers.is_empty() {
            return Err(Error::Config("at least one loudspeaker required".into()));
        }
        if control_positions.is_empty() {
            return Err(Error::Config("at least one control point required".into()));
        }
        let covariance =
            RegionCovariance::build(grid, loudspeakers, dist, orders, reverb_beta, c)?;
        let factors_adj = Arc::new(
            (0..covariance.half_bins())
                .map(|k| covariance.factor(k).adjoint())
                .collect::<Vec<_>>(),
        );
        let points = control_positions
            .iter()
            .map(|p| ControlPoint::new(*p, loudspeakers, grid, c))
            .collect::<Result<Vec<_>>>()?;
        let calib = calibrate(grid, stimulus)?;
        let masking = MaskingModel::new(grid, &calib)?;
        let alpha = (0..grid.fft_len())
            .map(|k| if grid.bin_hz(k).abs() <= alpha_cutoff_hz { 0.0 } else { 1.0 })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            channels: loudspeakers.len(),
            factors_adj,
            points,
            masking,
            alpha,
        })
    }

    pub fn grid(&self) -> &FrameGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn control_points(&self) -> &[ControlPoint] {
        &self.points
    }

    pub fn masking(&self) -> &MaskingModel {
        &self.masking
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Per-control-point folded data: transfer rows, inverse masking weights and
/// masker values for bins 0..=N/2.
#[derive(Debug, Clone)]
struct PointData {
    /// `transfer[k * L + l]`.
    transfer: Vec<Complex64>,
    /// `weights[k]`.
    weights: Vec<f64>,
    /// `masker[k]`.
    masker: Vec<Complex64>,
}

/// One frame's convex problem: reference spectra, covariance factors,
/// control-point constraints and the distortion budget.
#[derive(Debug, Clone)]
pub struct FrameProblem {
    grid: FrameGrid,
    channels: usize,
    factors_adj: Arc<Vec<DMatrix<Complex64>>>,
    alpha_folded: Vec<f64>,
    points: Vec<PointData>,
    d: f64,
    ref_frame: TimeFrame,
    /// Folded reference spectra, `[k * L + l]`.
    ref_spec: Vec<Complex64>,
}

/// Assemble the per-frame problem from a windowed reference frame.
///
/// `alpha` overrides the model's objective band weighting; it must cover all
/// N bins and be symmetric across conjugate pairs.
pub fn build_frame_problem(
    ref_frame: &TimeFrame,
    model: &SpotformerModel,
    d: f64,
    alpha: Option<&[f64]>,
) -> Result<FrameProblem> {
    let grid = &model.grid;
    let n = grid.fft_len();
    let half = grid.half_bins();
    let l_ch = model.channels;
    if ref_frame.len() != grid.frame_len() || ref_frame.channels() != l_ch {
        return Err(Error::Structure(format!(
            "reference frame is {}x{}, model expects {}x{}",
            ref_frame.len(),
            ref_frame.channels(),
            grid.frame_len(),
            l_ch
        )));
    }
    if !(d >= 0.0) {
        return Err(Error::Parameter(format!("budget d must be >= 0 (got {d})")));
    }
    let alpha_full = match alpha {
        Some(a) => {
            if a.len() != n {
                return Err(Error::Structure(format!(
                    "alpha has {} entries, expected {n}",
                    a.len()
                )));
            }
            for k in 1..n {
                if (a[k] - a[n - k]).abs() > 1e-12 || a[k] < 0.0 {
                    return Err(Error::Parameter(
                        "alpha must be nonnegative and symmetric across conjugate bins".into(),
                    ));
                }
            }
            a.to_vec()
        }
        None => model.alpha.clone(),
    };
    let spec = forward_spectrum(ref_frame, grid)?;
    let mut ref_spec = vec![Complex64::default(); half * l_ch];
    for k in 0..half {
        for l in 0..l_ch {
            ref_spec[k * l_ch + l] = spec.bins[(k, l)];
        }
    }
    let mut points = Vec::with_capacity(model.points.len());
    for cp in &model.points {
        let masker_full = control_point_masker(&spec, cp)?;
        let w = model.masking.weights(&masker_full)?;
        let mut transfer = vec![Complex64::default(); half * l_ch];
        for k in 0..half {
            for l in 0..l_ch {
                transfer[k * l_ch + l] = cp.transfer[l][k];
            }
        }
        points.push(PointData {
            transfer,
            weights: w.values()[..half].to_vec(),
            masker: masker_full[..half].to_vec(),
        });
    }
    Ok(FrameProblem {
        grid: grid.clone(),
        channels: l_ch,
        factors_adj: Arc::clone(&model.factors_adj),
        alpha_folded: alpha_full[..half].to_vec(),
        points,
        d,
        ref_frame: ref_frame.clone(),
        ref_spec,
    })
}

impl FrameProblem {
    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn control_point_count(&self) -> usize {
        self.points.len()
    }

    pub fn ref_frame(&self) -> &TimeFrame {
        &self.ref_frame
    }

    /// Folded masker at control point `p`.
    pub fn masker(&self, p: usize) -> &[Complex64] {
        &self.points[p].masker
    }

    /// Folded inverse masking weights at control point `p`.
    pub fn weights(&self, p: usize) -> &[f64] {
        &self.points[p].weights
    }

    fn folded_spectrum(&self, frame: &TimeFrame) -> Result<Vec<Complex64>> {
        let spec = forward_spectrum(frame, &self.grid)?;
        let half = self.grid.half_bins();
        let l = self.channels;
        let mut out = vec![Complex64::default(); half * l];
        for k in 0..half {
            for ch in 0..l {
                out[k * l + ch] = spec.bins[(k, ch)];
            }
        }
        Ok(out)
    }

    fn objective_of_spec(&self, folded: &[Complex64]) -> f64 {
        let half = self.grid.half_bins();
        let l = self.channels;
        let mut total = 0.0;
        for k in 0..half {
            let a = self.alpha_folded[k];
            if a == 0.0 {
                continue;
            }
            let b = &self.factors_adj[k];
            let mut norm_sq = 0.0;
            for i in 0..l {
                let mut acc = Complex64::default();
                for j in 0..l {
                    acc += b[(i, j)] * folded[k * l + j].conj();
                }
                norm_sq += acc.norm_sqr();
            }
            total += self.grid.fold_weight(k) * a * norm_sq.sqrt();
        }
        total
    }

    fn distortion_of_spec(&self, folded: &[Complex64], p: usize) -> f64 {
        let half = self.grid.half_bins();
        let l = self.channels;
        let pt = &self.points[p];
        let mut total = 0.0;
        for k in 0..half {
            let mut recv = Complex64::default();
            for ch in 0..l {
                recv += pt.transfer[k * l + ch] * folded[k * l + ch];
            }
            let e = recv - pt.masker[k];
            total += self.grid.fold_weight(k) * pt.weights[k].powi(2) * e.norm_sqr();
        }
        total
    }

    /// Objective value of an arbitrary frame (full-spectrum sum).
    pub fn objective_of(&self, frame: &TimeFrame) -> Result<f64> {
        Ok(self.objective_of_spec(&self.folded_spectrum(frame)?))
    }

    /// Distortion of an arbitrary frame at control point `p`.
    pub fn distortion_of(&self, frame: &TimeFrame, p: usize) -> Result<f64> {
        Ok(self.distortion_of_spec(&self.folded_spectrum(frame)?, p))
    }

    /// Received folded spectrum of `frame` at control point `p`.
    pub fn received_at(&self, frame: &TimeFrame, p: usize) -> Result<Vec<Complex64>> {
        let folded = self.folded_spectrum(frame)?;
        let half = self.grid.half_bins();
        let l = self.channels;
        let pt = &self.points[p];
        Ok((0..half)
            .map(|k| {
                (0..l)
                    .map(|ch| pt.transfer[k * l + ch] * folded[k * l + ch])
                    .sum()
            })
            .collect())
    }
}

/// Termination state of a frame solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    InfeasibleNumerics,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverStatus::Optimal => write!(f, "optimal"),
            SolverStatus::MaxIter => write!(f, "max_iter"),
            SolverStatus::InfeasibleNumerics => write!(f, "infeasible_numerics"),
        }
    }
}

/// Solver tuning knobs.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub rho: f64,
    pub over_relax: f64,
    pub check_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 6000,
            eps_abs: 1e-10,
            eps_rel: 1e-7,
            rho: 1.0,
            over_relax: 1.7,
            check_every: 25,
        }
    }
}

/// Solved frame: the windowed loudspeaker frame, its objective, the worst
/// budget overshoot (max_p D_p - d, negative when strictly feasible) and the
/// solver outcome.
#[derive(Debug, Clone)]
pub struct FrameSolution {
    pub frame: TimeFrame,
    pub objective: f64,
    pub ref_objective: f64,
    pub max_constraint_residual: f64,
    pub status: SolverStatus,
    pub iterations: usize,
}

/// Budgets below this are treated as this value to avoid degenerate cones.
const MIN_BUDGET: f64 = 1e-12;

/// Solve one frame problem.
pub fn solve_frame(problem: &FrameProblem, opts: &SolverOptions) -> Result<FrameSolution> {
    let ref_objective = problem.objective_of_spec(&problem.ref_spec);
    // A silent frame reproduces its (zero) maskers with zero objective.
    if problem.ref_frame.samples.iter().all(|&v| v == 0.0) {
        return Ok(FrameSolution {
            frame: problem.ref_frame.clone(),
            objective: 0.0,
            ref_objective,
            max_constraint_residual: -problem.d.max(MIN_BUDGET),
            status: SolverStatus::Optimal,
            iterations: 0,
        });
    }
    let mut admm = AdmmState::new(problem, opts)?;
    let (status, iterations) = admm.run(opts);
    let candidate = admm.extract_frame();
    finish(problem, candidate, ref_objective, status, iterations)
}

/// Exact post-processing: restore feasibility along the segment toward the
/// reference frame, then enforce reference dominance.
fn finish(
    problem: &FrameProblem,
    candidate: TimeFrame,
    ref_objective: f64,
    status: SolverStatus,
    iterations: usize,
) -> Result<FrameSolution> {
    let d_eff = problem.d.max(MIN_BUDGET);
    let cand_spec = problem.folded_spectrum(&candidate)?;
    // D_p(ref + t * delta) = t^2 * D_p(candidate): quadratic, zero at the
    // reference because the maskers are defined by the reference spectra.
    let mut shrink: f64 = 1.0;
    for p in 0..problem.points.len() {
        let dp = problem.distortion_of_spec(&cand_spec, p);
        if dp > d_eff {
            shrink = shrink.min((d_eff / dp).sqrt() * (1.0 - 1e-12));
        }
    }
    let mut frame = if shrink < 1.0 {
        let mut f = problem.ref_frame.clone();
        let rows = f.samples.nrows();
        let cols = f.samples.ncols();
        for ch in 0..cols {
            for t in 0..rows {
                let r = problem.ref_frame.samples[(t, ch)];
                f.samples[(t, ch)] = r + shrink * (candidate.samples[(t, ch)] - r);
            }
        }
        f
    } else {
        candidate
    };
    let mut spec = problem.folded_spectrum(&frame)?;
    let mut objective = problem.objective_of_spec(&spec);
    if !objective.is_finite() || objective > ref_objective {
        frame = problem.ref_frame.clone();
        spec = problem.ref_spec.clone();
        objective = ref_objective;
    }
    let mut residual = f64::NEG_INFINITY;
    for p in 0..problem.points.len() {
        residual = residual.max(problem.distortion_of_spec(&spec, p) - d_eff);
    }
    Ok(FrameSolution {
        frame,
        objective,
        ref_objective,
        max_constraint_residual: residual,
        status,
        iterations,
    })
}

/// Flat complex state of the splitting method. Indexing: spectra are
/// `[k * L + l]` over folded bins k, budget splits `[p * K + k]`.
struct AdmmState<'a> {
    problem: &'a FrameProblem,
    half: usize,
    l_ch: usize,
    n_fft: usize,
    frame_len: usize,
    d_ball: f64,
    /// Global amplitude scale (reference RMS) removed from the iterates.
    sigma: f64,
    /// Objective operator scale removed from the covariance factors.
    sigma_b: f64,
    /// sqrt of the fold multiplicity per bin.
    sc: Vec<f64>,
    /// Scaled constraint rows: w[p*K+k] / sigma_g, transfers as given.
    w_scaled: Vec<f64>,
    /// Scaled masker targets m_hat[p*K+k].
    m_hat: Vec<Complex64>,
    /// Prox weight per active objective bin (0 for inactive).
    obj_weight: Vec<f64>,
    /// Per-bin normal-equation factors (2L x 2L).
    chol: Vec<Cholesky<f64, Dyn>>,
    rho: f64,
    // iterates
    zs: Vec<Complex64>,
    y: Vec<Complex64>,
    lam: Vec<Complex64>,
    u: Vec<Complex64>,
    mu: Vec<Complex64>,
    s: Vec<Complex64>,
    nu: Vec<Complex64>,
    // caches
    ax: Vec<Complex64>,
    gx: Vec<Complex64>,
    fft_buf: Vec<Complex64>,
    rhs: DVector<f64>,
    sol: DVector<f64>,
    y_prev: Vec<Complex64>,
    u_prev: Vec<Complex64>,
    s_prev: Vec<Complex64>,
}

impl<'a> AdmmState<'a> {
    fn new(problem: &'a FrameProblem, opts: &SolverOptions) -> Result<Self> {
        let grid = &problem.grid;
        let half = grid.half_bins();
        let l_ch = problem.channels;
        let n_fft = grid.fft_len();
        let p_cnt = problem.points.len();
        let d_eff = problem.d.max(MIN_BUDGET);

        let sc: Vec<f64> = (0..half).map(|k| grid.fold_weight(k).sqrt()).collect();

        // Reference in scaled folded coordinates.
        let mut zs_ref = vec![Complex64::default(); half * l_ch];
        for k in 0..half {
            for l in 0..l_ch {
                zs_ref[k * l_ch + l] = problem.ref_spec[k * l_ch + l] * sc[k];
            }
        }
        // Global scale: unit RMS reference.
        let sigma = {
            let ss: f64 = zs_ref.iter().map(|v| v.norm_sqr()).sum();
            (ss / zs_ref.len() as f64).sqrt().max(1e-300)
        };
        for v in zs_ref.iter_mut() {
            *v /= sigma;
        }
        // Objective operator scale.
        let mut b_norm_acc = 0.0;
        let mut b_cnt = 0usize;
        for k in 0..half {
            if problem.alpha_folded[k] > 0.0 {
                b_norm_acc += problem.factors_adj[k].norm();
                b_cnt += 1;
            }
        }
        let sigma_b = if b_cnt > 0 { (b_norm_acc / b_cnt as f64).max(1e-300) } else { 1.0 };
        // Constraint row scale.
        let mut g_acc = 0.0;
        for (p, pt) in problem.points.iter().enumerate() {
            let _ = p;
            for k in 0..half {
                let mut vn = 0.0;
                for l in 0..l_ch {
                    vn += pt.transfer[k * l_ch + l].norm_sqr();
                }
                g_acc += (pt.weights[k] * vn.sqrt()).powi(2);
            }
        }
        let sigma_g = (g_acc / (p_cnt * half) as f64).sqrt().max(1e-300);

        let mut w_scaled = vec![0.0f64; p_cnt * half];
        let mut m_hat = vec![Complex64::default(); p_cnt * half];
        for (p, pt) in problem.points.iter().enumerate() {
            for k in 0..half {
                let w = pt.weights[k] / sigma_g;
                w_scaled[p * half + k] = w;
                m_hat[p * half + k] = pt.masker[k] * (sc[k] * w / sigma);
            }
        }
        let d_ball = (d_eff).sqrt() / (sigma * sigma_g);

        let obj_weight: Vec<f64> = (0..half)
            .map(|k| problem.alpha_folded[k] * sc[k] * sigma_b)
            .collect();

        // Per-bin normal matrices H_k = I + [active] lift(conj(B^H B / sb^2))
        // + sum_p lift(w^2 vbar v^T), factored once.
        let two_l = 2 * l_ch;
        let mut chol = Vec::with_capacity(half);
        for k in 0..half {
            let mut h = DMatrix::<f64>::identity(two_l, two_l);
            if problem.alpha_folded[k] > 0.0 {
                let b = problem.factors_adj[k].map(|v| v / sigma_b);
                let c = b.adjoint() * &b;
                for i in 0..l_ch {
                    for j in 0..l_ch {
                        let cr = c[(i, j)].re;
                        let ci = c[(i, j)].im;
                        // map zeta -> conj(C conj(zeta)) = conj(C) zeta
                        h[(i, j)] += cr;
                        h[(i, j + l_ch)] += ci;
                        h[(i + l_ch, j)] += -ci;
                        h[(i + l_ch, j + l_ch)] += cr;
                    }
                }
            }
            for (p, _) in problem.points.iter().enumerate() {
                let w = w_scaled[p * half + k];
                if w == 0.0 {
                    continue;
                }
                let base = k * l_ch;
                for i in 0..l_ch {
                    let vi = problem.points[p].transfer[base + i];
                    for j in 0..l_ch {
                        let vj = problem.points[p].transfer[base + j];
                        // D = w^2 vbar v^T (Hermitian)
                        let dij = vi.conj() * vj * (w * w);
                        h[(i, j)] += dij.re;
                        h[(i, j + l_ch)] += -dij.im;
                        h[(i + l_ch, j)] += dij.im;
                        h[(i + l_ch, j + l_ch)] += dij.re;
                    }
                }
            }
            let f = Cholesky::new(h).ok_or_else(|| {
                Error::Numeric(format!("per-bin normal matrix not SPD at bin {k}"))
            })?;
            chol.push(f);
        }

        let zs = zs_ref.clone();
        let mut state = Self {
            problem,
            half,
            l_ch,
            n_fft,
            frame_len: grid.frame_len(),
            d_ball,
            sigma,
            sigma_b,
            sc,
            w_scaled,
            m_hat,
            obj_weight,
            chol,
            rho: opts.rho,
            ax: vec![Complex64::default(); half * l_ch],
            gx: vec![Complex64::default(); p_cnt * half],
            y: vec![Complex64::default(); half * l_ch],
            lam: vec![Complex64::default(); half * l_ch],
            u: vec![Complex64::default(); p_cnt * half],
            mu: vec![Complex64::default(); p_cnt * half],
            s: zs.clone(),
            nu: vec![Complex64::default(); half * l_ch],
            y_prev: vec![Complex64::default(); half * l_ch],
            u_prev: vec![Complex64::default(); p_cnt * half],
            s_prev: zs.clone(),
            fft_buf: vec![Complex64::default(); n_fft],
            rhs: DVector::zeros(two_l),
            sol: DVector::zeros(two_l),
            zs,
        };
        state.apply_a();
        let ax0 = state.ax.clone();
        state.y.copy_from_slice(&ax0);
        state.apply_g();
        // u0 = G zs_ref - m_hat = 0 exactly at the reference
        for v in state.u.iter_mut() {
            *v = Complex64::default();
        }
        Ok(state)
    }

    /// ax[k*L+i] = sum_j B[k](i,j) conj(zs[k*L+j]) / sigma_b, active bins only.
    fn apply_a(&mut self) {
        let l = self.l_ch;
        for k in 0..self.half {
            if self.problem.alpha_folded[k] == 0.0 {
                continue;
            }
            let b = &self.problem.factors_adj[k];
            for i in 0..l {
                let mut acc = Complex64::default();
                for j in 0..l {
                    acc += b[(i, j)] * self.zs[k * l + j].conj();
                }
                self.ax[k * l + i] = acc / self.sigma_b;
            }
        }
    }

    /// gx[p*K+k] = w_scaled * V^T zs at bin k.
    fn apply_g(&mut self) {
        let l = self.l_ch;
        let half = self.half;
        for (p, pt) in self.problem.points.iter().enumerate() {
            for k in 0..half {
                let mut acc = Complex64::default();
                let base = k * l;
                for ch in 0..l {
                    acc += pt.transfer[base + ch] * self.zs[base + ch];
                }
                self.gx[p * half + k] = acc * self.w_scaled[p * half + k];
            }
        }
    }

    /// Orthogonal projection of `input` onto spectra of real, time-limited
    /// frames, in scaled folded coordinates.
    fn project_support(&mut self, input: &[Complex64], out: &mut [Complex64]) {
        let l = self.l_ch;
        let n = self.n_fft;
        let half = self.half;
        for ch in 0..l {
            for k in 0..half {
                let zeta = input[k * l + ch] / self.sc[k];
                self.fft_buf[k] = zeta;
                if k != 0 && k != n / 2 {
                    self.fft_buf[n - k] = zeta.conj();
                }
            }
            fft_inverse(&mut self.fft_buf);
            for t in 0..n {
                self.fft_buf[t] = if t < self.frame_len {
                    Complex64::new(self.fft_buf[t].re, 0.0)
                } else {
                    Complex64::default()
                };
            }
            fft_forward(&mut self.fft_buf);
            for k in 0..half {
                out[k * l + ch] = self.fft_buf[k] * self.sc[k];
            }
        }
    }

    fn run(&mut self, opts: &SolverOptions) -> (SolverStatus, usize) {
        let l = self.l_ch;
        let half = self.half;
        let p_cnt = self.problem.points.len();
        let alpha_or = opts.over_relax;
        let mut proj_buf = vec![Complex64::default(); half * l];
        let dim_pri =
            (2 * (half * l) + 2 * (p_cnt * half) + 2 * (half * l)) as f64;
        let dim_dual = (2 * half * l) as f64;
        let mut status = SolverStatus::MaxIter;
        let mut iterations = opts.max_iter;

        for it in 0..opts.max_iter {
            // --- zs update: per-bin solves against the three split targets
            for k in 0..half {
                let active = self.problem.alpha_folded[k] > 0.0;
                let base = k * l;
                // complex rhs = [active] conj(B^H t_y)/sigma_b
                //               + sum_p w conj(v) t_u + t_s
                for i in 0..l {
                    let mut acc = self.s[base + i] - self.nu[base + i];
                    if active {
                        let b = &self.problem.factors_adj[k];
                        let mut a = Complex64::default();
                        for r in 0..l {
                            let t = self.y[base + r] - self.lam[base + r];
                            a += (b[(r, i)].conj() * t).conj();
                        }
                        acc += a / self.sigma_b;
                    }
                    for p in 0..p_cnt {
                        let w = self.w_scaled[p * half + k];
                        if w == 0.0 {
                            continue;
                        }
                        let t = self.m_hat[p * half + k] + self.u[p * half + k]
                            - self.mu[p * half + k];
                        let v = self.problem.points[p].transfer[base + i];
                        acc += v.conj() * t * w;
                    }
                    self.rhs[i] = acc.re;
                    self.rhs[i + l] = acc.im;
                }
                self.sol.copy_from(&self.rhs);
                self.chol[k].solve_mut(&mut self.sol);
                for i in 0..l {
                    self.zs[base + i] = Complex64::new(self.sol[i], self.sol[i + l]);
                }
            }

            self.apply_a();
            self.apply_g();
            self.y_prev.copy_from_slice(&self.y);
            self.u_prev.copy_from_slice(&self.u);
            self.s_prev.copy_from_slice(&self.s);

            // --- y: block soft threshold per active bin (over-relaxed)
            for k in 0..half {
                if self.problem.alpha_folded[k] == 0.0 {
                    continue;
                }
                let base = k * l;
                let thresh = self.obj_weight[k] / self.rho;
                let mut norm_sq = 0.0;
                for i in 0..l {
                    let relaxed =
                        alpha_or * self.ax[base + i] + (1.0 - alpha_or) * self.y_prev[base + i];
                    let t = relaxed + self.lam[base + i];
                    self.y[base + i] = t;
                    norm_sq += t.norm_sqr();
                }
                let nrm = norm_sq.sqrt();
                let scale = if nrm > thresh { 1.0 - thresh / nrm } else { 0.0 };
                for i in 0..l {
                    let t = self.y[base + i];
                    self.y[base + i] = t * scale;
                    self.lam[base + i] = t - self.y[base + i];
                }
            }

            // --- u: ball projection per control point (over-relaxed)
            for p in 0..p_cnt {
                let base = p * half;
                let mut norm_sq = 0.0;
                for k in 0..half {
                    let gval = self.gx[base + k] - self.m_hat[base + k];
                    let relaxed = alpha_or * gval + (1.0 - alpha_or) * self.u_prev[base + k];
                    let t = relaxed + self.mu[base + k];
                    self.u[base + k] = t;
                    norm_sq += t.norm_sqr();
                }
                let nrm = norm_sq.sqrt();
                let scale = if nrm > self.d_ball { self.d_ball / nrm } else { 1.0 };
                for k in 0..half {
                    let t = self.u[base + k];
                    self.u[base + k] = t * scale;
                    self.mu[base + k] = t - self.u[base + k];
                }
            }

            // --- s: support projection (over-relaxed)
            for i in 0..half * l {
                proj_buf[i] = alpha_or * self.zs[i] + (1.0 - alpha_or) * self.s_prev[i]
                    + self.nu[i];
            }
            let input = proj_buf.clone();
            let mut s_new = std::mem::take(&mut self.s);
            self.project_support(&input, &mut s_new);
            self.s = s_new;
            for i in 0..half * l {
                self.nu[i] = proj_buf[i] - self.s[i];
            }

            if (it + 1) % opts.check_every == 0 || it + 1 == opts.max_iter {
                let (pres, dres, pscale, dscale) = self.residuals();
                let eps_pri = dim_pri.sqrt() * opts.eps_abs + opts.eps_rel * pscale;
                let eps_dua = dim_dual.sqrt() * opts.eps_abs + opts.eps_rel * dscale;
                if !pres.is_finite() || !dres.is_finite() {
                    return (SolverStatus::InfeasibleNumerics, it + 1);
                }
                if pres <= eps_pri && dres <= eps_dua {
                    status = SolverStatus::Optimal;
                    iterations = it + 1;
                    break;
                }
                // residual balancing keeps the penalty useful for both
                if pres > 10.0 * dres && self.rho < 1e6 {
                    self.rho *= 2.0;
                    self.rescale_duals(0.5);
                } else if dres > 10.0 * pres && self.rho > 1e-6 {
                    self.rho *= 0.5;
                    self.rescale_duals(2.0);
                }
            }
        }
        (status, iterations)
    }

    fn rescale_duals(&mut self, f: f64) {
        for v in self.lam.iter_mut() {
            *v *= f;
        }
        for v in self.mu.iter_mut() {
            *v *= f;
        }
        for v in self.nu.iter_mut() {
            *v *= f;
        }
    }

    /// Primal and dual residual norms plus their scale references.
    fn residuals(&mut self) -> (f64, f64, f64, f64) {
        let l = self.l_ch;
        let half = self.half;
        let p_cnt = self.problem.points.len();
        let mut pres = 0.0;
        let mut ax_norm = 0.0;
        let mut split_norm = 0.0;
        for k in 0..half {
            if self.problem.alpha_folded[k] == 0.0 {
                continue;
            }
            for i in 0..l {
                let idx = k * l + i;
                pres += (self.ax[idx] - self.y[idx]).norm_sqr();
                ax_norm += self.ax[idx].norm_sqr();
                split_norm += self.y[idx].norm_sqr();
            }
        }
        for p in 0..p_cnt {
            for k in 0..half {
                let idx = p * half + k;
                let g = self.gx[idx] - self.m_hat[idx];
                pres += (g - self.u[idx]).norm_sqr();
                ax_norm += g.norm_sqr();
                split_norm += self.u[idx].norm_sqr();
            }
        }
        for i in 0..half * l {
            pres += (self.zs[i] - self.s[i]).norm_sqr();
            ax_norm += self.zs[i].norm_sqr();
            split_norm += self.s[i].norm_sqr();
        }
        // dual residual: rho * || A^T dy + G^T du + ds || over the zs space
        let mut dres = 0.0;
        let mut dual_scale = 0.0;
        for k in 0..half {
            let base = k * l;
            let active = self.problem.alpha_folded[k] > 0.0;
            for i in 0..l {
                let mut acc = self.s[base + i] - self.s_prev[base + i];
                let mut dsc = self.nu[base + i];
                if active {
                    let b = &self.problem.factors_adj[k];
                    let mut a = Complex64::default();
                    let mut asc = Complex64::default();
                    for r in 0..l {
                        a += (b[(r, i)].conj() * (self.y[base + r] - self.y_prev[base + r]))
                            .conj();
                        asc += (b[(r, i)].conj() * self.lam[base + r]).conj();
                    }
                    acc += a / self.sigma_b;
                    dsc += asc / self.sigma_b;
                }
                for p in 0..p_cnt {
                    let w = self.w_scaled[p * half + k];
                    if w == 0.0 {
                        continue;
                    }
                    let v = self.problem.points[p].transfer[base + i];
                    acc += v.conj() * (self.u[p * half + k] - self.u_prev[p * half + k]) * w;
                    dsc += v.conj() * self.mu[p * half + k] * w;
                }
                dres += acc.norm_sqr();
                dual_scale += dsc.norm_sqr();
            }
        }
        (
            pres.sqrt(),
            self.rho * dres.sqrt(),
            ax_norm.sqrt().max(split_norm.sqrt()),
            self.rho * dual_scale.sqrt(),
        )
    }

    /// Time-domain frame from the support copy (exactly real and
    /// time-limited by construction of the projection).
    fn extract_frame(&mut self) -> TimeFrame {
        let l = self.l_ch;
        let n = self.n_fft;
        let mut frame = DMatrix::zeros(self.frame_len, l);
        for ch in 0..l {
            for k in 0..self.half {
                let zeta = self.s[k * l + ch] * (self.sigma / self.sc[k]);
                self.fft_buf[k] = zeta;
                if k != 0 && k != n / 2 {
                    self.fft_buf[n - k] = zeta.conj();
                }
            }
            fft_inverse(&mut self.fft_buf);
            for t in 0..self.frame_len {
                frame[(t, ch)] = self.fft_buf[t].re;
            }
        }
        TimeFrame { samples: frame }
    }
}

/// Per-frame log entry of a pipeline run.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: usize,
    pub objective: f64,
    pub ref_objective: f64,
    pub residual: f64,
    pub status: SolverStatus,
    pub iterations: usize,
}

/// What to do when a frame solve errors out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    FailFast,
    FallbackToReference,
}

/// Pipeline options.
#[derive(Debug, Clone)]
pub struct ProcessOptions {
    pub bypass: bool,
    pub solver: SolverOptions,
    pub policy: FailurePolicy,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        Self {
            bypass: false,
            solver: SolverOptions::default(),
            policy: FailurePolicy::FallbackToReference,
        }
    }
}

/// Frame-by-frame spotforming of multichannel reference playback.
///
/// Analyzes the reference, solves every frame problem at budget `d`,
/// synthesizes by overlap-add and trims to the input length. Frames are
/// independent and solved in parallel with deterministic ordering. In
/// bypass mode the solve is skipped and the input is reproduced.
pub fn process_signals(
    ref_signals: &[Vec<f64>],
    model: &SpotformerModel,
    d: f64,
    opts: &ProcessOptions,
) -> Result<(Vec<Vec<f64>>, Vec<FrameRecord>)> {
    if ref_signals.len() != model.channels {
        return Err(Error::Structure(format!(
            "{} input channels, model expects {}",
            ref_signals.len(),
            model.channels
        )));
    }
    let input_len = ref_signals[0].len();
    let frames = make_frames(ref_signals, &model.grid)?;
    if frames.is_empty() {
        return Ok((vec![Vec::new(); ref_signals.len()], Vec::new()));
    }
    let (out_frames, records): (Vec<TimeFrame>, Vec<FrameRecord>) = if opts.bypass {
        (frames, Vec::new())
    } else {
        let solved: Vec<(TimeFrame, FrameRecord)> = frames
            .par_iter()
            .enumerate()
            .map(|(index, frame)| solve_one(index, frame, model, d, opts))
            .collect::<Result<_>>()?;
        solved.into_iter().unzip()
    };
    let mut out = overlap_add(&out_frames, &model.grid)?;
    for ch in out.iter_mut() {
        ch.truncate(input_len);
        while ch.len() < input_len {
            ch.push(0.0);
        }
    }
    Ok((out, records))
}

fn solve_one(
    index: usize,
    frame: &TimeFrame,
    model: &SpotformerModel,
    d: f64,
    opts: &ProcessOptions,
) -> Result<(TimeFrame, FrameRecord)> {
    let attempt = build_frame_problem(frame, model, d, None)
        .and_then(|problem| solve_frame(&problem, &opts.solver));
    match attempt {
        Ok(sol) => {
            let record = FrameRecord {
                index,
                objective: sol.objective,
                ref_objective: sol.ref_objective,
                residual: sol.max_constraint_residual,
                status: sol.status,
                iterations: sol.iterations,
            };
            Ok((sol.frame, record))
        }
        Err(e) => match opts.policy {
            FailurePolicy::FailFast => Err(e),
            FailurePolicy::FallbackToReference => {
                let record = FrameRecord {
                    index,
                    objective: f64::NAN,
                    ref_objective: f64::NAN,
                    residual: f64::NAN,
                    status: SolverStatus::InfeasibleNumerics,
                    iterations: 0,
                };
                Ok((frame.clone(), record))
            }
        },
    }
}
