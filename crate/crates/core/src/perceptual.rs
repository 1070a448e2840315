//! Perceptual distortion model.
//!
//! A disturbance spectrum is scored as D = sum_k w_k^2 |eps_k|^2, where the
//! per-bin weights form an inverse masking curve computed from the reference
//! audio (the masker) at each control point. The curve comes from an
//! auditory filterbank: per-filter masker energies drive the weights through
//!
//!   w_k^2 = Cs * sum_i |g_i(f_k) h_om(f_k)|^2 / (E_i + Ca)
//!
//! with g_i fourth-order gammatone responses on an ERB-spaced grid, h_om an
//! outer/middle-ear weighting shaped by the threshold-in-quiet curve, Ca the
//! filterbank energy of a threshold-level tone and Cs a global gain
//! calibrated so D = 1 at a just-noticeable fixture. Bins at or below the
//! low-frequency cutoff are overridden to a large multiple of the curve
//! maximum so the optimizer leaves that band untouched.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::acoustics::{free_field_rtf, Point3};
use crate::error::{Error, Result};
use crate::framing::{forward_spectrum, FrameGrid, SpectralFrame, TimeFrame};

/// Number of gammatone filters in the bank.
const NUM_FILTERS: usize = 64;
/// Lowest filter center frequency in Hz.
const BANK_LO_HZ: f64 = 50.0;

/// A modeled listening position with per-loudspeaker transfer diagonals.
#[derive(Debug, Clone)]
pub struct ControlPoint {
    pub position: Point3,
    /// `transfer[l][k]`: free-field transfer from loudspeaker `l` at bin `k`,
    /// conjugate-symmetric across bins so real playback frames produce
    /// (almost everywhere) conjugate-symmetric received spectra.
    pub transfer: Vec<Vec<Complex64>>,
}

impl ControlPoint {
    pub fn new(
        position: Point3,
        loudspeakers: &[Point3],
        grid: &FrameGrid,
        c: f64,
    ) -> Result<Self> {
        let n = grid.fft_len();
        let half = n / 2;
        let mut transfer = Vec::with_capacity(loudspeakers.len());
        for lsp in loudspeakers {
            let mut diag = vec![Complex64::default(); n];
            for (k, d) in diag.iter_mut().enumerate().take(half + 1) {
                *d = free_field_rtf(lsp, &position, grid.bin_omega(k), c)?;
            }
            for k in half + 1..n {
                diag[k] = diag[n - k].conj();
            }
            transfer.push(diag);
        }
        Ok(Self { position, transfer })
    }
}

/// Received reference audio at a control point: the transfer-weighted sum of
/// the reference loudspeaker spectra.
pub fn control_point_masker(ref_spectra: &SpectralFrame, point: &ControlPoint) -> Result<Vec<Complex64>> {
    let n = ref_spectra.bins.nrows();
    if point.transfer.len() != ref_spectra.channels() {
        return Err(Error::Structure(format!(
            "control point has {} transfer diagonals, spectra have {} channels",
            point.transfer.len(),
            ref_spectra.channels()
        )));
    }
    let mut masker = vec![Complex64::default(); n];
    for (l, diag) in point.transfer.iter().enumerate() {
        if diag.len() != n {
            return Err(Error::Structure(format!(
                "transfer diagonal {l} has {} bins, expected {n}",
                diag.len()
            )));
        }
        for k in 0..n {
            masker[k] += diag[k] * ref_spectra.bins[(k, l)];
        }
    }
    Ok(masker)
}

/// Fixture defining the calibration anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStimulus {
    /// Masker tone frequency in Hz.
    pub freq_hz: f64,
    /// Masker amplitude relative to full scale.
    pub masker_amplitude: f64,
    /// Probe amplitude relative to the masker (just-noticeable masked level).
    pub probe_rel_amplitude: f64,
}

impl Default for CalibrationStimulus {
    fn default() -> Self {
        Self {
            freq_hz: 1000.0,
            masker_amplitude: 10f64.powf(-6.0 / 20.0),
            probe_rel_amplitude: 10f64.powf(-24.0 / 20.0),
        }
    }
}

/// Calibrated constants of the masking model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Global sensitivity gain fitted so the fixture scores D = 1.
    pub cs: f64,
    /// Threshold-in-quiet energy floor added to every filter energy.
    pub ca: f64,
    /// Amplitude of the threshold-level tone defining `ca`.
    pub tq_gain: f64,
    /// Bins with |f| at or below this carry the override weight, Hz.
    pub lf_cutoff_hz: f64,
    /// Override multiple of the frame's maximum weight.
    pub lf_factor: f64,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.cs > 0.0) || !(self.ca > 0.0) {
            return Err(Error::Parameter("calibration constants must be positive".into()));
        }
        Ok(())
    }
}

/// ERB number of a frequency in Hz.
fn erb_number(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_number_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// Equivalent rectangular bandwidth at center frequency `f` Hz.
fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// Fourth-order gammatone magnitude response, peak-normalized.
fn gammatone_mag(f: f64, fc: f64, bw: f64) -> f64 {
    let x = (f - fc) / bw;
    1.0 / (1.0 + x * x).powi(2)
}

/// Threshold-in-quiet approximation in dB SPL-shaped units.
fn threshold_in_quiet_db(f: f64) -> f64 {
    let khz = f / 1000.0;
    3.64 * khz.powf(-0.8) - 6.5 * (-0.6 * (khz - 3.3).powi(2)).exp() + 1e-3 * khz.powi(4)
}

/// Outer/middle-ear magnitude: inverse of the threshold-in-quiet shape,
/// zero at DC.
fn outer_middle_ear(f: f64) -> f64 {
    if f <= 0.0 {
        0.0
    } else {
        10f64.powf(-threshold_in_quiet_db(f) / 20.0)
    }
}

/// Gammatone filterbank with combined ear-weighted power responses sampled
/// on the grid's bins.
#[derive(Debug, Clone)]
pub struct MaskingModel {
    grid: FrameGrid,
    calib: Calibration,
    /// `response[i][k]` = |g_i(|f_k|) h_om(|f_k|)|^2 for k in 0..N.
    response: Vec<Vec<f64>>,
}

impl MaskingModel {
    pub fn new(grid: &FrameGrid, calib: &Calibration) -> Result<Self> {
        calib.validate()?;
        Ok(Self {
            grid: grid.clone(),
            calib: calib.clone(),
            response: bank_response(grid),
        })
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calib
    }

    /// Per-filter masker energies.
    fn filter_energies(&self, masker: &[Complex64]) -> Vec<f64> {
        self.response
            .iter()
            .map(|resp| {
                resp.iter()
                    .zip(masker.iter())
                    .map(|(&q, s)| q * s.norm_sqr())
                    .sum()
            })
            .collect()
    }

    /// Inverse masking curve for one masker spectrum.
    pub fn weights(&self, masker: &[Complex64]) -> Result<MaskingWeights> {
        let n = self.grid.fft_len();
        if masker.len() != n {
            return Err(Error::Structure(format!(
                "masker has {} bins, expected {n}",
                masker.len()
            )));
        }
        if masker.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numeric("masker contains non-finite values".into()));
        }
        let energies = self.filter_energies(masker);
        let inv: Vec<f64> = energies.iter().map(|&e| 1.0 / (e + self.calib.ca)).collect();
        let mut curve = vec![0.0f64; n];
        for (k, wk) in curve.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (resp, &iv) in self.response.iter().zip(inv.iter()) {
                acc += resp[k] * iv;
            }
            *wk = (self.calib.cs * acc).sqrt();
        }
        let max_w = curve.iter().cloned().fold(0.0f64, f64::max);
        let override_w = self.calib.lf_factor * max_w;
        let mut w = curve.clone();
        for (k, wk) in w.iter_mut().enumerate() {
            if self.grid.bin_hz(k).abs() <= self.calib.lf_cutoff_hz {
                *wk = override_w;
            }
        }
        Ok(MaskingWeights {
            w,
            curve,
            max_curve: max_w,
            lf_cutoff_hz: self.calib.lf_cutoff_hz,
            lf_weight: override_w,
        })
    }
}

fn bank_response(grid: &FrameGrid) -> Vec<Vec<f64>> {
    let n = grid.fft_len();
    let nyquist = grid.sample_rate() / 2.0;
    let e_lo = erb_number(BANK_LO_HZ);
    let e_hi = erb_number(nyquist);
    (0..NUM_FILTERS)
        .map(|i| {
            let e = e_lo + (e_hi - e_lo) * i as f64 / (NUM_FILTERS - 1) as f64;
            let fc = erb_number_inv(e);
            let bw = 1.019 * erb_bandwidth(fc);
            (0..n)
                .map(|k| {
                    let f = grid.bin_hz(k).abs();
                    let g = gammatone_mag(f, fc, bw) * outer_middle_ear(f);
                    g * g
                })
                .collect()
        })
        .collect()
}

/// Diagonal distortion weights for one frame at one control point.
///
/// Two views of the same frame: the calibrated inverse masking `curve`
/// (the perceptual measure), and the optimizer `values` where the protected
/// low-frequency bins are overridden to a large multiple of the curve
/// maximum. The override steers the optimizer away from the speech
/// fundamentals band; it is not part of the perceptual measure, and letting
/// it leak into the measure would deflate the calibration by the fixture's
/// window sidelobes.
#[derive(Debug, Clone)]
pub struct MaskingWeights {
    w: Vec<f64>,
    curve: Vec<f64>,
    /// Maximum of the inverse masking curve.
    max_curve: f64,
    lf_cutoff_hz: f64,
    lf_weight: f64,
}

impl MaskingWeights {
    /// Optimizer weights: the curve with the low-frequency override applied.
    pub fn values(&self) -> &[f64] {
        &self.w
    }

    /// Calibrated inverse masking curve without the override.
    pub fn curve(&self) -> &[f64] {
        &self.curve
    }

    pub fn max_curve(&self) -> f64 {
        self.max_curve
    }

    pub fn lf_cutoff_hz(&self) -> f64 {
        self.lf_cutoff_hz
    }

    pub fn lf_weight(&self) -> f64 {
        self.lf_weight
    }

    /// Weighted squared norm of a disturbance under the optimizer weights.
    pub fn distortion(&self, epsilon: &[Complex64]) -> Result<f64> {
        weighted_sq(&self.w, epsilon)
    }

    /// Weighted squared norm under the calibrated curve: the perceptual
    /// distortion measure (D = 1 at the just-noticeable fixture).
    pub fn curve_distortion(&self, epsilon: &[Complex64]) -> Result<f64> {
        weighted_sq(&self.curve, epsilon)
    }
}

fn weighted_sq(w: &[f64], epsilon: &[Complex64]) -> Result<f64> {
    if epsilon.len() != w.len() {
        return Err(Error::Structure(format!(
            "disturbance has {} bins, weights have {}",
            epsilon.len(),
            w.len()
        )));
    }
    Ok(w.iter()
        .zip(epsilon.iter())
        .map(|(&w, e)| w * w * e.norm_sqr())
        .sum())
}

/// Inverse masking curve for `masker` under `calib` (convenience wrapper;
/// hot paths should hold a [`MaskingModel`]).
pub fn masking_weights(
    masker: &[Complex64],
    grid: &FrameGrid,
    calib: &Calibration,
) -> Result<MaskingWeights> {
    MaskingModel::new(grid, calib)?.weights(masker)
}

/// Windowed single-tone frame spectrum used by the calibration fixture.
fn tone_spectrum(grid: &FrameGrid, freq_hz: f64, amplitude: f64) -> Result<Vec<Complex64>> {
    let mut frame = TimeFrame::zeros(grid, 1);
    for i in 0..grid.frame_len() {
        let t = i as f64 / grid.sample_rate();
        frame.samples[(i, 0)] = amplitude
            * (2.0 * std::f64::consts::PI * freq_hz * t).sin()
            * grid.window()[i];
    }
    let spec = forward_spectrum(&frame, grid)?;
    Ok(spec.bins.column(0).iter().cloned().collect())
}

/// Default amplitude of the threshold-in-quiet reference tone (-60 dBFS).
const DEFAULT_TQ_GAIN: f64 = 1e-3;
/// Default low-frequency protection band and override factor.
pub const DEFAULT_LF_CUTOFF_HZ: f64 = 100.0;
const DEFAULT_LF_FACTOR: f64 = 100.0;

/// Fit the calibration constants on the fixture stimulus.
///
/// `ca` is the dominant filter energy of a threshold-level tone at the
/// fixture frequency; `cs` is then the unique gain for which a probe at the
/// just-noticeable masked level scores D = 1 (D is linear in `cs`, all
/// weights included).
pub fn calibrate(grid: &FrameGrid, stim: &CalibrationStimulus) -> Result<Calibration> {
    if !(stim.freq_hz > 0.0 && stim.freq_hz < grid.sample_rate() / 2.0) {
        return Err(Error::Parameter(format!(
            "fixture frequency {} Hz outside (0, Nyquist)",
            stim.freq_hz
        )));
    }
    if !(stim.masker_amplitude > 0.0) || !(stim.probe_rel_amplitude > 0.0) {
        return Err(Error::Parameter("degenerate calibration stimulus".into()));
    }
    let provisional = Calibration {
        cs: 1.0,
        ca: 1.0,
        tq_gain: DEFAULT_TQ_GAIN,
        lf_cutoff_hz: DEFAULT_LF_CUTOFF_HZ,
        lf_factor: DEFAULT_LF_FACTOR,
    };
    let model = MaskingModel::new(grid, &provisional)?;

    let quiet = tone_spectrum(grid, stim.freq_hz, DEFAULT_TQ_GAIN)?;
    let ca = model
        .filter_energies(&quiet)
        .into_iter()
        .fold(0.0f64, f64::max);
    if !(ca > 0.0) {
        return Err(Error::Numeric("threshold tone produced no filter energy".into()));
    }

    let with_ca = Calibration { ca, ..provisional };
    let model = MaskingModel::new(grid, &with_ca)?;
    let masker = tone_spectrum(grid, stim.freq_hz, stim.masker_amplitude)?;
    let probe: Vec<Complex64> = masker.iter().map(|v| v * stim.probe_rel_amplitude).collect();
    let d0 = model.weights(&masker)?.curve_distortion(&probe)?;
    if !(d0 > 0.0) || !d0.is_finite() {
        return Err(Error::Numeric(format!("calibration fixture scored D = {d0}")));
    }
    Ok(Calibration { cs: 1.0 / d0, ..with_ca })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::SOUND_SPEED;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> FrameGrid {
        FrameGrid::default_16k()
    }

    fn random_masker(rng: &mut ChaCha8Rng, grid: &FrameGrid) -> Vec<Complex64> {
        // spectrum of a random real frame: conjugate-symmetric, nonzero a.e.
        let mut frame = TimeFrame::zeros(grid, 1);
        for v in frame.samples.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        forward_spectrum(&frame, grid)
            .unwrap()
            .bins
            .column(0)
            .iter()
            .cloned()
            .collect()
    }

    #[test]
    fn control_point_transfer_magnitudes() {
        let g = grid();
        let lsps = [Point3::new(0.0, 0.0, 1.0), Point3::new(2.0, 0.0, 1.0)];
        let p = ControlPoint::new(Point3::new(0.5, 1.5, 1.2), &lsps, &g, SOUND_SPEED).unwrap();
        for (l, lsp) in lsps.iter().enumerate() {
            let expect = 1.0 / (4.0 * std::f64::consts::PI * lsp.distance(&p.position));
            for k in 0..g.fft_len() {
                assert!((p.transfer[l][k].norm() - expect).abs() < 1e-12);
            }
        }
        // conjugate symmetry away from the Nyquist bin
        let n = g.fft_len();
        for k in 1..n / 2 {
            assert!((p.transfer[0][k].conj() - p.transfer[0][n - k]).norm() < 1e-15);
        }
    }

    #[test]
    fn masker_is_linear_in_reference() {
        let g = grid();
        let lsps = [Point3::new(0.0, 0.0, 1.0)];
        let point = ControlPoint::new(Point3::new(1.0, 1.0, 1.0), &lsps, &g, SOUND_SPEED).unwrap();
        let zero = SpectralFrame {
            bins: DMatrix::zeros(g.fft_len(), 1),
        };
        let m0 = control_point_masker(&zero, &point).unwrap();
        assert!(m0.iter().all(|v| v.norm() == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bins = DMatrix::zeros(g.fft_len(), 1);
        for v in bins.iter_mut() {
            *v = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
        let one = SpectralFrame { bins: bins.clone() };
        let two = SpectralFrame { bins: bins.map(|v| v * 2.0) };
        let m1 = control_point_masker(&one, &point).unwrap();
        let m2 = control_point_masker(&two, &point).unwrap();
        for k in 0..g.fft_len() {
            assert!((m2[k] - 2.0 * m1[k]).norm() < 1e-12);
            // single loudspeaker: elementwise product
            assert!((m1[k] - point.transfer[0][k] * bins[(k, 0)]).norm() < 1e-15);
        }
    }

    #[test]
    fn calibration_fixture_scores_one() {
        let g = grid();
        let stim = CalibrationStimulus::default();
        let calib = calibrate(&g, &stim).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let masker = tone_spectrum(&g, stim.freq_hz, stim.masker_amplitude).unwrap();
        let probe: Vec<Complex64> = masker.iter().map(|v| v * stim.probe_rel_amplitude).collect();
        let w = model.weights(&masker).unwrap();
        let d = w.curve_distortion(&probe).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "fixture D = {d}");

        // probe 6 dB hotter: homogeneity gives exactly 4x
        let hot: Vec<Complex64> = probe.iter().map(|v| v * 10f64.powf(6.0 / 20.0)).collect();
        let d4 = w.curve_distortion(&hot).unwrap();
        assert!((d4 - 3.981).abs() < 1e-2, "6 dB probe D = {d4}");

        // silent probe
        let zero = vec![Complex64::default(); g.fft_len()];
        assert_eq!(w.curve_distortion(&zero).unwrap(), 0.0);
        // erasing the masker outright is far beyond the budget scale: the
        // constraint cannot be satisfied by switching the playback off
        let minus: Vec<Complex64> = masker.iter().map(|v| -v).collect();
        let d_erase = w.curve_distortion(&minus).unwrap();
        assert!(d_erase > 50.0, "erasing the fixture tone scored only {d_erase}");
    }

    #[test]
    fn zero_masker_weights_are_the_per_bin_maximum() {
        let g = grid();
        let calib = calibrate(&g, &CalibrationStimulus::default()).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let silent = model.weights(&vec![Complex64::default(); g.fft_len()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let masker = random_masker(&mut rng, &g);
            let w = model.weights(&masker).unwrap();
            for k in 0..g.fft_len() {
                if g.bin_hz(k).abs() > calib.lf_cutoff_hz {
                    assert!(w.values()[k] <= silent.values()[k] * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn louder_masker_strictly_lowers_weights() {
        let g = grid();
        let calib = calibrate(&g, &CalibrationStimulus::default()).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let masker = random_masker(&mut rng, &g);
            let loud: Vec<Complex64> = masker.iter().map(|v| v * 10.0).collect();
            let w1 = model.weights(&masker).unwrap();
            let w2 = model.weights(&loud).unwrap();
            for k in 0..g.fft_len() {
                if g.bin_hz(k).abs() > calib.lf_cutoff_hz {
                    assert!(
                        w2.values()[k] < w1.values()[k],
                        "bin {k}: {} !< {}",
                        w2.values()[k],
                        w1.values()[k]
                    );
                }
            }
        }
    }

    #[test]
    fn low_frequency_bins_carry_the_override() {
        let g = grid();
        let calib = calibrate(&g, &CalibrationStimulus::default()).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let masker = random_masker(&mut rng, &g);
        let w = model.weights(&masker).unwrap();
        let expect = calib.lf_factor * w.max_curve();
        let mut covered = 0;
        for k in 0..g.fft_len() {
            if g.bin_hz(k).abs() <= calib.lf_cutoff_hz {
                assert_eq!(w.values()[k], expect);
                covered += 1;
            }
        }
        // 0, +-31.25, +-62.5, +-93.75 Hz
        assert_eq!(covered, 7);
        // conjugate-bin symmetry
        let n = g.fft_len();
        for k in 1..n {
            assert!((w.values()[k] - w.values()[n - k]).abs() < 1e-12 * w.values()[k].max(1e-300));
        }
    }

    #[test]
    fn weights_ignore_masker_phase() {
        let g = grid();
        let calib = calibrate(&g, &CalibrationStimulus::default()).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let masker = random_masker(&mut rng, &g);
        let rotated: Vec<Complex64> = masker
            .iter()
            .map(|v| v * Complex64::from_polar(1.0, rng.random::<f64>() * 6.28))
            .collect();
        let w1 = model.weights(&masker).unwrap();
        let w2 = model.weights(&rotated).unwrap();
        for k in 0..g.fft_len() {
            let rel = (w1.values()[k] - w2.values()[k]).abs() / w1.values()[k].max(1e-300);
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn distortion_is_a_squared_seminorm() {
        let g = grid();
        let calib = calibrate(&g, &CalibrationStimulus::default()).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let masker = random_masker(&mut rng, &g);
        let w = model.weights(&masker).unwrap();
        let n = g.fft_len();
        let rand_eps = |rng: &mut ChaCha8Rng| -> Vec<Complex64> {
            (0..n)
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect()
        };
        for _ in 0..10 {
            let a = rand_eps(&mut rng);
            let b = rand_eps(&mut rng);
            let da = w.distortion(&a).unwrap();
            assert!(da >= 0.0);
            let a2: Vec<Complex64> = a.iter().map(|v| v * 2.0).collect();
            assert!((w.distortion(&a2).unwrap() - 4.0 * da).abs() < 1e-9 * (1.0 + da));
            let sum: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = w.distortion(&sum).unwrap().sqrt();
            let rhs = da.sqrt() + w.distortion(&b).unwrap().sqrt();
            assert!(lhs <= rhs + 1e-9);
        }
        assert_eq!(w.distortion(&vec![Complex64::default(); n]).unwrap(), 0.0);
    }

    #[test]
    fn folded_distortion_matches_full_spectrum() {
        let g = grid();
        let calib = calibrate(&g, &CalibrationStimulus::default()).unwrap();
        let model = MaskingModel::new(&g, &calib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let masker = random_masker(&mut rng, &g);
        let w = model.weights(&masker).unwrap();
        // disturbance from a real time-domain frame: conjugate symmetric
        let eps = random_masker(&mut rng, &g);
        let full = w.distortion(&eps).unwrap();
        let folded: f64 = (0..g.half_bins())
            .map(|k| g.fold_weight(k) * w.values()[k].powi(2) * eps[k].norm_sqr())
            .sum();
        assert!((full - folded).abs() < 1e-9 * full);
    }
}
