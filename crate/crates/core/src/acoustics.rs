//! Acoustic transfer models.
//!
//! Free-field point-to-point transfer functions drive the optimizer; a
//! mirror-image-source room simulator with fractional-delay taps is used only
//! for evaluation; an isotropic-field coherence matrix models late
//! reverberation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default speed of sound in m/s.
pub const SOUND_SPEED: f64 = 342.0;

/// Minimum source/receiver separation accepted by the free-field model.
pub const MIN_DISTANCE: f64 = 1e-6;

/// A position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rectangular room with a single broadband reverberation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomBox {
    /// Interior dimensions in meters.
    pub dimensions: [f64; 3],
    /// Reverberation time in seconds (0 = anechoic).
    pub t60: f64,
    /// Speed of sound in m/s.
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
}

fn default_sound_speed() -> f64 {
    SOUND_SPEED
}

impl RoomBox {
    pub fn new(dimensions: [f64; 3], t60: f64) -> Result<Self> {
        let room = Self {
            dimensions,
            t60,
            sound_speed: SOUND_SPEED,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("room dimensions must be positive".into()));
        }
        if !(self.t60 >= 0.0) {
            return Err(Error::Config("t60 must be >= 0".into()));
        }
        if !(self.sound_speed > 0.0) {
            return Err(Error::Config("sound_speed must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.x > 0.0
            && p.y > 0.0
            && p.z > 0.0
            && p.x < self.dimensions[0]
            && p.y < self.dimensions[1]
            && p.z < self.dimensions[2]
    }

    /// Uniform wall reflection coefficient reproducing `t60` under the
    /// classical volume/absorption-area relation.
    pub fn reflection_coefficient(&self) -> Result<f64> {
        if self.t60 == 0.0 {
            return Ok(0.0);
        }
        let [lx, ly, lz] = self.dimensions;
        let volume = lx * ly * lz;
        let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
        let alpha = 24.0 * std::f64::consts::LN_10 * volume
            / (self.sound_speed * surface * self.t60);
        if alpha > 1.0 {
            return Err(Error::Config(format!(
                "t60 = {} s is unattainable for this room (implied absorption {alpha:.3} > 1)",
                self.t60
            )));
        }
        let beta = (1.0 - alpha).sqrt();
        if beta >= 1.0 {
            return Err(Error::Config(format!(
                "reflection coefficient {beta} >= 1 (unstable room)"
            )));
        }
        Ok(beta)
    }
}

/// Sampled room impulse response.
#[derive(Debug, Clone)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
}

impl ImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }
}

/// Direct-path transfer function between two points at angular frequency
/// `omega`: a spherical spreading loss with propagation phase delay.
pub fn free_field_rtf(source: &Point3, receiver: &Point3, omega: f64, c: f64) -> Result<Complex64> {
    let dist = source.distance(receiver);
    if dist <= MIN_DISTANCE {
        return Err(Error::Domain(format!(
            "source and receiver are coincident (distance {dist:.2e} m)"
        )));
    }
    let phase = -omega * dist / c;
    Ok(Complex64::from_polar(
        1.0 / (4.0 * std::f64::consts::PI * dist),
        phase,
    ))
}

/// Stacked free-field transfers from every loudspeaker to one receiver.
pub fn transfer_vector(
    receiver: &Point3,
    loudspeakers: &[Point3],
    omega: f64,
    c: f64,
) -> Result<DVector<Complex64>> {
    let mut v = DVector::zeros(loudspeakers.len());
    for (l, lsp) in loudspeakers.iter().enumerate() {
        v[l] = free_field_rtf(receiver, lsp, omega, c)?;
    }
    Ok(v)
}

/// Half-width of the windowed-sinc fractional-delay kernel (81 taps).
const SINC_HALF: i64 = 40;

/// Mirror-image-source room impulse response.
///
/// Wall reflections carry the uniform coefficient derived from `t60`;
/// fractional arrival delays are realized with an 81-tap Hann-windowed sinc.
/// With `max_order = None` the image lattice is sized so that contributions
/// arriving after the direct path plus `t60` (below -60 dB by construction)
/// are dropped. `t60 = 0` yields the direct path only.
pub fn simulate_rir(
    room: &RoomBox,
    source: &Point3,
    receiver: &Point3,
    sample_rate: f64,
    max_order: Option<usize>,
) -> Result<ImpulseResponse> {
    room.validate()?;
    for (name, p) in [("source", source), ("receiver", receiver)] {
        if !room.contains(p) {
            return Err(Error::Config(format!(
                "{name} ({:.3}, {:.3}, {:.3}) lies outside the room",
                p.x, p.y, p.z
            )));
        }
    }
    let c = room.sound_speed;
    let beta = room.reflection_coefficient()?;
    let direct = source.distance(receiver);
    if direct <= MIN_DISTANCE {
        return Err(Error::Domain("source and receiver are coincident".into()));
    }

    let tail = room.t60 + direct / c;
    let n_len = (sample_rate * tail).ceil() as usize + 2 * SINC_HALF as usize + 2;
    let max_dist = c * n_len as f64 / sample_rate;
    let mut taps = vec![0.0f64; n_len];

    let [lx, ly, lz] = room.dimensions;
    let bound = |dim: f64| (max_dist / (2.0 * dim)).ceil() as i64;
    let (nx, ny, nz) = (bound(lx), bound(ly), bound(lz));

    for mx in -nx..=nx {
        for my in -ny..=ny {
            for mz in -nz..=nz {
                for q in 0..=1i64 {
                    for j in 0..=1i64 {
                        for k in 0..=1i64 {
                            let refl = ((mx - q).abs()
                                + mx.abs()
                                + (my - j).abs()
                                + my.abs()
                                + (mz - k).abs()
                                + mz.abs()) as usize;
                            if let Some(o) = max_order {
                                if refl > o {
                                    continue;
                                }
                            }
                            if beta == 0.0 && refl > 0 {
                                continue;
                            }
                            let ix = (1 - 2 * q) as f64 * source.x - receiver.x
                                + 2.0 * mx as f64 * lx;
                            let iy = (1 - 2 * j) as f64 * source.y - receiver.y
                                + 2.0 * my as f64 * ly;
                            let iz = (1 - 2 * k) as f64 * source.z - receiver.z
                                + 2.0 * mz as f64 * lz;
                            let dist = (ix * ix + iy * iy + iz * iz).sqrt();
                            if dist > max_dist {
                                continue;
                            }
                            let gain = beta.powi(refl as i32)
                                / (4.0 * std::f64::consts::PI * dist.max(MIN_DISTANCE));
                            add_fractional_tap(&mut taps, sample_rate * dist / c, gain);
                        }
                    }
                }
            }
        }
    }
    Ok(ImpulseResponse { taps, sample_rate })
}

/// Accumulate one arrival at fractional sample position `delay`.
fn add_fractional_tap(taps: &mut [f64], delay: f64, gain: f64) {
    let center = delay.round() as i64;
    for m in -SINC_HALF..=SINC_HALF {
        let idx = center + m;
        if idx < 0 || idx as usize >= taps.len() {
            continue;
        }
        let x = idx as f64 - delay;
        let window = 0.5 * (1.0 + (std::f64::consts::PI * x / (SINC_HALF as f64 + 0.5)).cos());
        taps[idx as usize] += gain * window * sinc(std::f64::consts::PI * x);
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Spatial coherence of a spherically isotropic field between every pair of
/// positions: sin(x)/x of the propagation phase across each separation.
pub fn isotropic_covariance(positions: &[Point3], omega: f64, c: f64) -> DMatrix<Complex64> {
    let n = positions.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = positions[i].distance(&positions[j]);
            m[(i, j)] = Complex64::new(sinc(omega * d / c), 0.0);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 16_000.0;

    #[test]
    fn rtf_at_zero_frequency_is_spreading_loss() {
        let s = Point3::new(0.0, 0.0, 0.0);
        let r = Point3::new(1.0, 0.0, 0.0);
        let h = free_field_rtf(&s, &r, 0.0, SOUND_SPEED).unwrap();
        assert!((h.re - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!(h.im.abs() < 1e-15);
    }

    #[test]
    fn rtf_magnitude_and_phase_at_two_meters() {
        let s = Point3::new(0.0, 0.0, 0.0);
        let r = Point3::new(0.0, 2.0, 0.0);
        let omega = 2.0 * std::f64::consts::PI * 1234.0;
        let h = free_field_rtf(&s, &r, omega, SOUND_SPEED).unwrap();
        assert!((h.norm() - 1.0 / (8.0 * std::f64::consts::PI)).abs() < 1e-12);
        let expected_phase = -(2.0 * omega / SOUND_SPEED).rem_euclid(2.0 * std::f64::consts::PI);
        let got = h.arg().rem_euclid(2.0 * std::f64::consts::PI);
        let want = expected_phase.rem_euclid(2.0 * std::f64::consts::PI);
        assert!((got - want).abs() < 1e-9 || (got - want).abs() > 2.0 * std::f64::consts::PI - 1e-9);
    }

    #[test]
    fn rtf_is_symmetric_in_endpoints() {
        let a = Point3::new(0.3, 1.2, 0.5);
        let b = Point3::new(2.0, 0.1, 1.4);
        let omega = 2.0 * std::f64::consts::PI * 997.0;
        let h1 = free_field_rtf(&a, &b, omega, SOUND_SPEED).unwrap();
        let h2 = free_field_rtf(&b, &a, omega, SOUND_SPEED).unwrap();
        assert!((h1 - h2).norm() < 1e-15);
    }

    #[test]
    fn rtf_rejects_coincident_points() {
        let p = Point3::new(1.0, 1.0, 1.0);
        assert!(matches!(
            free_field_rtf(&p, &p, 100.0, SOUND_SPEED),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rtf_phase_slope_matches_propagation_delay() {
        let s = Point3::new(0.0, 0.0, 0.0);
        let r = Point3::new(1.7, 0.0, 0.0);
        let dist = 1.7;
        let omega = 2.0 * std::f64::consts::PI * 500.0;
        let dw = 1e-3;
        let h1 = free_field_rtf(&s, &r, omega, SOUND_SPEED).unwrap();
        let h2 = free_field_rtf(&s, &r, omega + dw, SOUND_SPEED).unwrap();
        let dphase = (h2 / h1).arg() / dw;
        assert!((dphase + dist / SOUND_SPEED).abs() < 1e-9);
    }

    #[test]
    fn transfer_vector_basics() {
        let r = Point3::new(0.0, 0.0, 0.0);
        let lsp1 = Point3::new(1.0, 0.0, 0.0);
        let lsp2 = Point3::new(0.0, 1.0, 0.0);
        let omega = 2.0 * std::f64::consts::PI * 1000.0;
        let single = transfer_vector(&r, std::slice::from_ref(&lsp1), omega, SOUND_SPEED).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(
            single[0],
            free_field_rtf(&r, &lsp1, omega, SOUND_SPEED).unwrap()
        );
        // equidistant loudspeakers give equal magnitudes
        let v = transfer_vector(&r, &[lsp1, lsp2], omega, SOUND_SPEED).unwrap();
        assert!((v[0].norm() - v[1].norm()).abs() < 1e-15);
        // zero frequency: all entries real positive
        let v0 = transfer_vector(&r, &[lsp1, lsp2], 0.0, SOUND_SPEED).unwrap();
        assert!(v0.iter().all(|h| h.im == 0.0 && h.re > 0.0));
    }

    fn test_room(t60: f64) -> RoomBox {
        RoomBox::new([5.0, 4.0, 3.0], t60).unwrap()
    }

    #[test]
    fn anechoic_rir_is_a_single_arrival() {
        let room = test_room(0.0);
        let s = Point3::new(1.0, 1.0, 1.5);
        // Distance chosen so the delay is close to an integer sample.
        let d = 47.0 * SOUND_SPEED / FS;
        let r = Point3::new(1.0 + d, 1.0, 1.5);
        let rir = simulate_rir(&room, &s, &r, FS, None).unwrap();
        let (peak_idx, peak) = rir
            .taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        let expect_idx = (FS * d / SOUND_SPEED).round() as usize;
        let expect_amp = 1.0 / (4.0 * std::f64::consts::PI * d);
        assert_eq!(peak_idx, expect_idx);
        assert!((peak - expect_amp).abs() / expect_amp < 0.01);
        // energy of a pure delay is preserved by the windowed sinc
        assert!((rir.energy() - expect_amp * expect_amp).abs() / (expect_amp * expect_amp) < 0.01);
    }

    #[test]
    fn farther_receiver_arrives_later() {
        let room = test_room(0.0);
        let s = Point3::new(1.0, 2.0, 1.5);
        let r1 = Point3::new(2.0, 2.0, 1.5);
        let r2 = Point3::new(3.0, 2.0, 1.5);
        let argmax = |rir: &ImpulseResponse| {
            rir.taps
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap()
                .0 as i64
        };
        let a1 = argmax(&simulate_rir(&room, &s, &r1, FS, None).unwrap());
        let a2 = argmax(&simulate_rir(&room, &s, &r2, FS, None).unwrap());
        assert_eq!(a2 - a1, (FS / SOUND_SPEED).round() as i64);
    }

    /// Oracle: backward-integrated energy decay of the simulated RIR, fit
    /// between -5 and -25 dB, must extrapolate to the requested t60 within
    /// +-20%.
    #[test]
    fn schroeder_decay_matches_requested_t60() {
        let room = test_room(0.22);
        let s = Point3::new(1.2, 1.1, 1.4);
        let r = Point3::new(3.6, 2.9, 1.6);
        let rir = simulate_rir(&room, &s, &r, FS, None).unwrap();
        let t60 = schroeder_t60(&rir);
        assert!(
            (t60 - 0.22).abs() / 0.22 < 0.2,
            "estimated t60 {t60:.3} s vs requested 0.22 s"
        );
    }

    fn schroeder_t60(rir: &ImpulseResponse) -> f64 {
        let mut decay: Vec<f64> = Vec::with_capacity(rir.taps.len());
        let mut acc = 0.0;
        for t in rir.taps.iter().rev() {
            acc += t * t;
            decay.push(acc);
        }
        decay.reverse();
        let total = decay[0];
        let db: Vec<f64> = decay.iter().map(|e| 10.0 * (e / total).log10()).collect();
        let idx_at = |level: f64| db.iter().position(|&v| v <= level).unwrap();
        let (i5, i25) = (idx_at(-5.0), idx_at(-25.0));
        let slope = (db[i25] - db[i5]) / ((i25 - i5) as f64 / rir.sample_rate);
        -60.0 / slope
    }

    #[test]
    fn rir_is_reciprocal() {
        let room = test_room(0.15);
        let a = Point3::new(1.0, 1.0, 1.0);
        let b = Point3::new(3.5, 2.5, 2.0);
        let fwd = simulate_rir(&room, &a, &b, FS, Some(6)).unwrap();
        let bwd = simulate_rir(&room, &b, &a, FS, Some(6)).unwrap();
        assert_eq!(fwd.taps.len(), bwd.taps.len());
        for (x, y) in fwd.taps.iter().zip(bwd.taps.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn unattainable_t60_is_rejected() {
        let room = RoomBox::new([5.0, 4.0, 3.0], 0.005).unwrap();
        let s = Point3::new(1.0, 1.0, 1.0);
        let r = Point3::new(2.0, 2.0, 2.0);
        assert!(matches!(
            simulate_rir(&room, &s, &r, FS, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn outside_room_is_rejected() {
        let room = test_room(0.0);
        let s = Point3::new(-1.0, 1.0, 1.0);
        let r = Point3::new(2.0, 2.0, 2.0);
        assert!(simulate_rir(&room, &s, &r, FS, None).is_err());
    }

    #[test]
    fn isotropic_matrix_properties() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(0.0, 0.13, 0.02),
            Point3::new(0.07, 0.07, -0.01),
            Point3::new(-0.05, 0.02, 0.08),
        ];
        let omega = 2.0 * std::f64::consts::PI * 1000.0;
        let m = isotropic_covariance(&pts, omega, SOUND_SPEED);
        for i in 0..5 {
            assert_eq!(m[(i, i)], Complex64::new(1.0, 0.0));
            for j in 0..5 {
                assert_eq!(m[(i, j)], m[(j, i)]);
                assert_eq!(m[(i, j)].im, 0.0);
            }
        }
        // positive semidefinite up to round-off
        let real = m.map(|c| c.re);
        let eig = real.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
        // zero frequency: all ones
        let m0 = isotropic_covariance(&pts, 0.0, SOUND_SPEED);
        assert!(m0.iter().all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }
}
