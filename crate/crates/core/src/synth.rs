//! Synthetic frequency-multiplexed readout traces.
//!
//! Each shot is the sum of one complex IF tone per qubit whose amplitude
//! depends on the qubit's state (and, through a linear crosstalk matrix, on
//! the states of the other qubits), plus white complex Gaussian noise. A
//! qubit prepared excited may relax to ground mid-trace after an
//! exponentially distributed time with mean `t1_us`.
//!
//! Randomness is drawn per shot from a ChaCha8 stream seeded with the shot
//! seed, in this order: one relaxation time for every excited qubit with
//! `t1_us > 0` (ascending qubit index), then `(I, Q)` noise pairs for each
//! sample in time order. Dataset shot seeds come from [`shot_seed`].

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{domain, Error, Result};

/// Per-qubit tone parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitConfig {
    pub if_freq_hz: f64,
    pub alpha_ground: Complex64,
    pub alpha_excited: Complex64,
    /// Energy-relaxation time in microseconds; 0 disables decay.
    pub t1_us: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub qubits: Vec<QubitConfig>,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    /// Per-quadrature standard deviation of the additive noise.
    pub noise_sigma: f64,
    /// `crosstalk[q][j]` scales qubit j's state-dependent amplitude change
    /// into qubit q's tone. Diagonal entries are exactly 1.
    pub crosstalk: Vec<Vec<f64>>,
    pub seed: u64,
}

/// IF tones of the five-qubit device, in Hz.
pub const DEVICE_IF_HZ: [f64; 5] = [64.729e6, 25.366e6, 24.79e6, 70.269e6, 127.282e6];

impl DeviceConfig {
    pub fn n_qubits(&self) -> usize {
        self.qubits.len()
    }

    pub fn n_states(&self) -> usize {
        1usize << self.qubits.len()
    }

    /// Independent qubits at the given frequencies: identity crosstalk, no
    /// decay, unit ground/excited separation along the real axis.
    pub fn independent(freqs_hz: &[f64], n_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        let qubits = freqs_hz
            .iter()
            .enumerate()
            .map(|(label, &f)| QubitConfig {
                if_freq_hz: f,
                alpha_ground: Complex64::new(-0.5, 0.0),
                alpha_excited: Complex64::new(0.5, 0.0),
                t1_us: 0.0,
                label,
            })
            .collect();
        Self { qubits, sample_rate_hz: 500e6, n_samples, noise_sigma, crosstalk: identity(freqs_hz.len()), seed }
    }

    /// Five-qubit preset at the device's IF tones, 500 MS/s and 512 samples,
    /// with relaxation times between 9 and 40 us. Qubit 4 has a large
    /// separation and leaks into the other four tones. Noise and crosstalk
    /// put the matched-filter geometric-mean fidelity near 0.88.
    pub fn paper5q(seed: u64) -> Self {
        // (|alpha_e - alpha_g|, centre of the pair, T1 in us)
        const TONES: [(f64, (f64, f64), f64); 5] = [
            (0.15, (0.1, 0.0), 24.0),
            (0.16, (0.0, 0.1), 9.0),
            (0.16, (-0.1, 0.0), 40.0),
            (0.15, (0.05, 0.0), 15.0),
            (0.30, (0.0, 0.0), 32.0),
        ];
        // Common direction of alpha_e - alpha_g, radians.
        const AXIS: f64 = 0.3;
        const LEAK_FROM_Q4: f64 = 0.35;
        let qubits = TONES
            .iter()
            .zip(DEVICE_IF_HZ)
            .enumerate()
            .map(|(label, (&(sep, (cr, ci), t1), f))| {
                let half = Complex64::from_polar(sep / 2.0, AXIS);
                let centre = Complex64::new(cr, ci);
                QubitConfig { if_freq_hz: f, alpha_ground: centre - half, alpha_excited: centre + half, t1_us: t1, label }
            })
            .collect();
        let mut crosstalk = identity(5);
        for row in crosstalk.iter_mut().take(4) {
            row[4] = LEAK_FROM_Q4;
        }
        Self { qubits, sample_rate_hz: 500e6, n_samples: 512, noise_sigma: 0.95, crosstalk, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.qubits.len();
        if n == 0 {
            return domain("device has zero qubits");
        }
        if n > 16 {
            return domain(format!("{n} qubits exceeds the supported maximum of 16"));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return domain("sample_rate_hz must be positive");
        }
        if self.n_samples == 0 {
            return domain("n_samples must be at least 1");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return domain("noise_sigma must be finite and non-negative");
        }
        let nyquist = self.sample_rate_hz / 2.0;
        for (i, q) in self.qubits.iter().enumerate() {
            if !(q.if_freq_hz > 0.0 && q.if_freq_hz < nyquist) {
                return domain(format!("qubit {i}: IF {} Hz outside (0, {nyquist})", q.if_freq_hz));
            }
            if q.alpha_ground == q.alpha_excited {
                return domain(format!("qubit {i}: ground and excited amplitudes coincide"));
            }
            if !(q.t1_us.is_finite() && q.t1_us >= 0.0) {
                return domain(format!("qubit {i}: t1_us must be finite and >= 0"));
            }
            if q.label != i {
                return domain(format!("qubit {i}: label {} does not match its index", q.label));
            }
            for (j, other) in self.qubits.iter().enumerate().skip(i + 1) {
                if other.if_freq_hz == q.if_freq_hz {
                    return domain(format!("qubits {i} and {j} share IF {} Hz", q.if_freq_hz));
                }
            }
        }
        if self.crosstalk.len() != n || self.crosstalk.iter().any(|row| row.len() != n) {
            return domain(format!("crosstalk must be {n}x{n}"));
        }
        for (i, row) in self.crosstalk.iter().enumerate() {
            if row[i] != 1.0 {
                return domain(format!("crosstalk[{i}][{i}] = {} (must be exactly 1)", row[i]));
            }
            if row.iter().any(|e| !e.is_finite()) {
                return domain(format!("crosstalk row {i} has non-finite entries"));
            }
        }
        Ok(())
    }

    /// `|alpha_e - alpha_g| * sqrt(n_samples) / noise_sigma` per qubit; the
    /// integrated single-qubit SNR ignoring decay and crosstalk.
    pub fn snr_summary(&self) -> Vec<f64> {
        self.qubits.iter().map(|q| (q.alpha_excited - q.alpha_ground).norm() * (self.n_samples as f64).sqrt() / self.noise_sigma).collect()
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// One readout trace. Samples are stored in single precision, the same
/// precision as the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct RawShot {
    pub i_samples: Vec<f32>,
    pub q_samples: Vec<f32>,
    /// Bit q set means qubit q was prepared excited.
    pub label: u32,
}

impl RawShot {
    pub fn n_samples(&self) -> usize {
        self.i_samples.len()
    }

    /// Sample n as a complex number.
    #[inline]
    pub fn sample(&self, n: usize) -> Complex64 {
        Complex64::new(self.i_samples[n] as f64, self.q_samples[n] as f64)
    }

    /// `[I || Q]` as f64.
    pub fn iq_vector(&self) -> Vec<f64> {
        self.i_samples.iter().chain(&self.q_samples).map(|&x| x as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub device: DeviceConfig,
    pub shots: Vec<RawShot>,
    pub shots_per_state: usize,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u32> {
        self.shots.iter().map(|s| s.label).collect()
    }

    pub fn n_qubits(&self) -> usize {
        self.device.n_qubits()
    }
}

/// Splitmix64 increment.
pub const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Splitmix64 output function.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of shot `index` in a dataset generated with `seed`: the
/// `(index + 1)`-th output of a splitmix64 stream started at `seed`.
pub fn shot_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(SPLITMIX_GAMMA)))
}

/// Precomputed per-qubit phasors `exp(i 2 pi f n / fs)`.
struct ToneTable {
    phasors: Vec<Vec<Complex64>>,
}

impl ToneTable {
    fn new(device: &DeviceConfig) -> Self {
        let phasors = device.qubits.iter().map(|q| tone(q.if_freq_hz, device.sample_rate_hz, device.n_samples, 1.0)).collect();
        Self { phasors }
    }
}

/// `sign * 2 pi f n / fs` phasors; the phase is reduced modulo one cycle
/// before the trig call so long traces stay accurate.
pub(crate) fn tone(f: f64, fs: f64, n_samples: usize, sign: f64) -> Vec<Complex64> {
    let cycles_per_sample = f / fs;
    (0..n_samples)
        .map(|n| {
            let frac = (cycles_per_sample * n as f64).fract();
            Complex64::from_polar(1.0, sign * TAU * frac)
        })
        .collect()
}

fn check_label(device: &DeviceConfig, label: u32) -> Result<()> {
    if (label as u64) >= (1u64 << device.n_qubits()) {
        return domain(format!("label {label:#b} needs more than {} qubits", device.n_qubits()));
    }
    Ok(())
}

fn synthesize(device: &DeviceConfig, table: &ToneTable, label: u32, seed: u64) -> RawShot {
    let nq = device.n_qubits();
    let ns = device.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Sample index at which each qubit is (or becomes) ground.
    let dt_us = 1e6 / device.sample_rate_hz;
    let decay_at: Vec<usize> = device
        .qubits
        .iter()
        .enumerate()
        .map(|(q, cfg)| {
            if label & (1 << q) == 0 {
                0
            } else if cfg.t1_us > 0.0 {
                let tau: f64 = rng.sample(Exp::new(1.0 / cfg.t1_us).expect("positive rate"));
                // First sample with n * dt >= tau.
                let n = (tau / dt_us).ceil();
                if n >= ns as f64 {
                    ns
                } else {
                    n as usize
                }
            } else {
                ns
            }
        })
        .collect();

    let amplitudes = |n: usize| -> Vec<Complex64> {
        let delta: Vec<Complex64> = device
            .qubits
            .iter()
            .enumerate()
            .map(|(j, cfg)| if n < decay_at[j] { cfg.alpha_excited - cfg.alpha_ground } else { Complex64::new(0.0, 0.0) })
            .collect();
        (0..nq)
            .map(|q| {
                let mut a = device.qubits[q].alpha_ground;
                for (eps, d) in device.crosstalk[q].iter().zip(&delta) {
                    a += eps * d;
                }
                a
            })
            .collect()
    };

    // Amplitudes are piecewise constant between decay events.
    let mut breaks: Vec<usize> = decay_at.iter().copied().filter(|&d| d > 0 && d < ns).collect();
    breaks.push(ns);
    breaks.sort_unstable();
    breaks.dedup();

    let mut i_samples = Vec::with_capacity(ns);
    let mut q_samples = Vec::with_capacity(ns);
    let sigma = device.noise_sigma;
    let mut start = 0;
    for &end in &breaks {
        let amps = amplitudes(start);
        for n in start..end {
            let mut s = Complex64::new(0.0, 0.0);
            for (q, a) in amps.iter().enumerate() {
                s += a * table.phasors[q][n];
            }
            let ni: f64 = rng.sample(StandardNormal);
            let nq_: f64 = rng.sample(StandardNormal);
            i_samples.push((s.re + sigma * ni) as f32);
            q_samples.push((s.im + sigma * nq_) as f32);
        }
        start = end;
    }
    RawShot { i_samples, q_samples, label }
}

/// Simulates one shot of `label` with its own seed.
pub fn generate_shot(device: &DeviceConfig, label: u32, shot_seed: u64) -> Result<RawShot> {
    device.validate()?;
    check_label(device, label)?;
    Ok(synthesize(device, &ToneTable::new(device), label, shot_seed))
}

/// Labels of a dataset in shot order: every state `shots_per_state` times,
/// shuffled by a ChaCha8 stream seeded with the device seed.
pub fn dataset_labels(device: &DeviceConfig, shots_per_state: usize) -> Result<Vec<u32>> {
    device.validate()?;
    if shots_per_state == 0 {
        return domain("shots_per_state must be at least 1");
    }
    let n_states = device.n_states();
    let total = n_states
        .checked_mul(shots_per_state)
        .filter(|&t| t <= u32::MAX as usize)
        .ok_or_else(|| Error::Domain(format!("{n_states} states x {shots_per_state} shots overflows the shot count")))?;
    let mut labels: Vec<u32> = Vec::with_capacity(total);
    for state in 0..n_states as u32 {
        labels.extend(std::iter::repeat_n(state, shots_per_state));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(device.seed);
    labels.shuffle(&mut rng);
    Ok(labels)
}

/// Balanced, shuffled dataset. Shot `i` equals
/// `generate_shot(device, labels[i], shot_seed(device.seed, i))`.
pub fn generate_dataset(device: &DeviceConfig, shots_per_state: usize) -> Result<Dataset> {
    let labels = dataset_labels(device, shots_per_state)?;
    let table = ToneTable::new(device);
    let shots =
        labels.par_iter().enumerate().map(|(i, &label)| synthesize(device, &table, label, shot_seed(device.seed, i as u64))).collect();
    Ok(Dataset { device: device.clone(), shots, shots_per_state })
}

/// Averages consecutive windows of I and of Q; output is
/// `[reduced I || reduced Q]` of length `2 * n_samples / window`.
pub fn boxcar_reduce(shot: &RawShot, window: usize) -> Result<Vec<f64>> {
    let n = shot.n_samples();
    check_window(n, window)?;
    let mut out = Vec::with_capacity(2 * n / window);
    for stream in [&shot.i_samples, &shot.q_samples] {
        out.extend(stream.chunks_exact(window).map(|c| c.iter().map(|&x| x as f64).sum::<f64>() / window as f64));
    }
    Ok(out)
}

fn check_window(n: usize, window: usize) -> Result<()> {
    if n == 0 {
        return domain("empty trace");
    }
    if window == 0 || !n.is_multiple_of(window) {
        return domain(format!("boxcar window {window} does not divide {n} samples"));
    }
    Ok(())
}

/// Boxcar features for every shot, one row per shot.
pub fn boxcar_features(shots: &[RawShot], window: usize) -> Result<Array2<f64>> {
    let Some(first) = shots.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let n = first.n_samples();
    check_window(n, window)?;
    let width = 2 * n / window;
    let rows: Vec<Vec<f64>> = shots.par_iter().map(|s| boxcar_reduce(s, window)).collect::<Result<_>>()?;
    let mut out = Array2::zeros((shots.len(), width));
    for (mut dst, row) in out.rows_mut().into_iter().zip(rows) {
        if row.len() != width {
            return Err(Error::Shape { expected: width, got: row.len() });
        }
        dst.assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

const QRD_MAGIC: &[u8; 4] = b"QRD1";
const QRD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    device: DeviceConfig,
    shots_per_state: usize,
}

/// Path of the JSON sidecar that accompanies a QRD1 file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// QRD1 body: header then `u32 label, f32 I[n], f32 Q[n]` per shot.
pub fn write_qrd<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    binio::write_magic(w, QRD_MAGIC, QRD_VERSION)?;
    binio::write_len(w, ds.device.n_qubits())?;
    binio::write_len(w, ds.device.n_samples)?;
    binio::write_len(w, ds.shots.len())?;
    binio::write_f64(w, ds.device.sample_rate_hz)?;
    for shot in &ds.shots {
        binio::write_u32(w, shot.label)?;
        for &x in shot.i_samples.iter().chain(&shot.q_samples) {
            binio::write_f32(w, x)?;
        }
    }
    Ok(())
}

pub struct QrdHeader {
    pub n_qubits: usize,
    pub n_samples: usize,
    pub n_shots: usize,
    pub sample_rate_hz: f64,
}

pub fn read_qrd<R: Read>(r: &mut R) -> Result<(QrdHeader, Vec<RawShot>)> {
    let version = binio::read_magic(r, QRD_MAGIC)?;
    if version != QRD_VERSION {
        return Err(Error::Format(format!("unsupported QRD version {version}")));
    }
    let header = QrdHeader {
        n_qubits: binio::read_len(r)?,
        n_samples: binio::read_len(r)?,
        n_shots: binio::read_len(r)?,
        sample_rate_hz: binio::read_f64(r)?,
    };
    let mut shots = Vec::with_capacity(header.n_shots);
    let mut buf = vec![0u8; 4 * header.n_samples];
    for _ in 0..header.n_shots {
        let label = binio::read_u32(r)?;
        let mut streams = [Vec::new(), Vec::new()];
        for stream in &mut streams {
            r.read_exact(&mut buf)?;
            *stream = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        }
        let [i_samples, q_samples] = streams;
        shots.push(RawShot { i_samples, q_samples, label });
    }
    Ok((header, shots))
}

/// Writes `path` (QRD1) and `path.json` (device sidecar).
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_qrd(&mut w, ds)?;
    w.flush()?;
    let sidecar = Sidecar { device: ds.device.clone(), shots_per_state: ds.shots_per_state };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let mut r = BufReader::new(File::open(path)?);
    let (header, shots) = read_qrd(&mut r)?;
    let dev = &sidecar.device;
    if header.n_qubits != dev.n_qubits() || header.n_samples != dev.n_samples || header.sample_rate_hz != dev.sample_rate_hz {
        return Err(Error::Format("QRD header disagrees with its JSON sidecar".into()));
    }
    if let Some(bad) = shots.iter().find(|s| (s.label as u64) >= 1u64 << dev.n_qubits()) {
        return Err(Error::Format(format!("label {} out of range", bad.label)));
    }
    Ok(Dataset { device: sidecar.device, shots, shots_per_state: sidecar.shots_per_state })
}
