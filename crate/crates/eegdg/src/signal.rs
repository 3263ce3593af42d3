//! Preprocessing: zero-phase Butterworth band-pass, per-trial min-max
//! scaling, trial cropping, and splitting a recording into pseudo-domains.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::solve;
use crate::tensor::Tensor;

/// One continuous multichannel recording with trial markers.
#[derive(Debug, Clone)]
pub struct RawRecording {
    /// [channels, timesteps].
    pub data: Tensor,
    pub fs_hz: f64,
    /// (onset sample, class label) per trial, onset relative to recording start.
    pub markers: Vec<(usize, usize)>,
    /// One name per channel; may be empty when names are unknown.
    pub channel_names: Vec<String>,
}

impl RawRecording {
    pub fn new(
        data: Tensor,
        fs_hz: f64,
        markers: Vec<(usize, usize)>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let s = data.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("recording data must be [c,t], got {:?}", s)));
        }
        if s[0] == 0 {
            return Err(Error::ingestion("recording has zero channels"));
        }
        if !(fs_hz > 0.0) {
            return Err(Error::config(format!("sample rate {fs_hz} Hz must be positive")));
        }
        if !channel_names.is_empty() && channel_names.len() != s[0] {
            return Err(Error::ingestion(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                s[0]
            )));
        }
        Ok(RawRecording { data, fs_hz, markers, channel_names })
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_timesteps(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Labeled trials of one domain.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    /// [samples, channels, timesteps].
    pub x: Tensor,
    pub y: Vec<usize>,
    pub domain_id: usize,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn new(x: Tensor, y: Vec<usize>, domain_id: usize, class_count: usize) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("domain data must be [n,c,t], got {:?}", s)));
        }
        if s[0] != y.len() {
            return Err(Error::ingestion(format!(
                "{} samples vs {} labels",
                s[0],
                y.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::config("class_count must be positive"));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_count) {
            return Err(Error::ingestion(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(DomainDataset { x, y, domain_id, class_count })
    }

    pub fn n_samples(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn n_timesteps(&self) -> usize {
        self.x.shape()[2]
    }

    /// One trial as a flat [channels * timesteps] row.
    pub fn flat_row(&self, i: usize) -> &[f64] {
        let row = self.n_channels() * self.n_timesteps();
        &self.x.data()[i * row..(i + 1) * row]
    }
}

/// Digital IIR transfer function coefficients, a[0] = 1.
#[derive(Debug, Clone)]
pub struct BandpassFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

/// Designs a Butterworth band-pass of the given order via the analog
/// prototype, low-pass-to-band-pass transform, and bilinear transform with
/// frequency pre-warping. Errors if the band is invalid or any pole lands on
/// or outside the unit circle.
pub fn design_bandpass(lo_hz: f64, hi_hz: f64, fs_hz: f64, order: usize) -> Result<BandpassFilter> {
    if order == 0 {
        return Err(Error::config("filter order must be at least 1"));
    }
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs_hz / 2.0) {
        return Err(Error::config(format!(
            "band [{lo_hz}, {hi_hz}] Hz must satisfy 0 < lo < hi < fs/2 = {}",
            fs_hz / 2.0
        )));
    }
    let n = order;
    // Stable analog prototype poles on the unit circle, left half-plane.
    let prototype: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();
    // Pre-warped edge frequencies in rad/s.
    let warp = |f: f64| 2.0 * fs_hz * (std::f64::consts::PI * f / fs_hz).tan();
    let wl = warp(lo_hz);
    let wh = warp(hi_hz);
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;
    // Low-pass to band-pass: each prototype pole yields a conjugate pair.
    let mut poles = Vec::with_capacity(2 * n);
    for &p in &prototype {
        let plp = p * (bw / 2.0);
        let disc = (plp * plp - Complex64::new(w0 * w0, 0.0)).sqrt();
        poles.push(plp + disc);
        poles.push(plp - disc);
    }
    // n analog zeros at s = 0; band-pass gain bw^n.
    let gain = bw.powi(n as i32);
    // Bilinear transform s -> 2 fs (z-1)/(z+1).
    let fs2 = Complex64::new(2.0 * fs_hz, 0.0);
    let mut zpoles = Vec::with_capacity(2 * n);
    let mut num = Complex64::new(gain, 0.0);
    for &p in &poles {
        zpoles.push((fs2 + p) / (fs2 - p));
        num /= fs2 - p;
    }
    // Analog zeros at 0 map to z = 1; each contributes (fs2 - 0) to the gain.
    let mut zzeros = vec![Complex64::new(1.0, 0.0); n];
    num *= fs2.powu(n as u32);
    // Degree deficit appends zeros at z = -1.
    zzeros.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(n));
    for zp in &zpoles {
        let r = zp.norm();
        if r >= 1.0 {
            return Err(Error::numeric(format!(
                "unstable filter design: pole magnitude {r:.6} >= 1"
            )));
        }
    }
    let k = num.re;
    let b: Vec<f64> = poly_from_roots(&zzeros).iter().map(|c| c.re * k).collect();
    let a: Vec<f64> = poly_from_roots(&zpoles).iter().map(|c| c.re).collect();
    Ok(BandpassFilter { b, a })
}

/// Monic polynomial coefficients (highest degree first) from roots.
fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        coeffs.push(Complex64::new(0.0, 0.0));
        for i in (1..coeffs.len()).rev() {
            let prev = coeffs[i - 1];
            coeffs[i] -= r * prev;
        }
    }
    coeffs
}

impl BandpassFilter {
    /// |H(e^{j 2 pi f / fs})| of the single-pass filter.
    pub fn magnitude_at(&self, f_hz: f64, fs_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / fs_hz;
        let z = Complex64::new(0.0, -w).exp();
        // Horner in z^{-1}: the implicit z^N factors cancel in the ratio.
        let eval = |c: &[f64]| {
            let mut acc = Complex64::new(0.0, 0.0);
            for &ck in c {
                acc = acc * z + ck;
            }
            acc
        };
        (eval(&self.b) / eval(&self.a)).norm()
    }

    /// Steady-state initial filter state for a unit step (direct form II
    /// transposed), used to suppress start-up transients.
    fn initial_state(&self) -> Result<Vec<f64>> {
        let n = self.a.len().max(self.b.len());
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        a.resize(n, 0.0);
        b.resize(n, 0.0);
        let m = n - 1;
        // (I - A^T) zi = B with companion-form A.
        let mut mat = vec![0.0; m * m];
        for i in 0..m {
            mat[i * m] += a[i + 1];
            mat[i * m + i] += 1.0;
            if i + 1 < m {
                mat[i * m + i + 1] -= 1.0;
            }
        }
        let rhs: Vec<f64> = (0..m).map(|i| b[i + 1] - a[i + 1] * b[0]).collect();
        solve(&mat, &rhs, m)
    }

    /// Single-pass IIR filter (direct form II transposed) with initial state
    /// scaled to the first sample.
    fn filter_with_state(&self, x: &[f64], zi: &[f64]) -> Vec<f64> {
        let n = self.a.len().max(self.b.len());
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        a.resize(n, 0.0);
        b.resize(n, 0.0);
        let mut z: Vec<f64> = zi.iter().map(|v| v * x[0]).collect();
        let mut y = vec![0.0; x.len()];
        for (i, &xv) in x.iter().enumerate() {
            let yv = b[0] * xv + z[0];
            for k in 0..z.len() {
                let next = if k + 1 < z.len() { z[k + 1] } else { 0.0 };
                z[k] = b[k + 1] * xv + next - a[k + 1] * yv;
            }
            y[i] = yv;
        }
        y
    }

    /// Forward-backward (zero-phase) filtering with odd-reflection padding.
    /// The effective magnitude response is the square of the single pass.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = 3 * self.a.len().max(self.b.len());
        if x.len() <= pad {
            return Err(Error::contract(format!(
                "signal length {} too short for filter padding {}",
                x.len(),
                pad
            )));
        }
        let zi = self.initial_state()?;
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let fwd = self.filter_with_state(&ext, &zi);
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        rev = self.filter_with_state(&rev, &zi);
        rev.reverse();
        Ok(rev[pad..pad + n].to_vec())
    }
}

/// Zero-phase band-pass over every channel of the recording; markers and
/// length are unchanged.
pub fn bandpass(rec: &RawRecording, lo_hz: f64, hi_hz: f64, order: usize) -> Result<RawRecording> {
    let filter = design_bandpass(lo_hz, hi_hz, rec.fs_hz, order)?;
    let (c, t) = (rec.n_channels(), rec.n_timesteps());
    let mut out = vec![0.0; c * t];
    for ch in 0..c {
        let seg = &rec.data.data()[ch * t..(ch + 1) * t];
        out[ch * t..(ch + 1) * t].copy_from_slice(&filter.filtfilt(seg)?);
    }
    Ok(RawRecording {
        data: Tensor::new(vec![c, t], out)?,
        fs_hz: rec.fs_hz,
        markers: rec.markers.clone(),
        channel_names: rec.channel_names.clone(),
    })
}

/// Per-channel, per-trial min-max scaling to [0,1]; constant channels map to
/// zero. Accepts [c,t] (one trial) or [n,c,t].
pub fn minmax_scale(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let t = match s.len() {
        2 => s[1],
        3 => s[2],
        _ => {
            return Err(Error::dim(format!(
                "minmax_scale needs [c,t] or [n,c,t], got {:?}",
                s
            )))
        }
    };
    let rows = x.numel() / t.max(1);
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let seg = &x.data()[r * t..(r + 1) * t];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in seg {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        if span > 0.0 {
            for (i, &v) in seg.iter().enumerate() {
                out[r * t + i] = (v - lo) / span;
            }
        }
        // span == 0 leaves zeros.
    }
    Tensor::new(s, out)
}

/// Cuts one window per marker, [onset + offset, onset + offset + length), into
/// an unsplit dataset with domain_id 0 and class_count = max label + 1.
pub fn crop_windows(
    rec: &RawRecording,
    start_offset_s: f64,
    length_s: f64,
) -> Result<DomainDataset> {
    let (c, t) = (rec.n_channels(), rec.n_timesteps());
    if length_s <= 0.0 {
        return Err(Error::config(format!("window length {length_s} s must be positive")));
    }
    let offset = (start_offset_s * rec.fs_hz).round() as i64;
    let t_w = (length_s * rec.fs_hz).round() as usize;
    if t_w == 0 {
        return Err(Error::config(format!("window {length_s} s is shorter than one sample")));
    }
    let n = rec.markers.len();
    if n == 0 {
        return Err(Error::ingestion("recording has no trial markers"));
    }
    let mut out = vec![0.0; n * c * t_w];
    let mut labels = Vec::with_capacity(n);
    for (trial, &(onset, label)) in rec.markers.iter().enumerate() {
        let start = onset as i64 + offset;
        if start < 0 || (start as usize) + t_w > t {
            return Err(Error::ingestion(format!(
                "trial {trial}: window [{start}, {}) outside recording of {t} samples",
                start + t_w as i64
            )));
        }
        let start = start as usize;
        for ch in 0..c {
            let src = ch * t + start;
            let dst = (trial * c + ch) * t_w;
            out[dst..dst + t_w].copy_from_slice(&rec.data.data()[src..src + t_w]);
        }
        labels.push(label);
    }
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    DomainDataset::new(Tensor::new(vec![n, c, t_w], out)?, labels, 0, class_count)
}

/// Shuffles trials with the seed and deals them into `n` parts with sizes
/// differing by at most one. All parts inherit the input's class_count and
/// get domain_ids 0..n-1.
pub fn split_into_domains(ds: &DomainDataset, n: usize, seed: u64) -> Result<Vec<DomainDataset>> {
    if n < 2 {
        return Err(Error::config(format!("need at least 2 pseudo-domains, got {n}")));
    }
    let total = ds.n_samples();
    if total < n {
        return Err(Error::config(format!("{total} trials cannot fill {n} domains")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (c, t) = (ds.n_channels(), ds.n_timesteps());
    let row = c * t;
    let base = total / n;
    let extra = total % n;
    let mut datasets = Vec::with_capacity(n);
    let mut cursor = 0;
    for domain_id in 0..n {
        let size = base + usize::from(domain_id < extra);
        let members = &order[cursor..cursor + size];
        cursor += size;
        let mut data = Vec::with_capacity(size * row);
        let mut labels = Vec::with_capacity(size);
        for &m in members {
            data.extend_from_slice(&ds.x.data()[m * row..(m + 1) * row]);
            labels.push(ds.y[m]);
        }
        datasets.push(DomainDataset::new(
            Tensor::new(vec![size, c, t], data)?,
            labels,
            domain_id,
            ds.class_count,
        )?);
    }
    Ok(datasets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Analytic magnitude of the analog Butterworth band-pass prototype at the
    /// pre-warped frequency; the bilinear transform preserves this exactly.
    fn analog_magnitude(f_hz: f64, lo: f64, hi: f64, fs: f64, order: usize) -> f64 {
        let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
        let (wl, wh) = (warp(lo), warp(hi));
        let w0sq = wl * wh;
        let bw = wh - wl;
        let w = warp(f_hz);
        let ratio = (w * w - w0sq) / (bw * w);
        1.0 / (1.0 + ratio.powi(2 * order as i32)).sqrt()
    }

    fn ramp_recording(c: usize, t: usize, markers: Vec<(usize, usize)>) -> RawRecording {
        let data: Vec<f64> = (0..c * t).map(|v| v as f64).collect();
        RawRecording::new(Tensor::new(vec![c, t], data).unwrap(), 1.0, markers, vec![]).unwrap()
    }

    #[test]
    fn digital_response_matches_analog_prototype_through_the_warp() {
        let (lo, hi, fs, order) = (8.0, 35.0, 250.0, 4);
        let filt = design_bandpass(lo, hi, fs, order).unwrap();
        for f in [2.0, 5.0, 8.0, 12.0, 20.0, 30.0, 35.0, 50.0, 80.0] {
            let got = filt.magnitude_at(f, fs);
            let want = analog_magnitude(f, lo, hi, fs, order);
            assert!(
                (got - want).abs() < 1e-8,
                "at {f} Hz: digital {got}, analog {want}"
            );
        }
        // Band edges sit at the half-power point.
        assert!((filt.magnitude_at(8.0, fs) - 1.0 / 2.0f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn design_rejects_bad_bands_and_order() {
        assert!(matches!(design_bandpass(35.0, 8.0, 250.0, 4), Err(Error::Config(_))));
        assert!(matches!(design_bandpass(8.0, 130.0, 250.0, 4), Err(Error::Config(_))));
        assert!(matches!(design_bandpass(0.0, 35.0, 250.0, 4), Err(Error::Config(_))));
        assert!(matches!(design_bandpass(8.0, 35.0, 250.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn in_band_sinusoid_passes_with_unit_gain_and_zero_phase() {
        let fs = 250.0;
        let n = 1000;
        let data: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 20.0 * i as f64 / fs).sin())
            .collect();
        let rec =
            RawRecording::new(Tensor::new(vec![1, n], data).unwrap(), fs, vec![], vec![]).unwrap();
        let out = bandpass(&rec, 8.0, 35.0, 4).unwrap();
        assert_eq!(out.n_timesteps(), n);
        let x = rec.data.data();
        let y = out.data.data();
        // Trim edges, compare amplitude via RMS and phase via direct error.
        let interior = 100..n - 100;
        let rms = |v: &[f64]| (v.iter().map(|u| u * u).sum::<f64>() / v.len() as f64).sqrt();
        let ratio = rms(&y[interior.clone()]) / rms(&x[interior.clone()]);
        assert!((ratio - 1.0).abs() < 0.05, "amplitude ratio {ratio}");
        let max_dev = x[interior.clone()]
            .iter()
            .zip(&y[interior])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 0.05, "zero-phase deviation {max_dev}");
    }

    #[test]
    fn out_of_band_sinusoid_is_attenuated_over_20_db() {
        let fs = 250.0;
        let filt = design_bandpass(8.0, 35.0, fs, 4).unwrap();
        let n = 1000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 2.0 * i as f64 / fs).sin())
            .collect();
        let y = filt.filtfilt(&x).unwrap();
        let interior = 200..n - 200;
        let rms = |v: &[f64]| (v.iter().map(|u| u * u).sum::<f64>() / v.len() as f64).sqrt();
        let ratio = rms(&y[interior.clone()]) / rms(&x[interior]);
        assert!(ratio < 0.1, "2 Hz leakage {ratio}");
    }

    #[test]
    fn zero_input_stays_exactly_zero() {
        let filt = design_bandpass(8.0, 35.0, 250.0, 4).unwrap();
        let y = filt.filtfilt(&vec![0.0; 500]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_hits_zero_and_one_and_zeroes_constant_channels() {
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, 3.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
        let y = minmax_scale(&x).unwrap();
        assert_eq!(&y.data()[0..3], &[0.0, 1.0, 0.5]);
        assert_eq!(&y.data()[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn minmax_output_always_within_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let data: Vec<f64> = (0..60).map(|_| rng.gen::<f64>() * 100.0 - 50.0).collect();
            let x = Tensor::new(vec![2, 3, 10], data).unwrap();
            let y = minmax_scale(&x).unwrap();
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for r in 0..6 {
                let seg = &y.data()[r * 10..(r + 1) * 10];
                let lo = seg.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_extracts_exact_windows() {
        // 1 channel ramp 0..20, markers at samples 2 and 10, offset 1 sample.
        let rec = ramp_recording(1, 20, vec![(2, 0), (10, 1)]);
        let ds = crop_windows(&rec, 1.0, 3.0).unwrap();
        assert_eq!(ds.x.shape(), &[2, 1, 3]);
        assert_eq!(ds.flat_row(0), &[3.0, 4.0, 5.0]);
        assert_eq!(ds.flat_row(1), &[11.0, 12.0, 13.0]);
        assert_eq!(ds.y, vec![0, 1]);
        assert_eq!(ds.class_count, 2);
    }

    #[test]
    fn crop_of_whole_trial_is_the_identity_slice() {
        let rec = ramp_recording(2, 6, vec![(0, 0)]);
        let ds = crop_windows(&rec, 0.0, 6.0).unwrap();
        assert_eq!(ds.x.data(), rec.data.data());
    }

    #[test]
    fn crop_names_the_out_of_bounds_trial() {
        let rec = ramp_recording(1, 10, vec![(0, 0), (8, 1)]);
        let err = crop_windows(&rec, 0.0, 4.0).unwrap_err().to_string();
        assert!(err.contains("trial 1"), "{err}");
    }

    #[test]
    fn split_partitions_evenly_and_preserves_trials() {
        let n = 10;
        let data: Vec<f64> = (0..n * 2).map(|v| v as f64).collect();
        let x = Tensor::new(vec![n, 1, 2], data).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let ds = DomainDataset::new(x, y.clone(), 0, 3).unwrap();
        let parts = split_into_domains(&ds, 3, 9).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.n_samples()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(parts.iter().all(|p| p.class_count == 3));
        assert_eq!(parts.iter().map(|p| p.domain_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        // Multiset of rows is preserved: match each original trial once.
        let mut seen: Vec<(u64, usize)> = Vec::new();
        for p in &parts {
            for i in 0..p.n_samples() {
                seen.push((p.flat_row(i)[0].to_bits(), p.y[i]));
            }
        }
        seen.sort();
        let mut want: Vec<(u64, usize)> =
            (0..n).map(|i| ((2 * i) as f64).to_bits()).zip(y).collect();
        want.sort();
        assert_eq!(seen, want);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let x = Tensor::new(vec![6, 1, 1], (0..6).map(|v| v as f64).collect()).unwrap();
        let y = vec![0, 1, 0, 1, 0, 1];
        let ds = DomainDataset::new(x, y, 0, 2).unwrap();
        let a = split_into_domains(&ds, 2, 5).unwrap();
        let b = split_into_domains(&ds, 2, 5).unwrap();
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.x.data(), db.x.data());
            assert_eq!(da.y, db.y);
        }
        let c = split_into_domains(&ds, 2, 6).unwrap();
        assert!(
            a[0].x.data() != c[0].x.data() || a[0].y != c[0].y,
            "different seeds should reshuffle"
        );
    }

    #[test]
    fn split_rejects_single_domain() {
        let x = Tensor::new(vec![4, 1, 1], vec![0.0; 4]).unwrap();
        let ds = DomainDataset::new(x, vec![0, 0, 1, 1], 0, 2).unwrap();
        let err = split_into_domains(&ds, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn filter_then_crop_then_scale_stays_in_unit_interval() {
        let fs = 250.0;
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..2 * n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let rec = RawRecording::new(
            Tensor::new(vec![2, n], data).unwrap(),
            fs,
            vec![(100, 0), (800, 1), (1400, 0)],
            vec![],
        )
        .unwrap();
        let filtered = bandpass(&rec, 8.0, 35.0, 4).unwrap();
        let ds = crop_windows(&filtered, 0.0, 2.0).unwrap();
        let scaled = minmax_scale(&ds.x).unwrap();
        assert!(scaled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
