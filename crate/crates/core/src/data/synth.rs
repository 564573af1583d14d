//! Synthetic causal weld-process dataset.
//!
//! Every sample is generated from a latent process trajectory `theta(t)`
//! (a smooth stationary wander around a nominal setpoint). All observable
//! modalities are functions of that trajectory:
//!
//! - sensors: per-channel linear readout of `theta(t)` plus channel noise
//! - video/audio features: fixed random nonlinear embeddings of windowed
//!   trajectory statistics plus noise
//! - result images: per-token nonlinear embeddings of the integrated process
//!   energy `E = mean_t g(theta(t))`, one independent noise draw per angle
//!
//! The generative map process -> result is therefore a genuine function of
//! the trajectory (up to per-angle observation noise), while result ->
//! process is many-to-one: the energy compresses the whole trajectory into a
//! handful of numbers. Defect injection breaks exactly one side of that
//! correspondence, which is what the detector has to catch.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::manifest::{write_manifest, DatasetManifest, SampleEntry};
use crate::data::tensor_file::write_tensor;
use crate::data::{DefectKind, C_S, M_ANGLES, T_S};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

// Latent trajectory dynamics: AR(1) deviation around the setpoint with
// stationary standard deviation THETA_STD.
const THETA_RHO: f64 = 0.97;
const THETA_STD: f64 = 0.07;
// Scale of the result-side energy shift used for surface defects.
const SURFACE_SHIFT: f64 = 0.5;
// Flavor constants for the six sensor channels (A, V, m/min, bar, L/min, mm).
const CHAN_SCALE: [f64; C_S] = [35.0, 3.2, 1.1, 0.25, 2.4, 60.0];
const CHAN_OFFSET: [f64; C_S] = [220.0, 24.0, 7.5, 1.8, 15.0, 400.0];
// Feature embeddings encode deviations from the nominal process, amplified so
// that sample-to-sample variation (not a common offset) dominates the token
// values; otherwise every latent points the same way and consistency scores
// cannot separate anything.
const GAIN_MEAN: f64 = 5.0;
const GAIN_G: f64 = 3.0;
const GAIN_VAR: f64 = 4.5;
const GAIN_ENERGY: f64 = 12.0;
// Ambient acoustic chatter: a per-sample nuisance component present in the
// audio stream that has no counterpart in the weld result. It makes the
// result -> process direction ill-posed (the observed process carries
// information the result cannot predict).
const GAIN_NUISANCE: f64 = 0.7;
const NUISANCE_DIM: usize = 2;
const GAIN_ENERGY_DEF: f64 = 30.0;
const GAIN_DEFICIT: f64 = 1.4;
// Windows for the local energy-deficit statistic. A transient dip barely
// moves the time-averaged energy (diluted by window/T), but its rectified
// local shortfall accumulates into a statistic the resulting surface
// physically reflects.
const ENERGY_WINDOWS: usize = 16;

/// Synthesis configuration. Counts, shape parameters, noise floors, and the
/// defect mix of the test split.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Feature width shared by video/audio/image tokens.
    pub feat_dim: usize,
    pub n_video: usize,
    pub n_audio: usize,
    pub n_image: usize,
    /// Latent process dimension.
    pub d_theta: usize,
    /// Width of the frozen text anchor written next to the dataset.
    pub text_dim: usize,
    pub sigma_sensor: f64,
    pub sigma_video: f64,
    pub sigma_audio: f64,
    pub sigma_image: f64,
    pub severity_min: f64,
    pub severity_max: f64,
    /// Fraction of the test split that is anomalous.
    pub anomaly_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 128,
            n_val: 64,
            n_test: 192,
            seed: 42,
            feat_dim: 64,
            n_video: 16,
            n_audio: 16,
            n_image: 16,
            d_theta: 4,
            text_dim: 64,
            sigma_sensor: 0.01,
            sigma_video: 0.12,
            sigma_audio: 0.12,
            sigma_image: 0.03,
            severity_min: 0.75,
            severity_max: 1.0,
            anomaly_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split counts must be positive".into()));
        }
        if self.severity_min <= 0.0 || self.severity_max < self.severity_min {
            return Err(Error::Config("severity range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::Config("anomaly_fraction must be in [0, 1]".into()));
        }
        if self.feat_dim == 0 || self.d_theta == 0 || self.text_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.n_video == 0 || self.n_audio == 0 || self.n_image == 0 {
            return Err(Error::Config("token counts must be positive".into()));
        }
        if T_S % self.n_video != 0 || T_S % self.n_audio != 0 {
            return Err(Error::Config(format!(
                "token counts must divide T_s = {T_S}"
            )));
        }
        Ok(())
    }
}

/// One synchronized multimodal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `T_s x C_s` raw sensor series.
    pub sensor_raw: Tensor<f32>,
    /// `N_v x D` process-video feature tokens.
    pub feat_video: Tensor<f32>,
    /// `N_a x D` acoustic feature tokens.
    pub feat_audio: Tensor<f32>,
    /// `M x N_i x D` multi-angle result feature tokens.
    pub feat_image: Tensor<f32>,
    pub defect_kind: DefectKind,
}

impl SampleRecord {
    pub fn label(&self) -> crate::data::Label {
        self.defect_kind.label()
    }
}

/// Fixed, seed-derived world: setpoint, readout matrices, and embedding
/// projections shared by every sample of a dataset.
pub struct SynthWorld {
    cfg: SynthConfig,
    setpoint: Vec<f64>,
    /// `C_s x d_theta` sensor readout.
    w_read: Vec<f64>,
    /// Video embedding of windowed stats: `feat_dim x stat_dim` plus bias.
    p_video: Vec<f64>,
    b_video: Vec<f64>,
    /// Audio embedding of windowed stats.
    p_audio: Vec<f64>,
    b_audio: Vec<f64>,
    /// Shared per-feature image embedding of the energy deviations (mean and
    /// min-window, `feat_dim x 2 d_theta`). Shared across tokens so that
    /// pooling keeps the deviation's direction instead of averaging it away.
    img_proj: Vec<f64>,
    /// Per-token additive identity: `n_image x feat_dim`.
    token_off: Vec<f64>,
    /// Per-angle additive embedding: `M x feat_dim`.
    angle_emb: Vec<f64>,
    /// Audio nuisance projection: `feat_dim x NUISANCE_DIM`.
    nuisance_proj: Vec<f64>,
    /// Calibrated nominal of the rectified-deficit statistic (fluctuating
    /// windows leave a small expected shortfall even for normal
    /// trajectories).
    e_def_nominal: Vec<f64>,
}

fn stat_dim(d_theta: usize) -> usize {
    3 * d_theta + 1
}

/// Nonlinearity integrated into the process energy.
fn g(u: f64) -> f64 {
    u + 0.4 * u * u
}

/// Feature-embedding nonlinearity: smooth curvature around the operating
/// point but asymptotically linear, so out-of-range process excursions keep
/// their magnitude instead of saturating into the normal range's ceiling.
fn embed(v: f64) -> f64 {
    v + 2.8 * v.tanh()
}

/// Centered result-side energy statistics of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyStats {
    /// Time-averaged energy deviation per latent component.
    pub mean_dev: Vec<f64>,
    /// Integrated rectified energy shortfall per latent component (centered).
    pub deficit_dev: Vec<f64>,
}

/// AR(1) trajectory around the setpoint, stationary from the first bin, plus
/// a handful of benign micro-dips (shallow transient depressions that are
/// part of normal operation). The micro-dips drive the local energy-deficit
/// statistics independently of the slow wander, so result features cannot be
/// inferred from the mean level alone; defect dips are the same mechanism an
/// order of magnitude deeper.
fn simulate_theta(setpoint: &[f64], s: &mut Stream) -> Vec<f64> {
    let d = setpoint.len();
    let stationary = THETA_STD;
    let innovation = THETA_STD * (1.0 - THETA_RHO * THETA_RHO).sqrt();
    let mut dev: Vec<f64> = (0..d).map(|_| s.normal() * stationary).collect();
    let mut theta = Vec::with_capacity(T_S * d);
    for t in 0..T_S {
        if t > 0 {
            for dv in dev.iter_mut() {
                *dv = THETA_RHO * *dv + innovation * s.normal();
            }
        }
        for k in 0..d {
            theta.push(setpoint[k] + dev[k]);
        }
    }
    let micro_dips = s.below(4);
    for _ in 0..micro_dips {
        let component = s.below(d);
        let len = 4 + s.below(9); // 4..=12 bins
        let start = s.below(T_S - len + 1);
        let depth = s.uniform_in(0.05, 0.25);
        for t in start..start + len {
            theta[t * d + component] *= 1.0 - depth;
        }
    }
    theta
}

/// Mean over fixed windows of the rectified window-energy shortfall
/// `relu(g(setpoint) - window-mean g(theta))`, per component.
fn deficit_energy(theta: &[f64], setpoint: &[f64]) -> Vec<f64> {
    let d = setpoint.len();
    let win = T_S / ENERGY_WINDOWS;
    let mut deficit = vec![0.0f64; d];
    for w in 0..ENERGY_WINDOWS {
        for k in 0..d {
            let mut acc = 0.0;
            for t in w * win..(w + 1) * win {
                acc += g(theta[t * d + k]);
            }
            let shortfall = g(setpoint[k]) - acc / win as f64;
            if shortfall > 0.0 {
                deficit[k] += shortfall;
            }
        }
    }
    for v in deficit.iter_mut() {
        *v /= ENERGY_WINDOWS as f64;
    }
    deficit
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_theta;
        let sd = stat_dim(d);
        let mut s = Stream::derive(cfg.seed, "world.setpoint", 0);
        let setpoint: Vec<f64> = (0..d).map(|_| s.uniform_in(0.8, 1.2)).collect();

        let mut s = Stream::derive(cfg.seed, "world.w_read", 0);
        let scale = 1.0 / (d as f64).sqrt();
        let w_read: Vec<f64> = (0..C_S * d).map(|_| s.normal() * scale).collect();

        let mut s = Stream::derive(cfg.seed, "world.video", 0);
        let pscale = 1.0 / (sd as f64).sqrt();
        let p_video: Vec<f64> = (0..cfg.feat_dim * sd).map(|_| s.normal() * pscale).collect();
        let b_video: Vec<f64> = (0..cfg.feat_dim).map(|_| s.normal() * 0.2).collect();

        let mut s = Stream::derive(cfg.seed, "world.audio", 0);
        let p_audio: Vec<f64> = (0..cfg.feat_dim * sd).map(|_| s.normal() * pscale).collect();
        let b_audio: Vec<f64> = (0..cfg.feat_dim).map(|_| s.normal() * 0.2).collect();
        let nscale = 1.0 / (NUISANCE_DIM as f64).sqrt();
        let nuisance_proj: Vec<f64> = (0..cfg.feat_dim * NUISANCE_DIM)
            .map(|_| s.normal() * nscale)
            .collect();

        let mut s = Stream::derive(cfg.seed, "world.image", 0);
        let tscale = 1.0 / (2.0 * d as f64).sqrt();
        let img_proj: Vec<f64> = (0..cfg.feat_dim * 2 * d)
            .map(|_| s.normal() * tscale)
            .collect();
        let token_off: Vec<f64> = (0..cfg.n_image * cfg.feat_dim)
            .map(|_| s.normal() * 0.3)
            .collect();
        let angle_emb: Vec<f64> = (0..M_ANGLES * cfg.feat_dim).map(|_| s.normal() * 0.1).collect();

        // Calibrate the nominal shortfall on simulated normal trajectories
        // (deterministic in the seed).
        let mut e_def_nominal = vec![0.0f64; d];
        let calib_runs = 64u64;
        for run in 0..calib_runs {
            let mut cs = Stream::derive(cfg.seed, "world.calib", run);
            let theta = simulate_theta(&setpoint, &mut cs);
            let defs = deficit_energy(&theta, &setpoint);
            for k in 0..d {
                e_def_nominal[k] += defs[k];
            }
        }
        for v in e_def_nominal.iter_mut() {
            *v /= calib_runs as f64;
        }

        Ok(SynthWorld {
            cfg,
            setpoint,
            w_read,
            p_video,
            b_video,
            p_audio,
            b_audio,
            img_proj,
            token_off,
            angle_emb,
            nuisance_proj,
            e_def_nominal,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Smooth latent trajectory for sample `index`: `T_s x d_theta`.
    pub fn draw_theta(&self, index: u64) -> Vec<f64> {
        let mut s = Stream::derive(self.cfg.seed, "theta", index);
        simulate_theta(&self.setpoint, &mut s)
    }

    /// Result-side energy statistics of a trajectory, centered on their
    /// nominal values: the time-averaged energy deviation and the integrated
    /// rectified shortfall per component.
    pub fn energy_stats(&self, theta: &[f64]) -> EnergyStats {
        let d = self.cfg.d_theta;
        let mut mean_dev = vec![0.0f64; d];
        for t in 0..T_S {
            for k in 0..d {
                mean_dev[k] += g(theta[t * d + k]) - g(self.setpoint[k]);
            }
        }
        for v in mean_dev.iter_mut() {
            *v /= T_S as f64;
        }
        let defs = deficit_energy(theta, &self.setpoint);
        let deficit_dev = defs
            .iter()
            .zip(&self.e_def_nominal)
            .map(|(&m, &nom)| m - nom)
            .collect();
        EnergyStats { mean_dev, deficit_dev }
    }

    fn render_sensor(&self, theta: &[f64], index: u64) -> Tensor<f32> {
        let d = self.cfg.d_theta;
        let mut noise = Stream::derive(self.cfg.seed, "noise.sensor", index);
        let mut data = Vec::with_capacity(T_S * C_S);
        for t in 0..T_S {
            for c in 0..C_S {
                let mut v = 0.0;
                for k in 0..d {
                    v += self.w_read[c * d + k] * theta[t * d + k];
                }
                v += self.cfg.sigma_sensor * noise.normal();
                data.push((CHAN_OFFSET[c] + CHAN_SCALE[c] * v) as f32);
            }
        }
        Tensor::new(vec![T_S, C_S], data).expect("sensor shape")
    }

    /// Windowed trajectory statistics for one window, centered on their
    /// nominal values and gain-amplified. Video windows carry mean deviation
    /// and mean integrated-energy deviation; audio windows carry deviation
    /// power (acoustic-emission style) and mean deviation. Both carry the
    /// rectified local energy deficit, the window-level signature a
    /// transient drop leaves behind.
    fn window_stats(&self, theta: &[f64], w: usize, n_windows: usize, second_order: bool) -> Vec<f64> {
        let d = self.cfg.d_theta;
        let win = T_S / n_windows;
        let start = w * win;
        let mut mean_dev = vec![0.0f64; d];
        let mut mean_g = vec![0.0f64; d];
        let mut mean_sq = vec![0.0f64; d];
        for t in start..start + win {
            for k in 0..d {
                let dev = theta[t * d + k] - self.setpoint[k];
                mean_dev[k] += dev;
                mean_g[k] += g(theta[t * d + k]) - g(self.setpoint[k]);
                mean_sq[k] += dev * dev;
            }
        }
        for k in 0..d {
            mean_dev[k] /= win as f64;
            mean_g[k] /= win as f64;
            mean_sq[k] /= win as f64;
        }
        let mut stats = Vec::with_capacity(stat_dim(d));
        if second_order {
            // Stationary deviation power is THETA_STD^2; center on it.
            for k in 0..d {
                stats.push((mean_sq[k] - THETA_STD * THETA_STD) * GAIN_VAR);
            }
            for k in 0..d {
                stats.push(mean_dev[k] * GAIN_MEAN);
            }
        } else {
            for k in 0..d {
                stats.push(mean_dev[k] * GAIN_MEAN);
            }
            for k in 0..d {
                stats.push(mean_g[k] * GAIN_G);
            }
        }
        for k in 0..d {
            stats.push((-mean_g[k]).max(0.0) * GAIN_DEFICIT);
        }
        stats.push(w as f64 / (n_windows - 1).max(1) as f64);
        stats
    }

    #[allow(clippy::too_many_arguments)]
    fn render_tokens(
        &self,
        theta: &[f64],
        n_tokens: usize,
        proj: &[f64],
        bias: &[f64],
        sigma: f64,
        tag: &str,
        index: u64,
        second_order: bool,
        nuisance: Option<&[f64]>,
    ) -> Tensor<f32> {
        let dim = self.cfg.feat_dim;
        let sd = stat_dim(self.cfg.d_theta);
        let mut noise = Stream::derive(self.cfg.seed, tag, index);
        let mut data = Vec::with_capacity(n_tokens * dim);
        for w in 0..n_tokens {
            let stats = self.window_stats(theta, w, n_tokens, second_order);
            for f in 0..dim {
                let mut v = bias[f];
                for (si, sv) in stats.iter().enumerate() {
                    v += proj[f * sd + si] * sv;
                }
                if let Some(j) = nuisance {
                    for (k, &jv) in j.iter().enumerate() {
                        v += self.nuisance_proj[f * NUISANCE_DIM + k] * jv * GAIN_NUISANCE;
                    }
                }
                data.push((embed(v) + sigma * noise.normal()) as f32);
            }
        }
        Tensor::new(vec![n_tokens, dim], data).expect("token shape")
    }

    fn render_image(&self, energy: &EnergyStats, index: u64) -> Tensor<f32> {
        let d = self.cfg.d_theta;
        let dim = self.cfg.feat_dim;
        let n = self.cfg.n_image;
        let mut noise = Stream::derive(self.cfg.seed, "noise.image", index);
        let mut dev = Vec::with_capacity(2 * d);
        for k in 0..d {
            dev.push(energy.mean_dev[k] * GAIN_ENERGY);
        }
        for k in 0..d {
            dev.push(energy.deficit_dev[k] * GAIN_ENERGY_DEF);
        }
        let mut shared = vec![0.0f64; dim];
        for f in 0..dim {
            for (k, &dv) in dev.iter().enumerate() {
                shared[f] += self.img_proj[f * 2 * d + k] * dv;
            }
        }
        let mut data = Vec::with_capacity(M_ANGLES * n * dim);
        for m in 0..M_ANGLES {
            for j in 0..n {
                for f in 0..dim {
                    let v = shared[f] + self.token_off[j * dim + f] + self.angle_emb[m * dim + f];
                    data.push((embed(v) + self.cfg.sigma_image * noise.normal()) as f32);
                }
            }
        }
        Tensor::new(vec![M_ANGLES, n, dim], data).expect("image shape")
    }

    fn render(&self, process_theta: &[f64], result_energy: &EnergyStats, index: u64, kind: DefectKind) -> SampleRecord {
        // Per-sample ambient chatter, independent of the trajectory and
        // invisible in the result.
        let mut js = Stream::derive(self.cfg.seed, "nuisance", index);
        let nuisance: Vec<f64> = (0..NUISANCE_DIM).map(|_| js.normal()).collect();
        SampleRecord {
            sensor_raw: self.render_sensor(process_theta, index),
            feat_video: self.render_tokens(
                process_theta,
                self.cfg.n_video,
                &self.p_video,
                &self.b_video,
                self.cfg.sigma_video,
                "noise.video",
                index,
                false,
                None,
            ),
            feat_audio: self.render_tokens(
                process_theta,
                self.cfg.n_audio,
                &self.p_audio,
                &self.b_audio,
                self.cfg.sigma_audio,
                "noise.audio",
                index,
                true,
                Some(&nuisance),
            ),
            feat_image: self.render_image(result_energy, index),
            defect_kind: kind,
        }
    }

    /// Renders the normal sample at `index`.
    pub fn render_normal(&self, index: u64) -> SampleRecord {
        let theta = self.draw_theta(index);
        let energy = self.energy_stats(&theta);
        self.render(&theta, &energy, index, DefectKind::None)
    }

    /// Transient multiplicative depression of one trajectory component over a
    /// window of 8..=32 bins.
    fn dip_theta(&self, theta: &[f64], severity: f64, defect: &mut Stream) -> Vec<f64> {
        let d = self.cfg.d_theta;
        let component = defect.below(d);
        let len = 8 + defect.below(25); // uniform in [8, 32]
        let start = defect.below(T_S - len + 1);
        let mut out = theta.to_vec();
        for t in start..start + len {
            out[t * d + component] *= 1.0 - severity;
        }
        out
    }

    /// Energy shift along a random unit direction in the joint
    /// (mean, min-window) statistic space, scaled by severity. The resulting
    /// image is consistent with a different process than the one recorded.
    fn shift_energy(&self, energy: &EnergyStats, severity: f64, defect: &mut Stream) -> EnergyStats {
        let d = self.cfg.d_theta;
        let dir: Vec<f64> = (0..2 * d).map(|_| defect.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let scale = severity * SURFACE_SHIFT / norm;
        EnergyStats {
            mean_dev: energy
                .mean_dev
                .iter()
                .zip(&dir[..d])
                .map(|(&e, &u)| e + scale * u)
                .collect(),
            deficit_dev: energy
                .deficit_dev
                .iter()
                .zip(&dir[d..])
                .map(|(&e, &u)| e + scale * u)
                .collect(),
        }
    }
}

/// Turns the normal sample at `index` into a defective one.
///
/// - `Surface`: only the result features move (the process is unchanged
///   bit for bit).
/// - `ProcessHidden`: the trajectory dips, which propagates into sensors,
///   video, and audio, while the result is rendered from the unperturbed
///   trajectory (bit-identical to the normal render).
/// - `Both`: both effects.
///
/// A severity of zero reproduces the normal sample exactly.
pub fn inject_defect(
    world: &SynthWorld,
    index: u64,
    kind: DefectKind,
    severity: f64,
) -> Result<SampleRecord> {
    if severity < 0.0 {
        return Err(Error::Data(format!("negative severity {severity}")));
    }
    let theta = world.draw_theta(index);
    let energy = world.energy_stats(&theta);
    let mut defect = Stream::derive(world.cfg.seed, "defect", index);
    let (process_theta, result_energy) = match kind {
        DefectKind::None => (theta.clone(), energy.clone()),
        DefectKind::Surface => {
            let shifted = world.shift_energy(&energy, severity, &mut defect);
            (theta.clone(), shifted)
        }
        DefectKind::ProcessHidden => {
            let dipped = world.dip_theta(&theta, severity, &mut defect);
            (dipped, energy.clone())
        }
        DefectKind::Both => {
            let dipped = world.dip_theta(&theta, severity, &mut defect);
            let shifted = world.shift_energy(&energy, severity, &mut defect);
            (dipped, shifted)
        }
    };
    Ok(world.render(&process_theta, &result_energy, index, kind))
}

/// Adds seeded Gaussian noise to a sensor tensor on a channel-normalized
/// scale: per channel, the noise standard deviation is `sigma` times that
/// channel's empirical standard deviation (1.0 for a constant channel).
/// `sigma == 0` returns the input bit for bit.
pub fn add_sensor_noise(x: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    if sigma < 0.0 {
        return Err(Error::Data(format!("negative sigma {sigma}")));
    }
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected T x C sensor tensor, got {:?}",
            x.shape()
        )));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let mut scale = vec![0.0f64; c];
    for ci in 0..c {
        let mut mean = 0.0;
        for ti in 0..t {
            mean += x.data()[ti * c + ci] as f64;
        }
        mean /= t as f64;
        let mut var = 0.0;
        for ti in 0..t {
            let d = x.data()[ti * c + ci] as f64 - mean;
            var += d * d;
        }
        let std = (var / t as f64).sqrt();
        scale[ci] = if std > 0.0 { std } else { 1.0 };
    }
    let mut stream = Stream::derive(seed, "sensor-noise", 0);
    let mut data = Vec::with_capacity(t * c);
    for ti in 0..t {
        for ci in 0..c {
            let v = x.data()[ti * c + ci] as f64 + sigma * scale[ci] * stream.normal();
            data.push(v as f32);
        }
    }
    Tensor::new(vec![t, c], data)
}

/// Paths produced by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub text_anchor: PathBuf,
}

/// Deterministic defect assignment for one test-split position.
fn test_kind(position: usize, n_test: usize, fraction: f64, anomalous_so_far: usize) -> DefectKind {
    let quota_before = ((position as f64) * fraction).round() as usize;
    let quota_after = ((position as f64 + 1.0) * fraction).round() as usize;
    let _ = n_test;
    if quota_after > quota_before {
        match anomalous_so_far % 3 {
            0 => DefectKind::Surface,
            1 => DefectKind::ProcessHidden,
            _ => DefectKind::Both,
        }
    } else {
        DefectKind::None
    }
}

/// Generates train/val/test splits under `out_dir`, plus the frozen text
/// anchor. Training and validation splits are all-normal; the test split
/// mixes normals with the three defect kinds. Fully deterministic in the
/// config seed: generating twice produces byte-identical files.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    let world = SynthWorld::new(cfg.clone())?;
    fs::create_dir_all(out_dir)?;

    // Frozen unit-norm text anchor, written once at the dataset root.
    let anchor_path = out_dir.join("e_text.phmt");
    let mut s = Stream::derive(cfg.seed, "text-anchor", 0);
    let raw: Vec<f64> = s.normal_vec(cfg.text_dim);
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let anchor: Vec<f32> = raw.iter().map(|v| (v / norm) as f32).collect();
    write_tensor(
        &anchor_path,
        &Tensor::<f32>::new(vec![cfg.text_dim], anchor)?,
    )?;

    let mut next_index = 0u64;
    let mut manifests = Vec::new();
    for (split, count) in [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)] {
        let split_dir = out_dir.join(split);
        fs::create_dir_all(&split_dir)?;
        let mut entries = Vec::with_capacity(count);
        let mut anomalous = 0usize;
        for p in 0..count {
            let index = next_index;
            next_index += 1;
            let kind = if split == "test" {
                test_kind(p, count, cfg.anomaly_fraction, anomalous)
            } else {
                DefectKind::None
            };
            let record = if kind == DefectKind::None {
                world.render_normal(index)
            } else {
                anomalous += 1;
                let mut sev = Stream::derive(cfg.seed, "severity", index);
                let severity = sev.uniform_in(cfg.severity_min, cfg.severity_max);
                inject_defect(&world, index, kind, severity)?
            };
            let rel_dir = format!("sample_{p:04}");
            let sample_dir = split_dir.join(&rel_dir);
            fs::create_dir_all(&sample_dir)?;
            write_tensor(&sample_dir.join("sensor_raw.phmt"), &record.sensor_raw)?;
            write_tensor(&sample_dir.join("feat_video.phmt"), &record.feat_video)?;
            write_tensor(&sample_dir.join("feat_audio.phmt"), &record.feat_audio)?;
            write_tensor(&sample_dir.join("feat_image.phmt"), &record.feat_image)?;
            entries.push(SampleEntry {
                index: p,
                label: kind.label(),
                defect_kind: kind,
                rel_dir,
            });
        }
        let manifest = DatasetManifest {
            split: split.to_string(),
            seed: cfg.seed,
            t_s: T_S,
            c_s: C_S,
            m_angles: M_ANGLES,
            n_video: cfg.n_video,
            n_audio: cfg.n_audio,
            n_image: cfg.n_image,
            feat_dim: cfg.feat_dim,
            text_anchor: "../e_text.phmt".to_string(),
            val_manifest: (split == "train").then(|| "../val/manifest.txt".to_string()),
            test_manifest: (split == "train").then(|| "../test/manifest.txt".to_string()),
            entries,
        };
        let path = split_dir.join("manifest.txt");
        write_manifest(&manifest, &path)?;
        manifests.push(path);
    }

    let mut it = manifests.into_iter();
    Ok(GeneratedDataset {
        root: out_dir.to_path_buf(),
        train_manifest: it.next().unwrap(),
        val_manifest: it.next().unwrap(),
        test_manifest: it.next().unwrap(),
        text_anchor: anchor_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_train: 4,
            n_val: 2,
            n_test: 6,
            feat_dim: 8,
            n_video: 4,
            n_audio: 4,
            n_image: 4,
            text_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rendering_is_deterministic_per_index() {
        let world = SynthWorld::new(tiny_cfg()).unwrap();
        let a = world.render_normal(3);
        let b = world.render_normal(3);
        assert_eq!(a, b);
        let c = world.render_normal(4);
        assert_ne!(a.sensor_raw, c.sensor_raw);
    }

    #[test]
    fn zero_severity_is_the_identity() {
        let world = SynthWorld::new(tiny_cfg()).unwrap();
        let normal = world.render_normal(0);
        for kind in [DefectKind::Surface, DefectKind::ProcessHidden, DefectKind::Both] {
            let injected = inject_defect(&world, 0, kind, 0.0).unwrap();
            assert_eq!(injected.sensor_raw, normal.sensor_raw);
            assert_eq!(injected.feat_video, normal.feat_video);
            assert_eq!(injected.feat_audio, normal.feat_audio);
            assert_eq!(injected.feat_image, normal.feat_image);
        }
    }

    #[test]
    fn process_hidden_changes_only_the_dip_window_of_sensors() {
        let world = SynthWorld::new(tiny_cfg()).unwrap();
        let normal = world.render_normal(1);
        let defective = inject_defect(&world, 1, DefectKind::ProcessHidden, 0.9).unwrap();
        // Result features are bit-identical.
        assert_eq!(defective.feat_image, normal.feat_image);
        // Sensor rows differ exactly on one contiguous window of 8..=32 bins.
        let mut changed_rows = Vec::new();
        for t in 0..T_S {
            let row_differs = (0..C_S).any(|c| {
                normal.sensor_raw.data()[t * C_S + c] != defective.sensor_raw.data()[t * C_S + c]
            });
            if row_differs {
                changed_rows.push(t);
            }
        }
        assert!(!changed_rows.is_empty());
        let len = changed_rows.len();
        assert!((8..=32).contains(&len), "window length {len}");
        let contiguous = changed_rows.windows(2).all(|w| w[1] == w[0] + 1);
        assert!(contiguous, "changed rows {changed_rows:?}");
    }

    #[test]
    fn surface_changes_only_result_features() {
        let world = SynthWorld::new(tiny_cfg()).unwrap();
        let normal = world.render_normal(2);
        let defective = inject_defect(&world, 2, DefectKind::Surface, 0.9).unwrap();
        assert_eq!(defective.sensor_raw, normal.sensor_raw);
        assert_eq!(defective.feat_video, normal.feat_video);
        assert_eq!(defective.feat_audio, normal.feat_audio);
        assert_ne!(defective.feat_image, normal.feat_image);
    }

    #[test]
    fn result_is_a_function_of_the_trajectory() {
        // Re-rendering the image features from the sample's trajectory
        // reproduces them exactly: the generative map is a function.
        let world = SynthWorld::new(tiny_cfg()).unwrap();
        let record = world.render_normal(5);
        let theta = world.draw_theta(5);
        let energy = world.energy_stats(&theta);
        let again = world.render_image(&energy, 5);
        assert_eq!(record.feat_image, again);
    }

    #[test]
    fn sensor_noise_contract() {
        // Unit-variance channels: std of (out - in) approximates sigma.
        let t = T_S;
        let data: Vec<f32> = (0..t * C_S)
            .map(|i| if (i / C_S) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::<f32>::new(vec![t, C_S], data).unwrap();
        let noisy = add_sensor_noise(&x, 0.3, 7).unwrap();
        let diffs: Vec<f64> = x
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(&a, &b)| (b - a) as f64)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.3).abs() / 0.3 < 0.05, "noise std {std}");

        // sigma = 0 returns the input bit for bit.
        let same = add_sensor_noise(&x, 0.0, 7).unwrap();
        assert_eq!(same, x);

        // Distinct seeds give distinct outputs of the same shape.
        let other = add_sensor_noise(&x, 0.3, 8).unwrap();
        assert_eq!(other.shape(), noisy.shape());
        assert_ne!(other, noisy);

        assert!(add_sensor_noise(&x, -0.1, 7).is_err());
    }

    #[test]
    fn shared_theta_distinct_noise_moves_only_observations() {
        // Two renders of the same trajectory under different noise indices:
        // image features differ, while the trajectory (and therefore the
        // noiseless part of the sensors) is shared.
        let world = SynthWorld::new(tiny_cfg()).unwrap();
        let theta = world.draw_theta(0);
        let energy = world.energy_stats(&theta);
        let img_a = world.render_image(&energy, 0);
        let img_b = world.render_image(&energy, 1);
        assert_ne!(img_a, img_b);
        let sens_a = world.render_sensor(&theta, 0);
        let sens_b = world.render_sensor(&theta, 0);
        assert_eq!(sens_a, sens_b);
    }
}
