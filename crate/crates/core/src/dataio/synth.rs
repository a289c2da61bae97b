//! Toy V1 population: Gabor receptive fields placed retinotopically,
//! multiplicative behavioral gain, gaze-contingent receptive-field shifts
//! and Poisson spiking.

use std::collections::BTreeMap;
use std::path::Path;

use super::format::{write_dataset, Dataset, MouseRecord, Split};
use super::{BEHAVIOR_DIM, DILATION, DILATION_DERIVATIVE, PUPIL_X, PUPIL_Y, RUNNING_SPEED};
use crate::error::{Error, Result};
use crate::tensorcore::ops::{elu_plus_one_scalar, resize_bilinear};
use crate::tensorcore::{Rng, Tensor};

/// Pixel encoding of the contrast field: `pixel = MID + SCALE · x`, clamped.
const PIXEL_MID: f64 = 128.0;
const PIXEL_SCALE: f64 = 48.0;
/// Gabor support radius in envelope standard deviations.
const SUPPORT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_mice: usize,
    pub n_neurons: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_images: usize,
    pub n_repeats: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Rate at zero drive.
    pub rate_scale: f64,
    /// Standard deviation of the gain-free drive at the elu input.
    pub drive_scale: f64,
    /// Amplitude `a` of the gain `1 + a·tanh(β·b)`.
    pub gain_amplitude: f64,
    /// Amplitude `c` of the additive term `c·tanh(γ·b)` at the elu input.
    pub offset_amplitude: f64,
    /// Receptive-field displacement in pixels per unit of standardized
    /// pupil position.
    pub gaze_shift: f64,
    pub rf_sigma: (f64, f64),
    pub wavelength: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_mice: 2,
            n_neurons: 50,
            n_train: 600,
            n_val: 100,
            n_test_images: 100,
            n_repeats: 10,
            height: 36,
            width: 64,
            seed: 0,
            rate_scale: 1.5,
            drive_scale: 1.5,
            gain_amplitude: 0.5,
            offset_amplitude: 0.75,
            gaze_shift: 3.0,
            rf_sigma: (2.0, 3.5),
            wavelength: (7.0, 12.0),
        }
    }
}

impl SynthConfig {
    pub fn n_trials(&self) -> usize {
        self.n_train + self.n_val + self.n_test_images * self.n_repeats
    }

    /// Set one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value '{value}' for synthetic key {key}"));
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> Error) -> Result<T> {
            v.trim().parse().map_err(|_| bad())
        }
        let pair = |v: &str| -> Result<(f64, f64)> {
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            Ok((num(a, bad)?, num(b, bad)?))
        };
        match key {
            "n_mice" => self.n_mice = num(value, bad)?,
            "n_neurons" => self.n_neurons = num(value, bad)?,
            "n_train" => self.n_train = num(value, bad)?,
            "n_val" => self.n_val = num(value, bad)?,
            "n_test_images" => self.n_test_images = num(value, bad)?,
            "n_repeats" => self.n_repeats = num(value, bad)?,
            "height" => self.height = num(value, bad)?,
            "width" => self.width = num(value, bad)?,
            "seed" => self.seed = num(value, bad)?,
            "rate_scale" => self.rate_scale = num(value, bad)?,
            "drive_scale" => self.drive_scale = num(value, bad)?,
            "gain_amplitude" => self.gain_amplitude = num(value, bad)?,
            "offset_amplitude" => self.offset_amplitude = num(value, bad)?,
            "gaze_shift" => self.gaze_shift = num(value, bad)?,
            "rf_sigma" => self.rf_sigma = pair(value)?,
            "wavelength" => self.wavelength = pair(value)?,
            _ => return Err(Error::Config(format!("unknown synthetic key '{key}'"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.n_mice == 0
            || self.n_neurons == 0
            || self.n_train == 0
            || self.height < 4
            || self.width < 4
        {
            return Err(Error::Config(
                "synthetic data needs positive counts and images of at least 4×4".into(),
            ));
        }
        Ok(())
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("synth.{k}"), v);
        };
        put("seed", self.seed.to_string());
        put("n_train", self.n_train.to_string());
        put("n_val", self.n_val.to_string());
        put("n_test_images", self.n_test_images.to_string());
        put("n_repeats", self.n_repeats.to_string());
        put("rate_scale", self.rate_scale.to_string());
        put("drive_scale", self.drive_scale.to_string());
        put("gain_amplitude", self.gain_amplitude.to_string());
        put("offset_amplitude", self.offset_amplitude.to_string());
        put("gaze_shift", self.gaze_shift.to_string());
        put("rf_sigma", format!("{},{}", self.rf_sigma.0, self.rf_sigma.1));
        put("wavelength", format!("{},{}", self.wavelength.0, self.wavelength.1));
        put("pixel_mid", PIXEL_MID.to_string());
        put("pixel_scale", PIXEL_SCALE.to_string());
        m
    }
}

/// Ground-truth parameters of one model neuron.
#[derive(Clone, Debug)]
pub struct SynthNeuron {
    /// Receptive-field center at zero gaze, in pixels (row, col).
    pub center: (f64, f64),
    pub sigma: f64,
    pub wavelength: f64,
    pub orientation: f64,
    pub phase: f64,
    /// Gain coefficients on standardized dilation, its derivative and speed.
    pub beta: [f64; 3],
    /// Additive-offset coefficients on the same three variables.
    pub gamma: [f64; 3],
    /// Drive normalisation so that the gain-free drive has `drive_scale` std.
    pub weight: f64,
}

/// Generator state for one mouse, usable as an oracle for its rates.
#[derive(Clone, Debug)]
pub struct SynthMouse {
    pub neurons: Vec<SynthNeuron>,
    pub height: usize,
    pub width: usize,
    pub rate_scale: f64,
    pub gain_amplitude: f64,
    pub offset_amplitude: f64,
    pub gaze_shift: f64,
}

/// Latent standardized behavior for a trial, in behavior-column order.
type Latent = [f64; BEHAVIOR_DIM];

impl SynthMouse {
    /// Gabor filter with the given (fractional) pixel center, restricted to
    /// its support, zero-mean under the envelope and unit norm.
    fn gabor(&self, n: &SynthNeuron, center: (f64, f64)) -> (usize, usize, usize, usize, Vec<f64>) {
        let r = (SUPPORT * n.sigma).ceil();
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        let y0 = clamp((center.0 - r).floor(), self.height - 1);
        let y1 = clamp((center.0 + r).ceil(), self.height - 1) + 1;
        let x0 = clamp((center.1 - r).floor(), self.width - 1);
        let x1 = clamp((center.1 + r).ceil(), self.width - 1) + 1;
        let (s, c) = n.orientation.sin_cos();
        let k = 2.0 * std::f64::consts::PI / n.wavelength;
        let mut env = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut carrier = Vec::with_capacity(env.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 - center.0;
                let dx = x as f64 - center.1;
                env.push((-(dx * dx + dy * dy) / (2.0 * n.sigma * n.sigma)).exp());
                carrier.push((k * (dx * c + dy * s) + n.phase).cos());
            }
        }
        let esum: f64 = env.iter().sum();
        let dc = env.iter().zip(&carrier).map(|(e, c)| e * c).sum::<f64>() / esum;
        let mut g: Vec<f64> = env.iter().zip(&carrier).map(|(e, c)| e * (c - dc)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            g.iter_mut().for_each(|v| *v /= norm);
        }
        (y0, y1, x0, x1, g)
    }

    /// Gazed receptive-field center for a trial.
    fn shifted_center(&self, n: &SynthNeuron, b: &Latent) -> (f64, f64) {
        (
            n.center.0 + self.gaze_shift * b[PUPIL_Y],
            n.center.1 + self.gaze_shift * b[PUPIL_X],
        )
    }

    /// `⟨Gabor, contrast⟩` for a `[h × w]` contrast image.
    pub fn drive(&self, n: &SynthNeuron, contrast: &[f64], b: &Latent) -> f64 {
        let (y0, y1, x0, x1, g) = self.gabor(n, self.shifted_center(n, b));
        let mut acc = 0.0;
        let mut k = 0;
        for y in y0..y1 {
            let row = &contrast[y * self.width..];
            for x in x0..x1 {
                acc += g[k] * row[x];
                k += 1;
            }
        }
        acc
    }

    pub fn gain(&self, n: &SynthNeuron, b: &Latent) -> f64 {
        let z = n.beta[0] * b[DILATION]
            + n.beta[1] * b[DILATION_DERIVATIVE]
            + n.beta[2] * b[RUNNING_SPEED];
        1.0 + self.gain_amplitude * z.tanh()
    }

    /// Behavior-driven shift of the elu input, independent of the stimulus.
    pub fn offset(&self, n: &SynthNeuron, b: &Latent) -> f64 {
        let z = n.gamma[0] * b[DILATION]
            + n.gamma[1] * b[DILATION_DERIVATIVE]
            + n.gamma[2] * b[RUNNING_SPEED];
        self.offset_amplitude * z.tanh()
    }

    /// Closed-form mean rate of neuron `n` for one trial.
    pub fn rate(&self, n: &SynthNeuron, contrast: &[f64], b: &Latent) -> f64 {
        self.rate_scale * elu_plus_one_scalar(n.weight * self.drive(n, contrast, b) * self.gain(n, b) + self.offset(n, b))
    }

    /// Rates of every neuron for a `[h × w]` contrast image.
    pub fn rates(&self, contrast: &[f64], b: &Latent) -> Vec<f64> {
        self.neurons.iter().map(|n| self.rate(n, contrast, b)).collect()
    }
}

/// Approximately 1/f noise: octaves of bilinearly upsampled white noise,
/// standardized to zero mean and unit variance.
fn pink_noise(rng: &mut Rng, h: usize, w: usize) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    let mut step = 2usize;
    while step <= h.max(w) {
        let gh = h.div_ceil(step) + 1;
        let gw = w.div_ceil(step) + 1;
        let coarse = Tensor::from_vec(vec![1, gh, gw], (0..gh * gw).map(|_| rng.normal()).collect());
        let up = resize_bilinear(&coarse, h, w).expect("valid sizes");
        let amp = (step as f64).powf(0.75);
        for (a, v) in acc.iter_mut().zip(up.data()) {
            *a += amp * v;
        }
        step *= 2;
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let std = (acc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    acc.iter().map(|v| (v - mean) / std).collect()
}

/// Pixel image (as stored) and the contrast field the neurons see.
fn render(contrast: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pixels: Vec<f64> = contrast
        .iter()
        .map(|&x| ((PIXEL_MID + PIXEL_SCALE * x).clamp(0.0, 255.0) as f32) as f64)
        .collect();
    let seen = pixels.iter().map(|&p| (p - PIXEL_MID) / PIXEL_SCALE).collect();
    (pixels, seen)
}

fn sample_latent(rng: &mut Rng) -> Latent {
    std::array::from_fn(|_| rng.normal())
}

/// Recorded behavior units for a latent state.
fn behavior_units(b: &Latent) -> [f64; BEHAVIOR_DIM] {
    let mut out = [0.0; BEHAVIOR_DIM];
    out[DILATION] = 30.0 + 6.0 * b[DILATION];
    out[DILATION_DERIVATIVE] = 0.5 * b[DILATION_DERIVATIVE];
    out[PUPIL_X] = 2.0 * b[PUPIL_X];
    out[PUPIL_Y] = 2.0 * b[PUPIL_Y];
    out[RUNNING_SPEED] = 4.0 * (0.5 * b[RUNNING_SPEED]).exp();
    out
}

fn mouse_id(i: usize) -> String {
    const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    if i < LETTERS.len() {
        (LETTERS[i] as char).to_string()
    } else {
        format!("M{i}")
    }
}

fn make_mouse(cfg: &SynthConfig, rng: &mut Rng) -> (SynthMouse, Tensor) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut neurons = Vec::with_capacity(cfg.n_neurons);
    let mut coords = Vec::with_capacity(cfg.n_neurons * 2);
    for _ in 0..cfg.n_neurons {
        // Cortical position in µm; retinotopy maps it linearly onto the
        // central third of the image.
        let (ax, ay) = (rng.uniform(), rng.uniform());
        coords.push(200.0 + 600.0 * ax);
        coords.push(100.0 + 600.0 * ay);
        let center = (
            h / 3.0 + ay * h / 3.0 + 0.3 * rng.normal(),
            w / 3.0 + ax * w / 3.0 + 0.3 * rng.normal(),
        );
        neurons.push(SynthNeuron {
            center,
            sigma: rng.uniform_range(cfg.rf_sigma.0, cfg.rf_sigma.1),
            wavelength: rng.uniform_range(cfg.wavelength.0, cfg.wavelength.1),
            orientation: rng.uniform_range(0.0, std::f64::consts::PI),
            phase: rng.uniform_range(0.0, 2.0 * std::f64::consts::PI),
            beta: [
                rng.uniform_range(0.6, 1.5),
                0.3 * rng.normal(),
                0.6 * rng.normal(),
            ],
            gamma: [
                0.5 * rng.normal(),
                0.3 * rng.normal(),
                rng.uniform_range(0.5, 1.2),
            ],
            weight: 1.0,
        });
    }
    let mut mouse = SynthMouse {
        neurons,
        height: cfg.height,
        width: cfg.width,
        rate_scale: cfg.rate_scale,
        gain_amplitude: cfg.gain_amplitude,
        offset_amplitude: cfg.offset_amplitude,
        gaze_shift: cfg.gaze_shift,
    };
    // Normalise each neuron's drive on reference images at central gaze.
    let zero = [0.0; BEHAVIOR_DIM];
    let refs: Vec<Vec<f64>> = (0..64)
        .map(|_| render(&pink_noise(rng, cfg.height, cfg.width)).1)
        .collect();
    for i in 0..mouse.neurons.len() {
        let d: Vec<f64> = refs.iter().map(|c| mouse.drive(&mouse.neurons[i], c, &zero)).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        mouse.neurons[i].weight = if sd > 0.0 { cfg.drive_scale / sd } else { 0.0 };
    }
    (mouse, Tensor::from_vec(vec![cfg.n_neurons, 2], coords))
}

/// Build an in-memory synthetic dataset. All values are representable in
/// `f32`, so writing and reloading it is lossless.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Vec<SynthMouse>)> {
    cfg.validate()?;
    let mut root = Rng::new(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let n = cfg.n_trials();
    let m = cfg.n_neurons;
    let mut mice = Vec::with_capacity(cfg.n_mice);
    let mut truth = Vec::with_capacity(cfg.n_mice);
    for mi in 0..cfg.n_mice {
        let mut rng = root.fork(mi as u64);
        let (model, mut coordinates) = make_mouse(cfg, &mut rng);
        coordinates.quantize_f32();

        let mut images = Vec::with_capacity(n * h * w);
        let mut responses = Vec::with_capacity(n * m);
        let mut rates = Vec::with_capacity(n * m);
        let mut behaviors = Vec::with_capacity(n * BEHAVIOR_DIM);
        let mut pupil = Vec::with_capacity(n * 2);
        let mut splits = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);

        let test_images: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_test_images)
            .map(|_| render(&pink_noise(&mut rng, h, w)))
            .collect();
        let mut trial = |stim: &(Vec<f64>, Vec<f64>), rng: &mut Rng, split: Split, group: Option<u32>| {
            let units = behavior_units(&sample_latent(rng)).map(|v| v as f32 as f64);
            // The neurons see the recorded (rounded) behavior, re-expressed
            // in latent units, so the stored data fully determines the rates.
            let latent = latent_from_units(&units);
            let lam = model.rates(&stim.1, &latent);
            images.extend_from_slice(&stim.0);
            for &l in &lam {
                responses.push(rng.poisson(l));
                rates.push(l as f32 as f64);
            }
            behaviors.extend_from_slice(&units);
            pupil.push(units[PUPIL_X]);
            pupil.push(units[PUPIL_Y]);
            splits.push(split);
            groups.push(group);
        };
        for (split, count) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val)] {
            for _ in 0..count {
                let stim = render(&pink_noise(&mut rng, h, w));
                trial(&stim, &mut rng, split, None);
            }
        }
        for _ in 0..cfg.n_repeats {
            for (g, stim) in test_images.iter().enumerate() {
                trial(stim, &mut rng, Split::Test, Some(g as u32));
            }
        }

        let rec = MouseRecord {
            id: mouse_id(mi),
            images: Tensor::new(vec![n, 1, h, w], images)?,
            responses: Tensor::new(vec![n, m], responses)?,
            behaviors: Tensor::new(vec![n, BEHAVIOR_DIM], behaviors)?,
            pupil_center: Tensor::new(vec![n, 2], pupil)?,
            coordinates,
            splits,
            repeat_groups: groups,
            rates: Some(Tensor::new(vec![n, m], rates)?),
        };
        rec.validate()?;
        mice.push(rec);
        truth.push(model);
    }
    Ok((
        Dataset {
            channels: 1,
            height: h,
            width: w,
            mice,
            meta: cfg.meta(),
        },
        truth,
    ))
}

/// Inverse of [`behavior_units`].
fn latent_from_units(u: &[f64; BEHAVIOR_DIM]) -> Latent {
    let mut b = [0.0; BEHAVIOR_DIM];
    b[DILATION] = (u[DILATION] - 30.0) / 6.0;
    b[DILATION_DERIVATIVE] = u[DILATION_DERIVATIVE] / 0.5;
    b[PUPIL_X] = u[PUPIL_X] / 2.0;
    b[PUPIL_Y] = u[PUPIL_Y] / 2.0;
    b[RUNNING_SPEED] = 2.0 * (u[RUNNING_SPEED] / 4.0).ln();
    b
}

/// Generate and write a dataset directory.
pub fn write_synthetic(cfg: &SynthConfig, root: &Path) -> Result<Dataset> {
    let (ds, _) = generate_synthetic(cfg)?;
    write_dataset(&ds, root)?;
    Ok(ds)
}

impl SynthMouse {
    /// Latent behavior state of a recorded behavior row.
    pub fn latent(behavior_row: &[f64]) -> Latent {
        let mut u = [0.0; BEHAVIOR_DIM];
        u.copy_from_slice(&behavior_row[..BEHAVIOR_DIM]);
        latent_from_units(&u)
    }

    /// Contrast field of a stored pixel image.
    pub fn contrast(pixels: &[f64]) -> Vec<f64> {
        pixels.iter().map(|&p| (p - PIXEL_MID) / PIXEL_SCALE).collect()
    }
}
