//! Per-mouse Gaussian readout.
//!
//! Each neuron reads the core's feature map at one position. Positions come
//! from a small network over anatomical coordinates, are shifted per trial
//! by a pupil-driven shifter and, in training, jittered by a learned σ.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{BiasInit, ReadoutConfig};
use crate::error::{Error, Result};
use crate::nn::{Dense, ParamId, ParamKind, ParamSet, Session};
use crate::tensorcore::ops::inverse_softplus_scalar;
use crate::tensorcore::{Rng, Tensor, Var};
use crate::tokenizer::PatchGrid;

/// Anatomical coordinates → receptive-field centers in `[-1, 1]²`.
#[derive(Clone, Debug)]
pub struct PositionNetwork {
    pub hidden: Vec<Dense>,
    pub out: Dense,
}

impl PositionNetwork {
    pub fn new(params: &mut ParamSet, name: &str, cfg: &ReadoutConfig, rng: &mut Rng) -> Self {
        let mut hidden = Vec::with_capacity(cfg.position_hidden_layers);
        let mut width = 2;
        for i in 0..cfg.position_hidden_layers {
            hidden.push(Dense::new(
                params,
                &format!("{name}.hidden{i}"),
                width,
                cfg.position_hidden_size,
                ParamKind::Weight,
                rng,
            ));
            width = cfg.position_hidden_size;
        }
        let out = Dense::new(params, &format!("{name}.out"), width, 2, ParamKind::Weight, rng);
        PositionNetwork { hidden, out }
    }

    pub fn forward(&self, s: &mut Session, coords: Var) -> Result<Var> {
        let mut h = coords;
        for layer in &self.hidden {
            h = layer.forward(s, h)?;
            h = s.graph.tanh(h)?;
        }
        let y = self.out.forward(s, h)?;
        s.graph.tanh(y)
    }
}

/// Pupil center → shift of every receptive field: three dense layers, each
/// followed by tanh.
#[derive(Clone, Debug)]
pub struct Shifter {
    pub layers: [Dense; 3],
}

impl Shifter {
    pub fn new(params: &mut ParamSet, name: &str, hidden: usize, rng: &mut Rng) -> Self {
        let mut dense = |i: usize, a, b| {
            Dense::new(params, &format!("{name}.fc{i}"), a, b, ParamKind::Weight, rng)
        };
        Shifter {
            layers: [dense(0, 2, hidden), dense(1, hidden, hidden), dense(2, hidden, 2)],
        }
    }

    /// `pupil [1 × 2]` → `Δμ [1 × 2]`.
    pub fn forward(&self, s: &mut Session, pupil: Var) -> Result<Var> {
        let mut h = pupil;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
            h = s.graph.tanh(h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct GaussianReadout {
    pub mouse_id: String,
    pub n_neurons: usize,
    pub dim: usize,
    /// `[n × d]`
    pub features: ParamId,
    /// `[n]`
    pub bias: ParamId,
    /// `[n × 2]`, σ = softplus(raw)
    pub sigma_raw: ParamId,
    /// Standardized anatomical coordinates `[n × 2]`, stored untrained.
    pub coords: ParamId,
    pub position: PositionNetwork,
    pub shifter: Option<Shifter>,
}

impl GaussianReadout {
    /// `coords` must already be standardized; `mean_response` is used when
    /// the bias is initialised from the data.
    pub fn new(
        params: &mut ParamSet,
        mouse_id: &str,
        coords: &Tensor,
        dim: usize,
        cfg: &ReadoutConfig,
        mean_response: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = coords.dim(0);
        if coords.shape() != [n, 2] {
            return Err(Error::Dimension(format!("coordinates must be [n, 2], got {:?}", coords.shape())));
        }
        let name = format!("readout.{mouse_id}");
        let features = params.add(
            format!("{name}.features"),
            ParamKind::ReadoutWeight,
            crate::nn::init_weight(rng, vec![n, dim]),
        );
        let bias_init = match (cfg.bias_init, mean_response) {
            (BiasInit::Zero, _) => Tensor::zeros(vec![n]),
            (BiasInit::MeanResponse, Some(m)) if m.len() == n => Tensor::new(vec![n], m.to_vec())?,
            (BiasInit::MeanResponse, _) => {
                return Err(Error::Config(format!(
                    "mouse {mouse_id}: mean-response bias initialisation needs {n} response means"
                )))
            }
        };
        let bias = params.add(format!("{name}.bias"), ParamKind::Bias, bias_init);
        let sigma_raw = params.add(
            format!("{name}.sigma"),
            ParamKind::Bias,
            Tensor::full(vec![n, 2], inverse_softplus_scalar(cfg.sigma_init)),
        );
        let coords = params.add(format!("{name}.coords"), ParamKind::Buffer, coords.clone());
        let position = PositionNetwork::new(params, &format!("{name}.position"), cfg, rng);
        let shifter = cfg
            .shifter
            .then(|| Shifter::new(params, &format!("{name}.shifter"), cfg.shifter_hidden, rng));
        Ok(GaussianReadout {
            mouse_id: mouse_id.to_string(),
            n_neurons: n,
            dim,
            features,
            bias,
            sigma_raw,
            coords,
            position,
            shifter,
        })
    }

    /// Receptive-field centers before the shifter, `[n × 2]` as (x, y).
    pub fn compute_mu(&self, s: &mut Session) -> Result<Var> {
        let c = s.p(self.coords);
        self.position.forward(s, c)
    }

    /// Trial positions: μ + Δμ(pupil), clamped; in training additionally
    /// jittered by σ ⊙ N(0, I) and clamped again.
    pub fn positions(&self, s: &mut Session, pupil: Option<&[f64]>) -> Result<Var> {
        let mut mu = self.compute_mu(s)?;
        if let Some(shifter) = &self.shifter {
            let p = pupil.ok_or_else(|| Error::Config("the shifter needs pupil centers".into()))?;
            if p.len() != 2 {
                return Err(Error::Dimension(format!("pupil center needs 2 values, got {}", p.len())));
            }
            let pv = s.constant(Tensor::new(vec![1, 2], p.to_vec())?);
            let delta = shifter.forward(s, pv)?;
            mu = s.graph.add_broadcast(mu, delta)?;
            mu = s.graph.clamp(mu, -1.0, 1.0)?;
        }
        if s.train() {
            let raw = s.p(self.sigma_raw);
            let sigma = s.graph.softplus(raw)?;
            let noise: Vec<f64> = (0..self.n_neurons * 2).map(|_| s.rng().normal()).collect();
            let jitter = s.graph.mul_const(sigma, Tensor::new(vec![self.n_neurons, 2], noise)?)?;
            mu = s.graph.add(mu, jitter)?;
            mu = s.graph.clamp(mu, -1.0, 1.0)?;
        }
        Ok(mu)
    }

    /// `features [d × h' × w']` → responses `[n]`, strictly positive.
    pub fn forward(&self, s: &mut Session, features: Var, pupil: Option<&[f64]>) -> Result<Var> {
        let g = self.positions(s, pupil)?;
        gaussian_readout(s, features, g, self.features, self.bias)
    }

    /// Evaluation-mode centers μ (without shifter) as a plain tensor.
    pub fn mu_value(&self, params: &ParamSet) -> Result<Tensor> {
        let mut rng = Rng::new(0);
        let mut s = Session::new(params, &mut rng, false);
        let mu = self.compute_mu(&mut s)?;
        Ok(s.graph.value(mu).clone())
    }

    /// Trainable scalars owned by each neuron: features, bias and σ.
    pub fn per_neuron_params(&self) -> usize {
        self.dim + 1 + 2
    }

    /// Ids of the network parameters shared by all neurons of this mouse.
    pub fn shared_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for d in self.position.hidden.iter().chain(std::iter::once(&self.position.out)) {
            ids.extend([d.weight, d.bias]);
        }
        if let Some(sh) = &self.shifter {
            for d in &sh.layers {
                ids.extend([d.weight, d.bias]);
            }
        }
        ids
    }
}

/// Sample `features` at positions `g [n × 2]`, then `elu1(w_i · f_i + b_i)`.
pub fn gaussian_readout(s: &mut Session, features: Var, g: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
    let f = s.graph.grid_sample(features, g)?;
    let w = s.p(weight);
    let b = s.p(bias);
    let prod = s.graph.mul(f, w)?;
    let dot = s.graph.sum_last(prod)?;
    let pre = s.graph.add(dot, b)?;
    s.graph.elu_plus_one(pre)
}

/// Readout size versus a dense per-neuron readout of the whole feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutCensus {
    pub n_neurons: usize,
    pub per_neuron: usize,
    pub shared: usize,
    pub total: usize,
    pub dense_alternative: usize,
}

impl ReadoutCensus {
    pub fn ratio(&self) -> f64 {
        self.total as f64 / self.dense_alternative as f64
    }
}

/// Count the trainable parameters of `readout`, checking the per-neuron
/// tensors against their expected shapes.
pub fn census(readout: &GaussianReadout, params: &ParamSet, grid: PatchGrid) -> Result<ReadoutCensus> {
    let n = readout.n_neurons;
    let per_neuron_tensors = [readout.features, readout.bias, readout.sigma_raw];
    let owned: usize = per_neuron_tensors.iter().map(|&id| params.get(id).len()).sum();
    if owned != n * readout.per_neuron_params() {
        return Err(Error::Dimension(format!(
            "per-neuron readout tensors hold {owned} values, expected {}",
            n * readout.per_neuron_params()
        )));
    }
    let shared: usize = readout.shared_ids().iter().map(|&id| params.get(id).len()).sum();
    Ok(ReadoutCensus {
        n_neurons: n,
        per_neuron: readout.per_neuron_params(),
        shared,
        total: owned + shared,
        dense_alternative: n * (readout.dim * grid.tokens() + 1),
    })
}

/// CSV `neuron_id,coord_x,coord_y,mu_x,mu_y` with the given (raw) coordinates.
pub fn export_readout_positions(
    readout: &GaussianReadout,
    params: &ParamSet,
    coords: &Tensor,
    path: &Path,
) -> Result<()> {
    let mu = readout.mu_value(params)?;
    if coords.shape() != mu.shape() {
        return Err(Error::Dimension("coordinates do not match the readout".into()));
    }
    let mut out = String::from("neuron_id,coord_x,coord_y,mu_x,mu_y\n");
    for i in 0..readout.n_neurons {
        writeln!(
            out,
            "{i},{},{},{},{}",
            coords.get(&[i, 0]),
            coords.get(&[i, 1]),
            mu.get(&[i, 0]),
            mu.get(&[i, 1])
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
