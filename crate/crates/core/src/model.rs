//! Shared core plus per-mouse readouts, the linear-nonlinear baseline, and
//! checkpoint files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{BehaviorMode, BiasInit, ModelMode, RunConfig};
use crate::dataio::{
    read_f32, write_f32, MouseRecord, PreparedData, DILATION, DILATION_DERIVATIVE, RUNNING_SPEED,
    BEHAVIOR_DIM,
};
use crate::encoder::{reshape_core_output, AttentionTrace, Encoder};
use crate::error::{Error, Result};
use crate::nn::{init_weight, ParamId, ParamKind, ParamSet, Session};
use crate::readout::GaussianReadout;
use crate::tensorcore::{Rng, Tensor, Var};
use crate::tokenizer::{PatchGrid, Tokenizer};

/// What the model needs to know about a mouse to build its readout.
#[derive(Clone, Debug)]
pub struct MouseSpec {
    pub id: String,
    /// Standardized anatomical coordinates `[n × 2]`.
    pub coords: Tensor,
    /// Mean standardized response per neuron, for the optional bias init.
    pub mean_response: Option<Vec<f64>>,
}

impl MouseSpec {
    pub fn n_neurons(&self) -> usize {
        self.coords.dim(0)
    }

    pub fn from_prepared(data: &PreparedData) -> Vec<MouseSpec> {
        data.mice
            .iter()
            .map(|m| MouseSpec {
                id: m.record.id.clone(),
                coords: m.record.coordinates.clone(),
                mean_response: Some(m.stats.mean_standardized_response()),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Core {
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
}

#[derive(Clone, Debug)]
pub enum Head {
    Gaussian(GaussianReadout),
    /// `elu1(W·[flatten(image) ⊕ behaviors] + b)`, `W [(chw + 5) × n]`.
    Linear { weight: ParamId, bias: ParamId, n_neurons: usize },
}

#[derive(Clone, Debug)]
pub struct MouseHead {
    pub id: String,
    pub head: Head,
}

impl MouseHead {
    pub fn n_neurons(&self) -> usize {
        match &self.head {
            Head::Gaussian(r) => r.n_neurons,
            Head::Linear { n_neurons, .. } => *n_neurons,
        }
    }
}

/// One trial's preprocessed inputs.
#[derive(Clone, Copy, Debug)]
pub struct TrialInput<'a> {
    /// `[c × h × w]` image data, row-major.
    pub image: &'a [f64],
    pub behaviors: &'a [f64],
    /// (x, y)
    pub pupil: &'a [f64],
}

impl<'a> TrialInput<'a> {
    pub fn from_record(rec: &'a MouseRecord, t: usize) -> Self {
        TrialInput {
            image: rec.images.row(t),
            behaviors: rec.behaviors.row(t),
            pupil: rec.pupil_center.row(t),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    /// Input image shape `(c, h, w)` after preprocessing.
    pub input: (usize, usize, usize),
    pub params: ParamSet,
    pub core: Option<Core>,
    pub heads: Vec<MouseHead>,
}

/// Behavior columns that `vit` mode feeds as image channels.
pub fn vit_behavior_columns(cfg: &RunConfig) -> Vec<usize> {
    if cfg.vit_all_behaviors || !cfg.readout.shifter {
        (0..BEHAVIOR_DIM).collect()
    } else {
        vec![DILATION, DILATION_DERIVATIVE, RUNNING_SPEED]
    }
}

impl Model {
    /// Initialise every parameter from `cfg.seed`. Values are rounded to
    /// `f32` so checkpoints reproduce the model exactly.
    pub fn new(cfg: &RunConfig, input: (usize, usize, usize), mice: &[MouseSpec]) -> Result<Model> {
        cfg.validate()?;
        if mice.is_empty() {
            return Err(Error::Config("a model needs at least one mouse".into()));
        }
        let mut params = ParamSet::new();
        let mut root = Rng::new(cfg.seed);
        let mut core_rng = root.fork(1);
        let (c, h, w) = input;
        let core = match cfg.mode {
            ModelMode::Linear => None,
            mode => {
                let mut core_cfg = cfg.core.clone();
                let channels = if mode == ModelMode::VitVanilla {
                    core_cfg.bmlp = BehaviorMode::Disabled;
                    c + vit_behavior_columns(cfg).len()
                } else {
                    c
                };
                let tokenizer = Tokenizer::new(&core_cfg.tokenizer, (channels, h, w), &mut params, &mut core_rng)?;
                let encoder = Encoder::new(&mut params, &core_cfg, &mut core_rng);
                Some(Core { tokenizer, encoder })
            }
        };
        let mut heads = Vec::with_capacity(mice.len());
        for (i, m) in mice.iter().enumerate() {
            if heads.iter().any(|h: &MouseHead| h.id == m.id) {
                return Err(Error::Config(format!("duplicate mouse id {}", m.id)));
            }
            let mut rng = root.fork(100 + i as u64);
            let n = m.n_neurons();
            let head = match &core {
                Some(core) => Head::Gaussian(GaussianReadout::new(
                    &mut params,
                    &m.id,
                    &m.coords,
                    core.tokenizer.cfg.embed_dim,
                    &cfg.readout,
                    m.mean_response.as_deref(),
                    &mut rng,
                )?),
                None => {
                    let inputs = c * h * w + BEHAVIOR_DIM;
                    let weight = params.add(
                        format!("linear.{}.weight", m.id),
                        ParamKind::ReadoutWeight,
                        init_weight(&mut rng, vec![inputs, n]),
                    );
                    let bias_init = match (cfg.readout.bias_init, &m.mean_response) {
                        (BiasInit::MeanResponse, Some(mr)) => Tensor::new(vec![n], mr.clone())?,
                        _ => Tensor::zeros(vec![n]),
                    };
                    let bias = params.add(format!("linear.{}.bias", m.id), ParamKind::Bias, bias_init);
                    Head::Linear { weight, bias, n_neurons: n }
                }
            };
            heads.push(MouseHead { id: m.id.clone(), head });
        }
        params.quantize_f32();
        Ok(Model {
            cfg: cfg.clone(),
            input,
            params,
            core,
            heads,
        })
    }

    pub fn mouse_index(&self, id: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.id == id)
            .ok_or_else(|| Error::MissingReadout(format!("no readout for mouse '{id}'")))
    }

    pub fn grid(&self) -> Option<PatchGrid> {
        self.core.as_ref().map(|c| c.tokenizer.grid)
    }

    /// Parameters of the shared core (empty for the linear baseline).
    pub fn core_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, e)| e.name.starts_with("tokenizer.") || e.name.starts_with("block"))
            .map(|(id, _)| id)
            .collect()
    }

    /// Parameters belonging to one mouse's readout.
    pub fn head_param_ids(&self, mouse: usize) -> Vec<ParamId> {
        let id = &self.heads[mouse].id;
        let prefixes = [format!("readout.{id}."), format!("linear.{id}.")];
        self.params
            .iter()
            .filter(|(_, e)| prefixes.iter().any(|p| e.name.starts_with(p.as_str())))
            .map(|(id, _)| id)
            .collect()
    }

    /// Build one trial's prediction `[n]` inside a session.
    pub fn trial_output(&self, s: &mut Session, mouse: usize, x: TrialInput) -> Result<Var> {
        let (c, h, w) = self.input;
        if x.image.len() != c * h * w || x.behaviors.len() != BEHAVIOR_DIM || x.pupil.len() != 2 {
            return Err(Error::Dimension(format!(
                "trial input sizes {}/{}/{} do not match image {c}×{h}×{w}",
                x.image.len(),
                x.behaviors.len(),
                x.pupil.len()
            )));
        }
        let head = &self.heads[mouse].head;
        match (&self.core, head) {
            (Some(core), Head::Gaussian(readout)) => {
                let img = Tensor::new(vec![c, h, w], x.image.to_vec())?;
                let z0 = match self.cfg.mode {
                    ModelMode::VitVanilla => {
                        let vals: Vec<f64> = vit_behavior_columns(&self.cfg)
                            .iter()
                            .map(|&k| x.behaviors[k])
                            .collect();
                        core.tokenizer.forward(s, &img, Some(&vals))?
                    }
                    _ => core.tokenizer.forward(s, &img, None)?,
                };
                let z = core.encoder.forward(s, z0, Some(x.behaviors))?;
                let map = reshape_core_output(s, z, core.tokenizer.grid, core.tokenizer.has_cls())?;
                readout.forward(s, map, Some(x.pupil))
            }
            (None, Head::Linear { weight, bias, .. }) => {
                let mut input = Vec::with_capacity(x.image.len() + BEHAVIOR_DIM);
                input.extend_from_slice(x.image);
                input.extend_from_slice(x.behaviors);
                let n_in = input.len();
                let xv = s.constant(Tensor::new(vec![1, n_in], input)?);
                let wv = s.p(*weight);
                let y = s.graph.matmul(xv, wv)?;
                let n = s.graph.shape(y)[1];
                let y = s.graph.reshape(y, &[n])?;
                let b = s.p(*bias);
                let y = s.graph.add(y, b)?;
                s.graph.elu_plus_one(y)
            }
            _ => unreachable!("heads always match the core"),
        }
    }

    /// Predictions `[batch × n_m]` for the given trials of a record. With
    /// `trace`, one attention trace per trial is returned.
    pub fn forward(
        &self,
        mouse_id: &str,
        rec: &MouseRecord,
        trials: &[usize],
        rng: &mut Rng,
        train: bool,
        trace: bool,
    ) -> Result<(Tensor, Vec<AttentionTrace>)> {
        let m = self.mouse_index(mouse_id)?;
        let n = self.heads[m].n_neurons();
        let mut out = Vec::with_capacity(trials.len() * n);
        let mut traces = Vec::new();
        for &t in trials {
            let mut s = Session::new(&self.params, rng, train);
            if trace {
                s = s.with_trace();
            }
            let y = self.trial_output(&mut s, m, TrialInput::from_record(rec, t))?;
            out.extend_from_slice(s.graph.value(y).data());
            if let Some(tr) = s.take_trace() {
                traces.push(tr);
            }
        }
        Ok((Tensor::new(vec![trials.len().max(1), n], out)?, traces))
    }

    /// Deterministic evaluation-mode predictions.
    pub fn predict(&self, mouse_id: &str, rec: &MouseRecord, trials: &[usize]) -> Result<Tensor> {
        let mut rng = Rng::new(0);
        self.forward(mouse_id, rec, trials, &mut rng, false, false).map(|(y, _)| y)
    }

    /// Outputs of every behavior MLP call, grouped by block, across `trials`.
    pub fn bmlp_activations(&self, mouse_id: &str, rec: &MouseRecord, trials: &[usize]) -> Result<Vec<Vec<f64>>> {
        let m = self.mouse_index(mouse_id)?;
        let core = match &self.core {
            Some(c) => c,
            None => return Ok(Vec::new()),
        };
        let active: Vec<usize> = (0..core.encoder.blocks.len())
            .filter(|&b| self.cfg.mode == ModelMode::V1t && core.encoder.bmlp_for(b).is_some())
            .collect();
        let mut per_block = vec![Vec::new(); active.len()];
        let mut rng = Rng::new(0);
        for &t in trials {
            let mut s = Session::new(&self.params, &mut rng, false).with_bmlp_recording();
            self.trial_output(&mut s, m, TrialInput::from_record(rec, t))?;
            let rec_out = s.take_bmlp_outputs().unwrap_or_default();
            for (slot, a) in rec_out.into_iter().enumerate() {
                per_block[slot].extend_from_slice(a.data());
            }
        }
        Ok(per_block)
    }

    /// Write `manifest.txt` and `params.f32` into `dir`.
    pub fn save(&self, dir: &Path, epoch: usize, metric: f64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = String::new();
        writeln!(m, "format_version=1").unwrap();
        writeln!(m, "epoch={epoch}").unwrap();
        writeln!(m, "metric={metric:e}").unwrap();
        let (c, h, w) = self.input;
        writeln!(m, "input={c},{h},{w}").unwrap();
        let ids: Vec<&str> = self.heads.iter().map(|h| h.id.as_str()).collect();
        writeln!(m, "mice={}", ids.join(",")).unwrap();
        for hd in &self.heads {
            writeln!(m, "mouse.{}.n_neurons={}", hd.id, hd.n_neurons()).unwrap();
        }
        for line in self.cfg.to_text().lines() {
            writeln!(m, "config.{line}").unwrap();
        }
        let mut blob = Vec::with_capacity(self.params.trainable_count());
        for (_, e) in self.params.iter() {
            let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(m, "param.{}={};{};{}", e.name, e.kind.as_str(), shape.join("x"), blob.len()).unwrap();
            blob.extend_from_slice(e.value.data());
        }
        write_f32(&dir.join("params.f32"), &blob)?;
        let p = dir.join("manifest.txt");
        fs::write(&p, m).map_err(|e| Error::io(&p, e))
    }

    /// Rebuild a model from [`Model::save`] output; returns the model and
    /// the stored epoch and metric.
    pub fn load(dir: &Path) -> Result<(Model, usize, f64)> {
        let path = dir.join("manifest.txt");
        if !path.is_file() {
            return Err(Error::load(&path, "checkpoint manifest missing"));
        }
        let kv = crate::dataio::parse_manifest_file(&path)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::load(&path, format!("missing key {k}")));
        let bad = |k: &str| Error::load(&path, format!("malformed {k}"));
        let epoch: usize = get("epoch")?.parse().map_err(|_| bad("epoch"))?;
        let metric: f64 = get("metric")?.parse().map_err(|_| bad("metric"))?;
        let dims: Vec<usize> = get("input")?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("input")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad("input"));
        }
        let mut cfg_text = String::new();
        for (k, v) in kv.range("config.".to_string().."config/".to_string()) {
            writeln!(cfg_text, "{}={v}", &k["config.".len()..]).unwrap();
        }
        let cfg = RunConfig::from_text(&cfg_text).map_err(|e| Error::load(&path, e.to_string()))?;
        let mut specs = Vec::new();
        for id in get("mice")?.split(',').filter(|s| !s.is_empty()) {
            let n: usize = get(&format!("mouse.{id}.n_neurons"))?
                .parse()
                .map_err(|_| bad("n_neurons"))?;
            specs.push(MouseSpec {
                id: id.to_string(),
                coords: Tensor::zeros(vec![n, 2]),
                mean_response: Some(vec![0.0; n]),
            });
        }
        let mut model = Model::new(&cfg, (dims[0], dims[1], dims[2]), &specs)?;
        let blob = read_f32(&dir.join("params.f32"))?;
        let index: BTreeMap<&str, &str> = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("param.").map(|n| (n, v.as_str())))
            .collect();
        if index.len() != model.params.len() {
            return Err(Error::load(&path, format!(
                "checkpoint has {} tensors, model expects {}",
                index.len(),
                model.params.len()
            )));
        }
        for e in model.params.entries_mut() {
            let spec = index
                .get(e.name.as_str())
                .ok_or_else(|| Error::load(&path, format!("tensor {} missing", e.name)))?;
            let parts: Vec<&str> = spec.split(';').collect();
            let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            if parts.len() != 3 || parts[0] != e.kind.as_str() || parts[1] != shape.join("x") {
                return Err(Error::load(&path, format!("tensor {} has spec '{spec}', expected {};{}", e.name, e.kind.as_str(), shape.join("x"))));
            }
            let off: usize = parts[2].parse().map_err(|_| bad(&e.name))?;
            let n = e.value.len();
            let src = blob
                .get(off..off + n)
                .ok_or_else(|| Error::load(&path, format!("tensor {} beyond params.f32", e.name)))?;
            for (d, &s) in e.value.data_mut().iter_mut().zip(src) {
                *d = s as f64;
            }
        }
        Ok((model, epoch, metric))
    }
}
