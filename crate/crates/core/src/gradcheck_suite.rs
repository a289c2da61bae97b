//! Finite-difference checks of every trainable component at a random
//! parameter point, used by the `gradcheck` command.

use crate::config::{CoreConfig, ReadoutConfig, RunConfig, TokenizerConfig, TokenizerMethod};
use crate::dataio::BEHAVIOR_DIM;
use crate::encoder::{Attention, BehaviorMlp, EncoderBlock};
use crate::error::Result;
use crate::model::{Model, MouseSpec, TrialInput};
use crate::nn::{ParamSet, Session};
use crate::readout::GaussianReadout;
use crate::tensorcore::gradcheck::{relative_error, DEFAULT_STEP};
use crate::tensorcore::{Rng, Tensor, Var};
use crate::tokenizer::Tokenizer;

pub const GRADCHECK_TOL: f64 = 1e-4;


#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst: (f64, f64),
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

impl ComponentCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Move every trainable parameter to a random point of moderate scale so
/// that gradients are well above round-off.
fn randomize(params: &mut ParamSet, rng: &mut Rng, scale: f64) {
    for e in params.entries_mut() {
        if e.kind.trainable() {
            e.value.data_mut().iter_mut().for_each(|v| *v = scale * rng.normal());
        }
    }
}

fn random(rng: &mut Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.normal()).collect())
}

/// Compare reverse-mode gradients of `Σ c ⊙ f(params, x)` with central
/// differences over all trainable parameters and the optional input.
pub fn check_component<F>(name: &str, params: &ParamSet, input: Option<&Tensor>, weights_seed: u64, f: F) -> Result<ComponentCheck>
where
    F: Fn(&mut Session, Option<Var>) -> Result<Var>,
{
    let objective = |p: &ParamSet, x: Option<&Tensor>, record: bool| -> Result<(f64, Option<(Vec<Tensor>, Option<Tensor>)>)> {
        let mut rng = Rng::new(0);
        let mut s = Session::new(p, &mut rng, false);
        let xv = x.map(|t| if record { s.graph.param(t.clone()) } else { s.graph.constant(t.clone()) });
        let y = f(&mut s, xv)?;
        let shape = s.graph.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let mut crng = Rng::new(weights_seed);
        let c = Tensor::from_vec(shape, (0..n).map(|_| crng.normal()).collect());
        let yc = s.graph.mul_const(y, c)?;
        let out = s.graph.sum(yc)?;
        let value = s.graph.value(out).item();
        if !record {
            return Ok((value, None));
        }
        let g = s.graph.backward(out)?;
        let mut buf = p.zero_grads();
        s.accumulate_grads(&g, &mut buf);
        let gx = xv.map(|v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(s.graph.shape(v).to_vec())));
        Ok((value, Some((buf.grads, gx))))
    };
    let (_, grads) = objective(params, input, true)?;
    let (pgrads, xgrad) = grads.expect("recorded");
    let h = DEFAULT_STEP;
    let mut worst: f64 = 0.0;
    let mut worst_pair = (0.0, 0.0);
    let mut note = |a: f64, n: f64| {
        let e = relative_error(a, n);
        if e > worst {
            worst = e;
            worst_pair = (a, n);
        }
    };
    let mut checked = 0;
    let mut probe = params.clone();
    for (i, (id, e)) in params.iter().enumerate() {
        if !e.kind.trainable() {
            continue;
        }
        for k in 0..e.value.len() {
            let orig = e.value.data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let fp = objective(&probe, input, false)?.0;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let fm = objective(&probe, input, false)?.0;
            probe.get_mut(id).data_mut()[k] = orig;
            note(pgrads[i].data()[k], (fp - fm) / (2.0 * h));
            checked += 1;
        }
    }
    if let (Some(x), Some(gx)) = (input, xgrad) {
        let mut xp = x.clone();
        for k in 0..x.len() {
            let orig = x.data()[k];
            xp.data_mut()[k] = orig + h;
            let fp = objective(params, Some(&xp), false)?.0;
            xp.data_mut()[k] = orig - h;
            let fm = objective(params, Some(&xp), false)?.0;
            xp.data_mut()[k] = orig;
            note(gx.data()[k], (fp - fm) / (2.0 * h));
            checked += 1;
        }
    }
    Ok(ComponentCheck {
        name: name.to_string(),
        max_rel_error: worst,
        worst: worst_pair,
        checked,
    })
}

fn tiny_core(lsa: bool) -> CoreConfig {
    CoreConfig {
        tokenizer: TokenizerConfig {
            patch_size: 4,
            patch_stride: 2,
            embed_dim: 6,
            patch_dropout: 0.0,
            ..TokenizerConfig::default()
        },
        num_blocks: 1,
        num_heads: 2,
        mlp_size: 7,
        lsa,
        ..CoreConfig::default()
    }
}

/// Tokenizers (all methods), behavior MLP, attention (standard and LSA),
/// encoder block, Gaussian readout with position network and shifter,
/// Poisson loss and a full model.
pub fn run_component_checks(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let (c, h, w) = (1, 8, 10);
    let img = random(&mut rng, vec![c, h, w], 1.0);

    for method in [TokenizerMethod::SlidingWindow, TokenizerMethod::Conv2d, TokenizerMethod::Spt, TokenizerMethod::Cct] {
        let cfg = TokenizerConfig {
            method,
            ..tiny_core(false).tokenizer
        };
        let mut p = ParamSet::new();
        let tok = Tokenizer::new(&cfg, (c, h, w), &mut p, &mut rng)?;
        randomize(&mut p, &mut rng, 0.5);
        out.push(check_component(&format!("tokenizer.{method}"), &p, None, seed + 1, |s, _| {
            tok.forward(s, &img, None)
        })?);
    }

    let d = 6;
    let mut p = ParamSet::new();
    let bmlp = BehaviorMlp::new(&mut p, "bmlp", d, 0.0, &mut rng);
    randomize(&mut p, &mut rng, 0.5);
    let beh = random(&mut rng, vec![1, BEHAVIOR_DIM], 1.0);
    out.push(check_component("behavior_mlp", &p, Some(&beh), seed + 2, |s, x| {
        bmlp.forward(s, x.expect("input"))
    })?);

    let tokens = random(&mut rng, vec![5, d], 1.0);
    for lsa in [false, true] {
        let mut p = ParamSet::new();
        let attn = Attention::new(&mut p, "attn", &tiny_core(lsa), &mut rng);
        randomize(&mut p, &mut rng, 0.4);
        let name = if lsa { "attention.lsa" } else { "attention" };
        out.push(check_component(name, &p, Some(&tokens), seed + 3, |s, x| attn.forward(s, x.expect("input")))?);
    }

    let mut p = ParamSet::new();
    let core = tiny_core(false);
    let block = EncoderBlock::new(&mut p, "block", &core, &mut rng);
    let bm = BehaviorMlp::new(&mut p, "block.bmlp", d, 0.0, &mut rng);
    randomize(&mut p, &mut rng, 0.4);
    out.push(check_component("encoder_block", &p, Some(&tokens), seed + 4, |s, x| {
        let b = s.constant(beh.clone());
        let a = bm.forward(s, b)?;
        block.forward(s, x.expect("input"), Some(a))
    })?);

    let mut p = ParamSet::new();
    let coords = random(&mut rng, vec![4, 2], 1.0);
    let rcfg = ReadoutConfig {
        shifter: true,
        position_hidden_size: 5,
        ..ReadoutConfig::default()
    };
    let readout = GaussianReadout::new(&mut p, "A", &coords, d, &rcfg, None, &mut rng)?;
    randomize(&mut p, &mut rng, 0.4);
    let feats = random(&mut rng, vec![d, 3, 5], 1.0);
    let pupil = [0.3, -0.4];
    out.push(check_component("gaussian_readout", &p, Some(&feats), seed + 5, |s, x| {
        readout.forward(s, x.expect("input"), Some(&pupil))
    })?);

    let o = Tensor::from_vec(vec![6], (0..6).map(|_| 0.5 + rng.uniform() * 2.0).collect());
    let r = Tensor::from_vec(vec![6], (0..6).map(|_| rng.poisson(1.5)).collect());
    out.push(check_component("poisson_loss", &ParamSet::new(), Some(&o), seed + 6, |s, x| {
        s.graph.poisson_loss(x.expect("input"), &r, 1e-8)
    })?);

    let mut cfg = RunConfig::default();
    cfg.core = tiny_core(false);
    cfg.core.num_blocks = 2;
    cfg.readout.position_hidden_size = 5;
    let spec = MouseSpec {
        id: "A".into(),
        coords: random(&mut rng, vec![3, 2], 1.0),
        mean_response: None,
    };
    let mut model = Model::new(&cfg, (c, h, w), &[spec])?;
    randomize(&mut model.params, &mut rng, 0.3);
    let beh_row: Vec<f64> = beh.data().to_vec();
    let target = Tensor::from_vec(vec![3], vec![0.0, 1.0, 3.0]);
    out.push(check_component("full_model", &model.params, None, seed + 7, |s, _| {
        let x = TrialInput {
            image: img.data(),
            behaviors: &beh_row,
            pupil: &pupil,
        };
        let y = model.trial_output(s, 0, x)?;
        s.graph.poisson_loss(y, &target, 1e-8)
    })?);
    Ok(out)
}

/// Plain-text pass/fail table.
pub fn format_table(rows: &[ComponentCheck]) -> String {
    let mut s = format!("{:<26} {:>8} {:>12}  result\n", "component", "coords", "max_rel_err");
    for r in rows {
        s.push_str(&format!(
            "{:<26} {:>8} {:>12.3e}  {}\n",
            r.name,
            r.checked,
            r.max_rel_error,
            if r.passes() { "pass" } else { "FAIL" }
        ));
    }
    s
}
