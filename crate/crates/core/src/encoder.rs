//! Transformer encoder with behavior modulation:
//!
//! ```text
//! z ← z + B-MLP(behaviors)        (broadcast over tokens)
//! z ← z + MHA(LN(z))
//! z ← z + MLP(LN(z))
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::{BehaviorMode, CoreConfig};
use crate::dataio::BEHAVIOR_DIM;
use crate::error::{Error, Result};
use crate::nn::{Dense, LayerNorm, ParamKind, ParamSet, Session};
use crate::tensorcore::{Rng, Tensor, Var};
use crate::tokenizer::PatchGrid;

/// Additive pre-softmax mask on the diagonal for locality self-attention.
pub const LSA_MASK: f64 = -1e9;

/// Attention weights recorded during a forward pass: `blocks[b][h]` is the
/// `[l × l]` matrix of head `h` in block `b`, before attention dropout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub blocks: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_heads(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    pub fn seq_len(&self) -> usize {
        self.blocks
            .first()
            .and_then(|b| b.first())
            .map_or(0, |a| a.dim(0))
    }

    /// Little-endian `u32` header `[n_blocks, n_heads, l, l]` followed by
    /// the matrices as `f32`, block-major then head-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.seq_len();
        let mut out = Vec::new();
        for v in [self.n_blocks(), self.n_heads(), l, l] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for a in self.blocks.iter().flatten() {
            for &v in a.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Dimension("attention trace truncated".into()))
        };
        let (nb, nh, l, l2) = (word(0)? as usize, word(1)? as usize, word(2)? as usize, word(3)? as usize);
        if l != l2 || bytes.len() != 16 + 4 * nb * nh * l * l {
            return Err(Error::Dimension("attention trace size does not match header".into()));
        }
        let mut k = 4;
        let mut blocks = Vec::with_capacity(nb);
        for _ in 0..nb {
            let mut heads = Vec::with_capacity(nh);
            for _ in 0..nh {
                let mut data = Vec::with_capacity(l * l);
                for _ in 0..l * l {
                    data.push(f32::from_bits(word(k)?) as f64);
                    k += 1;
                }
                heads.push(Tensor::new(vec![l, l], data)?);
            }
            blocks.push(heads);
        }
        Ok(AttentionTrace { blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        AttentionTrace::from_bytes(&bytes).map_err(|e| Error::load(path, e.to_string()))
    }
}

/// `5 → d → d` with tanh after each layer and dropout in between.
#[derive(Clone, Debug)]
pub struct BehaviorMlp {
    pub fc1: Dense,
    pub fc2: Dense,
    pub dropout: f64,
}

impl BehaviorMlp {
    pub fn new(params: &mut ParamSet, name: &str, d: usize, dropout: f64, rng: &mut Rng) -> Self {
        BehaviorMlp {
            fc1: Dense::new(params, &format!("{name}.fc1"), BEHAVIOR_DIM, d, ParamKind::CoreWeight, rng),
            fc2: Dense::new(params, &format!("{name}.fc2"), d, d, ParamKind::CoreWeight, rng),
            dropout,
        }
    }

    /// `behaviors [1 × 5]` → adjustment `[1 × d]`.
    pub fn forward(&self, s: &mut Session, behaviors: Var) -> Result<Var> {
        let h = self.fc1.forward(s, behaviors)?;
        let h = s.graph.tanh(h)?;
        let h = s.dropout(h, self.dropout)?;
        let h = self.fc2.forward(s, h)?;
        s.graph.tanh(h)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
    pub head_dim: usize,
    pub lsa: bool,
    pub dropout: f64,
}

impl Attention {
    pub fn new(params: &mut ParamSet, name: &str, cfg: &CoreConfig, rng: &mut Rng) -> Self {
        let d = cfg.tokenizer.embed_dim;
        let inner = cfg.num_heads * cfg.head_dim();
        let mut dense = |suffix: &str, i, o| {
            Dense::new(params, &format!("{name}.{suffix}"), i, o, ParamKind::CoreWeight, rng)
        };
        Attention {
            q: dense("q", d, inner),
            k: dense("k", d, inner),
            v: dense("v", d, inner),
            out: dense("o", inner, d),
            heads: cfg.num_heads,
            head_dim: cfg.head_dim(),
            lsa: cfg.lsa,
            dropout: cfg.mha_dropout,
        }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let l = s.graph.shape(z)[0];
        if self.lsa && l < 2 {
            return Err(Error::Config(
                "locality self-attention over a single token masks the whole row".into(),
            ));
        }
        let q = self.q.forward(s, z)?;
        let k = self.k.forward(s, z)?;
        let v = self.v.forward(s, z)?;
        let mask = self.lsa.then(|| {
            let mut m = Tensor::zeros(vec![l, l]);
            for i in 0..l {
                m.set(&[i, i], LSA_MASK);
            }
            m
        });
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut recorded = Vec::new();
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let qh = s.graph.slice_cols(q, off, self.head_dim)?;
            let kh = s.graph.slice_cols(k, off, self.head_dim)?;
            let vh = s.graph.slice_cols(v, off, self.head_dim)?;
            let scores = s.graph.matmul_t(qh, kh, false, true)?;
            let mut scores = s.graph.scale(scores, scale)?;
            if let Some(m) = &mask {
                scores = s.graph.add_const(scores, m)?;
            }
            let a = s.graph.softmax(scores, 1)?;
            if s.trace.is_some() {
                recorded.push(s.graph.value(a).clone());
            }
            let a = s.dropout(a, self.dropout)?;
            outs.push(s.graph.matmul(a, vh)?);
        }
        if let Some(t) = s.trace.as_mut() {
            t.blocks.push(recorded);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        self.out.forward(s, cat)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
    pub mlp_dropout: f64,
    pub drop_path: f64,
}

impl EncoderBlock {
    pub fn new(params: &mut ParamSet, name: &str, cfg: &CoreConfig, rng: &mut Rng) -> Self {
        let d = cfg.tokenizer.embed_dim;
        EncoderBlock {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
            attn: Attention::new(params, &format!("{name}.attn"), cfg, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
            fc1: Dense::new(params, &format!("{name}.mlp.fc1"), d, cfg.mlp_size, ParamKind::CoreWeight, rng),
            fc2: Dense::new(params, &format!("{name}.mlp.fc2"), cfg.mlp_size, d, ParamKind::CoreWeight, rng),
            mlp_dropout: cfg.mlp_dropout,
            drop_path: cfg.drop_path,
        }
    }

    /// Residual branch with stochastic depth: in training a branch is
    /// skipped with probability `drop_path`, and kept branches are scaled
    /// by `1 / (1 − drop_path)`.
    fn residual(
        &self,
        s: &mut Session,
        z: Var,
        branch: impl FnOnce(&mut Session, Var) -> Result<Var>,
    ) -> Result<Var> {
        if s.train() && self.drop_path > 0.0 {
            if s.rng().bernoulli(self.drop_path) {
                return Ok(z);
            }
            let y = branch(s, z)?;
            let y = s.graph.scale(y, 1.0 / (1.0 - self.drop_path))?;
            return s.graph.add(z, y);
        }
        let y = branch(s, z)?;
        s.graph.add(z, y)
    }

    /// One block; `adjust` is the behavior adjustment `[1 × d]`, if any.
    pub fn forward(&self, s: &mut Session, z: Var, adjust: Option<Var>) -> Result<Var> {
        let z = match adjust {
            Some(a) => s.graph.add_broadcast(z, a)?,
            None => z,
        };
        let z = self.residual(s, z, |s, z| {
            let h = self.ln1.forward(s, z)?;
            self.attn.forward(s, h)
        })?;
        self.residual(s, z, |s, z| {
            let h = self.ln2.forward(s, z)?;
            let h = self.fc1.forward(s, h)?;
            let h = s.graph.gelu(h)?;
            let h = s.dropout(h, self.mlp_dropout)?;
            let h = self.fc2.forward(s, h)?;
            s.dropout(h, self.mlp_dropout)
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub bmlps: Vec<BehaviorMlp>,
    pub mode: BehaviorMode,
}

impl Encoder {
    pub fn new(params: &mut ParamSet, cfg: &CoreConfig, rng: &mut Rng) -> Self {
        let d = cfg.tokenizer.embed_dim;
        let n_bmlp = match cfg.bmlp {
            BehaviorMode::PerBlock => cfg.num_blocks,
            BehaviorMode::Shared | BehaviorMode::FirstBlock => 1,
            BehaviorMode::Disabled => 0,
        };
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut bmlps = Vec::with_capacity(n_bmlp);
        for b in 0..cfg.num_blocks {
            if b < n_bmlp {
                bmlps.push(BehaviorMlp::new(params, &format!("block{b}.bmlp"), d, cfg.mlp_dropout, rng));
            }
            blocks.push(EncoderBlock::new(params, &format!("block{b}"), cfg, rng));
        }
        Encoder {
            blocks,
            bmlps,
            mode: cfg.bmlp,
        }
    }

    /// Index of the behavior MLP feeding block `b`.
    pub fn bmlp_for(&self, b: usize) -> Option<usize> {
        match self.mode {
            BehaviorMode::PerBlock => Some(b),
            BehaviorMode::Shared => Some(0),
            BehaviorMode::FirstBlock => (b == 0).then_some(0),
            BehaviorMode::Disabled => None,
        }
    }

    /// `z0 [l × d]` → `[l × d]`. `behaviors` is required unless the
    /// behavior MLPs are disabled.
    pub fn forward(&self, s: &mut Session, z0: Var, behaviors: Option<&[f64]>) -> Result<Var> {
        let beh = match (behaviors, self.bmlps.is_empty()) {
            (_, true) => None,
            (Some(b), false) => {
                if b.len() != BEHAVIOR_DIM {
                    return Err(Error::Dimension(format!(
                        "expected {BEHAVIOR_DIM} behavior values, got {}",
                        b.len()
                    )));
                }
                Some(s.constant(Tensor::new(vec![1, BEHAVIOR_DIM], b.to_vec())?))
            }
            (None, false) => {
                return Err(Error::Config("behavior MLPs need behavior inputs".into()))
            }
        };
        let mut z = z0;
        for (b, block) in self.blocks.iter().enumerate() {
            let adjust = match (self.bmlp_for(b), beh) {
                (Some(i), Some(x)) => {
                    let a = self.bmlps[i].forward(s, x)?;
                    if let Some(rec) = s.bmlp_outputs.as_mut() {
                        rec.push(s.graph.value(a).clone());
                    }
                    Some(a)
                }
                _ => None,
            };
            z = block.forward(s, z, adjust)?;
        }
        Ok(z)
    }
}

/// Drop the cls token (if present) and lay tokens out as `[d × h' × w']`.
pub fn reshape_core_output(s: &mut Session, z: Var, grid: PatchGrid, has_cls: bool) -> Result<Var> {
    let (l, d) = match s.graph.shape(z) {
        [l, d] => (*l, *d),
        sh => return Err(Error::Dimension(format!("core output must be 2-d, got {sh:?}"))),
    };
    let z = if has_cls { s.graph.slice_rows(z, 1, l - 1)? } else { z };
    let l = l - usize::from(has_cls);
    if l != grid.tokens() {
        return Err(Error::Dimension(format!(
            "{l} tokens do not fill a {}×{} grid",
            grid.rows, grid.cols
        )));
    }
    let t = s.graph.transpose(z)?;
    s.graph.reshape(t, &[d, grid.rows, grid.cols])
}

/// Value-level reshape `[l × d]` → `[d × h' × w']`.
pub fn tokens_to_map(z: &Tensor, grid: PatchGrid) -> Result<Tensor> {
    if z.ndim() != 2 || z.dim(0) != grid.tokens() {
        return Err(Error::Dimension(format!(
            "{:?} does not fill a {}×{} grid",
            z.shape(),
            grid.rows,
            grid.cols
        )));
    }
    let d = z.dim(1);
    z.transpose2()?.into_reshape(vec![d, grid.rows, grid.cols])
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let (d, h, w) = match map.shape() {
        [d, h, w] => (*d, *h, *w),
        s => return Err(Error::Dimension(format!("expected [d, h, w], got {s:?}"))),
    };
    map.reshape(vec![d, h * w])?.transpose2()
}

/// Write B-MLP outputs as CSV rows `block,index,value`.
pub fn write_bmlp_activations_csv(per_block: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("block,index,value\n");
    for (b, vals) in per_block.iter().enumerate() {
        for (i, v) in vals.iter().enumerate() {
            out.push_str(&format!("{b},{i},{v}\n"));
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TokenizerConfig;

    fn tiny(heads: usize, lsa: bool) -> CoreConfig {
        CoreConfig {
            tokenizer: TokenizerConfig {
                embed_dim: 8,
                ..TokenizerConfig::default()
            },
            num_blocks: 2,
            num_heads: heads,
            mlp_size: 12,
            lsa,
            ..CoreConfig::default()
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let cfg = tiny(2, false);
        let mut params = ParamSet::new();
        let mut rng = Rng::new(1);
        let attn = Attention::new(&mut params, "a", &cfg, &mut rng);
        let mut r2 = Rng::new(0);
        let mut s = Session::new(&params, &mut r2, false).with_trace();
        let row: Vec<f64> = (0..8).map(|v| v as f64 * 0.1).collect();
        let z = s.constant(Tensor::from_vec(vec![5, 8], row.repeat(5)));
        attn.forward(&mut s, z).unwrap();
        let trace = s.take_trace().unwrap();
        for a in &trace.blocks[0] {
            assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn lsa_zeroes_diagonal_and_rejects_single_token() {
        let cfg = tiny(2, true);
        let mut params = ParamSet::new();
        let mut rng = Rng::new(1);
        let attn = Attention::new(&mut params, "a", &cfg, &mut rng);
        let mut r2 = Rng::new(0);
        let mut s = Session::new(&params, &mut r2, false).with_trace();
        let z = s.constant(Tensor::from_vec(vec![4, 8], (0..32).map(|v| (v as f64).sin()).collect()));
        attn.forward(&mut s, z).unwrap();
        for a in &s.take_trace().unwrap().blocks[0] {
            for i in 0..4 {
                assert_eq!(a.get(&[i, i]), 0.0);
                let sum: f64 = a.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let mut r3 = Rng::new(0);
        let mut s = Session::new(&params, &mut r3, false);
        let one = s.constant(Tensor::ones(vec![1, 8]));
        assert!(attn.forward(&mut s, one).is_err());
    }

    #[test]
    fn reshape_is_a_permutation() {
        let grid = PatchGrid { rows: 4, cols: 8 };
        let z = Tensor::from_vec(vec![32, 3], (0..96).map(|v| v as f64).collect());
        let m = tokens_to_map(&z, grid).unwrap();
        // Token 9 sits at grid cell (1, 1).
        assert_eq!(grid.position(9), (1, 1));
        for k in 0..3 {
            assert_eq!(m.get(&[k, 1, 1]), z.get(&[9, k]));
        }
        assert!(map_to_tokens(&m).unwrap().bit_eq(&z));
        assert!(tokens_to_map(&Tensor::zeros(vec![31, 3]), grid).is_err());
    }

    #[test]
    fn trace_bytes_roundtrip() {
        let t = AttentionTrace {
            blocks: vec![vec![Tensor::from_vec(vec![2, 2], vec![0.25, 0.75, 0.5, 0.5])]; 2],
        };
        let back = AttentionTrace::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(&t.to_bytes()[..4], &2u32.to_le_bytes());
    }
}
