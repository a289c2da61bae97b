//! Image → token sequence: patch extraction or convolution, optional
//! shifted-patch augmentation, positional embeddings and a cls token.

use crate::config::{PositionalMode, TokenizerConfig, TokenizerMethod};
use crate::error::{Error, Result};
use crate::nn::{init_weight, Dense, ParamId, ParamKind, ParamSet, Session};
use crate::tensorcore::ops::{self, grid_dims};
use crate::tensorcore::{Rng, Tensor, Var};

/// Spatial layout of the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, p: usize, s: usize) -> Result<Self> {
        let (rows, cols) = grid_dims(h, w, p, s)?;
        Ok(PatchGrid { rows, cols })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Grid cell `(row, col)` of token `k`.
    pub fn position(&self, k: usize) -> (usize, usize) {
        (k / self.cols, k % self.cols)
    }
}

pub fn extract_patches(img: &Tensor, p: usize, s: usize) -> Result<(Tensor, PatchGrid)> {
    let patches = ops::extract_patches(img, p, s)?;
    let grid = PatchGrid::new(img.dim(1), img.dim(2), p, s)?;
    Ok((patches, grid))
}

/// Diagonal shifts applied by [`spt_augment`], as (dy, dx) signs.
const SPT_SHIFTS: [(i64, i64); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

/// `[c × h × w]` → `[5c × h × w]`: the image followed by four copies moved
/// `floor(p/2)` pixels along each diagonal, zero-filled. A shift of
/// `(+k, +k)` moves content down and to the right.
pub fn spt_augment(img: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("spt_augment: expected [c, h, w], got {s:?}"))),
    };
    let k = (p / 2) as i64;
    let src = img.data();
    let mut out = Vec::with_capacity(5 * c * h * w);
    out.extend_from_slice(src);
    for (sy, sx) in SPT_SHIFTS {
        let (dy, dx) = (sy * k, sx * k);
        for ch in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (yy, xx) = (y - dy, x - dx);
                    let inside = yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64;
                    out.push(if inside {
                        src[ch * h * w + yy as usize * w + xx as usize]
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    Tensor::new(vec![5 * c, h, w], out)
}

/// Sinusoidal position table `[n × d]`: even columns `sin(pos·ω_i)`, odd
/// columns `cos(pos·ω_i)`, `ω_i = 10000^(−2i/d)`.
pub fn sinusoidal_table(n: usize, d: usize) -> Tensor {
    let mut t = vec![0.0; n * d];
    for pos in 0..n {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            t[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![n, d], t)
}

/// Append one constant `h × w` channel per value.
pub fn concat_behavior_channels(img: &Tensor, values: &[f64]) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("expected [c, h, w], got {s:?}"))),
    };
    let mut data = img.data().to_vec();
    for &v in values {
        data.extend(std::iter::repeat(v).take(h * w));
    }
    Tensor::new(vec![c + values.len(), h, w], data)
}

#[derive(Clone, Debug)]
enum Projection {
    Linear(Dense),
    Conv { weight: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    /// Channels after behavior concatenation, before shifted-patch expansion.
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid: PatchGrid,
    proj: Projection,
    position: Option<ParamId>,
    sinusoid: Option<Tensor>,
    cls: Option<ParamId>,
}

impl Tokenizer {
    pub fn new(
        cfg: &TokenizerConfig,
        (c, h, w): (usize, usize, usize),
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (p, s, d) = (cfg.patch_size, cfg.patch_stride, cfg.embed_dim);
        if s == 0 || s > p {
            return Err(Error::Config(format!("need 1 <= stride <= patch size, got p={p} s={s}")));
        }
        let grid = PatchGrid::new(h, w, p, s)?;
        if grid.rows > grid.cols {
            return Err(Error::Config(format!(
                "token grid {}×{} has more rows than columns",
                grid.rows, grid.cols
            )));
        }
        let c_eff = if cfg.method == TokenizerMethod::Spt { 5 * c } else { c };
        let proj = match cfg.method {
            TokenizerMethod::SlidingWindow | TokenizerMethod::Spt => Projection::Linear(Dense::new(
                params,
                "tokenizer.proj",
                c_eff * p * p,
                d,
                ParamKind::CoreWeight,
                rng,
            )),
            TokenizerMethod::Conv2d | TokenizerMethod::Cct => Projection::Conv {
                weight: params.add(
                    "tokenizer.conv.weight",
                    ParamKind::CoreWeight,
                    init_weight(rng, vec![d, c_eff, p, p]),
                ),
                bias: params.add("tokenizer.conv.bias", ParamKind::Bias, Tensor::zeros(vec![d])),
            },
        };
        let n_pos = grid.tokens() + usize::from(cfg.cls_token);
        let (position, sinusoid) = match cfg.positional {
            PositionalMode::Learned => (
                Some(params.add(
                    "tokenizer.position",
                    ParamKind::Bias,
                    init_weight(rng, vec![n_pos, d]),
                )),
                None,
            ),
            PositionalMode::Sinusoidal => (None, Some(sinusoidal_table(n_pos, d))),
        };
        let cls = cfg.cls_token.then(|| {
            params.add("tokenizer.cls", ParamKind::Bias, init_weight(rng, vec![1, d]))
        });
        Ok(Tokenizer {
            cfg: cfg.clone(),
            in_channels: c,
            height: h,
            width: w,
            grid,
            proj,
            position,
            sinusoid,
            cls,
        })
    }

    /// Sequence length including the cls token.
    pub fn seq_len(&self) -> usize {
        self.grid.tokens() + usize::from(self.cls.is_some())
    }

    pub fn has_cls(&self) -> bool {
        self.cls.is_some()
    }

    /// Embed a preprocessed `[c × h × w]` image, optionally extended with
    /// constant behavior channels, into `[l(+1) × d]`.
    pub fn forward(&self, s: &mut Session, img: &Tensor, behaviors: Option<&[f64]>) -> Result<Var> {
        let img = match behaviors {
            Some(b) => concat_behavior_channels(img, b)?,
            None => img.clone(),
        };
        if img.shape() != [self.in_channels, self.height, self.width] {
            return Err(Error::Dimension(format!(
                "tokenizer expects [{}, {}, {}], got {:?}",
                self.in_channels,
                self.height,
                self.width,
                img.shape()
            )));
        }
        let img = if self.cfg.method == TokenizerMethod::Spt {
            spt_augment(&img, self.cfg.patch_size)?
        } else {
            img
        };
        let (p, st, d) = (self.cfg.patch_size, self.cfg.patch_stride, self.cfg.embed_dim);
        let x = s.constant(img);
        let mut z = match &self.proj {
            Projection::Linear(dense) => {
                let patches = s.graph.patches(x, p, st)?;
                dense.forward(s, patches)?
            }
            Projection::Conv { weight, bias } => {
                let (w, b) = (s.p(*weight), s.p(*bias));
                let mut y = s.graph.conv2d(x, w, b, st)?;
                if self.cfg.method == TokenizerMethod::Cct {
                    y = s.graph.relu(y)?;
                    y = s.graph.max_pool3(y)?;
                }
                let flat = s.graph.reshape(y, &[d, self.grid.tokens()])?;
                s.graph.transpose(flat)?
            }
        };
        if let Some(cls) = self.cls {
            let c = s.p(cls);
            z = s.graph.concat_rows(&[c, z])?;
        }
        z = match (self.position, &self.sinusoid) {
            (Some(pos), _) => {
                let pe = s.p(pos);
                s.graph.add(z, pe)?
            }
            (None, Some(table)) => s.graph.add_const(z, table)?,
            (None, None) => unreachable!("one positional mode is always set"),
        };
        s.dropout(z, self.cfg.patch_dropout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = PatchGrid::new(36, 64, 8, 8).unwrap();
        assert_eq!((g.rows, g.cols, g.tokens()), (4, 8, 32));
        let g = PatchGrid::new(36, 64, 8, 1).unwrap();
        assert_eq!((g.rows, g.cols, g.tokens()), (29, 57, 1653));
        assert!(matches!(PatchGrid::new(6, 20, 8, 1), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_identical_patches() {
        let img = Tensor::full(vec![1, 12, 20], 0.5);
        let (patches, grid) = extract_patches(&img, 4, 2).unwrap();
        assert_eq!(patches.dim(0), grid.tokens());
        for k in 1..grid.tokens() {
            assert_eq!(patches.row(k), patches.row(0));
        }
    }

    #[test]
    fn spt_single_pixel() {
        let mut img = Tensor::zeros(vec![1, 12, 12]);
        img.set(&[0, 0, 0], 1.0);
        let out = spt_augment(&img, 8).unwrap();
        assert_eq!(out.shape(), &[5, 12, 12]);
        assert_eq!(out.get(&[1, 4, 4]), 1.0);
        assert_eq!(out.index_first(1).sum(), 1.0);
        for ch in 2..5 {
            assert_eq!(out.index_first(ch).sum(), 0.0);
        }
        assert_eq!(out.get(&[0, 0, 0]), 1.0);
    }

    #[test]
    fn sinusoid_position_zero() {
        let t = sinusoidal_table(3, 6);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((t.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn tall_grid_rejected() {
        let cfg = TokenizerConfig {
            patch_size: 4,
            patch_stride: 4,
            embed_dim: 4,
            ..TokenizerConfig::default()
        };
        let mut params = ParamSet::new();
        let mut rng = Rng::new(0);
        assert!(Tokenizer::new(&cfg, (1, 16, 8), &mut params, &mut rng).is_err());
    }
}
