//! Run configuration as flat `key=value` text.
//!
//! Every field has a default (the tuned training recipe) and
//! a key of the same name. Unknown keys are rejected so that typos cannot
//! silently fall back to a default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{s}' (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(TokenizerMethod {
    SlidingWindow => "sliding_window",
    Conv2d => "conv2d",
    Spt => "spt",
    Cct => "cct",
});

keyword_enum!(PositionalMode {
    Learned => "learned",
    Sinusoidal => "sinusoidal",
});

keyword_enum!(
    /// Placement of behavior MLPs in the encoder.
    BehaviorMode {
        PerBlock => "per_block",
        Shared => "shared",
        FirstBlock => "first_block",
        Disabled => "disabled",
    }
);

keyword_enum!(ModelMode {
    V1t => "v1t",
    VitVanilla => "vit",
    Linear => "linear",
});

keyword_enum!(BiasInit {
    Zero => "zero",
    MeanResponse => "mean_response",
});

keyword_enum!(
    /// Index convention for the single-trial correlation.
    CorrelationMode {
        PerNeuron => "per_neuron",
        Pooled => "pooled",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub method: TokenizerMethod,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub positional: PositionalMode,
    pub cls_token: bool,
    pub patch_dropout: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            method: TokenizerMethod::SlidingWindow,
            patch_size: 8,
            patch_stride: 1,
            embed_dim: 155,
            positional: PositionalMode::Learned,
            cls_token: false,
            patch_dropout: 0.0229,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoreConfig {
    pub tokenizer: TokenizerConfig,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_size: usize,
    pub mha_dropout: f64,
    pub mlp_dropout: f64,
    pub drop_path: f64,
    pub lsa: bool,
    pub bmlp: BehaviorMode,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            tokenizer: TokenizerConfig::default(),
            num_blocks: 4,
            num_heads: 4,
            mlp_size: 488,
            mha_dropout: 0.2544,
            mlp_dropout: 0.2544,
            drop_path: 0.0,
            lsa: false,
            bmlp: BehaviorMode::PerBlock,
        }
    }
}

impl CoreConfig {
    /// Per-head width. When the embedding does not split evenly the heads
    /// are widened to `ceil(d / heads)` and `W_O` maps back to `d`.
    pub fn head_dim(&self) -> usize {
        self.tokenizer.embed_dim.div_ceil(self.num_heads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutConfig {
    pub position_hidden_layers: usize,
    pub position_hidden_size: usize,
    pub bias_init: BiasInit,
    pub sigma_init: f64,
    pub shifter: bool,
    pub shifter_hidden: usize,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        ReadoutConfig {
            position_hidden_layers: 1,
            position_hidden_size: 30,
            bias_init: BiasInit::Zero,
            sigma_init: 0.25,
            shifter: true,
            shifter_hidden: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub max_reductions: usize,
    pub max_epochs: usize,
    pub l1_core: f64,
    pub l1_readout: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub improvement_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.0016,
            lr_decay: 0.3,
            patience: 10,
            max_reductions: 2,
            max_epochs: 200,
            l1_core: 0.5379,
            l1_readout: 0.0076,
            eps: 1e-8,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            improvement_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub alpha: f64,
    pub target_h: usize,
    pub target_w: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            alpha: 1.0,
            target_h: 36,
            target_w: 64,
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: ModelMode,
    pub seed: u64,
    pub core: CoreConfig,
    pub readout: ReadoutConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Feed all five behavior variables as image channels in `vit` mode,
    /// even when the shifter consumes the pupil center.
    pub vit_all_behaviors: bool,
    pub correlation: CorrelationMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: ModelMode::V1t,
            seed: 0,
            core: CoreConfig::default(),
            readout: ReadoutConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            vit_all_behaviors: false,
            correlation: CorrelationMode::PerNeuron,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Invoke `$m!(key, place, kind)` for every configurable field.
macro_rules! for_each_field {
    ($m:ident, $c:expr) => {{
        $m!("mode", $c.mode, kw);
        $m!("seed", $c.seed, num);
        $m!("patch_method", $c.core.tokenizer.method, kw);
        $m!("patch_size", $c.core.tokenizer.patch_size, num);
        $m!("patch_stride", $c.core.tokenizer.patch_stride, num);
        $m!("embed_dim", $c.core.tokenizer.embed_dim, num);
        $m!("positional", $c.core.tokenizer.positional, kw);
        $m!("cls_token", $c.core.tokenizer.cls_token, flag);
        $m!("patch_dropout", $c.core.tokenizer.patch_dropout, num);
        $m!("num_blocks", $c.core.num_blocks, num);
        $m!("num_heads", $c.core.num_heads, num);
        $m!("mlp_size", $c.core.mlp_size, num);
        $m!("mha_dropout", $c.core.mha_dropout, num);
        $m!("mlp_dropout", $c.core.mlp_dropout, num);
        $m!("drop_path", $c.core.drop_path, num);
        $m!("lsa", $c.core.lsa, flag);
        $m!("bmlp", $c.core.bmlp, kw);
        $m!("position_hidden_layers", $c.readout.position_hidden_layers, num);
        $m!("position_hidden_size", $c.readout.position_hidden_size, num);
        $m!("bias_init", $c.readout.bias_init, kw);
        $m!("sigma_init", $c.readout.sigma_init, num);
        $m!("shifter", $c.readout.shifter, flag);
        $m!("shifter_hidden", $c.readout.shifter_hidden, num);
        $m!("initial_lr", $c.train.initial_lr, num);
        $m!("lr_decay", $c.train.lr_decay, num);
        $m!("patience", $c.train.patience, num);
        $m!("max_reductions", $c.train.max_reductions, num);
        $m!("max_epochs", $c.train.max_epochs, num);
        $m!("l1_core", $c.train.l1_core, num);
        $m!("l1_readout", $c.train.l1_readout, num);
        $m!("eps", $c.train.eps, num);
        $m!("batch_size", $c.train.batch_size, num);
        $m!("adam_beta1", $c.train.adam_beta1, num);
        $m!("adam_beta2", $c.train.adam_beta2, num);
        $m!("adam_eps", $c.train.adam_eps, num);
        $m!("weight_decay", $c.train.weight_decay, num);
        $m!("improvement_tol", $c.train.improvement_tol, num);
        $m!("alpha", $c.preprocess.alpha, num);
        $m!("target_h", $c.preprocess.target_h, num);
        $m!("target_w", $c.preprocess.target_w, num);
        $m!("vit_all_behaviors", $c.vit_all_behaviors, flag);
        $m!("correlation", $c.correlation, kw);
    }};
}

impl RunConfig {
    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        macro_rules! try_set {
            ($k:literal, $place:expr, flag) => {
                if key == $k {
                    $place = parse_bool($k, value)?;
                    return Ok(());
                }
            };
            ($k:literal, $place:expr, $kind:ident) => {
                if key == $k {
                    $place = parse($k, value)?;
                    return Ok(());
                }
            };
        }
        for_each_field!(try_set, self);
        Err(Error::Config(format!("unknown config key '{key}'")))
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn keys() -> Vec<&'static str> {
        let mut keys = Vec::new();
        let c = RunConfig::default();
        macro_rules! push_key {
            ($k:literal, $place:expr, $kind:ident) => {
                let _ = &$place;
                keys.push($k);
            };
        }
        for_each_field!(push_key, c);
        keys
    }

    /// Resolved configuration, one `key=value` per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($k:literal, $place:expr, $kind:ident) => {
                writeln!(out, "{}={}", $k, $place).unwrap();
            };
        }
        for_each_field!(emit, self);
        out
    }

    /// Parse config text on top of the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.core.tokenizer;
        let bad = |m: String| Err(Error::Config(m));
        if t.patch_size == 0 || t.patch_stride == 0 || t.patch_stride > t.patch_size {
            return bad(format!(
                "need 1 <= patch_stride <= patch_size, got p={} s={}",
                t.patch_size, t.patch_stride
            ));
        }
        if t.embed_dim == 0 || self.core.num_heads == 0 || self.core.mlp_size == 0 {
            return bad("embed_dim, num_heads and mlp_size must be positive".into());
        }
        for (name, rate) in [
            ("patch_dropout", t.patch_dropout),
            ("mha_dropout", self.core.mha_dropout),
            ("mlp_dropout", self.core.mlp_dropout),
            ("drop_path", self.core.drop_path),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        let tr = &self.train;
        if tr.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(tr.lr_decay > 0.0 && tr.lr_decay < 1.0) {
            return bad(format!("lr_decay must lie in (0, 1), got {}", tr.lr_decay));
        }
        if tr.batch_size == 0 || tr.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(tr.initial_lr > 0.0) || !(tr.eps > 0.0) {
            return bad("initial_lr and eps must be positive".into());
        }
        if !(self.preprocess.alpha > 0.0 && self.preprocess.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.preprocess.alpha));
        }
        if self.preprocess.target_h == 0 || self.preprocess.target_w == 0 {
            return bad("target size must be positive".into());
        }
        if !(self.readout.sigma_init > 0.0) {
            return bad("sigma_init must be positive".into());
        }
        Ok(())
    }
}
