//! Model, tracker, training and synthetic-data configuration, with a
//! line-based `key = value` text form. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// One convolution layer of the feature network, optionally followed by
/// max pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub activation: Activation,
    /// `(window, stride)` of a max pool after the activation.
    pub pool: Option<(usize, usize)>,
}

impl LayerSpec {
    pub fn new(kernel: usize, stride: usize, channels: usize, activation: Activation) -> Self {
        LayerSpec { kernel, stride, channels, activation, pool: None }
    }

    pub fn pooled(mut self, size: usize, stride: usize) -> Self {
        self.pool = Some((size, stride));
        self
    }

    /// Spatial extent after this layer, or `None` on underflow.
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        if self.kernel > extent || self.stride == 0 {
            return None;
        }
        let mut e = (extent - self.kernel) / self.stride + 1;
        if let Some((size, stride)) = self.pool {
            if size > e || stride == 0 {
                return None;
            }
            e = (e - size) / stride + 1;
        }
        Some(e)
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let act = match self.activation {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        };
        write!(f, "{}/{}/{}/{}", self.kernel, self.stride, self.channels, act)?;
        if let Some((size, stride)) = self.pool {
            write!(f, "/max{size}s{stride}")?;
        }
        Ok(())
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer spec '{s}' (want k/stride/channels/act[/maxNsM])"));
        let parts: Vec<&str> = s.trim().split('/').map(str::trim).collect();
        if parts.len() < 4 || parts.len() > 5 {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let activation = match parts[3] {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            _ => return Err(bad()),
        };
        let pool = match parts.get(4) {
            None => None,
            Some(p) => {
                let rest = p.strip_prefix("max").ok_or_else(bad)?;
                let (a, b) = rest.split_once('s').ok_or_else(bad)?;
                Some((num(a)?, num(b)?))
            }
        };
        Ok(LayerSpec {
            kernel: num(parts[0])?,
            stride: num(parts[1])?,
            channels: num(parts[2])?,
            activation,
            pool,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetConfig {
    pub object_size: usize,
    pub search_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl FeatureNetConfig {
    /// Five-layer AlexNet-style extractor: 127 -> 6x6x256, 255 -> 22x22x256.
    pub fn full() -> Self {
        use Activation::*;
        FeatureNetConfig {
            object_size: 127,
            search_size: 255,
            layers: vec![
                LayerSpec::new(11, 2, 96, Relu).pooled(3, 2),
                LayerSpec::new(5, 1, 256, Relu).pooled(3, 2),
                LayerSpec::new(3, 1, 384, Relu),
                LayerSpec::new(3, 1, 384, Relu),
                LayerSpec::new(3, 1, 256, Linear),
            ],
        }
    }

    /// Three-layer CPU-sized extractor: 40 -> 6x6x32, 80 -> 16x16x32.
    pub fn desk() -> Self {
        use Activation::*;
        FeatureNetConfig {
            object_size: 40,
            search_size: 80,
            layers: vec![
                LayerSpec::new(5, 2, 16, Relu),
                LayerSpec::new(3, 1, 32, Relu).pooled(2, 2),
                LayerSpec::new(3, 1, 32, Linear),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(3, |l| l.channels)
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        self.layers.iter().try_fold(input, |e, l| l.out_extent(e))
    }

    /// Template extent `n`.
    pub fn template_extent(&self) -> Option<usize> {
        self.out_extent(self.object_size)
    }

    pub fn search_extent(&self) -> Option<usize> {
        self.out_extent(self.search_size)
    }

    /// Input pixels per feature cell.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.stride * l.pool.map_or(1, |p| p.1))
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("feature net needs at least one layer".into()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::Config("layer extents must be positive".into()));
        }
        let n = self
            .template_extent()
            .ok_or_else(|| Error::Config(format!("object size {} underflows the layer stack", self.object_size)))?;
        let m = self
            .search_extent()
            .ok_or_else(|| Error::Config(format!("search size {} underflows the layer stack", self.search_size)))?;
        if m < n {
            return Err(Error::Config(format!(
                "search features ({m}) smaller than template ({n})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub featnet: FeatureNetConfig,
    pub hidden_size: usize,
    pub attention_size: usize,
    pub num_classes: usize,
    pub class_hidden: usize,
    /// Stride of the sliding patch window fed to the attention network.
    pub patch_stride: usize,
    pub keep_prob: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            featnet: FeatureNetConfig::full(),
            hidden_size: 512,
            attention_size: 256,
            num_classes: 30,
            class_hidden: 1024,
            patch_stride: 1,
            keep_prob: 0.8,
            ln_eps: 1e-5,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            featnet: FeatureNetConfig::desk(),
            hidden_size: 64,
            attention_size: 32,
            num_classes: 6,
            class_hidden: 128,
            patch_stride: 1,
            keep_prob: 0.8,
            ln_eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.featnet.channels()
    }

    pub fn template_extent(&self) -> usize {
        self.featnet.template_extent().unwrap_or(0)
    }

    pub fn search_extent(&self) -> usize {
        self.featnet.search_extent().unwrap_or(0)
    }

    /// Score map side: search extent minus template extent plus one.
    pub fn score_extent(&self) -> usize {
        self.search_extent() + 1 - self.template_extent()
    }

    pub fn validate(&self) -> Result<()> {
        self.featnet.validate()?;
        if self.hidden_size == 0 || self.attention_size == 0 || self.num_classes == 0 || self.class_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.patch_stride == 0 {
            return Err(Error::Config("patch_stride must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config("keep_prob must be in (0, 1]".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Tracker variants. `None` is the full tracker with both memories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Uniform mean of all patch vectors replaces attention.
    NoAtt,
    /// Positive memory is a FIFO queue read as the mean of occupied slots.
    Queue,
    /// Positive and negative reads pick the single best-matching slot.
    HardRead,
    /// Residual gate fixed at one.
    NoRes,
    /// No memory at all: the initial template is matched every frame.
    Frozen,
    /// Negative memory and distractor canceling disabled.
    NoNegative,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoAtt,
        Ablation::Queue,
        Ablation::HardRead,
        Ablation::NoRes,
        Ablation::Frozen,
        Ablation::NoNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAtt => "noatt",
            Ablation::Queue => "queue",
            Ablation::HardRead => "hardread",
            Ablation::NoRes => "nores",
            Ablation::Frozen => "frozen",
            Ablation::NoNegative => "no-negative",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Context factor: margin `c = context * (w + h)` around the box.
    pub context: f64,
    pub num_scales: usize,
    pub scale_step: f64,
    pub scale_smoothing: f64,
    pub window_weight: f64,
    pub npos: usize,
    pub nneg: usize,
    /// Access-vector decay.
    pub decay: f64,
    /// Distractor distance threshold, in score-map cells.
    pub tau: f64,
    /// Distractor score ratio threshold.
    pub gamma: f64,
    /// Maximum number of distractors written per frame.
    pub max_distractors: usize,
    pub ablation: Ablation,
    /// Skip every memory write after the initial one.
    pub skip_writes: bool,
    /// Fixed residual gate value in place of the controller output.
    pub residual_gate: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            context: 0.5,
            num_scales: 3,
            scale_step: 1.05,
            scale_smoothing: 0.5,
            window_weight: 0.19,
            npos: 8,
            nneg: 16,
            decay: 0.99,
            tau: 4.0,
            gamma: 0.7,
            max_distractors: 2,
            ablation: Ablation::None,
            skip_writes: false,
            residual_gate: None,
        }
    }
}

impl TrackerConfig {
    /// Scale factors `step^k` for `k` centered on zero.
    pub fn scales(&self) -> Vec<f64> {
        let half = (self.num_scales as i64 - 1) / 2;
        (0..self.num_scales as i64)
            .map(|k| self.scale_step.powi((k - half) as i32))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.num_scales.is_multiple_of(2) {
            return Err(Error::Config("num_scales must be odd".into()));
        }
        if self.npos == 0 || self.nneg == 0 {
            return Err(Error::Config("memory sizes must be positive".into()));
        }
        if self.max_distractors == 0 || self.max_distractors > self.nneg {
            return Err(Error::Config("max_distractors must be in 1..=nneg".into()));
        }
        for (name, v) in [
            ("scale_smoothing", self.scale_smoothing),
            ("window_weight", self.window_weight),
            ("decay", self.decay),
            ("gamma", self.gamma),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.context < 0.0 || self.scale_step <= 0.0 || self.tau < 0.0 {
            return Err(Error::Config("context, scale_step and tau must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub clip_len: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    /// Weight of the auxiliary classification loss.
    pub kappa: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub steps: usize,
    /// Positive label radius in score-map cells.
    pub r_pos: f64,
    /// Global gradient-norm clip; zero disables.
    pub clip_norm: f64,
    /// Maximum search-crop translation, as a fraction of the target size.
    pub jitter: f64,
    /// Maximum relative crop stretch.
    pub stretch: f64,
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            batch: 8,
            clip_len: 16,
            lr: 1e-4,
            lr_decay: 0.8,
            lr_decay_interval: 10_000,
            kappa: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            steps: 100_000,
            r_pos: 2.0,
            clip_norm: 0.0,
            jitter: 0.25,
            stretch: 0.05,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch: 1,
            clip_len: 8,
            lr: 1e-3,
            lr_decay: 0.8,
            lr_decay_interval: 500,
            steps: 2000,
            clip_norm: 10.0,
            ..TrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.clip_len < 2 || self.lr_decay_interval == 0 {
            return Err(Error::Config("batch, clip_len (>= 2) and lr_decay_interval must be positive".into()));
        }
        if self.lr <= 0.0 || self.lr_decay <= 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config("lr, lr_decay and adam_eps must be positive".into()));
        }
        if self.kappa < 0.0 || self.r_pos < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("kappa, r_pos and clip_norm must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam moments must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub canvas: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub distractors: usize,
    /// Per-frame appearance drift (color and size), as a fraction.
    pub drift: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum speed in pixels per frame.
    pub speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 128,
            frames: 60,
            num_classes: 6,
            distractors: 1,
            drift: 0.02,
            min_size: 14.0,
            max_size: 24.0,
            speed: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 16 || self.frames == 0 || self.num_classes == 0 {
            return Err(Error::Config("synth canvas >= 16, frames and classes > 0".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size * 2.0 < self.canvas as f64) {
            return Err(Error::Config("synth sizes must satisfy 0 < min <= max < canvas/2".into()));
        }
        if self.drift < 0.0 || self.speed < 0.0 {
            return Err(Error::Config("drift and speed must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

impl Config {
    pub fn desk() -> Self {
        Config {
            model: ModelConfig::desk(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::desk(),
            synth: SynthConfig::default(),
        }
    }

    pub fn full() -> Self {
        Config {
            model: ModelConfig::full(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::full(),
            synth: SynthConfig { num_classes: 30, ..SynthConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, tr, sy) = (&mut self.model, &mut self.tracker, &mut self.train, &mut self.synth);
        match key {
            "featnet.object_size" => m.featnet.object_size = parse_num(key, v)?,
            "featnet.search_size" => m.featnet.search_size = parse_num(key, v)?,
            "featnet.layers" => {
                m.featnet.layers = v.split(',').map(str::parse).collect::<Result<_>>()?
            }
            "model.hidden_size" => m.hidden_size = parse_num(key, v)?,
            "model.attention_size" => m.attention_size = parse_num(key, v)?,
            "model.num_classes" => m.num_classes = parse_num(key, v)?,
            "model.class_hidden" => m.class_hidden = parse_num(key, v)?,
            "model.patch_stride" => m.patch_stride = parse_num(key, v)?,
            "model.keep_prob" => m.keep_prob = parse_num(key, v)?,
            "model.ln_eps" => m.ln_eps = parse_num(key, v)?,
            "tracker.context" => t.context = parse_num(key, v)?,
            "tracker.num_scales" => t.num_scales = parse_num(key, v)?,
            "tracker.scale_step" => t.scale_step = parse_num(key, v)?,
            "tracker.scale_smoothing" => t.scale_smoothing = parse_num(key, v)?,
            "tracker.window_weight" => t.window_weight = parse_num(key, v)?,
            "tracker.npos" => t.npos = parse_num(key, v)?,
            "tracker.nneg" => t.nneg = parse_num(key, v)?,
            "tracker.decay" => t.decay = parse_num(key, v)?,
            "tracker.tau" => t.tau = parse_num(key, v)?,
            "tracker.gamma" => t.gamma = parse_num(key, v)?,
            "tracker.max_distractors" => t.max_distractors = parse_num(key, v)?,
            "tracker.ablation" => t.ablation = v.parse()?,
            "tracker.skip_writes" => t.skip_writes = parse_num(key, v)?,
            "tracker.residual_gate" => {
                t.residual_gate = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "train.batch" => tr.batch = parse_num(key, v)?,
            "train.clip_len" => tr.clip_len = parse_num(key, v)?,
            "train.lr" => tr.lr = parse_num(key, v)?,
            "train.lr_decay" => tr.lr_decay = parse_num(key, v)?,
            "train.lr_decay_interval" => tr.lr_decay_interval = parse_num(key, v)?,
            "train.kappa" => tr.kappa = parse_num(key, v)?,
            "train.beta1" => tr.beta1 = parse_num(key, v)?,
            "train.beta2" => tr.beta2 = parse_num(key, v)?,
            "train.adam_eps" => tr.adam_eps = parse_num(key, v)?,
            "train.seed" => tr.seed = parse_num(key, v)?,
            "train.steps" => tr.steps = parse_num(key, v)?,
            "train.r_pos" => tr.r_pos = parse_num(key, v)?,
            "train.clip_norm" => tr.clip_norm = parse_num(key, v)?,
            "train.jitter" => tr.jitter = parse_num(key, v)?,
            "train.stretch" => tr.stretch = parse_num(key, v)?,
            "synth.canvas" => sy.canvas = parse_num(key, v)?,
            "synth.frames" => sy.frames = parse_num(key, v)?,
            "synth.num_classes" => sy.num_classes = parse_num(key, v)?,
            "synth.distractors" => sy.distractors = parse_num(key, v)?,
            "synth.drift" => sy.drift = parse_num(key, v)?,
            "synth.min_size" => sy.min_size = parse_num(key, v)?,
            "synth.max_size" => sy.max_size = parse_num(key, v)?,
            "synth.speed" => sy.speed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses assignments on top of the desk defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let (m, t, tr, sy) = (&self.model, &self.tracker, &self.train, &self.synth);
        let layers: Vec<String> = m.featnet.layers.iter().map(ToString::to_string).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("featnet.object_size", m.featnet.object_size.to_string());
        kv("featnet.search_size", m.featnet.search_size.to_string());
        kv("featnet.layers", layers.join(", "));
        kv("model.hidden_size", m.hidden_size.to_string());
        kv("model.attention_size", m.attention_size.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.class_hidden", m.class_hidden.to_string());
        kv("model.patch_stride", m.patch_stride.to_string());
        kv("model.keep_prob", m.keep_prob.to_string());
        kv("model.ln_eps", m.ln_eps.to_string());
        kv("tracker.context", t.context.to_string());
        kv("tracker.num_scales", t.num_scales.to_string());
        kv("tracker.scale_step", t.scale_step.to_string());
        kv("tracker.scale_smoothing", t.scale_smoothing.to_string());
        kv("tracker.window_weight", t.window_weight.to_string());
        kv("tracker.npos", t.npos.to_string());
        kv("tracker.nneg", t.nneg.to_string());
        kv("tracker.decay", t.decay.to_string());
        kv("tracker.tau", t.tau.to_string());
        kv("tracker.gamma", t.gamma.to_string());
        kv("tracker.max_distractors", t.max_distractors.to_string());
        kv("tracker.ablation", t.ablation.to_string());
        kv("tracker.skip_writes", t.skip_writes.to_string());
        kv(
            "tracker.residual_gate",
            t.residual_gate.map_or_else(|| "auto".to_string(), |g| g.to_string()),
        );
        kv("train.batch", tr.batch.to_string());
        kv("train.clip_len", tr.clip_len.to_string());
        kv("train.lr", tr.lr.to_string());
        kv("train.lr_decay", tr.lr_decay.to_string());
        kv("train.lr_decay_interval", tr.lr_decay_interval.to_string());
        kv("train.kappa", tr.kappa.to_string());
        kv("train.beta1", tr.beta1.to_string());
        kv("train.beta2", tr.beta2.to_string());
        kv("train.adam_eps", tr.adam_eps.to_string());
        kv("train.seed", tr.seed.to_string());
        kv("train.steps", tr.steps.to_string());
        kv("train.r_pos", tr.r_pos.to_string());
        kv("train.clip_norm", tr.clip_norm.to_string());
        kv("train.jitter", tr.jitter.to_string());
        kv("train.stretch", tr.stretch.to_string());
        kv("synth.canvas", sy.canvas.to_string());
        kv("synth.frames", sy.frames.to_string());
        kv("synth.num_classes", sy.num_classes.to_string());
        kv("synth.distractors", sy.distractors.to_string());
        kv("synth.drift", sy.drift.to_string());
        kv("synth.min_size", sy.min_size.to_string());
        kv("synth.max_size", sy.max_size.to_string());
        kv("synth.speed", sy.speed.to_string());
        out
    }
}
