//! Encoder `f` and projection head `g`: `h = f(x)`, `z = g(h)`.
//!
//! The small CNN is a stack of conv(3×3, same padding) → batch norm → ReLU →
//! 2×2 average pool blocks, then global average pooling and a dense layer.
//! The MLP flattens the image and applies two dense → ReLU layers. The head
//! is dense → batch norm → ReLU → dense.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    SmallCnn,
    Mlp,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" | "cnn" => Ok(EncoderKind::SmallCnn),
            "mlp" => Ok(EncoderKind::Mlp),
            other => Err(Error::Config(format!(
                "unknown encoder kind `{other}` (expected small_cnn or mlp)"
            ))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::SmallCnn => "small_cnn",
            EncoderKind::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Width of `h`.
    pub hidden_dim: usize,
    /// Width of `z`.
    pub projection_dim: usize,
    pub init_seed: u64,
    /// Input `(channels, height, width)`.
    pub input: (usize, usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SmallCnn,
            conv_channels: vec![16, 32, 64],
            kernel_size: 3,
            hidden_dim: 128,
            projection_dim: 32,
            init_seed: 0,
            input: (3, 32, 32),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.projection_dim == 0 {
            return Err(Error::Config("hidden_dim and projection_dim must be positive".into()));
        }
        if self.projection_dim > self.hidden_dim {
            return Err(Error::Config(format!(
                "projection_dim {} exceeds hidden_dim {}",
                self.projection_dim, self.hidden_dim
            )));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} has an empty axis", self.input)));
        }
        if self.kind == EncoderKind::SmallCnn {
            if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                return Err(Error::Config(
                    "conv_channels must be a non-empty list of positive widths".into(),
                ));
            }
            if self.kernel_size.is_multiple_of(2) {
                return Err(Error::Config(format!("kernel_size {} must be odd", self.kernel_size)));
            }
            let (mut sh, mut sw) = (h, w);
            for i in 0..self.conv_channels.len() {
                if sh < 2 || sw < 2 {
                    return Err(Error::Config(format!(
                        "input {h}x{w} too small for {} conv blocks: {sh}x{sw} before block {i}",
                        self.conv_channels.len()
                    )));
                }
                sh /= 2;
                sw /= 2;
            }
        }
        Ok(())
    }

    /// `key=value` lines, parseable by [`EncoderConfig::set`].
    pub fn to_lines(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("kind".into(), self.kind.to_string()),
            ("conv_channels".into(), join(&self.conv_channels)),
            ("kernel_size".into(), self.kernel_size.to_string()),
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            ("projection_dim".into(), self.projection_dim.to_string()),
            ("init_seed".into(), self.init_seed.to_string()),
            ("input".into(), join(&[self.input.0, self.input.1, self.input.2])),
        ]
    }

    /// Sets one field from its text form. Returns `Ok(false)` for an
    /// unrecognized key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("encoder.{key}: cannot parse `{value}` as {what}"));
        let list = || -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad("a list of integers")))
                .collect()
        };
        match key {
            "kind" => self.kind = value.parse()?,
            "conv_channels" => self.conv_channels = list()?,
            "kernel_size" => self.kernel_size = value.parse().map_err(|_| bad("an integer"))?,
            "hidden_dim" => self.hidden_dim = value.parse().map_err(|_| bad("an integer"))?,
            "projection_dim" => self.projection_dim = value.parse().map_err(|_| bad("an integer"))?,
            "init_seed" => self.init_seed = value.parse().map_err(|_| bad("an integer"))?,
            "input" => match list()?[..] {
                [c, h, w] => self.input = (c, h, w),
                _ => return Err(bad("channels,height,width")),
            },
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; never receives gradients.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Whether batch norm uses batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update produced by a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    mean_slot: usize,
    var_slot: usize,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Result of a forward pass. `params` maps parameter slots to their graph
/// leaves (empty when parameters were bound as constants).
#[derive(Debug)]
pub struct ForwardPass {
    pub h: Var,
    pub z: Var,
    pub params: Vec<(usize, Var)>,
    pub stat_updates: Vec<StatUpdate>,
}

struct Binder<'a> {
    model: &'a ModelParams,
    mode: Mode,
    track: bool,
    bound: Vec<Option<Var>>,
    updates: Vec<StatUpdate>,
}

impl<'a> Binder<'a> {
    fn new(model: &'a ModelParams, mode: Mode, track: bool) -> Self {
        Self {
            model,
            mode,
            track,
            bound: vec![None; model.entries.len()],
            updates: Vec::new(),
        }
    }

    fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        let slot = self
            .model
            .slot(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let value = self.model.entries[slot].value.clone();
        let v = if self.track && self.model.entries[slot].kind == ParamKind::Trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.bound[slot] = Some(v);
        v
    }

    fn dense(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.weight"));
        let b = self.var(g, &format!("{prefix}.bias"));
        g.dense(x, w, b)
    }

    fn batch_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.gamma"));
        let beta = self.var(g, &format!("{prefix}.beta"));
        let mean_slot = self
            .model
            .slot(&format!("{prefix}.running_mean"))
            .expect("running mean");
        let var_slot = self.model.slot(&format!("{prefix}.running_var")).expect("running var");
        match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.updates.push(StatUpdate {
                    mean_slot,
                    var_slot,
                    batch_mean: stats.mean,
                    batch_var: stats.var_unbiased,
                });
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.model.entries[mean_slot].value.data(),
                self.model.entries[var_slot].value.data(),
                BN_EPS,
            ),
        }
    }

    fn finish(self) -> (Vec<(usize, Var)>, Vec<StatUpdate>) {
        let params = self
            .bound
            .iter()
            .enumerate()
            .filter(|(slot, _)| self.track && self.model.entries[*slot].kind == ParamKind::Trainable)
            .filter_map(|(slot, v)| v.map(|v| (slot, v)))
            .collect();
        (params, self.updates)
    }
}

/// All tensors of encoder and head, in a fixed order, plus the configuration
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    /// Number of completed training epochs.
    pub epoch: u32,
    entries: Vec<ParamEntry>,
}

fn kaiming(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl ModelParams {
    /// Fan-in scaled normal initialization (`std = √(2/fan_in)`), zero
    /// biases, unit batch-norm scales. Each tensor draws from its own
    /// stream derived from `init_seed` and its slot index.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        let seed = config.init_seed;
        let mut push = |name: String, kind: ParamKind, value: Tensor| entries.push(ParamEntry { name, kind, value });
        let mut slot = 0u64;
        let mut next = || {
            slot += 1;
            derive_seed(seed, slot)
        };
        let bn = |push: &mut dyn FnMut(String, ParamKind, Tensor), prefix: &str, width: usize| {
            push(
                format!("{prefix}.gamma"),
                ParamKind::Trainable,
                Tensor::filled(&[width], 1.0),
            );
            push(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros(&[width]));
            push(
                format!("{prefix}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[width]),
            );
            push(
                format!("{prefix}.running_var"),
                ParamKind::Buffer,
                Tensor::filled(&[width], 1.0),
            );
        };
        let (in_ch, h, w) = config.input;
        let hidden = config.hidden_dim;
        match config.kind {
            EncoderKind::SmallCnn => {
                let k = config.kernel_size;
                let mut c_in = in_ch;
                for (i, &c_out) in config.conv_channels.iter().enumerate() {
                    push(
                        format!("enc.conv{i}.weight"),
                        ParamKind::Trainable,
                        kaiming(&[c_out, c_in, k, k], c_in * k * k, next()),
                    );
                    bn(&mut push, &format!("enc.bn{i}"), c_out);
                    c_in = c_out;
                }
                push(
                    "enc.fc.weight".into(),
                    ParamKind::Trainable,
                    kaiming(&[c_in, hidden], c_in, next()),
                );
                push("enc.fc.bias".into(), ParamKind::Trainable, Tensor::zeros(&[hidden]));
            }
            EncoderKind::Mlp => {
                let flat = in_ch * h * w;
                push(
                    "enc.fc0.weight".into(),
                    ParamKind::Trainable,
                    kaiming(&[flat, hidden], flat, next()),
                );
                push("enc.fc0.bias".into(), ParamKind::Trainable, Tensor::zeros(&[hidden]));
                push(
                    "enc.fc1.weight".into(),
                    ParamKind::Trainable,
                    kaiming(&[hidden, hidden], hidden, next()),
                );
                push("enc.fc1.bias".into(), ParamKind::Trainable, Tensor::zeros(&[hidden]));
            }
        }
        push(
            "proj.fc0.weight".into(),
            ParamKind::Trainable,
            kaiming(&[hidden, hidden], hidden, next()),
        );
        push("proj.fc0.bias".into(), ParamKind::Trainable, Tensor::zeros(&[hidden]));
        bn(&mut push, "proj.bn", hidden);
        push(
            "proj.fc1.weight".into(),
            ParamKind::Trainable,
            kaiming(&[hidden, config.projection_dim], hidden, next()),
        );
        push(
            "proj.fc1.bias".into(),
            ParamKind::Trainable,
            Tensor::zeros(&[config.projection_dim]),
        );
        Ok(Self {
            config: config.clone(),
            epoch: 0,
            entries,
        })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| &self.entries[s].value)
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].value
    }

    pub fn trainable_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| i)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.config.input;
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Contract(format!(
                "encoder input must be [N, C, H, W], got {s:?}"
            )));
        }
        for (axis, (want, got)) in ["channels", "height", "width"]
            .iter()
            .zip([(c, s[1]), (h, s[2]), (w, s[3])])
        {
            if want != got {
                return Err(Error::dim(format!("encoder input {axis}"), want, got));
            }
        }
        Ok(())
    }

    fn encode(&self, b: &mut Binder<'_>, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        match self.config.kind {
            EncoderKind::SmallCnn => {
                let pad = self.config.kernel_size / 2;
                let mut a = x;
                for i in 0..self.config.conv_channels.len() {
                    let k = b.var(g, &format!("enc.conv{i}.weight"));
                    a = g.conv2d(a, k, 1, pad)?;
                    a = b.batch_norm(g, a, &format!("enc.bn{i}"))?;
                    a = g.relu(a);
                    a = g.avg_pool2(a)?;
                }
                let pooled = g.global_avg_pool(a)?;
                b.dense(g, pooled, "enc.fc")
            }
            EncoderKind::Mlp => {
                let flat = g.flatten(x);
                let a = b.dense(g, flat, "enc.fc0")?;
                let a = g.relu(a);
                let a = b.dense(g, a, "enc.fc1")?;
                Ok(g.relu(a))
            }
        }
    }

    fn project(&self, b: &mut Binder<'_>, g: &mut Graph, h: Var) -> Result<Var> {
        let width = g.value(h).shape().get(1).copied().unwrap_or(0);
        if width != self.config.hidden_dim {
            return Err(Error::dim(
                "projection input width (hidden_dim)",
                self.config.hidden_dim,
                width,
            ));
        }
        let a = b.dense(g, h, "proj.fc0")?;
        let a = b.batch_norm(g, a, "proj.bn")?;
        let a = g.relu(a);
        b.dense(g, a, "proj.fc1")
    }

    /// Full forward pass `x → h → z`. With `track_grads`, trainable
    /// parameters become gradient-tracked leaves.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, track_grads: bool) -> Result<ForwardPass> {
        let mut b = Binder::new(self, mode, track_grads);
        let h = self.encode(&mut b, g, x)?;
        let z = self.project(&mut b, g, h)?;
        let (params, stat_updates) = b.finish();
        Ok(ForwardPass {
            h,
            z,
            params,
            stat_updates,
        })
    }

    /// Encoder only.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let mut b = Binder::new(self, mode, track_grads);
        let h = self.encode(&mut b, g, x)?;
        let (params, _) = b.finish();
        Ok((h, params))
    }

    /// Projection head only, applied to an existing `h`.
    pub fn projection_forward(
        &self,
        g: &mut Graph,
        h: Var,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let mut b = Binder::new(self, mode, track_grads);
        let z = self.project(&mut b, g, h)?;
        let (params, _) = b.finish();
        Ok((z, params))
    }

    /// Folds batch statistics into running estimates:
    /// `running ← (1 − m)·running + m·batch` with `m = 0.1`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            for (slot, batch) in [(u.mean_slot, &u.batch_mean), (u.var_slot, &u.batch_var)] {
                let run = self.entries[slot].value.data_mut();
                for (r, b) in run.iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Inference-mode `h` and `z` for an image batch, as plain tensors.
    pub fn embed(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fp = self.forward(&mut g, x, Mode::Eval, false)?;
        Ok((g.value(fp.h).clone(), g.value(fp.z).clone()))
    }
}

const MAGIC: &[u8; 4] = b"CUR1";
const VERSION: u32 = 1;

/// Checkpoint layout (all integers little-endian):
///
/// ```text
/// "CUR1" | u32 version | u32 epoch | u32 config_len | config (key=value lines)
/// u32 record_count
/// per record: u32 name_len | name | u8 kind (0 trainable, 1 buffer)
///             u32 ndim | u32 dims[ndim] | f64 data[prod(dims)]
/// ```
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.epoch.to_le_bytes());
    let cfg: String = params
        .config
        .to_lines()
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for e in &params.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!("truncated checkpoint while reading {what} ({n} bytes needed)"),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic (expected CUR1)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let epoch = c.u32("epoch")?;
    let cfg_len = c.u32("config length")? as usize;
    let cfg_at = c.pos as u64;
    let cfg = std::str::from_utf8(c.take(cfg_len, "config")?)
        .map_err(|_| Error::format(cfg_at, "config block is not UTF-8"))?;
    let mut config = EncoderConfig::default();
    for line in cfg.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(cfg_at, format!("malformed config line `{line}`")))?;
        if !config.set(k, v).map_err(|e| Error::format(cfg_at, e.to_string()))? {
            return Err(Error::format(cfg_at, format!("unknown config key `{k}`")));
        }
    }
    let expected = ModelParams::init(&config).map_err(|e| Error::format(cfg_at, e.to_string()))?;
    let count = c.u32("record count")? as usize;
    if count != expected.entries.len() {
        return Err(Error::format(
            c.pos as u64 - 4,
            format!("expected {} records, found {count}", expected.entries.len()),
        ));
    }
    let mut entries = Vec::with_capacity(count);
    for want in &expected.entries {
        let at = c.pos as u64;
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "record name is not UTF-8"))?
            .to_string();
        if name != want.name {
            return Err(Error::format(
                at,
                format!("expected record `{}`, found `{name}`", want.name),
            ));
        }
        let kind = match c.take(1, "kind")?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::format(c.pos as u64 - 1, format!("bad record kind {k}"))),
        };
        let ndim = c.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("dimension")? as usize);
        }
        if shape != want.value.shape() || kind != want.kind {
            return Err(Error::format(
                at,
                format!("record `{name}` has shape {shape:?}, expected {:?}", want.value.shape()),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        entries.push(ParamEntry {
            name,
            kind,
            value: Tensor::new(shape, data)?,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last record"));
    }
    Ok(ModelParams { config, epoch, entries })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
