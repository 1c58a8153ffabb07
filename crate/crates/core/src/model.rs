//! Multi-exit encoder: a backbone with student exits after intermediate
//! stages, a teacher exit at the end, and one projection head plus prototype
//! bank per exit.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{NormStats, ParamKey, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{normalize_in_place, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const RESNET_STAGES: usize = 4;
const BLOCKS_PER_STAGE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "resnet18-style")]
    ResNet18,
    #[serde(rename = "tiny-mlp")]
    TinyMlp,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::ResNet18 => "resnet18-style",
            Backbone::TinyMlp => "tiny-mlp",
        }
    }

    pub fn default_student_exits(self) -> usize {
        match self {
            Backbone::ResNet18 => 3,
            Backbone::TinyMlp => 1,
        }
    }

    pub fn default_head_norm(self) -> HeadNorm {
        match self {
            Backbone::ResNet18 => HeadNorm::Batch,
            Backbone::TinyMlp => HeadNorm::None,
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18-style" | "resnet18" => Ok(Backbone::ResNet18),
            "tiny-mlp" => Ok(Backbone::TinyMlp),
            other => Err(Error::Config(format!(
                "unsupported backbone '{other}' (expected resnet18-style or tiny-mlp)"
            ))),
        }
    }
}

/// Normalization between the two affine maps of each projection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadNorm {
    None,
    Batch,
}

impl HeadNorm {
    pub fn name(self) -> &'static str {
        match self {
            HeadNorm::None => "none",
            HeadNorm::Batch => "batch",
        }
    }
}

impl FromStr for HeadNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HeadNorm::None),
            "batch" => Ok(HeadNorm::Batch),
            other => Err(Error::Config(format!(
                "unknown head normalization '{other}' (expected none or batch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub num_student_exits: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_prototypes: usize,
    pub temperature: f64,
    /// Channels of the first residual stage, or the block width of tiny-mlp.
    pub backbone_width: usize,
    /// Input channels (resnet18-style) or input vector length (tiny-mlp).
    pub input_dim: usize,
    pub head_norm: HeadNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ResNet18,
            num_student_exits: 3,
            feature_dim: 128,
            hidden_dim: 1024,
            num_prototypes: 60,
            temperature: 0.5,
            backbone_width: 64,
            input_dim: 3,
            head_norm: HeadNorm::Batch,
        }
    }
}

impl ModelConfig {
    pub fn tiny_mlp(input_dim: usize) -> Self {
        Self {
            backbone: Backbone::TinyMlp,
            num_student_exits: 1,
            input_dim,
            head_norm: HeadNorm::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim < 2 {
            return fail(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            ));
        }
        if self.num_prototypes < 2 {
            return fail(format!(
                "num_prototypes must be >= 2, got {}",
                self.num_prototypes
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.num_student_exits < 1 {
            return fail("num_student_exits must be >= 1".into());
        }
        if self.backbone == Backbone::ResNet18 && self.num_student_exits > RESNET_STAGES - 1 {
            return fail(format!(
                "resnet18-style supports at most {} student exits",
                RESNET_STAGES - 1
            ));
        }
        if self.hidden_dim == 0 || self.backbone_width == 0 || self.input_dim == 0 {
            return fail("hidden_dim, backbone_width and input_dim must be >= 1".into());
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.num_student_exits + 1
    }

    /// Width of the teacher's pooled backbone features.
    pub fn pooled_dim(&self) -> usize {
        match self.backbone {
            Backbone::ResNet18 => self.backbone_width << (RESNET_STAGES - 1),
            Backbone::TinyMlp => self.backbone_width,
        }
    }
}

/// K unit-norm prototype rows acting as one head's classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    prototypes: Tensor,
    pub frozen: bool,
}

impl PrototypeBank {
    /// Wraps a `[K, d]` matrix, normalizing every row.
    pub fn new(mut prototypes: Tensor) -> Result<Self> {
        if prototypes.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "prototype bank {:?}",
                prototypes.shape()
            )));
        }
        for r in 0..prototypes.rows() {
            if normalize_in_place(prototypes.row_mut(r)) == 0.0 {
                return Err(Error::Numeric(format!("prototype row {r} has zero norm")));
            }
        }
        Ok(Self {
            prototypes,
            frozen: false,
        })
    }

    pub(crate) fn from_raw(prototypes: Tensor, frozen: bool) -> Self {
        Self { prototypes, frozen }
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.row_len()
    }

    /// Overwrites every row, e.g. with fresh centroids.
    pub fn reinitialize(&mut self, prototypes: Tensor) -> Result<()> {
        if prototypes.shape() != self.prototypes.shape() {
            return Err(Error::Shape(format!(
                "new prototypes {:?} for bank {:?}",
                prototypes.shape(),
                self.prototypes.shape()
            )));
        }
        let frozen = self.frozen;
        *self = Self::new(prototypes)?;
        self.frozen = frozen;
        Ok(())
    }

    /// Raw access; rows may leave the unit sphere until [`Self::renormalize`].
    pub fn prototypes_mut(&mut self) -> &mut Tensor {
        &mut self.prototypes
    }

    pub fn renormalize(&mut self) {
        for r in 0..self.prototypes.rows() {
            normalize_in_place(self.prototypes.row_mut(r));
        }
    }
}

/// One bank per head: students in exit order, then the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct BankSet {
    banks: Vec<PrototypeBank>,
}

impl BankSet {
    pub fn new(banks: Vec<PrototypeBank>) -> Self {
        Self { banks }
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn teacher_index(&self) -> usize {
        self.banks.len() - 1
    }

    pub fn get(&self, head: usize) -> &PrototypeBank {
        &self.banks[head]
    }

    pub fn get_mut(&mut self, head: usize) -> &mut PrototypeBank {
        &mut self.banks[head]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PrototypeBank> {
        self.banks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut PrototypeBank> {
        self.banks.iter_mut()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.banks.iter_mut().for_each(|b| b.frozen = frozen);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running statistics are reported for update.
    Train,
    /// Running statistics; nothing changes.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LinearLayer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    weight: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvBn {
    conv: ConvLayer,
    bn: NormLayer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    TinyMlp {
        blocks: Vec<LinearLayer>,
    },
    ResNet {
        stem: ConvBn,
        stages: Vec<Vec<BasicBlock>>,
        adapters: Vec<Vec<ConvBn>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Head {
    fc1: LinearLayer,
    norm: Option<NormLayer>,
    fc2: LinearLayer,
}

/// Backbone, adapters and projection heads. Prototype banks live in [`BankSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitModel {
    config: ModelConfig,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    arch: Arch,
    heads: Vec<Head>,
}

/// Graph handles for one exit.
#[derive(Clone, Copy, Debug)]
pub struct ExitVars {
    pub raw: Var,
    pub adapted: Var,
    pub pooled: Var,
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct MultiExitVars {
    pub students: Vec<ExitVars>,
    pub teacher: ExitVars,
}

/// Values of one exit for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitOutput {
    pub raw: Tensor,
    pub adapted: Tensor,
    pub pooled: Tensor,
    pub embedding: Tensor,
    pub logits: Tensor,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitOutput {
    pub students: Vec<ExitOutput>,
    pub teacher: ExitOutput,
}

impl MultiExitVars {
    pub fn values(&self, tape: &Tape) -> MultiExitOutput {
        let read = |e: &ExitVars| ExitOutput {
            raw: tape.value(e.raw).clone(),
            adapted: tape.value(e.adapted).clone(),
            pooled: tape.value(e.pooled).clone(),
            embedding: tape.value(e.embedding).clone(),
            logits: tape.value(e.logits).clone(),
        };
        MultiExitOutput {
            students: self.students.iter().map(read).collect(),
            teacher: read(&self.teacher),
        }
    }
}

/// Pending running-statistic updates from a training-mode forward pass.
#[derive(Debug, Default)]
pub struct StatUpdates {
    updates: Vec<(NormLayer, Vec<f64>, Vec<f64>, usize)>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl Builder {
    fn param(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(NamedTensor { name, tensor });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, tensor: Tensor) -> usize {
        self.buffers.push(NamedTensor { name, tensor });
        self.buffers.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearLayer {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = self.uniform(&[out, inp], bound);
        let b = self.uniform(&[out], bound);
        LinearLayer {
            weight: self.param(format!("{name}.weight"), w),
            bias: self.param(format!("{name}.bias"), b),
        }
    }

    fn conv(
        &mut self,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
    ) -> ConvLayer {
        let std = (2.0 / (out * kernel * kernel) as f64).sqrt();
        let n = out * inp * kernel * kernel;
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = Tensor::from_vec(&[out, inp, kernel, kernel], data).expect("shape");
        ConvLayer {
            weight: self.param(format!("{name}.weight"), w),
            stride,
            pad: kernel / 2,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        NormLayer {
            gamma: self.param(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: self.param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: self.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: self.buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
        }
    }

    fn conv_bn(
        &mut self,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
    ) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), inp, out, kernel, stride),
            bn: self.norm(&format!("{name}.bn"), out),
        }
    }

    fn head(&mut self, name: &str, cfg: &ModelConfig) -> Head {
        let fc1 = self.linear(&format!("{name}.fc1"), cfg.pooled_dim(), cfg.hidden_dim);
        let norm = match cfg.head_norm {
            HeadNorm::Batch => Some(self.norm(&format!("{name}.norm"), cfg.hidden_dim)),
            HeadNorm::None => None,
        };
        let fc2 = self.linear(&format!("{name}.fc2"), cfg.hidden_dim, cfg.feature_dim);
        Head { fc1, norm, fc2 }
    }
}

fn head_name(head: usize, num_students: usize) -> String {
    if head == num_students {
        "teacher".to_string()
    } else {
        format!("student{}", head + 1)
    }
}

/// Builds a randomly initialized encoder and one bank per head, deterministic in `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<(MultiExitModel, BankSet)> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let n_students = config.num_student_exits;
    let width = config.backbone_width;
    let arch = match config.backbone {
        Backbone::TinyMlp => {
            let mut blocks = Vec::with_capacity(n_students + 1);
            let mut inp = config.input_dim;
            for i in 0..=n_students {
                blocks.push(b.linear(&format!("backbone.block{}", i + 1), inp, width));
                inp = width;
            }
            Arch::TinyMlp { blocks }
        }
        Backbone::ResNet18 => {
            let stem = b.conv_bn("backbone.stem", config.input_dim, width, 3, 1);
            let mut stages = Vec::with_capacity(RESNET_STAGES);
            let mut inp = width;
            for s in 0..RESNET_STAGES {
                let out = width << s;
                let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
                for k in 0..BLOCKS_PER_STAGE {
                    let stride = if s > 0 && k == 0 { 2 } else { 1 };
                    let name = format!("backbone.stage{}.block{}", s + 1, k + 1);
                    let a = b.conv_bn(&format!("{name}.a"), inp, out, 3, stride);
                    let bb = b.conv_bn(&format!("{name}.b"), out, out, 3, 1);
                    let shortcut = (stride != 1 || inp != out)
                        .then(|| b.conv_bn(&format!("{name}.shortcut"), inp, out, 1, stride));
                    blocks.push(BasicBlock { a, b: bb, shortcut });
                    inp = out;
                }
                stages.push(blocks);
            }
            // Exit after stage s needs (stages - s) stride-2 reductions to reach the teacher shape.
            let mut adapters = Vec::with_capacity(n_students);
            for exit in 0..n_students {
                let mut chain = Vec::new();
                let mut ch = width << exit;
                for step in exit + 1..RESNET_STAGES {
                    let name = format!("student{}.adapter.reduce{}", exit + 1, step - exit);
                    chain.push(b.conv_bn(&name, ch, ch * 2, 3, 2));
                    ch *= 2;
                }
                adapters.push(chain);
            }
            Arch::ResNet {
                stem,
                stages,
                adapters,
            }
        }
    };
    let heads = (0..=n_students)
        .map(|h| b.head(&format!("{}.head", head_name(h, n_students)), config))
        .collect();
    let mut banks = Vec::with_capacity(n_students + 1);
    for _ in 0..=n_students {
        let n = config.num_prototypes * config.feature_dim;
        let data = (0..n)
            .map(|_| b.rng.sample::<f64, _>(StandardNormal))
            .collect();
        banks.push(PrototypeBank::new(Tensor::from_vec(
            &[config.num_prototypes, config.feature_dim],
            data,
        )?)?);
    }
    Ok((
        MultiExitModel {
            config: config.clone(),
            params: b.params,
            buffers: b.buffers,
            arch,
            heads,
        },
        BankSet::new(banks),
    ))
}

/// Softmax of one head's logits.
pub fn head_probabilities(logits: &[f64]) -> Result<Vec<f64>> {
    losses::softmax(logits)
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a [NamedTensor],
    buffers: &'a [NamedTensor],
    vars: Vec<Option<Var>>,
    mode: Mode,
    stats: StatUpdates,
}

impl Ctx<'_> {
    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = self
            .tape
            .param(ParamKey::Weight(idx), self.params[idx].tensor.clone());
        self.vars[idx] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, l: LinearLayer) -> Result<Var> {
        let (w, b) = (self.p(l.weight), self.p(l.bias));
        self.tape.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, n: NormLayer) -> Result<Var> {
        let (g, b) = (self.p(n.gamma), self.p(n.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self
                    .tape
                    .batch_norm(x, g, b, NormStats::Batch { eps: BN_EPS })?;
                let (mean, var) = stats.expect("batch statistics");
                let shape = self.tape.value(x).shape();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                self.stats.updates.push((n, mean, var, count));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers[n.running_mean].tensor.data();
                let var = self.buffers[n.running_var].tensor.data();
                let (y, _) = self.tape.batch_norm(
                    x,
                    g,
                    b,
                    NormStats::Fixed {
                        mean,
                        var,
                        eps: BN_EPS,
                    },
                )?;
                Ok(y)
            }
        }
    }

    fn conv_bn(&mut self, x: Var, l: ConvBn, relu: bool) -> Result<Var> {
        let w = self.p(l.conv.weight);
        let y = self.tape.conv2d(x, w, l.conv.stride, l.conv.pad)?;
        let y = self.norm(y, l.bn)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn block(&mut self, x: Var, blk: &BasicBlock) -> Result<Var> {
        let y = self.conv_bn(x, blk.a, true)?;
        let y = self.conv_bn(y, blk.b, false)?;
        let skip = match blk.shortcut {
            Some(s) => self.conv_bn(x, s, false)?,
            None => x,
        };
        let y = self.tape.add(y, skip)?;
        Ok(self.tape.relu(y))
    }
}

impl MultiExitModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].tensor
    }

    /// Indices of parameters whose names start with `prefix`.
    pub fn param_indices(&self, prefix: &str) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Name prefix of every parameter owned by student exit `exit` (0-based).
    pub fn student_prefix(exit: usize) -> String {
        format!("student{}.", exit + 1)
    }

    /// Replaces parameter and buffer values, keeping the architecture.
    pub(crate) fn load_state(
        &mut self,
        params: Vec<NamedTensor>,
        buffers: Vec<NamedTensor>,
    ) -> Result<()> {
        fn check(have: &[NamedTensor], got: &[NamedTensor], what: &str) -> Result<()> {
            if have.len() != got.len() {
                return Err(Error::Shape(format!(
                    "{what}: expected {} tensors, got {}",
                    have.len(),
                    got.len()
                )));
            }
            for (h, g) in have.iter().zip(got) {
                if h.name != g.name || h.tensor.shape() != g.tensor.shape() {
                    return Err(Error::Shape(format!(
                        "{what}: expected {} {:?}, got {} {:?}",
                        h.name,
                        h.tensor.shape(),
                        g.name,
                        g.tensor.shape()
                    )));
                }
            }
            Ok(())
        }
        check(&self.params, &params, "parameters")?;
        check(&self.buffers, &buffers, "buffers")?;
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match self.config.backbone {
            Backbone::TinyMlp => shape.len() == 2 && shape[1] == self.config.input_dim,
            Backbone::ResNet18 => shape.len() == 4 && shape[1] == self.config.input_dim,
        };
        if ok && shape[0] > 0 {
            Ok(())
        } else {
            let want = match self.config.backbone {
                Backbone::TinyMlp => format!("[B, {}]", self.config.input_dim),
                Backbone::ResNet18 => format!("[B, {}, H, W]", self.config.input_dim),
            };
            Err(Error::Shape(format!(
                "{} backbone expects input {want}, got {shape:?}",
                self.config.backbone.name()
            )))
        }
    }

    /// Records one forward pass on `tape` and returns per-exit handles.
    ///
    /// Bank `h` is registered as [`ParamKey::Bank`]`(h)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        banks: &BankSet,
        mode: Mode,
    ) -> Result<(MultiExitVars, StatUpdates)> {
        self.check_input(tape.value(input).shape())?;
        let n_students = self.config.num_student_exits;
        if banks.len() != n_students + 1 {
            return Err(Error::Shape(format!(
                "{} prototype banks for {} heads",
                banks.len(),
                n_students + 1
            )));
        }
        let mut ctx = Ctx {
            tape,
            params: &self.params,
            buffers: &self.buffers,
            vars: vec![None; self.params.len()],
            mode,
            stats: StatUpdates::default(),
        };

        // (raw, adapted) per student, then the teacher's raw features.
        let mut exits: Vec<(Var, Var)> = Vec::with_capacity(n_students);
        let teacher_raw = match &self.arch {
            Arch::TinyMlp { blocks } => {
                let mut h = input;
                for (i, blk) in blocks.iter().enumerate() {
                    let y = ctx.linear(h, *blk)?;
                    h = ctx.tape.relu(y);
                    if i < n_students {
                        exits.push((h, h));
                    }
                }
                h
            }
            Arch::ResNet {
                stem,
                stages,
                adapters,
            } => {
                let mut h = ctx.conv_bn(input, *stem, true)?;
                for (s, stage) in stages.iter().enumerate() {
                    for blk in stage {
                        h = ctx.block(h, blk)?;
                    }
                    if s < n_students {
                        let mut a = h;
                        for step in &adapters[s] {
                            a = ctx.conv_bn(a, *step, true)?;
                        }
                        exits.push((h, a));
                    }
                }
                h
            }
        };

        let teacher_shape = ctx.tape.value(teacher_raw).shape().to_vec();
        for (i, (_, adapted)) in exits.iter().enumerate() {
            let shape = ctx.tape.value(*adapted).shape();
            if shape != teacher_shape.as_slice() {
                return Err(Error::Shape(format!(
                    "student exit {}: adapted features {shape:?} vs teacher features {teacher_shape:?}",
                    i + 1
                )));
            }
        }

        let inv_temp = 1.0 / self.config.temperature;
        let head_out =
            |ctx: &mut Ctx<'_>, head: usize, raw: Var, adapted: Var| -> Result<ExitVars> {
                let pooled = match self.config.backbone {
                    Backbone::TinyMlp => adapted,
                    Backbone::ResNet18 => ctx.tape.global_avg_pool(adapted)?,
                };
                let spec = self.heads[head];
                let mut y = ctx.linear(pooled, spec.fc1)?;
                if let Some(n) = spec.norm {
                    y = ctx.norm(y, n)?;
                }
                let y = ctx.tape.relu(y);
                let y = ctx.linear(y, spec.fc2)?;
                let embedding = ctx.tape.l2_normalize(y)?;
                let bank = ctx
                    .tape
                    .param(ParamKey::Bank(head), banks.get(head).prototypes().clone());
                let scores = ctx.tape.linear(embedding, bank, None)?;
                let logits = ctx.tape.scale(scores, inv_temp);
                Ok(ExitVars {
                    raw,
                    adapted,
                    pooled,
                    embedding,
                    logits,
                })
            };

        let mut students = Vec::with_capacity(n_students);
        for (i, &(raw, adapted)) in exits.iter().enumerate() {
            students.push(head_out(&mut ctx, i, raw, adapted)?);
        }
        let teacher = head_out(&mut ctx, n_students, teacher_raw, teacher_raw)?;
        let stats = std::mem::take(&mut ctx.stats);
        Ok((MultiExitVars { students, teacher }, stats))
    }

    /// Forward pass returning values only.
    pub fn forward(
        &self,
        banks: &BankSet,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(MultiExitOutput, StatUpdates)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs.clone());
        let (vars, stats) = self.forward_on_tape(&mut tape, x, banks, mode)?;
        Ok((vars.values(&tape), stats))
    }

    /// Folds batch statistics into the running statistics.
    pub fn apply_stat_updates(&mut self, updates: StatUpdates) {
        for (layer, mean, var, count) in updates.updates {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let rm = self.buffers[layer.running_mean].tensor.data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers[layer.running_var].tensor.data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// FNV-1a over every parameter and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.params.iter().chain(&self.buffers) {
            for v in t.tensor.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}
