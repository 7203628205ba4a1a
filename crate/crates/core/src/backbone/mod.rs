//! Recurrent convolutional MetaFormer backbone.
//!
//! The input histogram goes through the event progression extractor (a
//! point-wise conv over time-bin channels) and then four stages. Each stage
//! is a root module (downsampling tokenizer), a stack of MetaFormer blocks
//! (RepMixer token mixer + ConvFFN channel mixer) and a per-pixel LSTM whose
//! hidden state is the stage output. Stage `i` runs at stride `4 * 2^(i-1)`.

mod blocks;
mod params;

pub use blocks::{
    ConvBn, ConvFfn, EmfBlock, Epe, FoldableConv, OpCount, RepBlock, RepMixer, RootModule, Stage,
};
pub use params::{ParamKind, ParamMut, ParamRef, Parameters, Visit, VisitMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{head_forward_traced, DetectionHead, RawPrediction};
use crate::error::{EmfError, Result};
use crate::tensor::{conv_output_size, pixel_lstm_step, ConvParams, LstmGates, LstmState, Tensor};

pub const NUM_STAGES: usize = 4;

/// Whether blocks hold their multi-branch training parameters or the
/// single fused convolutions used for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Train,
    Fused,
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Form::Train => "train",
            Form::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub epe_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
    pub large_kernel: usize,
    pub mixer_kernel: usize,
    pub ffn_kernel: usize,
    pub ffn_expansion: usize,
    /// 1-based stage indices feeding the detection head, fine to coarse.
    pub detection_levels: Vec<usize>,
    pub head_width: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 20,
            epe_channels: 20,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: 2,
            large_kernel: 7,
            mixer_kernel: 3,
            ffn_kernel: 7,
            ffn_expansion: 4,
            detection_levels: vec![2, 3, 4],
            head_width: 192,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EmfError::Config(m));
        if self.input_channels == 0 || self.epe_channels == 0 {
            return bad("input and EPE channel counts must be positive".into());
        }
        if self.stage_channels.contains(&0) {
            return bad(format!(
                "stage widths must be positive: {:?}",
                self.stage_channels
            ));
        }
        for (name, k) in [
            ("large_kernel", self.large_kernel),
            ("mixer_kernel", self.mixer_kernel),
            ("ffn_kernel", self.ffn_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.ffn_expansion == 0 || self.head_width == 0 || self.num_classes == 0 {
            return bad("ffn_expansion, head_width and num_classes must be >= 1".into());
        }
        if self.detection_levels.is_empty()
            || self
                .detection_levels
                .iter()
                .any(|l| !(1..=NUM_STAGES).contains(l))
            || self.detection_levels.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "detection_levels must be a strictly increasing subset of 1..=4, got {:?}",
                self.detection_levels
            ));
        }
        Ok(())
    }

    pub fn stage_stride(stage: usize) -> usize {
        4 << (stage - 1)
    }

    pub fn level_strides(&self) -> Vec<usize> {
        self.detection_levels
            .iter()
            .map(|&l| Self::stage_stride(l))
            .collect()
    }

    /// Spatial size of every stage output for an `(h, w)` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let k = self.large_kernel;
        let down = |s: usize| conv_output_size(s, k, 2, k / 2).unwrap_or(0);
        let mut sizes = Vec::with_capacity(NUM_STAGES);
        let (mut h, mut w) = (down(down(h)), down(down(w)));
        sizes.push((h, w));
        for _ in 1..NUM_STAGES {
            h = down(h);
            w = down(w);
            sizes.push((h, w));
        }
        sizes
    }
}

pub type Trace = Vec<(String, Tensor)>;

fn record(trace: &mut Option<&mut Trace>, name: impl FnOnce() -> String, t: &Tensor) {
    if let Some(tr) = trace.as_deref_mut() {
        tr.push((name(), t.clone()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub form: Form,
    pub epe: Epe,
    pub stages: Vec<Stage>,
    pub head: DetectionHead,
}

impl Model {
    /// All-zero parameters with the architecture of `cfg` in the given form.
    pub fn skeleton(cfg: &ModelConfig, form: Form) -> Result<Model> {
        cfg.validate()?;
        let epe = Epe {
            pw: FoldableConv::zeros(form, cfg.epe_channels, cfg.input_channels, 1, 1),
        };
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_in = cfg.epe_channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let n_down = if i == 0 { 2 } else { 1 };
            let root = RootModule {
                pw: FoldableConv::zeros(form, c, c_in, 1, 1),
                down: (0..n_down)
                    .map(|_| RepBlock::zeros(form, c, cfg.large_kernel, 2, c))
                    .collect(),
                channel: RepBlock::zeros(form, c, 1, 1, 1),
            };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|_| EmfBlock {
                    mixer: RepMixer::zeros(form, c, cfg.mixer_kernel),
                    ffn: ConvFfn::zeros(form, c, cfg.ffn_kernel, cfg.ffn_expansion),
                })
                .collect();
            let lstm = LstmGates {
                wx: ConvParams::zeros(4 * c, c, 1, 1, 1),
                wh: ConvParams::zeros(4 * c, c, 1, 1, 1),
            };
            stages.push(Stage { root, blocks, lstm });
            c_in = c;
        }
        let level_channels: Vec<usize> = cfg
            .detection_levels
            .iter()
            .map(|&l| cfg.stage_channels[l - 1])
            .collect();
        let head = DetectionHead::zeros(
            &level_channels,
            &cfg.level_strides(),
            cfg.head_width,
            cfg.num_classes,
        );
        Ok(Model {
            config: cfg.clone(),
            form,
            epe,
            stages,
            head,
        })
    }

    /// Checks that every block agrees with `self.form`.
    pub fn check_form(&self) -> Result<()> {
        let mut forms = vec![("epe.pw".to_string(), self.epe.pw.form())];
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            forms.push((format!("{p}.root.pw"), s.root.pw.form()));
            for (j, b) in s.root.down.iter().enumerate() {
                forms.push((format!("{p}.root.down{}", j + 1), b.form()));
            }
            forms.push((format!("{p}.root.channel"), s.root.channel.form()));
            for (j, b) in s.blocks.iter().enumerate() {
                forms.push((format!("{p}.block{}.mixer", j + 1), b.mixer.form()));
                forms.push((format!("{p}.block{}.ffn.dw", j + 1), b.ffn.dw.form()));
            }
        }
        match forms.into_iter().find(|(_, f)| *f != self.form) {
            Some((name, f)) => Err(EmfError::State(format!(
                "model is marked {} but {name} holds {f}-form parameters",
                self.form
            ))),
            None => Ok(()),
        }
    }

    pub fn ops(&self) -> OpCount {
        self.epe.pw.ops() + self.stages.iter().map(Stage::ops).sum() + self.head.ops()
    }

    /// Full forward pass: backbone, feature pyramid and detection head.
    pub fn forward(
        &self,
        x: &Tensor,
        states: &LstmStateSet,
    ) -> Result<(RawPrediction, LstmStateSet)> {
        self.forward_traced(x, states, None)
    }

    pub fn forward_traced(
        &self,
        x: &Tensor,
        states: &LstmStateSet,
        mut trace: Option<&mut Trace>,
    ) -> Result<(RawPrediction, LstmStateSet)> {
        let (pyramid, next) = backbone_forward_traced(x, states, self, trace.as_deref_mut())?;
        let selected: Vec<&Tensor> = self
            .config
            .detection_levels
            .iter()
            .map(|&l| &pyramid[l - 1])
            .collect();
        let raw = head_forward_traced(&selected, &self.head, trace)?;
        Ok((raw, next))
    }

    /// Randomizes batch-norm statistics and affine terms so that folding
    /// them is a non-trivial transformation. Used by fusion checks; freshly
    /// initialized models have identity statistics.
    pub fn perturb_batchnorm(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_mut("", &mut |p| match p.kind {
            ParamKind::BnGamma => p.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5)),
            ParamKind::BnBeta => p
                .data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.2..0.2)),
            ParamKind::BnMean => p
                .data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.2..0.2)),
            ParamKind::BnVar => p.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0)),
            _ => {}
        });
    }

    /// Parameter values only, in visiting order. Equal checksums mean equal
    /// parameters bit for bit.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: &[u8]| {
            for &x in b {
                h ^= x as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        self.visit("", &mut |p| {
            eat(p.name.as_bytes());
            for v in p.data {
                eat(&v.to_bits().to_le_bytes());
            }
        });
        h
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.epe.visit(&params::join(prefix, "epe"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&params::join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit(&params::join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.epe.visit_mut(&params::join(prefix, "epe"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&params::join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit_mut(&params::join(prefix, "head"), f);
    }
}

/// Seeded training-form model. Convolution weights and biases are drawn
/// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; batch norms start as identity
/// (gamma 1, beta 0, mean 0, var 1); LSTM biases are zero except the forget
/// gate, which starts at 1.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::skeleton(cfg, Form::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |p| match p.kind {
        ParamKind::ConvWeight { fan_in } | ParamKind::ConvBias { fan_in } => {
            let bound = 1.0 / (fan_in as f32).sqrt();
            p.data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        ParamKind::BnGamma | ParamKind::BnVar => p.data.fill(1.0),
        ParamKind::BnBeta | ParamKind::BnMean | ParamKind::ZeroBias => p.data.fill(0.0),
        ParamKind::LstmBias { hidden } => {
            p.data.fill(0.0);
            p.data[hidden..2 * hidden].fill(1.0);
        }
    });
    Ok(model)
}

/// Per-stage recurrent state of one sequence. `None` means a fresh zero
/// state whose shape is taken from the first input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LstmStateSet {
    pub stages: Vec<Option<LstmState>>,
}

impl LstmStateSet {
    pub fn new() -> Self {
        LstmStateSet {
            stages: vec![None; NUM_STAGES],
        }
    }

    /// Explicit zero states for an `(h, w)` input.
    pub fn zeros(cfg: &ModelConfig, h: usize, w: usize) -> Self {
        LstmStateSet {
            stages: cfg
                .stage_channels
                .iter()
                .zip(cfg.stage_sizes(h, w))
                .map(|(&c, (sh, sw))| Some(LstmState::zeros(c, sh, sw)))
                .collect(),
        }
    }

    /// Zeroes every state in place, keeping shapes.
    pub fn reset(&mut self) {
        for s in self.stages.iter_mut().flatten() {
            s.reset();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.stages.iter().flatten().all(LstmState::is_zero)
    }

    /// `"EMFS" | u32 stage count | per stage: u8 present, then the h and c
    /// tensors as length-prefixed EMFT blobs`.
    pub fn to_bytes(&self) -> Vec<u8> {
        use crate::tensor_file::encode_tensor;
        let mut out = b"EMFS".to_vec();
        out.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for s in &self.stages {
            match s {
                None => out.push(0),
                Some(st) => {
                    out.push(1);
                    for t in [&st.h, &st.c] {
                        let b = encode_tensor(t);
                        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                        out.extend_from_slice(&b);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        use crate::tensor_file::decode_tensor;
        let bad = || EmfError::Value("malformed LSTM state blob".into());
        if bytes.len() < 8 || &bytes[..4] != b"EMFS" {
            return Err(bad());
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut pos = 8;
        let mut stages = Vec::with_capacity(n);
        for _ in 0..n {
            let flag = *bytes.get(pos).ok_or_else(bad)?;
            pos += 1;
            if flag == 0 {
                stages.push(None);
                continue;
            }
            let mut pair = Vec::with_capacity(2);
            for _ in 0..2 {
                let len_bytes = bytes.get(pos..pos + 8).ok_or_else(bad)?;
                let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
                pos += 8;
                pair.push(decode_tensor(bytes.get(pos..pos + len).ok_or_else(bad)?)?);
                pos += len;
            }
            let c = pair.pop().unwrap();
            let h = pair.pop().unwrap();
            stages.push(Some(LstmState { h, c }));
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(LstmStateSet { stages })
    }
}

/// Zeroes the states of every sequence whose mask entry is set.
pub fn reset_states(states: &mut [LstmStateSet], mask: &[bool]) {
    for (s, &m) in states.iter_mut().zip(mask) {
        if m {
            s.reset();
        }
    }
}

pub fn epe_forward(x: &Tensor, epe: &Epe) -> Result<Tensor> {
    epe.forward(x)
}

pub fn repblock_forward(x: &Tensor, block: &RepBlock) -> Result<Tensor> {
    block.forward(x)
}

pub fn root_module_forward(x: &Tensor, root: &RootModule) -> Result<Tensor> {
    root.forward(x)
}

pub fn repmixer_forward(x: &Tensor, mixer: &RepMixer) -> Result<Tensor> {
    mixer.forward(x)
}

pub fn convffn_forward(x: &Tensor, ffn: &ConvFfn) -> Result<Tensor> {
    ffn.forward(x)
}

pub fn emf_block_forward(x: &Tensor, block: &EmfBlock) -> Result<Tensor> {
    block.forward(x)
}

pub fn stage_forward(
    x: &Tensor,
    state: Option<&LstmState>,
    stage: &Stage,
) -> Result<(Tensor, LstmState)> {
    stage_forward_traced(x, state, stage, "stage", None)
}

fn stage_forward_traced(
    x: &Tensor,
    state: Option<&LstmState>,
    stage: &Stage,
    name: &str,
    mut trace: Option<&mut Trace>,
) -> Result<(Tensor, LstmState)> {
    let mut y = stage.root.forward(x)?;
    record(&mut trace, || format!("{name}.root"), &y);
    for (j, b) in stage.blocks.iter().enumerate() {
        y = b.forward(&y)?;
        record(&mut trace, || format!("{name}.block{}", j + 1), &y);
    }
    let (c, h, w) = y.dims3()?;
    let fresh;
    let state = match state {
        Some(s) if s.shape() == [c, h, w] && s.c.shape() == [c, h, w] => s,
        Some(s) => {
            return Err(EmfError::State(format!(
                "{name}: LSTM state {:?} does not match stage output ({c}, {h}, {w}); \
                 reset the states before changing input geometry",
                s.shape()
            )))
        }
        None => {
            fresh = LstmState::zeros(c, h, w);
            &fresh
        }
    };
    let (out, next) = pixel_lstm_step(&y, state, &stage.lstm)?;
    record(&mut trace, || format!("{name}.lstm"), &out);
    Ok((out, next))
}

/// Runs the extractor and all stages. Returns the four stage outputs
/// (strides 4, 8, 16, 32) and the updated states.
pub fn backbone_forward(
    x: &Tensor,
    states: &LstmStateSet,
    model: &Model,
) -> Result<(Vec<Tensor>, LstmStateSet)> {
    backbone_forward_traced(x, states, model, None)
}

pub fn backbone_forward_traced(
    x: &Tensor,
    states: &LstmStateSet,
    model: &Model,
    mut trace: Option<&mut Trace>,
) -> Result<(Vec<Tensor>, LstmStateSet)> {
    model.check_form()?;
    let (c, _, _) = x.dims3()?;
    if c != model.config.input_channels {
        return Err(EmfError::shape(format!(
            "input has {c} channels, model expects {}",
            model.config.input_channels
        )));
    }
    if states.stages.len() != model.stages.len() {
        return Err(EmfError::State(format!(
            "{} LSTM states supplied for {} stages",
            states.stages.len(),
            model.stages.len()
        )));
    }
    let mut y = model.epe.forward(x)?;
    record(&mut trace, || "epe".into(), &y);
    let mut pyramid = Vec::with_capacity(model.stages.len());
    let mut next = Vec::with_capacity(model.stages.len());
    for (i, (stage, st)) in model.stages.iter().zip(&states.stages).enumerate() {
        let (out, s) = stage_forward_traced(
            &y,
            st.as_ref(),
            stage,
            &format!("stage{}", i + 1),
            trace.as_deref_mut(),
        )?;
        next.push(Some(s));
        pyramid.push(out.clone());
        y = out;
    }
    Ok((pyramid, LstmStateSet { stages: next }))
}
