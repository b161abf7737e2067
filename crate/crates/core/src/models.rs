//! Fine Feature Path, Semantic Segmentation Path and the Mixed Feature Model.
//!
//! Every network consumes an N×3×H×W tensor and ends in `out_classes`
//! logit channels at the input resolution. Parameter names are stable paths
//! (`ffp.s1.g1.conv.weight`, `ssp.enc0.a.bn.gamma`, `head.weight`, ...) so a
//! standalone SSP checkpoint can seed the SSP branch of a mixed model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Mode};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfpConfig {
    pub n_stages: usize,
    pub stage_channels: usize,
    pub out_classes: usize,
}

impl FfpConfig {
    /// Four stages of 3×3/64 blocks.
    pub fn standard(out_classes: usize) -> Self {
        Self { n_stages: 4, stage_channels: 64, out_classes }
    }

    /// Channel count after stage `s` (1-based): the stage input concatenated
    /// with the block output.
    pub fn stage_out_channels(&self, s: usize) -> usize {
        INPUT_CHANNELS + self.stage_channels * s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SspVariant {
    Light,
    MiniResidual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SspConfig {
    pub variant: SspVariant,
    pub depth: usize,
    pub base_channels: usize,
    pub out_classes: usize,
    #[serde(default = "default_true")]
    pub skip_connections: bool,
}

fn default_true() -> bool {
    true
}

impl SspConfig {
    /// Four down/up stages with widths 12/24/48/96 (≈306K parameters at 4 classes).
    pub fn light(out_classes: usize) -> Self {
        Self {
            variant: SspVariant::Light,
            depth: 4,
            base_channels: 12,
            out_classes,
            skip_connections: true,
        }
    }

    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Ffp(FfpConfig),
    Ssp(SspConfig),
    Mfm { ffp: FfpConfig, ssp: SspConfig },
}

impl Architecture {
    pub fn out_classes(&self) -> usize {
        match self {
            Architecture::Ffp(f) => f.out_classes,
            Architecture::Ssp(s) => s.out_classes,
            Architecture::Mfm { ffp, .. } => ffp.out_classes,
        }
    }

    /// Small widths for desk-scale training and gradient checks.
    pub fn toy_mfm(out_classes: usize) -> Self {
        Architecture::Mfm {
            ffp: FfpConfig { n_stages: 2, stage_channels: 8, out_classes },
            ssp: SspConfig {
                variant: SspVariant::Light,
                depth: 2,
                base_channels: 8,
                out_classes,
                skip_connections: true,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let check_classes = |c: usize| {
            if c < 2 {
                Err(Error::Config(format!("out_classes must be at least 2, got {c}")))
            } else {
                Ok(())
            }
        };
        let check_ffp = |f: &FfpConfig| {
            check_classes(f.out_classes)?;
            if f.n_stages == 0 || f.stage_channels == 0 {
                return Err(Error::Config("FFP needs n_stages ≥ 1 and stage_channels ≥ 1".into()));
            }
            Ok(())
        };
        let check_ssp = |s: &SspConfig| {
            check_classes(s.out_classes)?;
            if s.depth == 0 || s.base_channels == 0 {
                return Err(Error::Config("SSP needs depth ≥ 1 and base_channels ≥ 1".into()));
            }
            Ok(())
        };
        match self {
            Architecture::Ffp(f) => check_ffp(f),
            Architecture::Ssp(s) => check_ssp(s),
            Architecture::Mfm { ffp, ssp } => {
                check_ffp(ffp)?;
                check_ssp(ssp)?;
                if ffp.out_classes != ssp.out_classes {
                    return Err(Error::Config(format!(
                        "branch class counts differ: FFP {} vs SSP {}",
                        ffp.out_classes, ssp.out_classes
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct FfpStage {
    g1: ConvBnRelu,
    g2: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct Ffp {
    cfg: FfpConfig,
    stages: Vec<FfpStage>,
    head: Conv2d,
}

pub struct FfpOutput {
    /// Output of every stage after the residual concatenation.
    pub stages: Vec<Var>,
    pub logits: Var,
}

impl Ffp {
    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &FfpConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::with_capacity(cfg.n_stages);
        let mut in_ch = INPUT_CHANNELS;
        for s in 1..=cfg.n_stages {
            let g1 = ConvBnRelu::new(store, &format!("ffp.s{s}.g1"), in_ch, cfg.stage_channels, rng);
            let g2 = ConvBnRelu::new(
                store,
                &format!("ffp.s{s}.g2"),
                cfg.stage_channels,
                cfg.stage_channels,
                rng,
            );
            stages.push(FfpStage { g1, g2 });
            in_ch += cfg.stage_channels;
        }
        let head = Conv2d::new(store, "ffp.out", in_ch, cfg.out_classes, 1, rng);
        Self { cfg: cfg.clone(), stages, head }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<FfpOutput> {
        let (_, c, _, _) = tape.value(x).nchw()?;
        if c != INPUT_CHANNELS {
            return shape_err(format!("FFP expects {INPUT_CHANNELS} input channels, got {c}"));
        }
        let mut stage_in = x;
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let a = st.g1.forward(tape, store, stage_in, mode)?;
            let b = st.g2.forward(tape, store, a, mode)?;
            stage_in = tape.concat_channels(stage_in, b)?;
            outs.push(stage_in);
        }
        let logits = self.head.forward(tape, store, stage_in)?;
        Ok(FfpOutput { stages: outs, logits })
    }

    pub fn config(&self) -> &FfpConfig {
        &self.cfg
    }
}

/// Two conv-BN-ReLU units; the residual variant adds the first unit's
/// activation to the second unit's normalized output before the last ReLU.
#[derive(Clone, Debug)]
struct DoubleConv {
    a: ConvBnRelu,
    b_conv: Conv2d,
    b_bn: BatchNorm2d,
    residual: bool,
}

impl DoubleConv {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        residual: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a = ConvBnRelu::new(store, &format!("{name}.a"), in_ch, out_ch, rng);
        let b_conv = Conv2d::new(store, &format!("{name}.b.conv"), out_ch, out_ch, 3, rng);
        let b_bn = BatchNorm2d::new(store, &format!("{name}.b.bn"), out_ch);
        Self { a, b_conv, b_bn, residual }
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y1 = self.a.forward(tape, store, x, mode)?;
        let c = self.b_conv.forward(tape, store, y1)?;
        let mut z = self.b_bn.forward(tape, store, c, mode)?;
        if self.residual {
            z = tape.add(z, y1)?;
        }
        Ok(tape.relu(z))
    }
}

#[derive(Clone, Debug)]
pub struct Ssp {
    cfg: SspConfig,
    encoder: Vec<DoubleConv>,
    /// Ordered from the deepest stage to the full-resolution one.
    decoder: Vec<DoubleConv>,
    head: Conv2d,
}

pub struct SspOutput {
    pub bottleneck: Var,
    pub logits: Var,
}

impl Ssp {
    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SspConfig, rng: &mut ChaCha8Rng) -> Self {
        let residual = cfg.variant == SspVariant::MiniResidual;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut in_ch = INPUT_CHANNELS;
        for i in 0..cfg.depth {
            let out = cfg.stage_channels(i);
            encoder.push(DoubleConv::new(store, &format!("ssp.enc{i}"), in_ch, out, residual, rng));
            in_ch = out;
        }
        let mut decoder = Vec::with_capacity(cfg.depth);
        let mut up_ch = in_ch;
        for i in (0..cfg.depth).rev() {
            let skip = if cfg.skip_connections { cfg.stage_channels(i) } else { 0 };
            let out = cfg.stage_channels(i.saturating_sub(1));
            decoder.push(DoubleConv::new(
                store,
                &format!("ssp.dec{i}"),
                up_ch + skip,
                out,
                residual,
                rng,
            ));
            up_ch = out;
        }
        let head = Conv2d::new(store, "ssp.out", up_ch, cfg.out_classes, 1, rng);
        Self { cfg: cfg.clone(), encoder, decoder, head }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<SspOutput> {
        let (_, c, h, w) = tape.value(x).nchw()?;
        if c != INPUT_CHANNELS {
            return shape_err(format!("SSP expects {INPUT_CHANNELS} input channels, got {c}"));
        }
        let f = 1usize << self.cfg.depth;
        if h % f != 0 || w % f != 0 {
            return shape_err(format!(
                "SSP of depth {} needs extents divisible by {f}, got {h}x{w}",
                self.cfg.depth
            ));
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut cur = x;
        for block in &self.encoder {
            let act = block.forward(tape, store, cur, mode)?;
            skips.push(act);
            cur = tape.maxpool2(act)?;
        }
        let bottleneck = cur;
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let up = tape.upsample2(cur)?;
            let joined = if self.cfg.skip_connections { tape.concat_channels(up, skip)? } else { up };
            cur = block.forward(tape, store, joined, mode)?;
        }
        let logits = self.head.forward(tape, store, cur)?;
        Ok(SspOutput { bottleneck, logits })
    }

    pub fn config(&self) -> &SspConfig {
        &self.cfg
    }
}

#[derive(Clone, Debug)]
pub struct Mfm {
    pub ffp: Ffp,
    pub ssp: Ssp,
    ffp_bn: BatchNorm2d,
    ssp_bn: BatchNorm2d,
    head: Conv2d,
}

pub struct MfmOutput {
    pub ffp_logits: Var,
    pub ssp_logits: Var,
    /// Channel concatenation of the two normalized, rectified branch outputs.
    pub concat: Var,
    pub logits: Var,
}

impl Mfm {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        ffp: &FfpConfig,
        ssp: &SspConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let classes = ffp.out_classes;
        let ffp = Ffp::new(store, ffp, rng);
        let ssp = Ssp::new(store, ssp, rng);
        let ffp_bn = BatchNorm2d::new(store, "mfm.ffp_bn", classes);
        let ssp_bn = BatchNorm2d::new(store, "mfm.ssp_bn", classes);
        let head = Conv2d::new(store, "mfm.head", 2 * classes, classes, 1, rng);
        Self { ffp, ssp, ffp_bn, ssp_bn, head }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<MfmOutput> {
        let f = self.ffp.forward(tape, store, x, mode)?.logits;
        let s = self.ssp.forward(tape, store, x, mode)?.logits;
        let fb = self.ffp_bn.forward(tape, store, f, mode)?;
        let fr = tape.relu(fb);
        let sb = self.ssp_bn.forward(tape, store, s, mode)?;
        let sr = tape.relu(sb);
        let concat = tape.concat_channels(fr, sr)?;
        let logits = self.head.forward(tape, store, concat)?;
        Ok(MfmOutput { ffp_logits: f, ssp_logits: s, concat, logits })
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Ffp(Ffp),
    Ssp(Ssp),
    Mfm(Mfm),
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    arch: Architecture,
    net: Network,
    store: ParamStore<T>,
}

/// Logits and per-pixel class probabilities of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

impl<T: Real> Model<T> {
    /// Build with freshly initialized parameters drawn from `seed`.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match arch {
            Architecture::Ffp(c) => Network::Ffp(Ffp::new(&mut store, c, &mut rng)),
            Architecture::Ssp(c) => Network::Ssp(Ssp::new(&mut store, c, &mut rng)),
            Architecture::Mfm { ffp, ssp } => Network::Mfm(Mfm::new(&mut store, ffp, ssp, &mut rng)),
        };
        Ok(Self { arch: arch.clone(), net, store })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn out_classes(&self) -> usize {
        self.arch.out_classes()
    }

    /// Exact number of scalar learnable parameters.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Prediction> {
        let logits = match &self.net {
            Network::Ffp(f) => f.forward(tape, &self.store, x, mode)?.logits,
            Network::Ssp(s) => s.forward(tape, &self.store, x, mode)?.logits,
            Network::Mfm(m) => m.forward(tape, &self.store, x, mode)?.logits,
        };
        let probs = tape.softmax_channels(logits)?;
        Ok(Prediction { logits, probs })
    }

    /// Inference-mode class probabilities for a batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let p = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(p.probs).clone())
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), net: self.net.clone(), store: self.store.cast() }
    }
}
