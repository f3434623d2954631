use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu_backward_inplace, relu_inplace, upsample_trilinear, upsample_trilinear_backward, Conv3d,
    InstanceNorm3d, Module, NormTape, Padding, Param,
};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    /// Channel width of each pyramid stage; every stage after the first halves resolution.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Token dimension `C` produced by the pyramid neck.
    pub token_dim: usize,
    /// Projected dimension `M` used for voxel-text interaction.
    pub projected_dim: usize,
    pub kernel_size: usize,
    pub bias: bool,
    pub padding: Padding,
    /// Normalization after every 3x3x3 convolution of the backbone.
    pub norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    None,
    #[default]
    Instance,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            token_dim: 64,
            projected_dim: 32,
            kernel_size: 3,
            bias: true,
            padding: Padding::Zero,
            norm: Norm::Instance,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::InvalidConfig("encoder needs at least one stage".into()));
        }
        if self.stem_channels == 0 || self.stage_widths.contains(&0) || self.token_dim == 0 || self.projected_dim == 0 {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        if self.projected_dim > self.token_dim {
            return Err(Error::InvalidConfig(format!(
                "projected_dim {} exceeds token_dim {}",
                self.projected_dim, self.token_dim
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig("kernel_size must be odd".into()));
        }
        Ok(())
    }

    /// Every spatial extent must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.stage_widths.len() - 1)
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let m = self.required_multiple();
        if shape.iter().any(|&s| s == 0 || s % m != 0) {
            return Err(Error::ShapeNotDivisible { shape, multiple: m });
        }
        Ok(())
    }
}

/// Convolution followed by the configured normalization.
#[derive(Debug, Clone)]
struct ConvNorm<T> {
    conv: Conv3d<T>,
    norm: Option<InstanceNorm3d<T>>,
}

#[derive(Debug)]
struct ConvNormTape<T> {
    norm: Option<NormTape<T>>,
}

impl<T: Real> ConvNorm<T> {
    fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, stride: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        // a bias in front of instance norm is cancelled by the mean subtraction
        let bias = cfg.bias && cfg.norm == Norm::None;
        let conv = Conv3d::new(name, in_ch, out_ch, cfg.kernel_size, stride, cfg.padding, bias, rng);
        let norm = (cfg.norm == Norm::Instance).then(|| InstanceNorm3d::new(&format!("{name}.norm"), out_ch));
        Self { conv, norm }
    }

    /// Shrinks the block's initial output.
    fn scale_output(&mut self, s: f64) {
        match &mut self.norm {
            Some(n) => n.gamma.value.iter_mut().for_each(|g| *g = T::lit(s)),
            None => self.conv.scale_weights(s),
        }
    }

    fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvNormTape<T>) {
        let y = self.conv.forward(x);
        match &self.norm {
            Some(n) => {
                let (y, t) = n.forward(&y);
                (y, ConvNormTape { norm: Some(t) })
            }
            None => (y, ConvNormTape { norm: None }),
        }
    }

    fn backward(&mut self, x: &Array4<T>, tape: &ConvNormTape<T>, dy: &Array4<T>) -> Array4<T> {
        let dconv = match (&mut self.norm, &tape.norm) {
            (Some(n), Some(t)) => n.backward(t, dy),
            _ => dy.clone(),
        };
        self.conv.backward(x, &dconv, true).expect("input grad")
    }

    fn macs(&self, shape: [usize; 3]) -> u64 {
        self.conv.macs(shape)
    }

    fn output_shape(&self, shape: [usize; 3]) -> [usize; 3] {
        self.conv.output_shape(shape)
    }
}

impl<T: Real> Module<T> for ConvNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        if let Some(n) = &self.norm {
            n.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        if let Some(n) = &mut self.norm {
            n.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock<T> {
    conv1: ConvNorm<T>,
    conv2: ConvNorm<T>,
}

#[derive(Debug, Clone)]
struct Stage<T> {
    entry: ConvNorm<T>,
    blocks: Vec<ResBlock<T>>,
}

/// Residual conv backbone plus feature-pyramid neck producing one `C`-dim token per voxel.
#[derive(Debug, Clone)]
pub struct VoxelEncoder<T> {
    config: EncoderConfig,
    stem: ConvNorm<T>,
    stages: Vec<Stage<T>>,
    laterals: Vec<Conv3d<T>>,
}

#[derive(Debug)]
struct BlockTape<T> {
    input: Array4<T>,
    mid: Array4<T>,
    out: Array4<T>,
    t1: ConvNormTape<T>,
    t2: ConvNormTape<T>,
}

#[derive(Debug)]
struct StageTape<T> {
    input: Array4<T>,
    entry_out: Array4<T>,
    entry_tape: ConvNormTape<T>,
    blocks: Vec<BlockTape<T>>,
}

impl<T: Real> StageTape<T> {
    fn output(&self) -> &Array4<T> {
        self.blocks.last().map_or(&self.entry_out, |b| &b.out)
    }
}

/// Activations retained for the backward pass.
#[derive(Debug)]
pub struct EncoderTape<T> {
    input: Array4<T>,
    stem_out: Array4<T>,
    stem_tape: ConvNormTape<T>,
    stages: Vec<StageTape<T>>,
}

impl<T: Real> VoxelEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let pad = config.padding;
        let bias = config.bias;
        let stem = ConvNorm::new("encoder.stem", 1, config.stem_channels, 1, &config, rng);
        let mut prev = config.stem_channels;
        let mut stages = Vec::new();
        for (s, &width) in config.stage_widths.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let entry = ConvNorm::new(&format!("encoder.stage{s}.entry"), prev, width, stride, &config, rng);
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let conv1 = ConvNorm::new(&format!("encoder.stage{s}.block{b}.conv1"), width, width, 1, &config, rng);
                    let mut conv2 = ConvNorm::new(&format!("encoder.stage{s}.block{b}.conv2"), width, width, 1, &config, rng);
                    // residual branch starts small so the identity path dominates early
                    conv2.scale_output(0.5);
                    ResBlock { conv1, conv2 }
                })
                .collect();
            stages.push(Stage { entry, blocks });
            prev = width;
        }
        let laterals = config
            .stage_widths
            .iter()
            .enumerate()
            .map(|(s, &w)| Conv3d::new(&format!("encoder.fpn.lateral{s}"), w, config.token_dim, 1, 1, pad, bias, rng))
            .collect();
        Ok(Self {
            config,
            stem,
            stages,
            laterals,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Backbone + neck multiply-accumulates for one forward pass (excluded from the
    /// interaction cost model).
    pub fn macs(&self, shape: [usize; 3]) -> u64 {
        let mut total = self.stem.macs(shape);
        let mut cur = shape;
        for (s, stage) in self.stages.iter().enumerate() {
            total += stage.entry.macs(cur);
            cur = stage.entry.output_shape(cur);
            for b in &stage.blocks {
                total += b.conv1.macs(cur) + b.conv2.macs(cur);
            }
            total += self.laterals[s].macs(cur);
        }
        total
    }

    /// `input` is `(1, D, H, W)`; returns tokens `(C, D, H, W)`.
    pub fn forward(&self, input: &Array4<T>) -> Result<(Array4<T>, EncoderTape<T>)> {
        let (c, d, h, w) = input.dim();
        if c != 1 {
            return Err(Error::DimensionMismatch {
                what: "encoder input channels",
                expected: 1,
                found: c,
            });
        }
        self.config.check_shape([d, h, w])?;
        let (mut stem_out, stem_tape) = self.stem.forward(input);
        relu_inplace(&mut stem_out);
        let mut stage_tapes: Vec<StageTape<T>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let x = stage_tapes.last().map_or(&stem_out, |t| t.output()).clone();
            let (mut entry_out, entry_tape) = stage.entry.forward(&x);
            relu_inplace(&mut entry_out);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            let mut cur = entry_out.clone();
            for block in &stage.blocks {
                let (mut mid, t1) = block.conv1.forward(&cur);
                relu_inplace(&mut mid);
                let (mut out, t2) = block.conv2.forward(&mid);
                out += &cur;
                relu_inplace(&mut out);
                blocks.push(BlockTape {
                    input: std::mem::replace(&mut cur, out.clone()),
                    mid,
                    out,
                    t1,
                    t2,
                });
            }
            stage_tapes.push(StageTape {
                input: x,
                entry_out,
                entry_tape,
                blocks,
            });
        }
        let mut tokens = Array4::<T>::zeros((self.config.token_dim, d, h, w));
        for (s, tape) in stage_tapes.iter().enumerate() {
            let lat = self.laterals[s].forward(tape.output());
            tokens += &upsample_trilinear(&lat, 1 << s);
        }
        Ok((
            tokens,
            EncoderTape {
                input: input.clone(),
                stem_out,
                stem_tape,
                stages: stage_tapes,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input volume.
    pub fn backward(&mut self, tape: &EncoderTape<T>, dtokens: &Array4<T>) -> Array4<T> {
        let n = self.stages.len();
        let mut stage_grads: Vec<Array4<T>> = Vec::with_capacity(n);
        for s in 0..n {
            let dlat = upsample_trilinear_backward(dtokens, 1 << s);
            let g = self.laterals[s]
                .backward(tape.stages[s].output(), &dlat, true)
                .expect("input grad");
            stage_grads.push(g);
        }
        let mut carry: Option<Array4<T>> = None;
        for s in (0..n).rev() {
            let st = &tape.stages[s];
            let stage = &mut self.stages[s];
            let mut g = stage_grads[s].clone();
            if let Some(c) = carry.take() {
                g += &c;
            }
            for (block, bt) in stage.blocks.iter_mut().zip(&st.blocks).rev() {
                relu_backward_inplace(&mut g, &bt.out);
                let mut dmid = block.conv2.backward(&bt.mid, &bt.t2, &g);
                relu_backward_inplace(&mut dmid, &bt.mid);
                let dinput = block.conv1.backward(&bt.input, &bt.t1, &dmid);
                g += &dinput;
            }
            relu_backward_inplace(&mut g, &st.entry_out);
            carry = Some(stage.entry.backward(&st.input, &st.entry_tape, &g));
        }
        let mut g = carry.expect("at least one stage");
        relu_backward_inplace(&mut g, &tape.stem_out);
        self.stem.backward(&tape.input, &tape.stem_tape, &g)
    }
}

impl<T: Real> Module<T> for VoxelEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        for st in &self.stages {
            st.entry.visit(f);
            for b in &st.blocks {
                b.conv1.visit(f);
                b.conv2.visit(f);
            }
        }
        for l in &self.laterals {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        for st in &mut self.stages {
            st.entry.visit_mut(f);
            for b in &mut st.blocks {
                b.conv1.visit_mut(f);
                b.conv2.visit_mut(f);
            }
        }
        for l in &mut self.laterals {
            l.visit_mut(f);
        }
    }
}
