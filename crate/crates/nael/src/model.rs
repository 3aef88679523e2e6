//! Network assembly: SC/FE/CE blocks composed into the preliminary
//! recognition network (PRN), the advanced recognition network (ARN), and
//! the noise-analysis network (NAN); gradient maps with importance
//! weights and f_max; the adaptive routing decision; and exact FLOPs
//! totals for both paths.

use std::io::Write as IoWrite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NaelError, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::flops::{flops_of, FlopsReport, LayerSpec};
use crate::nn::layers::{
    fc_backward_input, gap_backward, softmax, BatchNorm, Conv2d, Fc, Gap, Layer, Relu6,
};
use crate::nn::tensor::{Param, Tensor};
use crate::tfa::Tfi;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// One FE block: a strided first stage plus `repeats - 1` residual stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeStageConfig {
    pub c_out: usize,
    /// Channel expansion factor inside the block.
    pub alpha: usize,
    /// Total stages in the block (first + residual repeats), >= 1.
    pub repeats: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Channels produced by the stem SC block.
    pub sc_channels: usize,
    pub prn_stages: Vec<FeStageConfig>,
    pub prn_ce_channels: usize,
    /// Index into the PRN stage outputs fed to ARN: 0 is the SC block
    /// output, i >= 1 the output of the i-th FE block.
    pub arn_reuse_point: usize,
    pub arn_stages: Vec<FeStageConfig>,
    pub arn_ce_channels: usize,
    /// NAN layer widths: input, two hidden, output (= 2 verdicts).
    pub nan_dims: [usize; 4],
    pub num_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 1,
            input_height: 128,
            input_width: 128,
            sc_channels: 16,
            prn_stages: vec![
                FeStageConfig { c_out: 24, alpha: 2, repeats: 2, stride: 2 },
                FeStageConfig { c_out: 32, alpha: 2, repeats: 2, stride: 2 },
                FeStageConfig { c_out: 64, alpha: 2, repeats: 2, stride: 2 },
            ],
            prn_ce_channels: 256,
            arn_reuse_point: 1,
            arn_stages: vec![
                FeStageConfig { c_out: 48, alpha: 4, repeats: 3, stride: 2 },
                FeStageConfig { c_out: 96, alpha: 4, repeats: 3, stride: 2 },
                FeStageConfig { c_out: 160, alpha: 4, repeats: 3, stride: 2 },
            ],
            arn_ce_channels: 512,
            nan_dims: [64, 256, 512, 2],
            num_classes: 12,
        }
    }
}

/// Output size of a padded 3x3 convolution.
fn conv3_out(dim: usize, stride: usize) -> usize {
    (dim + 2 - 3) / stride + 1
}

fn walk_stage(dims: (usize, usize, usize), cfg: &FeStageConfig) -> (usize, usize, usize) {
    let (_, h, w) = dims;
    (cfg.c_out, conv3_out(h, cfg.stride), conv3_out(w, cfg.stride))
}

impl NetworkConfig {
    /// Dimensions of every PRN intermediate: index 0 is the SC output,
    /// index i >= 1 the output of FE block i.
    pub fn prn_stage_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![(
            self.sc_channels,
            conv3_out(self.input_height, 2),
            conv3_out(self.input_width, 2),
        )];
        for cfg in &self.prn_stages {
            dims.push(walk_stage(*dims.last().unwrap(), cfg));
        }
        dims
    }

    /// (channels, height, width) of the PRN feature map before the CE block.
    pub fn prn_feature_dims(&self) -> (usize, usize, usize) {
        *self.prn_stage_dims().last().unwrap()
    }

    /// Dimensions of the ARN feature map before its CE block.
    pub fn arn_feature_dims(&self) -> (usize, usize, usize) {
        let mut dims = self.prn_stage_dims()[self.arn_reuse_point];
        for cfg in &self.arn_stages {
            dims = walk_stage(dims, cfg);
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(NaelError::Parameter("need at least 2 classes".into()));
        }
        if self.prn_stages.is_empty() || self.arn_stages.is_empty() {
            return Err(NaelError::Parameter("stage lists must be nonempty".into()));
        }
        for cfg in self.prn_stages.iter().chain(self.arn_stages.iter()) {
            if cfg.alpha < 1 || cfg.repeats < 1 || !matches!(cfg.stride, 1 | 2) || cfg.c_out == 0 {
                return Err(NaelError::Parameter(format!("invalid FE stage config {cfg:?}")));
            }
        }
        if self.arn_reuse_point >= self.prn_stage_dims().len() {
            return Err(NaelError::Parameter(format!(
                "arn_reuse_point {} out of range",
                self.arn_reuse_point
            )));
        }
        let (pc, ph, pw) = self.prn_feature_dims();
        if ph != 8 || pw != 8 {
            return Err(NaelError::Parameter(format!(
                "PRN feature map must be 8x8, config yields {ph}x{pw}"
            )));
        }
        if self.nan_dims[0] != ph * pw {
            return Err(NaelError::Parameter(format!(
                "NAN input width {} does not match the {ph}x{pw} gradient map",
                self.nan_dims[0]
            )));
        }
        if self.nan_dims[3] != 2 {
            return Err(NaelError::Parameter("NAN must emit 2 verdict classes".into()));
        }
        let (ac, ah, aw) = self.arn_feature_dims();
        if ah >= ph || aw >= pw {
            return Err(NaelError::Parameter(format!(
                "ARN feature map {ah}x{aw} must be spatially smaller than PRN's {ph}x{pw}"
            )));
        }
        if ac <= pc {
            return Err(NaelError::Parameter(format!(
                "ARN feature channels {ac} must exceed PRN's {pc}"
            )));
        }
        let max_prn_alpha = self.prn_stages.iter().map(|s| s.alpha).max().unwrap();
        let min_arn_alpha = self.arn_stages.iter().map(|s| s.alpha).min().unwrap();
        if min_arn_alpha <= max_prn_alpha {
            return Err(NaelError::Parameter(format!(
                "every ARN expansion factor (min {min_arn_alpha}) must exceed every PRN one (max {max_prn_alpha})"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameter bookkeeping helpers
// ---------------------------------------------------------------------------

fn fetch<'c>(ck: &'c Checkpoint, name: &str, shape: &[usize]) -> Result<&'c Tensor> {
    let t = ck
        .get(name)
        .ok_or_else(|| NaelError::Incompatible(format!("checkpoint missing tensor '{name}'")))?;
    if t.shape != shape {
        return Err(NaelError::Incompatible(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            t.shape, shape
        )));
    }
    Ok(t)
}

fn load_param(param: &mut Param, ck: &Checkpoint, name: &str) -> Result<()> {
    param.value = fetch(ck, name, &param.value.shape)?.clone();
    param.zero_grad();
    Ok(())
}

fn visit_bn<'a>(bn: &'a mut BatchNorm, pre: &str, out: &mut Vec<(String, &'a mut Param)>) {
    out.push((format!("{pre}.gamma"), &mut bn.gamma));
    out.push((format!("{pre}.beta"), &mut bn.beta));
}

fn state_bn(bn: &BatchNorm, pre: &str, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{pre}.gamma"), bn.gamma.value.clone()));
    out.push((format!("{pre}.beta"), bn.beta.value.clone()));
    out.push((format!("{pre}.running_mean"), bn.running_mean.clone()));
    out.push((format!("{pre}.running_var"), bn.running_var.clone()));
}

fn load_bn(bn: &mut BatchNorm, pre: &str, ck: &Checkpoint) -> Result<()> {
    load_param(&mut bn.gamma, ck, &format!("{pre}.gamma"))?;
    load_param(&mut bn.beta, ck, &format!("{pre}.beta"))?;
    bn.running_mean = fetch(ck, &format!("{pre}.running_mean"), &bn.running_mean.shape)?.clone();
    bn.running_var = fetch(ck, &format!("{pre}.running_var"), &bn.running_var.shape)?.clone();
    Ok(())
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

/// Stem: 3x3 standard conv (stride 2, pad 1) + BN + ReLU6.
#[derive(Debug, Clone)]
pub struct ScBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    relu: Relu6,
}

impl ScBlock {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> ScBlock {
        ScBlock {
            conv: Conv2d::standard(c_in, c_out, 3, 2, 1, rng),
            bn: BatchNorm::new(c_out),
            relu: Relu6::default(),
        }
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.conv.forward_t(input, train)?;
        let x = self.bn.forward_t(&x, train)?;
        self.relu.forward_t(&x, train)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.relu.backward_t(grad)?;
        let g = self.bn.backward_t(&g)?;
        self.conv.backward_t(&g)
    }

    fn visit<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{pre}.conv.weight"), &mut self.conv.weight));
        visit_bn(&mut self.bn, &format!("{pre}.bn"), out);
    }

    fn state(&self, pre: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{pre}.conv.weight"), self.conv.weight.value.clone()));
        state_bn(&self.bn, &format!("{pre}.bn"), out);
    }

    fn load(&mut self, pre: &str, ck: &Checkpoint) -> Result<()> {
        load_param(&mut self.conv.weight, ck, &format!("{pre}.conv.weight"))?;
        load_bn(&mut self.bn, &format!("{pre}.bn"), ck)
    }
}

/// Shared body of both FE stage kinds:
/// pw expand (BN, ReLU6) -> 3x3 dw (BN, ReLU6) -> pw project (BN only).
#[derive(Debug, Clone)]
struct FeChain {
    expand: Conv2d,
    expand_bn: BatchNorm,
    expand_relu: Relu6,
    dw: Conv2d,
    dw_bn: BatchNorm,
    dw_relu: Relu6,
    project: Conv2d,
    project_bn: BatchNorm,
}

impl FeChain {
    fn new(c_in: usize, c_out: usize, alpha: usize, stride: usize, rng: &mut impl Rng) -> FeChain {
        let mid = alpha * c_in;
        FeChain {
            expand: Conv2d::pointwise(c_in, mid, rng),
            expand_bn: BatchNorm::new(mid),
            expand_relu: Relu6::default(),
            dw: Conv2d::depthwise(mid, 3, stride, 1, rng),
            dw_bn: BatchNorm::new(mid),
            dw_relu: Relu6::default(),
            project: Conv2d::pointwise(mid, c_out, rng),
            project_bn: BatchNorm::new(c_out),
        }
    }

    fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.expand.forward_t(input, train)?;
        let x = self.expand_bn.forward_t(&x, train)?;
        let x = self.expand_relu.forward_t(&x, train)?;
        let x = self.dw.forward_t(&x, train)?;
        let x = self.dw_bn.forward_t(&x, train)?;
        let x = self.dw_relu.forward_t(&x, train)?;
        let x = self.project.forward_t(&x, train)?;
        self.project_bn.forward_t(&x, train)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.project_bn.backward_t(grad)?;
        let g = self.project.backward_t(&g)?;
        let g = self.dw_relu.backward_t(&g)?;
        let g = self.dw_bn.backward_t(&g)?;
        let g = self.dw.backward_t(&g)?;
        let g = self.expand_relu.backward_t(&g)?;
        let g = self.expand_bn.backward_t(&g)?;
        self.expand.backward_t(&g)
    }

    fn visit<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{pre}.expand.weight"), &mut self.expand.weight));
        visit_bn(&mut self.expand_bn, &format!("{pre}.expand_bn"), out);
        out.push((format!("{pre}.dw.weight"), &mut self.dw.weight));
        visit_bn(&mut self.dw_bn, &format!("{pre}.dw_bn"), out);
        out.push((format!("{pre}.project.weight"), &mut self.project.weight));
        visit_bn(&mut self.project_bn, &format!("{pre}.project_bn"), out);
    }

    fn state(&self, pre: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{pre}.expand.weight"), self.expand.weight.value.clone()));
        state_bn(&self.expand_bn, &format!("{pre}.expand_bn"), out);
        out.push((format!("{pre}.dw.weight"), self.dw.weight.value.clone()));
        state_bn(&self.dw_bn, &format!("{pre}.dw_bn"), out);
        out.push((format!("{pre}.project.weight"), self.project.weight.value.clone()));
        state_bn(&self.project_bn, &format!("{pre}.project_bn"), out);
    }

    fn load(&mut self, pre: &str, ck: &Checkpoint) -> Result<()> {
        load_param(&mut self.expand.weight, ck, &format!("{pre}.expand.weight"))?;
        load_bn(&mut self.expand_bn, &format!("{pre}.expand_bn"), ck)?;
        load_param(&mut self.dw.weight, ck, &format!("{pre}.dw.weight"))?;
        load_bn(&mut self.dw_bn, &format!("{pre}.dw_bn"), ck)?;
        load_param(&mut self.project.weight, ck, &format!("{pre}.project.weight"))?;
        load_bn(&mut self.project_bn, &format!("{pre}.project_bn"), ck)
    }
}

/// First stage of an FE block: strided, no skip connection.
#[derive(Debug, Clone)]
pub struct FeBlockFirst {
    chain: FeChain,
}

impl FeBlockFirst {
    pub fn new(c_in: usize, c_out: usize, alpha: usize, stride: usize, rng: &mut impl Rng) -> FeBlockFirst {
        FeBlockFirst { chain: FeChain::new(c_in, c_out, alpha, stride, rng) }
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        self.chain.forward(input, train)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.chain.backward(grad)
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.chain.visit("fe", &mut out);
        out
    }
}

impl Layer for FeBlockFirst {
    fn forward_t(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        self.forward(input, train)
    }

    fn backward_t(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.backward(grad)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }
}

/// Repeated stage of an FE block: stride 1, channel-preserving, with a
/// skip connection adding the block input to the projected output.
#[derive(Debug, Clone)]
pub struct FeBlockRepeat {
    chain: FeChain,
}

impl FeBlockRepeat {
    pub fn new(channels: usize, alpha: usize, rng: &mut impl Rng) -> FeBlockRepeat {
        FeBlockRepeat { chain: FeChain::new(channels, channels, alpha, 1, rng) }
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let mut out = self.chain.forward(input, train)?;
        if !out.same_shape(input) {
            return Err(NaelError::Shape(format!(
                "residual stage changed shape: {:?} -> {:?}",
                input.shape, out.shape
            )));
        }
        for (o, i) in out.data.iter_mut().zip(input.data.iter()) {
            *o += i;
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut gin = self.chain.backward(grad)?;
        for (g, go) in gin.data.iter_mut().zip(grad.data.iter()) {
            *g += go;
        }
        Ok(gin)
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.chain.visit("fe", &mut out);
        out
    }
}

impl Layer for FeBlockRepeat {
    fn forward_t(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        self.forward(input, train)
    }

    fn backward_t(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.backward(grad)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }
}

/// A full FE block: first stage plus residual repeats.
#[derive(Debug, Clone)]
pub struct FeStage {
    pub first: FeBlockFirst,
    pub repeats: Vec<FeBlockRepeat>,
}

impl FeStage {
    pub fn new(c_in: usize, cfg: &FeStageConfig, rng: &mut impl Rng) -> FeStage {
        FeStage {
            first: FeBlockFirst::new(c_in, cfg.c_out, cfg.alpha, cfg.stride, rng),
            repeats: (1..cfg.repeats)
                .map(|_| FeBlockRepeat::new(cfg.c_out, cfg.alpha, rng))
                .collect(),
        }
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.first.forward(input, train)?;
        for rep in &mut self.repeats {
            x = rep.forward(&x, train)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for rep in self.repeats.iter_mut().rev() {
            g = rep.backward(&g)?;
        }
        self.first.backward(&g)
    }

    fn visit<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.first.chain.visit(&format!("{pre}.first"), out);
        for (i, rep) in self.repeats.iter_mut().enumerate() {
            rep.chain.visit(&format!("{pre}.rep{i}"), out);
        }
    }

    fn state(&self, pre: &str, out: &mut Vec<(String, Tensor)>) {
        self.first.chain.state(&format!("{pre}.first"), out);
        for (i, rep) in self.repeats.iter().enumerate() {
            rep.chain.state(&format!("{pre}.rep{i}"), out);
        }
    }

    fn load(&mut self, pre: &str, ck: &Checkpoint) -> Result<()> {
        self.first.chain.load(&format!("{pre}.first"), ck)?;
        for (i, rep) in self.repeats.iter_mut().enumerate() {
            rep.chain.load(&format!("{pre}.rep{i}"), ck)?;
        }
        Ok(())
    }
}

/// Channel-expansion block: 1x1 conv + BN + ReLU6, spatial dims preserved.
#[derive(Debug, Clone)]
pub struct CeBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    relu: Relu6,
}

impl CeBlock {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> CeBlock {
        CeBlock {
            conv: Conv2d::pointwise(c_in, c_out, rng),
            bn: BatchNorm::new(c_out),
            relu: Relu6::default(),
        }
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.conv.forward_t(input, train)?;
        let x = self.bn.forward_t(&x, train)?;
        self.relu.forward_t(&x, train)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.relu.backward_t(grad)?;
        let g = self.bn.backward_t(&g)?;
        self.conv.backward_t(&g)
    }

    fn visit<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{pre}.conv.weight"), &mut self.conv.weight));
        visit_bn(&mut self.bn, &format!("{pre}.bn"), out);
    }

    fn state(&self, pre: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{pre}.conv.weight"), self.conv.weight.value.clone()));
        state_bn(&self.bn, &format!("{pre}.bn"), out);
    }

    fn load(&mut self, pre: &str, ck: &Checkpoint) -> Result<()> {
        load_param(&mut self.conv.weight, ck, &format!("{pre}.conv.weight"))?;
        load_bn(&mut self.bn, &format!("{pre}.bn"), ck)
    }
}

fn visit_fc<'a>(fc: &'a mut Fc, pre: &str, out: &mut Vec<(String, &'a mut Param)>) {
    out.push((format!("{pre}.weight"), &mut fc.weight));
    out.push((format!("{pre}.bias"), &mut fc.bias));
}

fn state_fc(fc: &Fc, pre: &str, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{pre}.weight"), fc.weight.value.clone()));
    out.push((format!("{pre}.bias"), fc.bias.value.clone()));
}

fn load_fc(fc: &mut Fc, pre: &str, ck: &Checkpoint) -> Result<()> {
    load_param(&mut fc.weight, ck, &format!("{pre}.weight"))?;
    load_param(&mut fc.bias, ck, &format!("{pre}.bias"))
}

// ---------------------------------------------------------------------------
// PRN
// ---------------------------------------------------------------------------

/// Batched PRN outputs with the intermediates ARN and the gradient-map
/// machinery need.
#[derive(Debug, Clone)]
pub struct PrnBatchOutput {
    /// (N, num_classes)
    pub logits: Tensor,
    /// CE-block output F: (N, C_e, 8, 8)
    pub feature_map: Tensor,
    /// Index 0 is the SC output, i >= 1 the output of FE block i.
    pub stage_outputs: Vec<Tensor>,
}

/// Single-sample PRN forward result (batch dimension removed).
#[derive(Debug, Clone)]
pub struct PrnForward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// (C_e, 8, 8)
    pub feature_map: Tensor,
    pub stage_outputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Prn {
    pub config: NetworkConfig,
    pub sc: ScBlock,
    pub stages: Vec<FeStage>,
    pub ce: CeBlock,
    gap: Gap,
    pub fc: Fc,
}

fn squeeze0(t: &Tensor) -> Tensor {
    Tensor { shape: t.shape[1..].to_vec(), data: t.data.clone() }
}

fn unsqueeze0(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(&t.shape);
    Tensor { shape, data: t.data.clone() }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Prn {
    pub fn new(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Prn> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut c_in = config.sc_channels;
        for cfg in &config.prn_stages {
            stages.push(FeStage::new(c_in, cfg, rng));
            c_in = cfg.c_out;
        }
        Ok(Prn {
            config: config.clone(),
            sc: ScBlock::new(config.input_channels, config.sc_channels, rng),
            stages,
            ce: CeBlock::new(c_in, config.prn_ce_channels, rng),
            gap: Gap::default(),
            fc: Fc::new(config.prn_ce_channels, config.num_classes, rng),
        })
    }

    pub fn forward_batch(&mut self, input: &Tensor, train: bool) -> Result<PrnBatchOutput> {
        if input.rank() != 4
            || input.shape[1] != self.config.input_channels
            || input.shape[2] != self.config.input_height
            || input.shape[3] != self.config.input_width
        {
            return Err(NaelError::Shape(format!(
                "PRN expects (N,{},{},{}) input, got {:?}",
                self.config.input_channels, self.config.input_height, self.config.input_width, input.shape
            )));
        }
        let mut stage_outputs = Vec::with_capacity(self.stages.len() + 1);
        let mut x = self.sc.forward(input, train)?;
        stage_outputs.push(x.clone());
        for stage in &mut self.stages {
            x = stage.forward(&x, train)?;
            stage_outputs.push(x.clone());
        }
        let feature_map = self.ce.forward(&x, train)?;
        let pooled = self.gap.forward_t(&feature_map, train)?;
        let logits = self.fc.forward_t(&pooled, train)?;
        Ok(PrnBatchOutput { logits, feature_map, stage_outputs })
    }

    /// Backpropagate from logit gradients through the whole network,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let g = self.fc.backward_t(dlogits)?;
        let g = self.gap.backward_t(&g)?;
        let mut g = self.ce.backward(&g)?;
        for stage in self.stages.iter_mut().rev() {
            g = stage.backward(&g)?;
        }
        self.sc.backward(&g)
    }

    /// Run only the stem and the first FE blocks, stopping at stage
    /// output `point` (0 is the SC output). Inference mode; used to feed
    /// the ARN without paying for the rest of the PRN.
    pub fn forward_to_stage(&mut self, input: &Tensor, point: usize) -> Result<Tensor> {
        if point > self.stages.len() {
            return Err(NaelError::Parameter(format!(
                "stage point {point} out of range (PRN has {} FE blocks)",
                self.stages.len()
            )));
        }
        let mut x = self.sc.forward(input, false)?;
        for stage in self.stages.iter_mut().take(point) {
            x = stage.forward(&x, false)?;
        }
        Ok(x)
    }

    /// Single-sample inference on a normalized TFI.
    pub fn forward_tfi(&mut self, tfi: &Tfi) -> Result<PrnForward> {
        if !tfi.normalized {
            return Err(NaelError::Contract("PRN input TFI must be normalized".into()));
        }
        if tfi.height != self.config.input_height || tfi.width != self.config.input_width {
            return Err(NaelError::Shape(format!(
                "TFI is {}x{}, network expects {}x{}",
                tfi.height, tfi.width, self.config.input_height, self.config.input_width
            )));
        }
        let input = Tensor::from_vec(
            &[1, 1, tfi.height, tfi.width],
            tfi.values.clone(),
        )?;
        let out = self.forward_batch(&input, false)?;
        let probs = softmax(&out.logits)?;
        Ok(PrnForward {
            logits: out.logits.data.clone(),
            probs: probs.data,
            feature_map: squeeze0(&out.feature_map),
            stage_outputs: out.stage_outputs.iter().map(squeeze0).collect(),
        })
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.sc.visit("prn.sc", &mut out);
        // split borrows: iterate by index through raw pointers is not
        // needed; sequential pushes on disjoint fields are fine
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit(&format!("prn.stage{i}"), &mut out);
        }
        self.ce.visit("prn.ce", &mut out);
        visit_fc(&mut self.fc, "prn.fc", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut out = Vec::new();
        self.sc.state("prn.sc", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.state(&format!("prn.stage{i}"), &mut out);
        }
        self.ce.state("prn.ce", &mut out);
        state_fc(&self.fc, "prn.fc", &mut out);
        Checkpoint { tensors: out }
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        self.sc.load("prn.sc", ck)?;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.load(&format!("prn.stage{i}"), ck)?;
        }
        self.ce.load("prn.ce", ck)?;
        load_fc(&mut self.fc, "prn.fc", ck)
    }
}

// ---------------------------------------------------------------------------
// gradient maps
// ---------------------------------------------------------------------------

/// Post-ReLU class-discriminative map over the PRN feature grid; rows
/// index frequency, columns time.
#[derive(Debug, Clone)]
pub struct GradientMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class_index: usize,
    pub f_max: usize,
}

impl GradientMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Importance weights w^c(k) via the recorded GAP -> FC head: seed a
/// one-hot gradient on logit c, run it backward through the head, and
/// average the resulting feature-map gradient over the spatial grid.
pub fn importance_weights(
    fc_weight: &Tensor,
    feature_h: usize,
    feature_w: usize,
    class: usize,
) -> Result<Vec<f64>> {
    let num_classes = fc_weight.shape[0];
    let channels = fc_weight.shape[1];
    if class >= num_classes {
        return Err(NaelError::Label(format!("class {class} with {num_classes} classes")));
    }
    let mut one_hot = Tensor::zeros(&[1, num_classes]);
    one_hot.data[class] = 1.0;
    let dpooled = fc_backward_input(fc_weight, &one_hot)?;
    let dfeature = gap_backward(&dpooled, feature_h, feature_w)?;
    let hw = (feature_h * feature_w) as f64;
    let mut weights = vec![0.0; channels];
    for (k, w) in weights.iter_mut().enumerate() {
        let base = k * feature_h * feature_w;
        *w = dfeature.data[base..base + feature_h * feature_w].iter().sum::<f64>() / hw;
    }
    Ok(weights)
}

/// G^c = ReLU(sum_k F^k * w^c(k)) over a (C,H,W) feature map.
pub fn gradient_map(feature_map: &Tensor, weights: &[f64], class: usize) -> Result<GradientMap> {
    if feature_map.rank() != 3 {
        return Err(NaelError::Shape(format!(
            "feature map must be (C,H,W), got {:?}",
            feature_map.shape
        )));
    }
    let (c, h, w) = (feature_map.shape[0], feature_map.shape[1], feature_map.shape[2]);
    if weights.len() != c {
        return Err(NaelError::Shape(format!(
            "{} importance weights for {c} channels",
            weights.len()
        )));
    }
    let mut values = vec![0.0; h * w];
    for (k, &wk) in weights.iter().enumerate() {
        let base = k * h * w;
        for (v, f) in values.iter_mut().zip(feature_map.data[base..base + h * w].iter()) {
            *v += wk * f;
        }
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    let f_max = f_max_of(&values, h, w);
    Ok(GradientMap { values, height: h, width: w, class_index: class, f_max })
}

/// Frequency row maximizing the time-summed activation; ties break toward
/// the lowest row index.
pub fn f_max_of(values: &[f64], height: usize, width: usize) -> usize {
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for row in 0..height {
        let sum: f64 = values[row * width..(row + 1) * width].iter().sum();
        if sum > best_sum {
            best_sum = sum;
            best = row;
        }
    }
    best
}

/// Comma-separated dump of a gradient map, one row per line.
pub fn gradient_map_csv(map: &GradientMap) -> String {
    let mut out = String::new();
    for row in 0..map.height {
        let cells: Vec<String> = (0..map.width).map(|c| format!("{:.9e}", map.get(row, c))).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Binary 8-bit portable graymap of a gradient map, min-max scaled.
pub fn write_gradient_map_pgm<W: IoWrite>(map: &GradientMap, out: &mut W) -> std::io::Result<()> {
    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    writeln!(out, "P5")?;
    writeln!(out, "{} {}", map.width, map.height)?;
    writeln!(out, "255")?;
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)
}

// ---------------------------------------------------------------------------
// NAN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NanVerdict {
    Reliable,
    Unreliable,
}

#[derive(Debug, Clone)]
pub struct Nan {
    pub dims: [usize; 4],
    pub fc1: Fc,
    pub bn1: BatchNorm,
    relu1: Relu6,
    pub fc2: Fc,
    pub bn2: BatchNorm,
    relu2: Relu6,
    pub fc3: Fc,
}

impl Nan {
    pub fn new(dims: [usize; 4], rng: &mut impl Rng) -> Nan {
        Nan {
            dims,
            fc1: Fc::new(dims[0], dims[1], rng),
            bn1: BatchNorm::new(dims[1]),
            relu1: Relu6::default(),
            fc2: Fc::new(dims[1], dims[2], rng),
            bn2: BatchNorm::new(dims[2]),
            relu2: Relu6::default(),
            fc3: Fc::new(dims[2], dims[3], rng),
        }
    }

    pub fn forward_batch(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.fc1.forward_t(input, train)?;
        let x = self.bn1.forward_t(&x, train)?;
        let x = self.relu1.forward_t(&x, train)?;
        let x = self.fc2.forward_t(&x, train)?;
        let x = self.bn2.forward_t(&x, train)?;
        let x = self.relu2.forward_t(&x, train)?;
        self.fc3.forward_t(&x, train)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let g = self.fc3.backward_t(dlogits)?;
        let g = self.relu2.backward_t(&g)?;
        let g = self.bn2.backward_t(&g)?;
        let g = self.fc2.backward_t(&g)?;
        let g = self.relu1.backward_t(&g)?;
        let g = self.bn1.backward_t(&g)?;
        self.fc1.backward_t(&g)
    }

    /// Single-map inference. Ties resolve to `Reliable` (index 0).
    pub fn forward_map(&mut self, map: &GradientMap) -> Result<(NanVerdict, (f64, f64))> {
        if map.height * map.width != self.dims[0] {
            return Err(NaelError::Shape(format!(
                "gradient map {}x{} does not flatten to {} features",
                map.height, map.width, self.dims[0]
            )));
        }
        let input = Tensor::from_vec(&[1, self.dims[0]], map.values.clone())?;
        let logits = self.forward_batch(&input, false)?;
        let probs = softmax(&logits)?;
        let (reliable, unreliable) = (probs.data[0], probs.data[1]);
        let verdict = if unreliable > reliable { NanVerdict::Unreliable } else { NanVerdict::Reliable };
        Ok((verdict, (reliable, unreliable)))
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        visit_fc(&mut self.fc1, "nan.fc1", &mut out);
        visit_bn(&mut self.bn1, "nan.bn1", &mut out);
        visit_fc(&mut self.fc2, "nan.fc2", &mut out);
        visit_bn(&mut self.bn2, "nan.bn2", &mut out);
        visit_fc(&mut self.fc3, "nan.fc3", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut out = Vec::new();
        state_fc(&self.fc1, "nan.fc1", &mut out);
        state_bn(&self.bn1, "nan.bn1", &mut out);
        state_fc(&self.fc2, "nan.fc2", &mut out);
        state_bn(&self.bn2, "nan.bn2", &mut out);
        state_fc(&self.fc3, "nan.fc3", &mut out);
        Checkpoint { tensors: out }
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        load_fc(&mut self.fc1, "nan.fc1", ck)?;
        load_bn(&mut self.bn1, "nan.bn1", ck)?;
        load_fc(&mut self.fc2, "nan.fc2", ck)?;
        load_bn(&mut self.bn2, "nan.bn2", ck)?;
        load_fc(&mut self.fc3, "nan.fc3", ck)
    }
}

// ---------------------------------------------------------------------------
// ARN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Arn {
    pub config: NetworkConfig,
    pub stages: Vec<FeStage>,
    pub ce: CeBlock,
    gap: Gap,
    pub fc: Fc,
}

impl Arn {
    pub fn new(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Arn> {
        config.validate()?;
        let (mut c_in, _, _) = config.prn_stage_dims()[config.arn_reuse_point];
        let mut stages = Vec::new();
        for cfg in &config.arn_stages {
            stages.push(FeStage::new(c_in, cfg, rng));
            c_in = cfg.c_out;
        }
        Ok(Arn {
            config: config.clone(),
            stages,
            ce: CeBlock::new(c_in, config.arn_ce_channels, rng),
            gap: Gap::default(),
            fc: Fc::new(config.arn_ce_channels, config.num_classes, rng),
        })
    }

    /// Forward from the reused PRN intermediate, batched (N,C,H,W).
    pub fn forward_batch(&mut self, reused: &Tensor, train: bool) -> Result<Tensor> {
        let (rc, rh, rw) = self.config.prn_stage_dims()[self.config.arn_reuse_point];
        if reused.rank() != 4 || reused.shape[1] != rc || reused.shape[2] != rh || reused.shape[3] != rw {
            return Err(NaelError::Shape(format!(
                "ARN expects reused input (N,{rc},{rh},{rw}), got {:?}",
                reused.shape
            )));
        }
        let mut x = reused.clone();
        for stage in &mut self.stages {
            x = stage.forward(&x, train)?;
        }
        let x = self.ce.forward(&x, train)?;
        let pooled = self.gap.forward_t(&x, train)?;
        self.fc.forward_t(&pooled, train)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let g = self.fc.backward_t(dlogits)?;
        let g = self.gap.backward_t(&g)?;
        let mut g = self.ce.backward(&g)?;
        for stage in self.stages.iter_mut().rev() {
            g = stage.backward(&g)?;
        }
        Ok(g)
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit(&format!("arn.stage{i}"), &mut out);
        }
        self.ce.visit("arn.ce", &mut out);
        visit_fc(&mut self.fc, "arn.fc", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.state(&format!("arn.stage{i}"), &mut out);
        }
        self.ce.state("arn.ce", &mut out);
        state_fc(&self.fc, "arn.fc", &mut out);
        Checkpoint { tensors: out }
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.load(&format!("arn.stage{i}"), ck)?;
        }
        self.ce.load("arn.ce", ck)?;
        load_fc(&mut self.fc, "arn.fc", ck)
    }
}

// ---------------------------------------------------------------------------
// FLOPs accounting
// ---------------------------------------------------------------------------

fn stage_flops(
    report: &mut FlopsReport,
    prefix: &str,
    dims: (usize, usize, usize),
    cfg: &FeStageConfig,
) -> (usize, usize, usize) {
    let (c_in, h, w) = dims;
    let mid = cfg.alpha * c_in;
    let (oh, ow) = (conv3_out(h, cfg.stride), conv3_out(w, cfg.stride));
    report.push(
        format!("{prefix}.first.expand"),
        flops_of(&LayerSpec::pw(c_in, mid), h, w).unwrap(),
    );
    report.push(format!("{prefix}.first.dw"), flops_of(&LayerSpec::dw(3, mid, cfg.stride, 1), oh, ow).unwrap());
    report.push(
        format!("{prefix}.first.project"),
        flops_of(&LayerSpec::pw(mid, cfg.c_out), oh, ow).unwrap(),
    );
    let rmid = cfg.alpha * cfg.c_out;
    for i in 1..cfg.repeats {
        report.push(
            format!("{prefix}.rep{}.expand", i - 1),
            flops_of(&LayerSpec::pw(cfg.c_out, rmid), oh, ow).unwrap(),
        );
        report.push(
            format!("{prefix}.rep{}.dw", i - 1),
            flops_of(&LayerSpec::dw(3, rmid, 1, 1), oh, ow).unwrap(),
        );
        report.push(
            format!("{prefix}.rep{}.project", i - 1),
            flops_of(&LayerSpec::pw(rmid, cfg.c_out), oh, ow).unwrap(),
        );
    }
    (cfg.c_out, oh, ow)
}

/// Cost of the always-taken path: PRN, gradient-map extraction, and NAN.
pub fn base_flops(config: &NetworkConfig) -> FlopsReport {
    let mut report = FlopsReport::new();
    let (sh, sw) = (conv3_out(config.input_height, 2), conv3_out(config.input_width, 2));
    report.push(
        "prn.sc",
        flops_of(&LayerSpec::sc(3, config.input_channels, config.sc_channels, 2, 1), sh, sw).unwrap(),
    );
    let mut dims = (config.sc_channels, sh, sw);
    for (i, cfg) in config.prn_stages.iter().enumerate() {
        dims = stage_flops(&mut report, &format!("prn.stage{i}"), dims, cfg);
    }
    let (c, h, w) = dims;
    report.push("prn.ce", flops_of(&LayerSpec::pw(c, config.prn_ce_channels), h, w).unwrap());
    report.push(
        "prn.fc",
        flops_of(&LayerSpec::fc(config.prn_ce_channels, config.num_classes), 1, 1).unwrap(),
    );
    // Gradient-map extraction: closed-form backward through the GAP+FC head.
    report.push(
        "gradient_map",
        flops_of(&LayerSpec::fc(config.prn_ce_channels, config.num_classes), 1, 1).unwrap(),
    );
    report.push("nan.fc1", flops_of(&LayerSpec::fc(config.nan_dims[0], config.nan_dims[1]), 1, 1).unwrap());
    report.push("nan.fc2", flops_of(&LayerSpec::fc(config.nan_dims[1], config.nan_dims[2]), 1, 1).unwrap());
    report.push("nan.fc3", flops_of(&LayerSpec::fc(config.nan_dims[2], config.nan_dims[3]), 1, 1).unwrap());
    report
}

/// Marginal cost of activating the ARN on top of the base path.
pub fn arn_marginal_flops(config: &NetworkConfig) -> FlopsReport {
    let mut report = FlopsReport::new();
    let mut dims = config.prn_stage_dims()[config.arn_reuse_point];
    for (i, cfg) in config.arn_stages.iter().enumerate() {
        dims = stage_flops(&mut report, &format!("arn.stage{i}"), dims, cfg);
    }
    let (c, h, w) = dims;
    report.push("arn.ce", flops_of(&LayerSpec::pw(c, config.arn_ce_channels), h, w).unwrap());
    report.push(
        "arn.fc",
        flops_of(&LayerSpec::fc(config.arn_ce_channels, config.num_classes), 1, 1).unwrap(),
    );
    report
}

// ---------------------------------------------------------------------------
// NAEL assembly
// ---------------------------------------------------------------------------

/// Test hook: force the routing verdict regardless of the NAN weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NanOverride {
    AlwaysReliable,
    AlwaysUnreliable,
}

#[derive(Debug, Clone, Copy)]
pub struct NaelDecision {
    pub predicted_class: usize,
    pub used_arn: bool,
    /// (reliable, unreliable)
    pub nan_probs: (f64, f64),
    pub flops_spent: u64,
}

#[derive(Debug, Clone)]
pub struct NaelModel {
    pub config: NetworkConfig,
    pub prn: Prn,
    pub arn: Arn,
    pub nan: Nan,
    pub nan_override: Option<NanOverride>,
    last_prn: Option<PrnForward>,
}

impl NaelModel {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<NaelModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(NaelModel {
            config: config.clone(),
            prn: Prn::new(config, &mut rng)?,
            arn: Arn::new(config, &mut rng)?,
            nan: Nan::new(config.nan_dims, &mut rng),
            nan_override: None,
            last_prn: None,
        })
    }

    /// PRN inference; the intermediates are recorded for `arn_forward`
    /// and `gradient_map_for`.
    pub fn prn_forward(&mut self, tfi: &Tfi) -> Result<PrnForward> {
        let out = self.prn.forward_tfi(tfi)?;
        self.last_prn = Some(out.clone());
        Ok(out)
    }

    fn recorded(&self) -> Result<&PrnForward> {
        self.last_prn
            .as_ref()
            .ok_or_else(|| NaelError::State("no recorded PRN forward pass".into()))
    }

    /// Importance weights of the recorded forward for a class.
    pub fn importance_weights_for(&self, class: usize) -> Result<Vec<f64>> {
        let fwd = self.recorded()?;
        let (h, w) = (fwd.feature_map.shape[1], fwd.feature_map.shape[2]);
        importance_weights(&self.prn.fc.weight.value, h, w, class)
    }

    /// Gradient map of the recorded forward for a class.
    pub fn gradient_map_for(&self, class: usize) -> Result<GradientMap> {
        let fwd = self.recorded()?;
        let weights = self.importance_weights_for(class)?;
        gradient_map(&fwd.feature_map, &weights, class)
    }

    /// ARN inference from the recorded PRN intermediates.
    pub fn arn_forward(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        let reused = {
            let fwd = self.recorded()?;
            unsqueeze0(&fwd.stage_outputs[self.config.arn_reuse_point])
        };
        let logits = self.arn.forward_batch(&reused, false)?;
        let probs = softmax(&logits)?;
        Ok((logits.data, probs.data))
    }

    /// Full adaptive inference: PRN, gradient map, NAN verdict, and the
    /// ARN only when the map is judged unreliable.
    pub fn nael_infer(&mut self, tfi: &Tfi) -> Result<NaelDecision> {
        let prn_out = self.prn_forward(tfi)?;
        let mut predicted_class = argmax(&prn_out.probs);
        let map = self.gradient_map_for(predicted_class)?;
        let (verdict, nan_probs) = match self.nan_override {
            Some(NanOverride::AlwaysReliable) => (NanVerdict::Reliable, (1.0, 0.0)),
            Some(NanOverride::AlwaysUnreliable) => (NanVerdict::Unreliable, (0.0, 1.0)),
            None => self.nan.forward_map(&map)?,
        };
        let mut flops_spent = base_flops(&self.config).total();
        let used_arn = verdict == NanVerdict::Unreliable;
        if used_arn {
            let (_, arn_probs) = self.arn_forward()?;
            predicted_class = argmax(&arn_probs);
            flops_spent += arn_marginal_flops(&self.config).total();
        }
        Ok(NaelDecision { predicted_class, used_arn, nan_probs, flops_spent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tfa::normalize_tfi;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn random_tfi(seed: u64) -> Tfi {
        let mut r = rng(seed);
        let raw = Tfi {
            values: (0..128 * 128).map(|_| r.gen_range(0.0..1.0)).collect(),
            height: 128,
            width: 128,
            fs: 100e6,
            normalized: false,
        };
        normalize_tfi(&raw).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.prn_feature_dims(), (64, 8, 8));
        assert_eq!(cfg.arn_feature_dims(), (160, 4, 4));
        assert_eq!(cfg.prn_stage_dims()[1], (24, 32, 32));
    }

    #[test]
    fn config_constraint_violations_rejected() {
        let mut cfg = NetworkConfig::default();
        cfg.arn_stages[1].alpha = 2; // no longer exceeds PRN's
        assert!(cfg.validate().is_err());

        let mut cfg = NetworkConfig::default();
        cfg.prn_stages.pop(); // final map becomes 16x16, not 8x8
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sc_block_shape_range_and_zero_input() {
        let mut r = rng(0);
        let mut sc = ScBlock::new(1, 16, &mut r);
        let input = rand_tensor(&[1, 1, 128, 128], &mut r);
        let out = sc.forward(&input, false).unwrap();
        assert_eq!(out.shape, vec![1, 16, 64, 64]);
        assert!(out.data.iter().all(|&v| (0.0..=6.0).contains(&v)));
        // zero input under zero running mean and beta stays zero
        let zero = Tensor::zeros(&[1, 1, 128, 128]);
        let out = sc.forward(&zero, false).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fe_first_stride_contracts() {
        let mut r = rng(1);
        let input = rand_tensor(&[1, 24, 32, 32], &mut r);
        let mut halving = FeBlockFirst::new(24, 32, 2, 2, &mut r);
        assert_eq!(halving.forward(&input, false).unwrap().shape, vec![1, 32, 16, 16]);
        let mut keeping = FeBlockFirst::new(24, 32, 2, 1, &mut r);
        assert_eq!(keeping.forward(&input, false).unwrap().shape, vec![1, 32, 32, 32]);
    }

    #[test]
    fn fe_first_has_no_skip_path() {
        let mut r = rng(2);
        let mut block = FeBlockFirst::new(3, 3, 1, 1, &mut r);
        // identity pointwise layers, zero depthwise kernel
        block.chain.expand.weight.value =
            Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        block.chain.project.weight.value = block.chain.expand.weight.value.clone();
        block.chain.dw.weight.value = Tensor::zeros(&[3, 3, 3]);
        let input = rand_tensor(&[1, 3, 6, 6], &mut r);
        let out = block.forward(&input, false).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0), "input leaked past a zero dw kernel");
    }

    #[test]
    fn fe_repeat_is_identity_with_zero_convs() {
        let mut r = rng(3);
        let mut block = FeBlockRepeat::new(4, 2, &mut r);
        block.chain.expand.weight.value = Tensor::zeros(&[8, 4]);
        block.chain.dw.weight.value = Tensor::zeros(&[8, 3, 3]);
        block.chain.project.weight.value = Tensor::zeros(&[4, 8]);
        let input = rand_tensor(&[2, 4, 5, 5], &mut r);
        let out = block.forward(&input, false).unwrap();
        assert_eq!(out.data, input.data);
        // gradient reaches the input through the skip path alone
        let grad = rand_tensor(&[2, 4, 5, 5], &mut r);
        let gin = block.backward(&grad).unwrap();
        assert_eq!(gin.data, grad.data);
    }

    #[test]
    fn ce_block_shapes_and_range() {
        let mut r = rng(4);
        let mut ce = CeBlock::new(64, 256, &mut r);
        let input = rand_tensor(&[1, 64, 8, 8], &mut r);
        let out = ce.forward(&input, false).unwrap();
        assert_eq!(out.shape, vec![1, 256, 8, 8]);
        assert!(out.data.iter().all(|&v| (0.0..=6.0).contains(&v)));
        ce.conv.weight.value = Tensor::zeros(&[256, 64]);
        let out = ce.forward(&input, false).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prn_forward_contracts() {
        let cfg = NetworkConfig::default();
        let mut prn = Prn::new(&cfg, &mut rng(5)).unwrap();
        let tfi = random_tfi(10);
        let out = prn.forward_tfi(&tfi).unwrap();
        let psum: f64 = out.probs.iter().sum();
        assert!((psum - 1.0).abs() < 1e-9);
        assert_eq!(out.feature_map.shape, vec![256, 8, 8]);
        assert_eq!(argmax(&out.logits), argmax(&out.probs));
        assert_eq!(out.stage_outputs[0].shape, vec![16, 64, 64]);
        assert_eq!(out.stage_outputs[1].shape, vec![24, 32, 32]);

        let mut raw = tfi.clone();
        raw.normalized = false;
        assert!(matches!(prn.forward_tfi(&raw), Err(NaelError::Contract(_))));
    }

    #[test]
    fn importance_weights_match_analytic_head_derivative() {
        let cfg = NetworkConfig::default();
        let mut model = NaelModel::new(&cfg, 7).unwrap();
        let tfi = random_tfi(11);
        model.prn_forward(&tfi).unwrap();
        for class in [0usize, 5, 11] {
            let w = model.importance_weights_for(class).unwrap();
            for (k, &wk) in w.iter().enumerate() {
                let analytic = model.prn.fc.weight.value.data[class * 256 + k] / 64.0;
                assert!((wk - analytic).abs() < 1e-10);
            }
        }
        // a channel the logit ignores gets zero weight
        let mut fcw = model.prn.fc.weight.value.clone();
        fcw.data[3 * 256 + 17] = 0.0;
        let w = importance_weights(&fcw, 8, 8, 3).unwrap();
        assert_eq!(w[17], 0.0);
        // doubling the fc row doubles the weights
        let mut doubled = fcw.clone();
        for k in 0..256 {
            doubled.data[3 * 256 + k] *= 2.0;
        }
        let w2 = importance_weights(&doubled, 8, 8, 3).unwrap();
        for k in 0..256 {
            assert!((w2[k] - 2.0 * w[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_map_oracle_and_relu() {
        let mut r = rng(6);
        let f = rand_tensor(&[5, 8, 8], &mut r);
        let w: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let map = gradient_map(&f, &w, 2).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += w[k] * f.data[(k * 8 + row) * 8 + col];
                }
                assert!((map.get(row, col) - acc.max(0.0)).abs() < 1e-12);
            }
        }
        assert!(map.values.iter().all(|&v| v >= 0.0));

        // all-negative weighted sum collapses to zero
        let pos = Tensor::full(&[2, 8, 8], 1.0);
        let map = gradient_map(&pos, &[-1.0, -0.5], 0).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));

        // single active channel reproduces ReLU of that channel
        let mut w = vec![0.0; 5];
        w[3] = 1.0;
        let map = gradient_map(&f, &w, 1).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                assert_eq!(map.get(row, col), f.data[(3 * 8 + row) * 8 + col].max(0.0));
            }
        }
    }

    #[test]
    fn f_max_rules() {
        // all energy in row 4
        let mut values = vec![0.0; 64];
        for col in 0..8 {
            values[4 * 8 + col] = 1.0;
        }
        assert_eq!(f_max_of(&values, 8, 8), 4);
        // uniform map ties to row 0
        assert_eq!(f_max_of(&vec![0.3; 64], 8, 8), 0);
        // random maps agree with brute force
        let mut r = rng(7);
        for _ in 0..20 {
            let values: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..1.0)).collect();
            let brute = (0..8)
                .max_by(|&a, &b| {
                    let sa: f64 = values[a * 8..(a + 1) * 8].iter().sum();
                    let sb: f64 = values[b * 8..(b + 1) * 8].iter().sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap();
            assert_eq!(f_max_of(&values, 8, 8), brute);
        }
    }

    #[test]
    fn nan_forward_probabilities_and_tie_rule() {
        let mut r = rng(8);
        let mut nan = Nan::new([64, 256, 512, 2], &mut r);
        let map = GradientMap {
            values: (0..64).map(|_| r.gen_range(0.0..1.0)).collect(),
            height: 8,
            width: 8,
            class_index: 0,
            f_max: 0,
        };
        let (_, (p_rel, p_unrel)) = nan.forward_map(&map).unwrap();
        assert!((p_rel + p_unrel - 1.0).abs() < 1e-9);
        let again = nan.forward_map(&map).unwrap();
        assert_eq!(again.1, (p_rel, p_unrel));

        // zero final layer: exact tie resolves to reliable
        nan.fc3.weight.value = Tensor::zeros(&[2, 512]);
        nan.fc3.bias.value = Tensor::zeros(&[2]);
        let (verdict, probs) = nan.forward_map(&map).unwrap();
        assert_eq!(probs, (0.5, 0.5));
        assert_eq!(verdict, NanVerdict::Reliable);
    }

    #[test]
    fn arn_requires_recorded_prn_forward() {
        let cfg = NetworkConfig::default();
        let mut model = NaelModel::new(&cfg, 9).unwrap();
        assert!(matches!(model.arn_forward(), Err(NaelError::State(_))));
        assert!(matches!(model.gradient_map_for(0), Err(NaelError::State(_))));
        model.prn_forward(&random_tfi(12)).unwrap();
        let (_, probs) = model.arn_forward().unwrap();
        let psum: f64 = probs.iter().sum();
        assert!((psum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn routing_flops_identities() {
        let cfg = NetworkConfig::default();
        let base = base_flops(&cfg).total();
        let marginal = arn_marginal_flops(&cfg).total();
        assert!(marginal > 0);

        let mut model = NaelModel::new(&cfg, 10).unwrap();
        model.nan_override = Some(NanOverride::AlwaysReliable);
        let tfis: Vec<Tfi> = (0..4).map(|i| random_tfi(100 + i)).collect();
        for tfi in &tfis {
            let d = model.nael_infer(tfi).unwrap();
            assert!(!d.used_arn);
            assert_eq!(d.flops_spent, base);
        }
        model.nan_override = Some(NanOverride::AlwaysUnreliable);
        for tfi in &tfis {
            let d = model.nael_infer(tfi).unwrap();
            assert!(d.used_arn);
            assert_eq!(d.flops_spent, base + marginal);
        }

        // mixed batch: mean flops == base + rate * marginal exactly
        model.nan_override = None;
        let mut total = 0u64;
        let mut activations = 0u64;
        for tfi in &tfis {
            let d = model.nael_infer(tfi).unwrap();
            total += d.flops_spent;
            if d.used_arn {
                activations += 1;
            }
            let (r, u) = d.nan_probs;
            assert!((r + u - 1.0).abs() < 1e-9);
            assert_eq!(d.used_arn, u > r);
        }
        assert_eq!(total, tfis.len() as u64 * base + activations * marginal);
    }

    #[test]
    fn routing_is_deterministic() {
        let cfg = NetworkConfig::default();
        let mut model = NaelModel::new(&cfg, 11).unwrap();
        let tfi = random_tfi(40);
        let a = model.nael_infer(&tfi).unwrap();
        let b = model.nael_infer(&tfi).unwrap();
        assert_eq!(a.predicted_class, b.predicted_class);
        assert_eq!(a.used_arn, b.used_arn);
        assert_eq!(a.nan_probs, b.nan_probs);
        assert_eq!(a.flops_spent, b.flops_spent);
    }

    #[test]
    fn spot_check_flops_components() {
        let cfg = NetworkConfig::default();
        let base = base_flops(&cfg);
        let lookup = |name: &str| {
            base.entries
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing {name}"))
                .1
        };
        assert_eq!(lookup("prn.sc"), 3 * 3 * 16 * 64 * 64);
        assert_eq!(lookup("prn.ce"), 64 * 256 * 8 * 8);
        assert_eq!(lookup("prn.fc"), 256 * 12);
        assert_eq!(lookup("gradient_map"), 256 * 12);
        assert_eq!(lookup("nan.fc1"), 64 * 256);
        assert_eq!(lookup("nan.fc2"), 256 * 512);
        assert_eq!(lookup("nan.fc3"), 512 * 2);
        assert_eq!(base.total(), base.entries.iter().map(|(_, c)| c).sum::<u64>());
    }

    #[test]
    fn checkpoints_round_trip_through_all_networks() {
        let cfg = NetworkConfig::default();
        let mut model = NaelModel::new(&cfg, 12).unwrap();
        let tfi = random_tfi(50);
        // exercise forward once so running stats are in defined state
        let before = model.nael_infer(&tfi).unwrap();

        let prn_ck = model.prn.to_checkpoint();
        let arn_ck = model.arn.to_checkpoint();
        let nan_ck = model.nan.to_checkpoint();

        let mut other = NaelModel::new(&cfg, 999).unwrap();
        other.prn.load_checkpoint(&prn_ck).unwrap();
        other.arn.load_checkpoint(&arn_ck).unwrap();
        other.nan.load_checkpoint(&nan_ck).unwrap();
        // saving what was just loaded is byte-identical
        assert_eq!(
            other.prn.to_checkpoint().to_bytes().unwrap(),
            Checkpoint::from_bytes(&prn_ck.to_bytes().unwrap()).unwrap().to_bytes().unwrap()
        );
        let after = other.nael_infer(&tfi).unwrap();
        // identical decisions modulo f32 storage of the weights
        assert_eq!(before.used_arn, after.used_arn);
        assert_eq!(before.flops_spent, after.flops_spent);

        // wrong-network checkpoint is incompatible
        assert!(matches!(
            other.prn.load_checkpoint(&nan_ck),
            Err(NaelError::Incompatible(_))
        ));
    }

    #[test]
    fn gradient_map_exports() {
        let map = GradientMap {
            values: (0..64).map(|i| i as f64 / 63.0).collect(),
            height: 8,
            width: 8,
            class_index: 3,
            f_max: 7,
        };
        let csv = gradient_map_csv(&map);
        assert_eq!(csv.lines().count(), 8);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 8);
        let mut pgm = Vec::new();
        write_gradient_map_pgm(&map, &mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
        assert_eq!(*pgm.last().unwrap(), 255);
    }
}
