//! Exact FLOPs accounting. Counts are multiply–accumulate products;
//! normalization, activations, pooling, and softmax are counted as zero.
//! Spatial factors always use the *output* height and width, which keeps
//! the stride-1 and strided cases on one formula.

use crate::error::{NaelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ScConv,
    DwConv,
    PwConv,
    BatchNorm,
    Relu6,
    Fc,
    Gap,
    Softmax,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn sc(kernel: usize, c_in: usize, c_out: usize, stride: usize, padding: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::ScConv,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            in_channels: c_in,
            out_channels: c_out,
            padding,
        }
    }

    pub fn dw(kernel: usize, channels: usize, stride: usize, padding: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::DwConv,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            in_channels: channels,
            out_channels: channels,
            padding,
        }
    }

    pub fn pw(c_in: usize, c_out: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::PwConv,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            in_channels: c_in,
            out_channels: c_out,
            padding: 0,
        }
    }

    pub fn fc(f_in: usize, f_out: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Fc,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            in_channels: f_in,
            out_channels: f_out,
            padding: 0,
        }
    }

    pub fn zero_cost(kind: LayerKind, channels: usize) -> LayerSpec {
        LayerSpec {
            kind,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            in_channels: channels,
            out_channels: channels,
            padding: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(NaelError::Parameter(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        match self.kind {
            LayerKind::DwConv if self.out_channels != self.in_channels => Err(NaelError::Parameter(
                "depthwise layer must have out_channels == in_channels".into(),
            )),
            LayerKind::PwConv if self.kernel_h != 1 || self.kernel_w != 1 => Err(NaelError::Parameter(
                "pointwise layer must have a 1x1 kernel".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Multiply–accumulate count of one layer given its output spatial size.
pub fn flops_of(layer: &LayerSpec, out_h: usize, out_w: usize) -> Result<u64> {
    layer.validate()?;
    let (hk, wk) = (layer.kernel_h as u64, layer.kernel_w as u64);
    let (ci, co) = (layer.in_channels as u64, layer.out_channels as u64);
    let spatial = out_h as u64 * out_w as u64;
    Ok(match layer.kind {
        LayerKind::ScConv => hk * wk * ci * co * spatial,
        LayerKind::DwConv => hk * wk * ci * spatial,
        LayerKind::PwConv => ci * co * spatial,
        LayerKind::Fc => ci * co,
        LayerKind::BatchNorm | LayerKind::Relu6 | LayerKind::Gap | LayerKind::Softmax => 0,
    })
}

#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub entries: Vec<(String, u64)>,
}

impl FlopsReport {
    pub fn new() -> FlopsReport {
        FlopsReport { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, count: u64) {
        self.entries.push((name.into(), count));
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    pub fn total_mflops(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

impl Default for FlopsReport {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(flops_of(&LayerSpec::sc(3, 1, 16, 2, 1), 64, 64).unwrap(), 589_824);
        assert_eq!(flops_of(&LayerSpec::dw(3, 16, 1, 1), 64, 64).unwrap(), 589_824);
        assert_eq!(flops_of(&LayerSpec::pw(16, 24), 64, 64).unwrap(), 1_572_864);
        assert_eq!(flops_of(&LayerSpec::fc(256, 12), 1, 1).unwrap(), 3_072);
        assert_eq!(
            flops_of(&LayerSpec::zero_cost(LayerKind::BatchNorm, 16), 64, 64).unwrap(),
            0
        );
        assert_eq!(
            flops_of(&LayerSpec::zero_cost(LayerKind::Softmax, 12), 1, 1).unwrap(),
            0
        );
    }

    #[test]
    fn decomposition_always_cheaper() {
        // dw + pw < sc whenever C_o > 1 and the kernel is larger than 1x1
        for k in [2usize, 3, 5, 7] {
            for ci in [1usize, 3, 16, 64] {
                for co in [2usize, 8, 32, 128] {
                    for (oh, ow) in [(4usize, 4usize), (17, 9), (64, 64)] {
                        let sc = flops_of(&LayerSpec::sc(k, ci, co, 1, 0), oh, ow).unwrap();
                        let dw = flops_of(&LayerSpec::dw(k, ci, 1, 0), oh, ow).unwrap();
                        let pw = flops_of(&LayerSpec::pw(ci, co), oh, ow).unwrap();
                        assert!(dw + pw < sc, "k={k} ci={ci} co={co} oh={oh} ow={ow}");
                    }
                }
            }
        }
    }

    #[test]
    fn report_total_is_sum() {
        let mut r = FlopsReport::new();
        r.push("a", 100);
        r.push("b", 250);
        assert_eq!(r.total(), 350);
        assert!((r.total_mflops() - 350e-6).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut dw = LayerSpec::dw(3, 8, 1, 1);
        dw.out_channels = 9;
        assert!(flops_of(&dw, 4, 4).is_err());
        let mut pw = LayerSpec::pw(4, 8);
        pw.kernel_h = 3;
        assert!(flops_of(&pw, 4, 4).is_err());
        let mut sc = LayerSpec::sc(3, 1, 4, 1, 1);
        sc.stride = 3;
        assert!(flops_of(&sc, 4, 4).is_err());
    }
}
