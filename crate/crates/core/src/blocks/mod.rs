//! Composite blocks: bottleneck, C3k, C3k2, the residual aggregation used by
//! R-ELAN and A2C2F, and ELAN / CSP reference blocks.

mod csp;
mod reference;
mod relan;

pub use csp::{Bottleneck, C3k, C3k2, CspUnit};
pub use reference::{CspRef, ElanRef};
pub use relan::{A2c2f, A2c2fConfig, AggUnit, Aggregation, RElan, RelanConfig, Residual, DEFAULT_ALPHA, HEAD_DIM};

use crate::error::{Error, Result};
use crate::nn::{ConvBnAct, Ctx, Module, Param};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// `round(c * e)` (halves up); zero is an error.
pub fn hidden_width(c: usize, e: f64) -> Result<usize> {
    let h = (c as f64 * e + 0.5).floor() as usize;
    if h == 0 {
        return Err(Error::Config(format!("hidden width of {c} x {e} rounds to zero")));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    ConvBnSilu,
    Bottleneck,
    C3k2,
    A2C2F,
    RELAN,
    ElanRef,
    CspRef,
}

impl BlockKind {
    pub const ALL: [BlockKind; 7] = [
        BlockKind::ConvBnSilu,
        BlockKind::Bottleneck,
        BlockKind::C3k2,
        BlockKind::A2C2F,
        BlockKind::RELAN,
        BlockKind::ElanRef,
        BlockKind::CspRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::ConvBnSilu => "Conv",
            BlockKind::Bottleneck => "Bottleneck",
            BlockKind::C3k2 => "C3k2",
            BlockKind::A2C2F => "A2C2F",
            BlockKind::RELAN => "R-ELAN",
            BlockKind::ElanRef => "ELAN_ref",
            BlockKind::CspRef => "CSP_ref",
        }
    }
}

/// Declarative description of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub repeats: usize,
    pub kernel: usize,
    pub stride: usize,
    /// C3k2 hidden ratio.
    pub expansion: f64,
    /// C3k2: C3k units instead of bottlenecks.
    pub c3k: bool,
    pub use_area: bool,
    pub area_segments: usize,
    pub shortcut: bool,
    pub residual_scale: f64,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, c_in: usize, c_out: usize) -> Self {
        BlockSpec {
            kind,
            c_in,
            c_out,
            repeats: 1,
            kernel: 3,
            stride: 1,
            expansion: 0.5,
            c3k: false,
            use_area: true,
            area_segments: 4,
            shortcut: true,
            residual_scale: DEFAULT_ALPHA,
        }
    }

    pub fn repeats(mut self, n: usize) -> Self {
        self.repeats = n;
        self
    }

    pub fn build<T: Element>(&self, rng: &mut Rng) -> Result<Block<T>> {
        if self.repeats == 0 {
            return Err(Error::Config(format!("{}: repeat count must be >= 1", self.kind.name())));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config(format!("{}: channel counts must be positive", self.kind.name())));
        }
        let block = match self.kind {
            BlockKind::ConvBnSilu => {
                if self.kernel % 2 == 0 || self.stride == 0 {
                    return Err(Error::Config(format!(
                        "Conv: kernel {} / stride {} unsupported",
                        self.kernel, self.stride
                    )));
                }
                Block::Conv(ConvBnAct::new(self.c_in, self.c_out, self.kernel, self.stride, rng))
            }
            BlockKind::Bottleneck => Block::Bottleneck(Bottleneck::new(self.c_in, self.c_out, self.shortcut, 0.5, rng)?),
            BlockKind::C3k2 => Block::C3k2(C3k2::new(
                self.c_in,
                self.c_out,
                self.repeats,
                self.c3k,
                self.expansion,
                self.shortcut,
                rng,
            )?),
            BlockKind::A2C2F => {
                let mut cfg = A2c2fConfig::new(self.c_in, self.c_out, self.repeats, self.use_area);
                cfg.area_segments = self.area_segments;
                cfg.residual_scale = self.residual_scale;
                Block::Aggregation(Aggregation::a2c2f(&cfg, rng)?)
            }
            BlockKind::RELAN => {
                let mut cfg = RelanConfig::new(self.c_in, self.c_out, self.repeats);
                cfg.residual_scale = self.residual_scale;
                Block::Aggregation(Aggregation::r_elan(&cfg, rng)?)
            }
            BlockKind::ElanRef => Block::Elan(ElanRef::new(self.c_in, self.c_out, self.repeats, rng)?),
            BlockKind::CspRef => Block::Csp(CspRef::new(self.c_in, self.c_out, self.repeats, rng)?),
        };
        if block.out_channels() != self.c_out {
            return Err(Error::Config(format!(
                "{}: built {} output channels, declared {}",
                self.kind.name(),
                block.out_channels(),
                self.c_out
            )));
        }
        Ok(block)
    }
}

#[derive(Debug, Clone)]
pub enum Block<T: Element> {
    Conv(ConvBnAct<T>),
    Bottleneck(Bottleneck<T>),
    C3k2(C3k2<T>),
    Aggregation(Aggregation<T>),
    Elan(ElanRef<T>),
    Csp(CspRef<T>),
}

impl<T: Element> Block<T> {
    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        match self {
            Block::Conv(b) => b.forward(x, ctx),
            Block::Bottleneck(b) => b.forward(x, ctx),
            Block::C3k2(b) => b.forward(x, ctx),
            Block::Aggregation(b) => b.forward(x, ctx),
            Block::Elan(b) => b.forward(x, ctx),
            Block::Csp(b) => b.forward(x, ctx),
        }
    }

    /// Analytic MACs and output shape for an `[N, C, H, W]` input.
    pub fn cost(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        Ok(match self {
            Block::Conv(b) => b.cost(shape),
            Block::Bottleneck(b) => b.cost(shape),
            Block::C3k2(b) => b.cost(shape),
            Block::Aggregation(b) => b.cost(shape)?,
            Block::Elan(b) => b.cost(shape),
            Block::Csp(b) => b.cost(shape),
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Conv(b) => b.cout(),
            Block::Bottleneck(b) => b.out_channels(),
            Block::C3k2(b) => b.out_channels(),
            Block::Aggregation(b) => b.out_channels(),
            Block::Elan(b) => b.out_channels(),
            Block::Csp(b) => b.out_channels(),
        }
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Block::Conv(b) => b.params(),
            Block::Bottleneck(b) => b.params(),
            Block::C3k2(b) => b.params(),
            Block::Aggregation(b) => b.params(),
            Block::Elan(b) => b.params(),
            Block::Csp(b) => b.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Block::Conv(b) => b.params_mut(),
            Block::Bottleneck(b) => b.params_mut(),
            Block::C3k2(b) => b.params_mut(),
            Block::Aggregation(b) => b.params_mut(),
            Block::Elan(b) => b.params_mut(),
            Block::Csp(b) => b.params_mut(),
        }
    }
}

#[cfg(test)]
mod tests;
