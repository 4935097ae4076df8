use super::csp::{Bottleneck, C3k};
use super::hidden_width;
use crate::attention::{ABlock, AttentionConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvBnAct, Ctx, Module, Param};
use crate::rng::Rng;
use crate::tensor::{concat, Element, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const HEAD_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct RelanConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_bottlenecks: usize,
    /// Scale on the aggregated branch; 0 leaves only the shortcut.
    pub residual_scale: f64,
}

impl RelanConfig {
    pub fn new(in_channels: usize, out_channels: usize, num_bottlenecks: usize) -> Self {
        RelanConfig {
            in_channels,
            out_channels,
            num_bottlenecks,
            residual_scale: DEFAULT_ALPHA,
        }
    }
}

/// Settings for the attention-based aggregation block.
#[derive(Debug, Clone, PartialEq)]
pub struct A2c2fConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub use_area: bool,
    pub area_segments: usize,
    pub mlp_ratio: f64,
    pub perceiver: bool,
    pub residual_scale: f64,
}

impl A2c2fConfig {
    pub fn new(in_channels: usize, out_channels: usize, repeats: usize, use_area: bool) -> Self {
        A2c2fConfig {
            in_channels,
            out_channels,
            repeats,
            use_area,
            area_segments: 4,
            mlp_ratio: 1.2,
            perceiver: true,
            residual_scale: DEFAULT_ALPHA,
        }
    }

    pub fn with_segments(mut self, l: usize) -> Self {
        self.area_segments = l;
        self
    }
}

#[derive(Debug, Clone)]
pub enum AggUnit<T: Element> {
    /// Two attention blocks in sequence.
    Attention(Vec<ABlock<T>>),
    C3k(C3k<T>),
    Bottleneck(Bottleneck<T>),
}

impl<T: Element> AggUnit<T> {
    fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        match self {
            AggUnit::Attention(blocks) => {
                let mut y = x.clone();
                for b in blocks {
                    y = b.forward(&y, ctx)?;
                }
                Ok(y)
            }
            AggUnit::C3k(b) => b.forward(x, ctx),
            AggUnit::Bottleneck(b) => b.forward(x, ctx),
        }
    }

    fn cost(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        match self {
            AggUnit::Attention(blocks) => {
                let mut macs = 0;
                for b in blocks {
                    macs += b.cost(shape)?.0;
                }
                Ok((macs, shape))
            }
            AggUnit::C3k(b) => Ok(b.cost(shape)),
            AggUnit::Bottleneck(b) => Ok(b.cost(shape)),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            AggUnit::Attention(blocks) => blocks.iter().flat_map(|b| b.params()).collect(),
            AggUnit::C3k(b) => b.params(),
            AggUnit::Bottleneck(b) => b.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            AggUnit::Attention(blocks) => blocks.iter_mut().flat_map(|b| b.params_mut()).collect(),
            AggUnit::C3k(b) => b.params_mut(),
            AggUnit::Bottleneck(b) => b.params_mut(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Residual<T: Element> {
    pub alpha: f64,
    /// 1x1 conv + BN when input and output widths differ.
    pub proj: Option<ConvBnAct<T>>,
}

/// Residual layer aggregation: one up-front 1x1 transition, a chain of units
/// whose outputs are all concatenated with the transition output, 1x1 fusion,
/// and optionally `y = shortcut(x) + alpha * fused`.
#[derive(Debug, Clone)]
pub struct Aggregation<T: Element> {
    pub cv1: ConvBnAct<T>,
    pub units: Vec<AggUnit<T>>,
    pub cv2: ConvBnAct<T>,
    pub residual: Option<Residual<T>>,
    hidden: usize,
}

/// The attention aggregation block of the backbone and head.
pub type A2c2f<T> = Aggregation<T>;
/// Standalone bottleneck aggregation with scaled residual.
pub type RElan<T> = Aggregation<T>;

impl<T: Element> Aggregation<T> {
    fn assemble(c1: usize, c2: usize, hidden: usize, units: Vec<AggUnit<T>>, residual: Option<f64>, rng: &mut Rng) -> Result<Self> {
        let residual = match residual {
            Some(alpha) if alpha < 0.0 || !alpha.is_finite() => {
                return Err(Error::Config(format!("residual scale must be finite and >= 0, got {alpha}")))
            }
            Some(alpha) => Some(Residual {
                alpha,
                proj: (c1 != c2).then(|| ConvBnAct::linear(c1, c2, 1, rng)),
            }),
            None => None,
        };
        Ok(Aggregation {
            cv1: ConvBnAct::new(c1, hidden, 1, 1, rng),
            cv2: ConvBnAct::new((1 + units.len()) * hidden, c2, 1, 1, rng),
            units,
            residual,
            hidden,
        })
    }

    pub fn r_elan(cfg: &RelanConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.num_bottlenecks == 0 {
            return Err(Error::Config("R-ELAN needs at least one bottleneck".into()));
        }
        let hidden = hidden_width(cfg.out_channels, 0.5)?;
        let units = (0..cfg.num_bottlenecks)
            .map(|_| Ok(AggUnit::Bottleneck(Bottleneck::new(hidden, hidden, true, 1.0, rng)?)))
            .collect::<Result<_>>()?;
        Self::assemble(cfg.in_channels, cfg.out_channels, hidden, units, Some(cfg.residual_scale), rng)
    }

    /// Attention units (two attention blocks each, heads of width 32 when the
    /// hidden width allows, else one head) with the scaled residual when
    /// `use_area`; C3k units and no residual otherwise.
    pub fn a2c2f(cfg: &A2c2fConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.repeats == 0 {
            return Err(Error::Config("A2C2F needs at least one unit".into()));
        }
        let hidden = hidden_width(cfg.out_channels, 0.5)?;
        let units = (0..cfg.repeats)
            .map(|_| {
                Ok(if cfg.use_area {
                    let heads = if hidden % HEAD_DIM == 0 { hidden / HEAD_DIM } else { 1 };
                    let acfg = AttentionConfig::new(hidden, heads)?
                        .with_segments(cfg.area_segments)
                        .with_mlp_ratio(cfg.mlp_ratio)
                        .with_perceiver(cfg.perceiver);
                    AggUnit::Attention(vec![ABlock::new(acfg.clone(), rng)?, ABlock::new(acfg, rng)?])
                } else {
                    AggUnit::C3k(C3k::new(hidden, hidden, 2, true, rng)?)
                })
            })
            .collect::<Result<_>>()?;
        let residual = cfg.use_area.then_some(cfg.residual_scale);
        Self::assemble(cfg.in_channels, cfg.out_channels, hidden, units, residual, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.cv1.cin()
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.cout()
    }

    /// `(shortcut(x), F(x))`; the shortcut is `None` without a residual.
    pub fn forward_parts(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
        let mut ys = vec![self.cv1.forward(x, ctx)?];
        for unit in &self.units {
            let next = unit.forward(ys.last().expect("transition output"), ctx)?;
            ys.push(next);
        }
        let f = self.cv2.forward(&concat(&ys.iter().collect::<Vec<_>>(), 1)?, ctx)?;
        let shortcut = match &self.residual {
            Some(Residual { proj: Some(p), .. }) => Some(p.forward(x, ctx)?),
            Some(Residual { proj: None, .. }) => Some(x.clone()),
            None => None,
        };
        Ok((shortcut, f))
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let (shortcut, f) = self.forward_parts(x, ctx)?;
        match (shortcut, &self.residual) {
            (Some(s), Some(r)) => s.add(&f.mul_scalar(T::lit(r.alpha))?),
            _ => Ok(f),
        }
    }

    pub fn cost(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let (mut macs, s) = self.cv1.cost(shape);
        for unit in &self.units {
            macs += unit.cost(s)?.0;
        }
        let (m, out) = self.cv2.cost([s[0], (1 + self.units.len()) * self.hidden, s[2], s[3]]);
        macs += m;
        if let Some(Residual { proj: Some(p), .. }) = &self.residual {
            macs += p.cost(shape).0;
        }
        Ok((macs, out))
    }
}

impl<T: Element> Module<T> for Aggregation<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.cv1.params();
        for u in &self.units {
            out.extend(u.params());
        }
        out.extend(self.cv2.params());
        if let Some(Residual { proj: Some(p), .. }) = &self.residual {
            out.extend(p.params());
        }
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.cv1.params_mut();
        for u in &mut self.units {
            out.extend(u.params_mut());
        }
        out.extend(self.cv2.params_mut());
        if let Some(Residual { proj: Some(p), .. }) = &mut self.residual {
            out.extend(p.params_mut());
        }
        out
    }
}
