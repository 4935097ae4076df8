use super::{attention_cost, AreaPartition, AttentionConfig, PartitionAxis};
use crate::error::{Error, Result};
use crate::nn::{chain, chain_mut, ConvBnAct, Ctx, DwSeparable, Module, Param};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const PERCEIVER_KERNEL: usize = 7;

/// Multi-head self-attention over area segments of a feature map.
///
/// `qkv` and `proj` are 1x1 conv + BN; there is no positional encoding. The
/// optional position perceiver is a 7x7 separable conv of V added to the
/// attention output before `proj`.
#[derive(Debug, Clone)]
pub struct AreaAttention<T: Element> {
    pub cfg: AttentionConfig,
    pub qkv: ConvBnAct<T>,
    pub proj: ConvBnAct<T>,
    pub pe: Option<DwSeparable<T>>,
}

impl<T: Element> AreaAttention<T> {
    pub fn new(cfg: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let pe = if cfg.perceiver {
            Some(DwSeparable::new(c, PERCEIVER_KERNEL, rng)?)
        } else {
            None
        };
        Ok(AreaAttention {
            qkv: ConvBnAct::linear(c, 3 * c, 1, rng),
            proj: ConvBnAct::linear(c, c, 1, rng),
            pe,
            cfg,
        })
    }

    pub fn partition(&self, h: usize, w: usize) -> Result<AreaPartition> {
        AreaPartition::new(h, w, self.cfg.area_segments, self.cfg.axis)
    }

    /// `[N, C, H, W]` -> `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = x.dims4("area_attention")?;
        if c != self.cfg.channels {
            return Err(Error::shape("area_attention", "channels", self.cfg.channels, c));
        }
        let part = self.partition(h, w)?;
        let y = self.mix(x, &part, self.pe.as_ref(), ctx)?;
        self.proj.forward(&y, ctx)
    }

    /// Full attention over a token sequence `[N, n, C]` (one area, no perceiver).
    pub fn full_attention(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let (n, len, c) = match x.shape() {
            &[n, len, c] => (n, len, c),
            other => return Err(Error::shape("full_attention", "rank", "[N, n, C]", format!("{other:?}"))),
        };
        if c != self.cfg.channels {
            return Err(Error::shape("full_attention", "channels", self.cfg.channels, c));
        }
        let grid = x.permute(&[0, 2, 1])?.reshape(&[n, c, 1, len])?;
        let part = AreaPartition::new(1, len, 1, PartitionAxis::Horizontal)?;
        let y = self.proj.forward(&self.mix(&grid, &part, None, ctx)?, ctx)?;
        y.reshape(&[n, c, len])?.permute(&[0, 2, 1])
    }

    /// The 7x7 separable conv applied to a spatial value map.
    pub fn position_perceiver(&self, v: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        match &self.pe {
            Some(pe) => pe.forward(v, ctx),
            None => Err(Error::Config("attention built without a position perceiver".into())),
        }
    }

    /// Everything before the output projection.
    fn mix(&self, x: &Tensor<T>, part: &AreaPartition, pe: Option<&DwSeparable<T>>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let c = self.cfg.channels;
        let (heads, d) = (self.cfg.heads, self.cfg.head_dim());
        let tokens = part.split(&self.qkv.forward(x, ctx)?)?;
        let (b, m) = (tokens.shape()[0], tokens.shape()[1]);
        let split_heads = |t: Tensor<T>| t.reshape(&[b, m, heads, d])?.permute(&[0, 2, 1, 3]);
        let q = split_heads(tokens.narrow(2, 0, c)?.mul_scalar(T::lit(1.0 / (d as f64).sqrt()))?)?;
        let k = split_heads(tokens.narrow(2, c, c)?)?;
        let v_tok = tokens.narrow(2, 2 * c, c)?;
        let v = split_heads(v_tok.clone())?;
        let attn = q.matmul_t(&k)?.softmax(3)?;
        let o = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, m, c])?;
        let y = part.merge(&o)?;
        match pe {
            Some(pe) => y.add(&pe.forward(&part.merge(&v_tok)?, ctx)?),
            None => Ok(y),
        }
    }

    /// Analytic MACs and output shape.
    pub fn cost(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let [n, c, h, w] = shape;
        if c != self.cfg.channels {
            return Err(Error::shape("area_attention", "channels", self.cfg.channels, c));
        }
        let mut macs = self.qkv.cost(shape).0 + self.proj.cost(shape).0;
        macs += n as u64 * attention_cost(h * w, self.cfg.heads, self.cfg.head_dim(), self.cfg.area_segments)?;
        if let Some(pe) = &self.pe {
            macs += pe.cost(shape);
        }
        Ok((macs, shape))
    }
}

impl<T: Element> Module<T> for AreaAttention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        chain([
            self.qkv.params(),
            self.pe.as_ref().map(|p| p.params()).unwrap_or_default(),
            self.proj.params(),
        ])
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        chain_mut([
            self.qkv.params_mut(),
            self.pe.as_mut().map(|p| p.params_mut()).unwrap_or_default(),
            self.proj.params_mut(),
        ])
    }
}

/// Two pointwise layers, SiLU between. The caller adds the residual.
#[derive(Debug, Clone)]
pub struct AttentionMlp<T: Element> {
    pub fc1: ConvBnAct<T>,
    pub fc2: ConvBnAct<T>,
}

impl<T: Element> AttentionMlp<T> {
    pub fn new(cfg: &AttentionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.mlp_hidden();
        Ok(AttentionMlp {
            fc1: ConvBnAct::new(cfg.channels, hidden, 1, 1, rng),
            fc2: ConvBnAct::linear(hidden, cfg.channels, 1, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.cout()
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x, ctx)?, ctx)
    }

    /// Token-sequence form, `[N, n, C]`.
    pub fn forward_tokens(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let (n, len, c) = match x.shape() {
            &[n, len, c] => (n, len, c),
            other => return Err(Error::shape("attention_mlp", "rank", "[N, n, C]", format!("{other:?}"))),
        };
        let grid = x.permute(&[0, 2, 1])?.reshape(&[n, c, 1, len])?;
        self.forward(&grid, ctx)?.reshape(&[n, c, len])?.permute(&[0, 2, 1])
    }

    pub fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        let (a, mid) = self.fc1.cost(shape);
        let (b, out) = self.fc2.cost(mid);
        (a + b, out)
    }
}

impl<T: Element> Module<T> for AttentionMlp<T> {
    fn params(&self) -> Vec<&Param<T>> {
        chain([self.fc1.params(), self.fc2.params()])
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        chain_mut([self.fc1.params_mut(), self.fc2.params_mut()])
    }
}

/// `x + attn(x)` followed by `y + mlp(y)`.
#[derive(Debug, Clone)]
pub struct ABlock<T: Element> {
    pub attn: AreaAttention<T>,
    pub mlp: AttentionMlp<T>,
}

impl<T: Element> ABlock<T> {
    pub fn new(cfg: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        let mlp = AttentionMlp::new(&cfg, rng)?;
        Ok(ABlock {
            attn: AreaAttention::new(cfg, rng)?,
            mlp,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let y = x.add(&self.attn.forward(x, ctx)?)?;
        y.add(&self.mlp.forward(&y, ctx)?)
    }

    pub fn cost(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let (a, _) = self.attn.cost(shape)?;
        let (m, _) = self.mlp.cost(shape);
        Ok((a + m, shape))
    }
}

impl<T: Element> Module<T> for ABlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        chain([self.attn.params(), self.mlp.params()])
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        chain_mut([self.attn.params_mut(), self.mlp.params_mut()])
    }
}
