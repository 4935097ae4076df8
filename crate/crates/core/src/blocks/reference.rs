use super::csp::Bottleneck;
use super::hidden_width;
use crate::error::{Error, Result};
use crate::nn::{ConvBnAct, Ctx, Module, Param};
use crate::rng::Rng;
use crate::tensor::{concat, Element, Tensor};

/// ELAN-style aggregation: two parallel 1x1 transitions, a chain of 3x3 convs
/// off the second, all concatenated and fused. No input-to-output path.
#[derive(Debug, Clone)]
pub struct ElanRef<T: Element> {
    pub t1: ConvBnAct<T>,
    pub t2: ConvBnAct<T>,
    pub chain: Vec<ConvBnAct<T>>,
    pub fuse: ConvBnAct<T>,
}

impl<T: Element> ElanRef<T> {
    pub fn new(c1: usize, c2: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("ELAN reference needs at least one inner conv".into()));
        }
        let c_ = hidden_width(c2, 0.5)?;
        Ok(ElanRef {
            t1: ConvBnAct::new(c1, c_, 1, 1, rng),
            t2: ConvBnAct::new(c1, c_, 1, 1, rng),
            chain: (0..depth).map(|_| ConvBnAct::new(c_, c_, 3, 1, rng)).collect(),
            fuse: ConvBnAct::new((2 + depth) * c_, c2, 1, 1, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let mut ys = vec![self.t1.forward(x, ctx)?, self.t2.forward(x, ctx)?];
        for conv in &self.chain {
            let next = conv.forward(ys.last().expect("transition output"), ctx)?;
            ys.push(next);
        }
        self.fuse.forward(&concat(&ys.iter().collect::<Vec<_>>(), 1)?, ctx)
    }

    pub fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        let (a, s) = self.t1.cost(shape);
        let (b, _) = self.t2.cost(shape);
        let mut macs = a + b;
        for c in &self.chain {
            macs += c.cost(s).0;
        }
        let (m, out) = self.fuse.cost([s[0], (2 + self.chain.len()) * s[1], s[2], s[3]]);
        (macs + m, out)
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.cout()
    }

    /// Zero the 3x3 chain only; transitions and fusion stay live.
    pub fn zero_inner(&mut self) {
        for c in &mut self.chain {
            c.zero_weights();
        }
    }
}

impl<T: Element> Module<T> for ElanRef<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.t1.params();
        out.extend(self.t2.params());
        for c in &self.chain {
            out.extend(c.params());
        }
        out.extend(self.fuse.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.t1.params_mut();
        out.extend(self.t2.params_mut());
        for c in &mut self.chain {
            out.extend(c.params_mut());
        }
        out.extend(self.fuse.params_mut());
        out
    }
}

/// Cross-stage partial block: the first half of the channels bypasses the
/// stage untouched, the second half goes through bottlenecks, then concat and fuse.
#[derive(Debug, Clone)]
pub struct CspRef<T: Element> {
    pub m: Vec<Bottleneck<T>>,
    pub fuse: ConvBnAct<T>,
    split: usize,
}

impl<T: Element> CspRef<T> {
    pub fn new(c1: usize, c2: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        if c1 < 2 || c1 % 2 != 0 {
            return Err(Error::Config(format!("CSP reference needs an even channel count >= 2, got {c1}")));
        }
        let half = c1 / 2;
        Ok(CspRef {
            m: (0..depth).map(|_| Bottleneck::new(half, half, true, 1.0, rng)).collect::<Result<_>>()?,
            fuse: ConvBnAct::new(c1, c2, 1, 1, rng),
            split: half,
        })
    }

    /// `(merged, output)`, `merged` being the concat before fusion.
    pub fn forward_parts(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let [_, c, _, _] = x.dims4("CspRef")?;
        if c != 2 * self.split {
            return Err(Error::shape("CspRef", "input channels", 2 * self.split, c));
        }
        let keep = x.narrow(1, 0, self.split)?;
        let mut y = x.narrow(1, self.split, self.split)?;
        for b in &self.m {
            y = b.forward(&y, ctx)?;
        }
        let merged = concat(&[&keep, &y], 1)?;
        let out = self.fuse.forward(&merged, ctx)?;
        Ok((merged, out))
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        Ok(self.forward_parts(x, ctx)?.1)
    }

    pub fn cost(&self, [n, c, h, w]: [usize; 4]) -> (u64, [usize; 4]) {
        let mut macs = 0;
        for b in &self.m {
            macs += b.cost([n, self.split, h, w]).0;
        }
        let (m, out) = self.fuse.cost([n, c, h, w]);
        (macs + m, out)
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.cout()
    }
}

impl<T: Element> Module<T> for CspRef<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.m.iter().flat_map(|b| b.params()).collect();
        out.extend(self.fuse.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.m.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.fuse.params_mut());
        out
    }
}
