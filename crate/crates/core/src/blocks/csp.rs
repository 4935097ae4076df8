use super::hidden_width;
use crate::error::{Error, Result};
use crate::nn::{chain, chain_mut, ConvBnAct, Ctx, Module, Param};
use crate::rng::Rng;
use crate::tensor::{concat, Element, Tensor};

/// Two 3x3 conv-BN-SiLU layers with an identity shortcut when shapes allow.
#[derive(Debug, Clone)]
pub struct Bottleneck<T: Element> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub add: bool,
}

impl<T: Element> Bottleneck<T> {
    pub fn new(c1: usize, c2: usize, shortcut: bool, e: f64, rng: &mut Rng) -> Result<Self> {
        let c_ = hidden_width(c2, e)?;
        Ok(Bottleneck {
            cv1: ConvBnAct::new(c1, c_, 3, 1, rng),
            cv2: ConvBnAct::new(c_, c2, 3, 1, rng),
            add: shortcut && c1 == c2,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let y = self.cv2.forward(&self.cv1.forward(x, ctx)?, ctx)?;
        if self.add {
            x.add(&y)
        } else {
            Ok(y)
        }
    }

    pub fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        let (a, mid) = self.cv1.cost(shape);
        let (b, out) = self.cv2.cost(mid);
        (a + b, out)
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.cout()
    }
}

impl<T: Element> Module<T> for Bottleneck<T> {
    fn params(&self) -> Vec<&Param<T>> {
        chain([self.cv1.params(), self.cv2.params()])
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        chain_mut([self.cv1.params_mut(), self.cv2.params_mut()])
    }
}

/// CSP block with two parallel 1x1 stems, a bottleneck stack on one, and 1x1 fusion.
#[derive(Debug, Clone)]
pub struct C3k<T: Element> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub cv3: ConvBnAct<T>,
    pub m: Vec<Bottleneck<T>>,
}

impl<T: Element> C3k<T> {
    pub fn new(c1: usize, c2: usize, n: usize, shortcut: bool, rng: &mut Rng) -> Result<Self> {
        let c_ = hidden_width(c2, 0.5)?;
        Ok(C3k {
            cv1: ConvBnAct::new(c1, c_, 1, 1, rng),
            cv2: ConvBnAct::new(c1, c_, 1, 1, rng),
            cv3: ConvBnAct::new(2 * c_, c2, 1, 1, rng),
            m: (0..n).map(|_| Bottleneck::new(c_, c_, shortcut, 1.0, rng)).collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let mut a = self.cv1.forward(x, ctx)?;
        for b in &self.m {
            a = b.forward(&a, ctx)?;
        }
        let b = self.cv2.forward(x, ctx)?;
        self.cv3.forward(&concat(&[&a, &b], 1)?, ctx)
    }

    pub fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        let (mut macs, mut s) = self.cv1.cost(shape);
        for b in &self.m {
            let (m, o) = b.cost(s);
            macs += m;
            s = o;
        }
        let (m2, s2) = self.cv2.cost(shape);
        let (m3, out) = self.cv3.cost([s[0], s[1] + s2[1], s[2], s[3]]);
        (macs + m2 + m3, out)
    }

    pub fn out_channels(&self) -> usize {
        self.cv3.cout()
    }
}

impl<T: Element> Module<T> for C3k<T> {
    fn params(&self) -> Vec<&Param<T>> {
        chain(
            [self.cv1.params(), self.cv2.params(), self.cv3.params()]
                .into_iter()
                .chain(self.m.iter().map(|b| b.params())),
        )
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = chain_mut([self.cv1.params_mut(), self.cv2.params_mut(), self.cv3.params_mut()]);
        for b in &mut self.m {
            out.extend(b.params_mut());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum CspUnit<T: Element> {
    Bottleneck(Bottleneck<T>),
    C3k(C3k<T>),
}

impl<T: Element> CspUnit<T> {
    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        match self {
            CspUnit::Bottleneck(b) => b.forward(x, ctx),
            CspUnit::C3k(b) => b.forward(x, ctx),
        }
    }

    pub fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        match self {
            CspUnit::Bottleneck(b) => b.cost(shape),
            CspUnit::C3k(b) => b.cost(shape),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            CspUnit::Bottleneck(b) => b.params(),
            CspUnit::C3k(b) => b.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            CspUnit::Bottleneck(b) => b.params_mut(),
            CspUnit::C3k(b) => b.params_mut(),
        }
    }
}

/// 1x1 transition to two streams of `c = c2*e` channels; units chain off the
/// second stream; every intermediate is concatenated and fused back to `c2`.
#[derive(Debug, Clone)]
pub struct C3k2<T: Element> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub m: Vec<CspUnit<T>>,
    pub c: usize,
}

impl<T: Element> C3k2<T> {
    pub fn new(c1: usize, c2: usize, n: usize, c3k: bool, e: f64, shortcut: bool, rng: &mut Rng) -> Result<Self> {
        if !(e > 0.0 && e <= 1.0) {
            return Err(Error::Config(format!("C3k2 expansion must lie in (0, 1], got {e}")));
        }
        if n == 0 {
            return Err(Error::Config("C3k2 needs at least one unit".into()));
        }
        let c = hidden_width(c2, e)?;
        let m = (0..n)
            .map(|_| {
                Ok(if c3k {
                    CspUnit::C3k(C3k::new(c, c, 2, shortcut, rng)?)
                } else {
                    CspUnit::Bottleneck(Bottleneck::new(c, c, shortcut, 0.5, rng)?)
                })
            })
            .collect::<Result<_>>()?;
        Ok(C3k2 {
            cv1: ConvBnAct::new(c1, 2 * c, 1, 1, rng),
            cv2: ConvBnAct::new((2 + n) * c, c2, 1, 1, rng),
            m,
            c,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let mut ys = self.cv1.forward(x, ctx)?.chunk(2, 1)?;
        for unit in &self.m {
            let next = unit.forward(ys.last().expect("two streams"), ctx)?;
            ys.push(next);
        }
        self.cv2.forward(&concat(&ys.iter().collect::<Vec<_>>(), 1)?, ctx)
    }

    pub fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        let (mut macs, s) = self.cv1.cost(shape);
        let mut s = [s[0], self.c, s[2], s[3]];
        for unit in &self.m {
            let (m, o) = unit.cost(s);
            macs += m;
            s = o;
        }
        let (m, out) = self.cv2.cost([s[0], (2 + self.m.len()) * self.c, s[2], s[3]]);
        (macs + m, out)
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.cout()
    }
}

impl<T: Element> Module<T> for C3k2<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.cv1.params();
        for u in &self.m {
            out.extend(u.params());
        }
        out.extend(self.cv2.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.cv1.params_mut();
        for u in &mut self.m {
            out.extend(u.params_mut());
        }
        out.extend(self.cv2.params_mut());
        out
    }
}
