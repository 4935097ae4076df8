use super::{chain, chain_mut, Ctx, Mode, Module, Param, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{batch_norm, conv2d, Conv2dParams, Element, Tensor};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

fn conv_weight<T: Element>(cout: usize, cin_g: usize, k: usize, rng: &mut Rng) -> Tensor<T> {
    let n = cout * cin_g * k * k;
    let data = (0..n).map(|_| T::lit(rng.trunc_normal(INIT_STD))).collect();
    Tensor::from_vec(vec![cout, cin_g, k, k], data).expect("finite init")
}

/// Output spatial extent of a square conv with "same"-style padding.
pub(crate) fn out_hw(h: usize, w: usize, k: usize, s: usize) -> [usize; 2] {
    let p = Conv2dParams::new(s, (k - 1) / 2, 1);
    [p.out_extent(h, k).unwrap_or(0), p.out_extent(w, k).unwrap_or(0)]
}

/// Plain convolution with bias (used for prediction layers).
#[derive(Debug, Clone)]
pub struct Conv<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Element> Conv<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Conv {
            weight: Param::new(ParamKind::ConvWeight, conv_weight(cout, cin, k, rng)),
            bias: Param::new(ParamKind::Bias, Tensor::zeros(vec![cout])),
            stride,
        }
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let k = self.k();
        conv2d(
            x,
            &ctx.p(&self.weight),
            Some(&ctx.p(&self.bias)),
            Conv2dParams::new(self.stride, (k - 1) / 2, 1),
        )
    }

    pub fn cost(&self, [n, _, h, w]: [usize; 4]) -> (u64, [usize; 4]) {
        let [ho, wo] = out_hw(h, w, self.k(), self.stride);
        let k = self.k();
        ((n * self.cin() * self.cout() * k * k * ho * wo) as u64, [n, self.cout(), ho, wo])
    }
}

impl<T: Element> Module<T> for Conv<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Convolution (no bias) -> batch norm -> optional SiLU, padding `(k-1)/2`.
#[derive(Debug, Clone)]
pub struct ConvBnAct<T: Element> {
    pub weight: Param<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub stride: usize,
    pub groups: usize,
    pub act: bool,
}

impl<T: Element> ConvBnAct<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Self::with(cin, cout, k, stride, 1, true, rng)
    }

    /// Without activation (projections, MLP output).
    pub fn linear(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with(cin, cout, k, 1, 1, false, rng)
    }

    pub fn with(cin: usize, cout: usize, k: usize, stride: usize, groups: usize, act: bool, rng: &mut Rng) -> Self {
        assert!(groups >= 1 && cin % groups == 0, "groups must divide input channels");
        ConvBnAct {
            weight: Param::new(ParamKind::ConvWeight, conv_weight(cout, cin / groups, k, rng)),
            gamma: Param::new(ParamKind::BnGamma, Tensor::ones(vec![cout])),
            beta: Param::new(ParamKind::BnBeta, Tensor::zeros(vec![cout])),
            running_mean: Param::new(ParamKind::BnRunningMean, Tensor::zeros(vec![cout])),
            running_var: Param::new(ParamKind::BnRunningVar, Tensor::ones(vec![cout])),
            stride,
            groups,
            act,
        }
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn cin(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4("ConvBnAct")?;
        if c != self.cin() {
            return Err(Error::shape("ConvBnAct", "input channels", self.cin(), c));
        }
        let k = self.k();
        let y = conv2d(
            x,
            &ctx.p(&self.weight),
            None,
            Conv2dParams::new(self.stride, (k - 1) / 2, self.groups),
        )?;
        let training = ctx.mode() == Mode::Train;
        let bn = batch_norm(
            &y,
            &ctx.p(&self.gamma),
            &ctx.p(&self.beta),
            self.running_mean.value(),
            self.running_var.value(),
            T::lit(BN_EPS),
            T::lit(ctx.bn_momentum().unwrap_or(BN_MOMENTUM)),
            training,
        )?;
        if let Some((m, v)) = bn.updated_stats {
            ctx.push_stats(&self.running_mean, &self.running_var, m, v);
        }
        if self.act {
            bn.y.silu()
        } else {
            Ok(bn.y)
        }
    }

    pub fn cost(&self, [n, _, h, w]: [usize; 4]) -> (u64, [usize; 4]) {
        let k = self.k();
        let [ho, wo] = out_hw(h, w, k, self.stride);
        let macs = n * (self.cin() / self.groups) * self.cout() * k * k * ho * wo;
        (macs as u64, [n, self.cout(), ho, wo])
    }
}

impl<T: Element> Module<T> for ConvBnAct<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.weight,
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// Depthwise `k x k` followed by pointwise `1 x 1`, no bias or norm.
/// Spatial size is preserved (padding `(k-1)/2`, `k` odd).
#[derive(Debug, Clone)]
pub struct DwSeparable<T: Element> {
    pub depthwise: Param<T>,
    pub pointwise: Param<T>,
}

impl<T: Element> DwSeparable<T> {
    pub fn new(channels: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise separable conv needs an odd kernel to preserve size, got {k}"
            )));
        }
        Ok(DwSeparable {
            depthwise: Param::new(ParamKind::ConvWeight, conv_weight(channels, 1, k, rng)),
            pointwise: Param::new(ParamKind::ConvWeight, conv_weight(channels, channels, 1, rng)),
        })
    }

    pub fn channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.depthwise.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        let k = self.k();
        let d = conv2d(x, &ctx.p(&self.depthwise), None, Conv2dParams::new(1, (k - 1) / 2, c))?;
        conv2d(&d, &ctx.p(&self.pointwise), None, Conv2dParams::default())
    }

    pub fn cost(&self, [n, c, h, w]: [usize; 4]) -> u64 {
        let k = self.k();
        (n * c * k * k * h * w + n * c * c * h * w) as u64
    }
}

impl<T: Element> Module<T> for DwSeparable<T> {
    fn params(&self) -> Vec<&Param<T>> {
        chain([vec![&self.depthwise], vec![&self.pointwise]])
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        chain_mut([vec![&mut self.depthwise], vec![&mut self.pointwise]])
    }
}
