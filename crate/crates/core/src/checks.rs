//! Finite-difference gradient checks over every differentiable op and block,
//! shared by the CLI and the test suites. All checks run in fp64.

use crate::attention::{ABlock, AreaAttention, AttentionConfig, AttentionMlp, PartitionAxis};
use crate::blocks::{A2c2fConfig, Aggregation, BlockKind, BlockSpec, RelanConfig};
use crate::error::Result;
use crate::model::{ModelConfig, Scale};
use crate::nn::{Ctx, Mode, Module};
use crate::rng::Rng;
use crate::tensor::{
    batch_norm, bce_with_logits, concat, conv2d, gather_cells, gradcheck_coords, ltrb_iou_loss, softmax,
    upsample_nearest, Conv2dParams, Tensor,
};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Ops,
    Attention,
    Blocks,
}

impl std::str::FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "ops" => Ok(Suite::Ops),
            "attention" => Ok(Suite::Attention),
            "blocks" => Ok(Suite::Blocks),
            other => Err(crate::Error::Config(format!("unknown gradcheck module '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// All coordinates when there are at most `max`, otherwise one per stride of
/// `numel / max`, jittered inside the stride so channel-aligned strides do
/// not always hit the same spatial position.
pub fn sample_coords(numel: usize, max: usize) -> Vec<usize> {
    let max = max.max(1);
    if numel <= max {
        return (0..numel).collect();
    }
    let step = numel / max;
    (0..max).map(|i| i * step + (i * 7919 + 13) % step).collect()
}

struct Runner {
    rng: Rng,
    out: Vec<CheckResult>,
    max_coords: usize,
}

impl Runner {
    /// Check `sum(f(x) * r)` for a fixed random `r`.
    fn check(
        &mut self,
        name: impl Into<String>,
        x: Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    ) -> Result<()> {
        let probe = f(&x)?;
        let r: Tensor<f64> = self.rng.normal_tensor(probe.shape(), 1.0);
        let coords = sample_coords(x.numel(), self.max_coords);
        let rep = gradcheck_coords(|x| f(x)?.mul(&r)?.sum(), &x, EPS, &coords)?;
        self.out.push(CheckResult {
            name: name.into(),
            max_rel_error: rep.max_rel_error,
            coords: rep.coords_checked,
        });
        Ok(())
    }

    fn x(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.rng.normal_tensor(shape, 1.0)
    }

    /// Same check for a module in both BN modes. Running statistics are
    /// first set to the batch statistics of `x`, so eval mode sees
    /// normalized activations as a trained network would.
    fn module<M: Module<f64>>(
        &mut self,
        name: &str,
        x: Tensor<f64>,
        m: &mut M,
        fwd: impl Fn(&M, &Tensor<f64>, &Ctx<f64>) -> Result<Tensor<f64>>,
    ) -> Result<()> {
        let ctx = Ctx::calibration();
        fwd(m, &x, &ctx)?;
        ctx.apply_stat_updates(m)?;
        let m = &*m;
        for mode in [Mode::Eval, Mode::Train] {
            let label = format!("{name} ({})", if mode == Mode::Eval { "eval" } else { "train" });
            self.check(label, x.clone(), |x| fwd(m, x, &Ctx::new(mode, x.tape().cloned())))?;
        }
        Ok(())
    }
}

fn ops(r: &mut Runner) -> Result<()> {
    let a = r.x(&[2, 3, 4, 5]);
    let b = r.x(&[2, 3, 4, 5]);
    r.check("add", a.clone(), |x| x.add(&b))?;
    r.check("sub", a.clone(), |x| b.sub(x))?;
    r.check("mul", a.clone(), |x| x.mul(&b))?;
    r.check("mul_scalar", a.clone(), |x| x.mul_scalar(-1.5))?;
    r.check("sigmoid", a.clone(), |x| x.sigmoid())?;
    r.check("silu", a.clone(), |x| x.silu())?;
    r.check("mean", a.clone(), |x| x.mean())?;
    r.check("softmax", a.clone(), |x| softmax(x, 3))?;
    r.check("softmax axis 1", a.clone(), |x| x.softmax(1))?;
    r.check("permute", a.clone(), |x| x.permute(&[0, 2, 3, 1])?.reshape(&[2, 60]))?;
    r.check("transpose", a.clone(), |x| x.transpose(1, 3))?;
    r.check("narrow", a.clone(), |x| x.narrow(2, 1, 2))?;
    r.check("chunk", a.clone(), |x| {
        let p = x.chunk(2, 2)?;
        p[1].mul(&p[0])
    })?;
    r.check("concat", a.clone(), |x| concat(&[x, &b, x], 1))?;
    r.check("upsample", a.clone(), |x| upsample_nearest(x, 2))?;
    let m = r.x(&[3, 5, 4]);
    let n = r.x(&[3, 4, 6]);
    r.check("matmul lhs", m.clone(), |x| x.matmul(&n))?;
    r.check("matmul rhs", n.clone(), |x| m.matmul(x))?;
    let nt = r.x(&[3, 6, 4]);
    r.check("matmul_t", m.clone(), |x| x.matmul_t(&nt))?;
    let w = r.x(&[6, 3, 3, 3]);
    let bias = r.x(&[6]);
    let s2 = Conv2dParams {
        stride: 2,
        padding: 1,
        groups: 1,
    };
    r.check("conv2d input", a.clone(), |x| conv2d(x, &w, Some(&bias), s2))?;
    r.check("conv2d weight", w.clone(), |w| conv2d(&a, w, Some(&bias), s2))?;
    r.check("conv2d bias", bias.clone(), |bi| conv2d(&a, &w, Some(bi), s2))?;
    let dw = r.x(&[3, 1, 3, 3]);
    let depthwise = Conv2dParams {
        stride: 1,
        padding: 1,
        groups: 3,
    };
    r.check("conv2d depthwise", a.clone(), |x| conv2d(x, &dw, None, depthwise))?;
    let gamma = r.rng.uniform_tensor(&[3], 0.5, 1.5);
    let beta = r.x(&[3]);
    let mean = r.x(&[3]);
    let var = r.rng.uniform_tensor(&[3], 0.5, 1.5);
    for training in [false, true] {
        let tag = if training { "train" } else { "eval" };
        r.check(format!("batch_norm input ({tag})"), a.clone(), |x| {
            Ok(batch_norm(x, &gamma, &beta, &mean, &var, 1e-5, 0.1, training)?.y)
        })?;
        r.check(format!("batch_norm gamma ({tag})"), gamma.clone(), |g| {
            Ok(batch_norm(&a, g, &beta, &mean, &var, 1e-5, 0.1, training)?.y)
        })?;
    }
    let t = Tensor::from_fn(vec![2, 3, 4, 5], |i| (i % 3 == 0) as u8 as f64)?;
    r.check("bce_with_logits", a.clone(), |x| bce_with_logits(x, &t, 4.0))?;
    let cells = [(0, 1, 2), (1, 3, 4), (1, 0, 0)];
    r.check("gather_cells", a.clone(), |x| gather_cells(x, &cells, 1, 2))?;
    // strictly inside the smooth region: prediction below target on every side
    let target = Tensor::from_vec(vec![3, 4], vec![2.0, 3.0, 2.5, 1.5, 1.0, 1.0, 4.0, 2.0, 3.0, 2.0, 1.0, 2.5])?;
    let pred = target.map_values(|v| v * 0.7)?;
    r.check("ltrb_iou_loss", pred, |x| ltrb_iou_loss(x, &target, 1e-3))?;
    Ok(())
}

fn attention(r: &mut Runner) -> Result<()> {
    for (axis, segments, perceiver) in [
        (PartitionAxis::Horizontal, 2, true),
        (PartitionAxis::Vertical, 4, true),
        (PartitionAxis::Horizontal, 1, false),
    ] {
        let cfg = AttentionConfig::new(8, 2)?
            .with_axis(axis)
            .with_segments(segments)
            .with_perceiver(perceiver);
        let mut layer = AreaAttention::<f64>::new(cfg.clone(), &mut r.rng)?;
        layer.randomize(&mut r.rng);
        let x = r.x(&[1, 8, 4, 4]);
        let name = format!("area attention L={segments} {axis:?} perceiver={perceiver}");
        r.module(&name, x, &mut layer, |m, x, c| m.forward(x, c))?;
    }
    let cfg = AttentionConfig::new(8, 2)?.with_perceiver(false);
    let mut layer = AreaAttention::<f64>::new(cfg.clone(), &mut r.rng)?;
    layer.randomize(&mut r.rng);
    let tokens = r.x(&[2, 6, 8]);
    r.module("full attention", tokens, &mut layer, |m, x, c| m.full_attention(x, c))?;
    let mut mlp = AttentionMlp::<f64>::new(&cfg, &mut r.rng)?;
    mlp.randomize(&mut r.rng);
    let x = r.x(&[1, 8, 3, 3]);
    r.module("attention mlp", x, &mut mlp, |m, x, c| m.forward(x, c))?;
    let mut block = ABlock::<f64>::new(cfg.with_perceiver(true).with_segments(2), &mut r.rng)?;
    block.randomize(&mut r.rng);
    let x = r.x(&[1, 8, 4, 4]);
    r.module("attention block", x, &mut block, |m, x, c| m.forward(x, c))?;
    Ok(())
}

fn blocks(r: &mut Runner) -> Result<()> {
    for kind in BlockKind::ALL {
        for c3k in [false, true] {
            if c3k && !matches!(kind, BlockKind::C3k2 | BlockKind::A2C2F) {
                continue;
            }
            let mut spec = BlockSpec::new(kind, 4, 4).repeats(2);
            spec.c3k = c3k;
            let mut block = spec.build::<f64>(&mut r.rng)?;
            block.randomize(&mut r.rng);
            let x = r.x(&[1, 4, 4, 4]);
            let name = format!("{}{}", kind.name(), if c3k { " c3k" } else { "" });
            r.module(&name, x, &mut block, |m, x, c| m.forward(x, c))?;
        }
    }
    Ok(())
}

/// A2C2F and R-ELAN at the widths and depth of each scale's stride-16
/// attention stage, on a `spatial x spatial` input.
pub fn scale_width_checks(scales: &[Scale], spatial: usize, max_coords: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = Runner {
        rng: Rng::seed(seed),
        out: Vec::new(),
        max_coords,
    };
    for &scale in scales {
        let mc = ModelConfig::new(scale);
        let c = mc.channels(512);
        let repeats = mc.repeats(4);
        let mut a2 = Aggregation::<f64>::a2c2f(&A2c2fConfig::new(c, c, repeats, true), &mut r.rng)?;
        a2.randomize(&mut r.rng);
        let x = r.x(&[1, c, spatial, spatial]);
        r.module(&format!("A2C2F {scale} c={c} n={repeats}"), x, &mut a2, |m, x, ctx| m.forward(x, ctx))?;
        let cfg = RelanConfig {
            in_channels: c,
            out_channels: c,
            num_bottlenecks: repeats,
            residual_scale: crate::blocks::DEFAULT_ALPHA,
        };
        let mut relan = Aggregation::<f64>::r_elan(&cfg, &mut r.rng)?;
        relan.randomize(&mut r.rng);
        let x = r.x(&[1, c, spatial, spatial]);
        r.module(&format!("R-ELAN {scale} c={c} n={repeats}"), x, &mut relan, |m, x, ctx| m.forward(x, ctx))?;
    }
    Ok(r.out)
}

pub fn gradient_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = Runner {
        rng: Rng::seed(seed),
        out: Vec::new(),
        max_coords: 24,
    };
    if matches!(suite, Suite::All | Suite::Ops) {
        ops(&mut r)?;
    }
    if matches!(suite, Suite::All | Suite::Attention) {
        attention(&mut r)?;
    }
    if matches!(suite, Suite::All | Suite::Blocks) {
        blocks(&mut r)?;
    }
    Ok(r.out)
}
