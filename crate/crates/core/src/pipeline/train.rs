use std::collections::HashMap;

use super::toy::{ToySample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{Model, MIN_DISTANCE, STRIDES};
use crate::nn::{Ctx, Mode, Module, ParamId};
use crate::rng::Rng;
use crate::tensor::{bce_with_logits, concat, gather_cells, ltrb_iou_loss, Element, Tape, Tensor};

/// An object is assigned to the level whose nominal size `ANCHOR_SCALE * stride`
/// is closest in log scale to its longer side.
pub const ANCHOR_SCALE: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub box_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 200,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            box_weight: 1.0,
            seed: 0,
        }
    }
}

/// Level index for an object of the given pixel size.
pub fn assign_level(w: f64, h: f64) -> usize {
    let side = w.max(h).max(1.0);
    (0..STRIDES.len())
        .min_by(|&a, &b| {
            let da = (side / (ANCHOR_SCALE * STRIDES[a] as f64)).ln().abs();
            let db = (side / (ANCHOR_SCALE * STRIDES[b] as f64)).ln().abs();
            da.total_cmp(&db)
        })
        .expect("three levels")
}

/// Positive cells of one batch at one level.
#[derive(Debug, Default, Clone)]
pub struct LevelTargets {
    /// `(batch, row, col)`
    pub cells: Vec<(usize, usize, usize)>,
    pub classes: Vec<usize>,
    /// ltrb distances in stride units, 4 per cell
    pub ltrb: Vec<f64>,
}

/// Centre-in-cell assignment: one positive per object; when two objects
/// land in the same cell the first one keeps it.
pub fn build_targets(batch: &[&ToySample], size: usize) -> [LevelTargets; 3] {
    let mut out: [LevelTargets; 3] = Default::default();
    for (b, s) in batch.iter().enumerate() {
        for o in &s.objects {
            let level = assign_level(o.width(), o.height());
            let stride = STRIDES[level] as f64;
            let g = size / STRIDES[level];
            let (cx, cy) = o.center();
            let col = ((cx / stride) as usize).min(g - 1);
            let row = ((cy / stride) as usize).min(g - 1);
            let t = &mut out[level];
            if t.cells.contains(&(b, row, col)) {
                continue;
            }
            let (ax, ay) = ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride);
            t.cells.push((b, row, col));
            t.classes.push(o.class_id);
            t.ltrb.extend(
                [ax - o.x1, ay - o.y1, o.x2 - ax, o.y2 - ay].map(|d| (d / stride).max(MIN_DISTANCE * 10.0)),
            );
        }
    }
    out
}

/// Classification BCE over every cell (normalized by the number of positives)
/// plus `box_weight * mean(1 - IoU)` over positive cells.
pub fn detection_loss<T: Element>(outputs: &[Tensor<T>], targets: &[LevelTargets; 3], box_weight: f64) -> Result<Tensor<T>> {
    let npos: usize = targets.iter().map(|t| t.cells.len()).sum();
    let norm = T::lit(npos.max(1) as f64);
    let mut cls: Option<Tensor<T>> = None;
    let mut boxes = Vec::new();
    let mut box_targets = Vec::new();
    for (out, t) in outputs.iter().zip(targets) {
        let [n, c, h, w] = out.dims4("detection_loss")?;
        let nc = c - 4;
        let mut target = vec![T::zero(); n * nc * h * w];
        for (&(b, y, x), &k) in t.cells.iter().zip(&t.classes) {
            target[((b * nc + k) * h + y) * w + x] = T::one();
        }
        let logits = out.narrow(1, 4, nc)?;
        let l = bce_with_logits(&logits, &Tensor::from_vec(vec![n, nc, h, w], target)?, norm)?;
        cls = Some(match cls {
            None => l,
            Some(acc) => acc.add(&l)?,
        });
        if !t.cells.is_empty() {
            boxes.push(gather_cells(out, &t.cells, 0, 4)?);
            box_targets.extend(t.ltrb.iter().map(|&v| T::lit(v)));
        }
    }
    let mut loss = cls.ok_or_else(|| Error::Usage("detection_loss: no outputs".into()))?;
    if !boxes.is_empty() {
        let refs: Vec<&Tensor<T>> = boxes.iter().collect();
        let pred = concat(&refs, 0)?;
        let target = Tensor::from_vec(vec![box_targets.len() / 4, 4], box_targets)?;
        let iou = ltrb_iou_loss(&pred, &target, T::lit(MIN_DISTANCE))?;
        loss = loss.add(&iou.mul_scalar(T::lit(box_weight))?)?;
    }
    Ok(loss)
}

fn stack<T: Element>(batch: &[&ToySample]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = batch
        .iter()
        .map(|s| {
            let t = s.tensor::<T>();
            let sh = t.shape().to_vec();
            t.reshape(&[1, sh[0], sh[1], sh[2]])
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    concat(&refs, 0)
}

fn check_dataset(data: &[ToySample], nc: usize) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
    let size = first.image.width;
    if size % 32 != 0 {
        return Err(Error::Data(format!("image size {size} is not a multiple of 32")));
    }
    for (i, s) in data.iter().enumerate() {
        if s.image.width != size || s.image.height != size {
            return Err(Error::Data(format!(
                "sample {i} is {}x{}, expected {size}x{size}",
                s.image.width, s.image.height
            )));
        }
        if s.objects.iter().any(|o| o.class_id >= nc) {
            return Err(Error::Data(format!("sample {i} has a class id >= {nc}")));
        }
    }
    Ok(size)
}

/// SGD with momentum on the toy detection loss, BN in training mode.
/// Returns the loss of every iteration's mini-batch.
pub fn train_toy<T: Element>(model: &mut Model<T>, data: &[ToySample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let size = check_dataset(data, model.cfg.nc.max(NUM_CLASSES))?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = Rng::seed(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: HashMap<ParamId, Vec<T>> = HashMap::new();
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                rng.shuffle(&mut order);
            }
            idx.push(order.pop().expect("refilled"));
        }
        idx.sort_unstable();
        let batch: Vec<&ToySample> = idx.iter().map(|&i| &data[i]).collect();
        let value = step(model, &batch, size, cfg, &mut velocity, it).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::Training {
                iteration: it,
                msg: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        trace.push(value);
        log::debug!("iter {it}: loss {value:.5}");
    }
    Ok(trace)
}

fn step<T: Element>(
    model: &mut Model<T>,
    batch: &[&ToySample],
    size: usize,
    cfg: &TrainConfig,
    velocity: &mut HashMap<ParamId, Vec<T>>,
    it: usize,
) -> Result<f64> {
    let x = stack::<T>(batch)?;
    let targets = build_targets(batch, size);
    let ctx = Ctx::new(Mode::Train, Some(Tape::new()));
    let out = model.forward(&x, &ctx)?;
    let loss = detection_loss(&out, &targets, cfg.box_weight)?;
    let value = loss.item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Training {
            iteration: it,
            msg: format!("loss is {value}"),
        });
    }
    loss.backward()?;
    let grads: HashMap<ParamId, Tensor<T>> = model
        .params()
        .into_iter()
        .filter(|p| p.kind().trainable())
        .filter_map(|p| ctx.grad(p).map(|g| (p.id(), g)))
        .collect();
    let (lr, mom) = (T::lit(cfg.lr), T::lit(cfg.momentum));
    for p in model.params_mut() {
        let Some(g) = grads.get(&p.id()) else { continue };
        let v = velocity.entry(p.id()).or_insert_with(|| vec![T::zero(); p.numel()]);
        for (vi, &gi) in v.iter_mut().zip(g.data()) {
            *vi = mom * *vi + gi;
        }
        let next: Vec<T> = p.value().data().iter().zip(v.iter()).map(|(&w, &vi)| w - lr * vi).collect();
        let shape = p.shape().to_vec();
        p.set(Tensor::from_vec(shape, next)?)?;
    }
    ctx.apply_stat_updates(model)?;
    Ok(value)
}
