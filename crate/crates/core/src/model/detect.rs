use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnAct, Ctx, Module, Param};
use crate::rng::Rng;
use crate::tensor::{concat, Element, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Initial box regression bias: one stride on each side.
pub const BOX_BIAS_INIT: f64 = 1.0;
/// Lower bound applied to regressed edge distances (in strides).
pub const MIN_DISTANCE: f64 = 1e-3;

/// Decoupled per-level prediction branches.
#[derive(Debug, Clone)]
pub struct DetectLevel<T: Element> {
    pub box_convs: [ConvBnAct<T>; 2],
    pub box_pred: Conv<T>,
    /// depthwise 3x3, pointwise, depthwise 3x3, pointwise
    pub cls_convs: [ConvBnAct<T>; 4],
    pub cls_pred: Conv<T>,
    pub stride: usize,
}

impl<T: Element> DetectLevel<T> {
    fn forward(&self, x: &Tensor<T>, ctx: &Ctx<T>) -> Result<Tensor<T>> {
        let mut b = x.clone();
        for c in &self.box_convs {
            b = c.forward(&b, ctx)?;
        }
        let b = self.box_pred.forward(&b, ctx)?;
        let mut c = x.clone();
        for l in &self.cls_convs {
            c = l.forward(&c, ctx)?;
        }
        let c = self.cls_pred.forward(&c, ctx)?;
        concat(&[&b, &c], 1)
    }

    fn cost(&self, shape: [usize; 4]) -> (u64, [usize; 4]) {
        let mut macs = 0;
        let mut s = shape;
        for c in &self.box_convs {
            let (m, o) = c.cost(s);
            macs += m;
            s = o;
        }
        let (m, b) = self.box_pred.cost(s);
        macs += m;
        let mut s = shape;
        for c in &self.cls_convs {
            let (m, o) = c.cost(s);
            macs += m;
            s = o;
        }
        let (m, c) = self.cls_pred.cost(s);
        (macs + m, [shape[0], b[1] + c[1], shape[2], shape[3]])
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.box_convs.iter().flat_map(|c| c.params()).collect();
        out.extend(self.box_pred.params());
        out.extend(self.cls_convs.iter().flat_map(|c| c.params()));
        out.extend(self.cls_pred.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.box_convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend(self.box_pred.params_mut());
        out.extend(self.cls_convs.iter_mut().flat_map(|c| c.params_mut()));
        out.extend(self.cls_pred.params_mut());
        out
    }
}

/// Anchor-free head over three pyramid levels. Each level emits
/// `[N, 4 + nc, H, W]`: four edge distances (in strides) then class logits.
#[derive(Debug, Clone)]
pub struct Detect<T: Element> {
    pub nc: usize,
    pub levels: Vec<DetectLevel<T>>,
}

impl<T: Element> Detect<T> {
    pub fn new(nc: usize, channels: [usize; 3], rng: &mut Rng) -> Result<Self> {
        if nc == 0 {
            return Err(Error::Config("Detect: class count must be >= 1".into()));
        }
        let c2 = 16.max(channels[0] / 4).max(64);
        let c3 = channels[0].max(nc.min(100));
        let levels = channels
            .iter()
            .zip(STRIDES)
            .map(|(&ch, stride)| {
                let mut box_pred = Conv::new(c2, 4, 1, 1, rng);
                box_pred.bias.fill(T::lit(BOX_BIAS_INIT));
                let mut cls_pred = Conv::new(c3, nc, 1, 1, rng);
                // prior of roughly five objects per 640x640 image
                let prior = (5.0 / nc as f64 / (640.0 / stride as f64).powi(2)).ln();
                cls_pred.bias.fill(T::lit(prior));
                DetectLevel {
                    box_convs: [ConvBnAct::new(ch, c2, 3, 1, rng), ConvBnAct::new(c2, c2, 3, 1, rng)],
                    box_pred,
                    cls_convs: [
                        ConvBnAct::with(ch, ch, 3, 1, ch, true, rng),
                        ConvBnAct::new(ch, c3, 1, 1, rng),
                        ConvBnAct::with(c3, c3, 3, 1, c3, true, rng),
                        ConvBnAct::new(c3, c3, 1, 1, rng),
                    ],
                    cls_pred,
                    stride,
                }
            })
            .collect();
        Ok(Detect { nc, levels })
    }

    pub fn forward(&self, xs: &[&Tensor<T>], ctx: &Ctx<T>) -> Result<Vec<Tensor<T>>> {
        if xs.len() != self.levels.len() {
            return Err(Error::shape("Detect", "levels", self.levels.len(), xs.len()));
        }
        xs.iter().zip(&self.levels).map(|(x, l)| l.forward(x, ctx)).collect()
    }

    pub fn cost(&self, shapes: &[[usize; 4]]) -> (u64, Vec<[usize; 4]>) {
        let mut macs = 0;
        let outs = shapes
            .iter()
            .zip(&self.levels)
            .map(|(s, l)| {
                let (m, o) = l.cost(*s);
                macs += m;
                o
            })
            .collect();
        (macs, outs)
    }
}

impl<T: Element> Module<T> for Detect<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.levels.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.levels.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turn raw level outputs into boxes in input pixels.
///
/// Per cell `(i, j)` at stride `s`: `score = sigmoid(max logit)`, centre
/// `((j + 0.5) s, (i + 0.5) s)`, edges at `centre -/+ max(d, 1e-3) * s`,
/// clamped to the `width x height` image. Cells with `score < conf` are dropped.
pub fn decode<T: Element>(raw: &[Tensor<T>], conf: f64, width: usize, height: usize) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf) {
        return Err(Error::Config(format!("confidence threshold {conf} outside [0, 1]")));
    }
    let mut out = Vec::new();
    for (level, t) in raw.iter().enumerate() {
        let [n, c, h, w] = t.dims4("decode")?;
        if c < 5 {
            return Err(Error::shape("decode", "channels", ">= 5", c));
        }
        let stride = *STRIDES
            .get(level)
            .ok_or_else(|| Error::shape("decode", "levels", "<= 3", raw.len()))? as f64;
        let d = t.data();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let at = |ch: usize| d[((b * c + ch) * h + i) * w + j].as_f64();
                    let (mut best, mut cls) = (f64::NEG_INFINITY, 0);
                    for k in 4..c {
                        if at(k) > best {
                            best = at(k);
                            cls = k - 4;
                        }
                    }
                    let score = sigmoid(best);
                    if score < conf {
                        continue;
                    }
                    let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                    let dist = |ch: usize| at(ch).max(MIN_DISTANCE) * stride;
                    out.push(Detection {
                        x1: (cx - dist(0)).max(0.0),
                        y1: (cy - dist(1)).max(0.0),
                        x2: (cx + dist(2)).min(width as f64),
                        y2: (cy + dist(3)).min(height as f64),
                        class_id: cls,
                        score,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Order used by NMS: score descending, then lower class id, then earlier index.
pub fn nms_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy per-class suppression: a box survives unless an already kept box
/// of the same class overlaps it with IoU above `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in nms_order(dets) {
        let d = dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || k.iou(&d) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}
