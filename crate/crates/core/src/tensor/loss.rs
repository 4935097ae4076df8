//! Fused loss kernels used by the toy trainer.

use super::{record, Element, Tensor};
use crate::error::{Error, Result};

/// `sum(BCE(sigmoid(logits), targets)) / normalizer`, evaluated in the
/// overflow-free form `max(x,0) - x*t + ln(1 + e^-|x|)`.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>, normalizer: T) -> Result<Tensor<T>> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "bce_with_logits",
            "target shape",
            format!("{:?}", logits.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    if !(normalizer > T::zero()) {
        return Err(Error::Config("bce_with_logits: normalizer must be positive".into()));
    }
    let mut total = T::zero();
    for (&x, &t) in logits.data().iter().zip(targets.data()) {
        total += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
    }
    let x = logits.data_arc();
    let t = targets.data_arc();
    record("bce_with_logits", &[logits], vec![], vec![total / normalizer], move |g| {
        let s = g[0] / normalizer;
        let gx = x
            .iter()
            .zip(t.iter())
            .map(|(&x, &t)| {
                let sig = if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    x.exp() / (T::one() + x.exp())
                };
                (sig - t) * s
            })
            .collect();
        vec![Some(gx)]
    })
}

/// Pick `len` channels starting at `c0` for each `(batch, row, col)` cell of `x[N,C,H,W]`.
/// Output is `[cells.len(), len]`.
pub fn gather_cells<T: Element>(
    x: &Tensor<T>,
    cells: &[(usize, usize, usize)],
    c0: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("gather_cells")?;
    if c0 + len > c {
        return Err(Error::shape("gather_cells", "channel range", format!("<= {c}"), c0 + len));
    }
    let mut out = Vec::with_capacity(cells.len() * len);
    let mut offsets = Vec::with_capacity(cells.len() * len);
    for &(b, y, xx) in cells {
        if b >= n || y >= h || xx >= w {
            return Err(Error::shape(
                "gather_cells",
                "cell index",
                format!("< ({n},{h},{w})"),
                format!("({b},{y},{xx})"),
            ));
        }
        for ci in c0..c0 + len {
            let off = ((b * c + ci) * h + y) * w + xx;
            offsets.push(off);
            out.push(x.data()[off]);
        }
    }
    let total = x.numel();
    record("gather_cells", &[x], vec![cells.len(), len], out, move |g| {
        let mut gx = vec![T::zero(); total];
        for (gv, &off) in g.iter().zip(&offsets) {
            gx[off] += *gv;
        }
        vec![Some(gx)]
    })
}

/// Mean `1 - IoU` between boxes given as (left, top, right, bottom) distances
/// from a shared anchor point. Predicted distances are floored at `floor`
/// (zero gradient below it); targets are constants.
pub fn ltrb_iou_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, floor: T) -> Result<Tensor<T>> {
    let m = match pred.shape() {
        &[m, 4] => m,
        other => return Err(Error::shape("ltrb_iou_loss", "pred shape", "[M, 4]", format!("{other:?}"))),
    };
    if target.shape() != pred.shape() {
        return Err(Error::shape(
            "ltrb_iou_loss",
            "target shape",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    if m == 0 {
        return record("ltrb_iou_loss", &[pred], vec![], vec![T::zero()], |_| vec![None]);
    }
    if target.data().iter().any(|v| !(*v > T::zero())) {
        return Err(Error::Data("ltrb_iou_loss: target distances must be positive".into()));
    }
    let p = pred.data_arc();
    let t = target.data_arc();
    let iou_of = |i: usize| -> T {
        let d = |j: usize| p[i * 4 + j].max(floor);
        let q = |j: usize| t[i * 4 + j];
        let pa = (d(0) + d(2)) * (d(1) + d(3));
        let ta = (q(0) + q(2)) * (q(1) + q(3));
        let iw = d(0).min(q(0)) + d(2).min(q(2));
        let ih = d(1).min(q(1)) + d(3).min(q(3));
        let inter = iw * ih;
        inter / (pa + ta - inter)
    };
    let mut total = T::zero();
    for i in 0..m {
        total += T::one() - iou_of(i);
    }
    let mt = T::lit(m as f64);
    record("ltrb_iou_loss", &[pred], vec![], vec![total / mt], move |g| {
        let scale = -g[0] / mt;
        let mut gp = vec![T::zero(); m * 4];
        for i in 0..m {
            let raw = |j: usize| p[i * 4 + j];
            let d = |j: usize| raw(j).max(floor);
            let q = |j: usize| t[i * 4 + j];
            let pa = (d(0) + d(2)) * (d(1) + d(3));
            let ta = (q(0) + q(2)) * (q(1) + q(3));
            let iw = d(0).min(q(0)) + d(2).min(q(2));
            let ih = d(1).min(q(1)) + d(3).min(q(3));
            let inter = iw * ih;
            let union = pa + ta - inter;
            for j in 0..4 {
                if raw(j) <= floor {
                    continue;
                }
                let horizontal = j % 2 == 0;
                let d_pa = if horizontal { d(1) + d(3) } else { d(0) + d(2) };
                let active = if d(j) <= q(j) { T::one() } else { T::zero() };
                let d_inter = active * if horizontal { ih } else { iw };
                let d_union = d_pa - d_inter;
                let d_iou = (d_inter * union - inter * d_union) / (union * union);
                gp[i * 4 + j] = d_iou * scale;
            }
        }
        vec![Some(gp)]
    })
}
