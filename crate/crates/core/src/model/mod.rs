//! The backbone/head graph, detection decoding, NMS and weight files.

mod config;
mod detect;
mod io;

pub use config::{ModelConfig, Scale};
pub use detect::{decode, nms, nms_order, Detect, DetectLevel, Detection, BOX_BIAS_INIT, MIN_DISTANCE, STRIDES};
pub use io::{from_bytes, load_weights, save_weights, to_bytes, FORMAT_VERSION, MAGIC};

use crate::blocks::{A2c2fConfig, Aggregation, C3k2};
use crate::error::{Error, Result};
use crate::nn::{ConvBnAct, Ctx, Module, Param};
use crate::rng::Rng;
use crate::tensor::{concat, upsample_nearest, Element, Tensor};

/// Where a node reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Image,
    Node(usize),
}

#[derive(Debug, Clone)]
pub enum LayerOp<T: Element> {
    Conv(ConvBnAct<T>),
    C3k2(C3k2<T>),
    A2C2F(Aggregation<T>),
    Upsample(usize),
    Concat,
    Detect(Detect<T>),
}

impl<T: Element> LayerOp<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv(_) => "Conv",
            LayerOp::C3k2(_) => "C3k2",
            LayerOp::A2C2F(_) => "A2C2F",
            LayerOp::Upsample(_) => "Upsample",
            LayerOp::Concat => "Concat",
            LayerOp::Detect(_) => "Detect",
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            LayerOp::Conv(m) => m.params(),
            LayerOp::C3k2(m) => m.params(),
            LayerOp::A2C2F(m) => m.params(),
            LayerOp::Detect(m) => m.params(),
            LayerOp::Upsample(_) | LayerOp::Concat => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            LayerOp::Conv(m) => m.params_mut(),
            LayerOp::C3k2(m) => m.params_mut(),
            LayerOp::A2C2F(m) => m.params_mut(),
            LayerOp::Detect(m) => m.params_mut(),
            LayerOp::Upsample(_) | LayerOp::Concat => Vec::new(),
        }
    }
}

/// One line of the architecture listing.
#[derive(Debug, Clone)]
pub struct LayerNode<T: Element> {
    pub id: usize,
    /// e.g. `A2C2F(P4, 512, True, 4)` with unscaled arguments
    pub label: String,
    pub inputs: Vec<Source>,
    pub op: LayerOp<T>,
}

impl<T: Element> LayerNode<T> {
    pub fn num_params(&self) -> usize {
        self.op
            .params()
            .iter()
            .filter(|p| p.kind().trainable())
            .map(|p| p.numel())
            .sum()
    }
}

/// Per-node analytic numbers at one input size.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub id: usize,
    pub label: String,
    pub kind: &'static str,
    pub output_shapes: Vec<[usize; 4]>,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub cfg: ModelConfig,
    pub nodes: Vec<LayerNode<T>>,
}

pub const DETECT_LAYER: usize = 21;
/// Backbone and head outputs feeding the detector (H2, H4, H6).
pub const HEAD_OUTPUTS: [usize; 3] = [14, 17, 20];

struct Builder<'a, T: Element> {
    cfg: &'a ModelConfig,
    rng: &'a mut Rng,
    nodes: Vec<LayerNode<T>>,
    widths: Vec<usize>,
}

impl<T: Element> Builder<'_, T> {
    fn width(&self, s: Source) -> usize {
        match s {
            Source::Image => 3,
            Source::Node(i) => self.widths[i],
        }
    }

    fn prev(&self) -> Source {
        match self.nodes.len() {
            0 => Source::Image,
            n => Source::Node(n - 1),
        }
    }

    fn push(&mut self, label: String, inputs: Vec<Source>, op: LayerOp<T>, width: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, label, inputs, op });
        self.widths.push(width);
        id
    }

    fn conv(&mut self, from: &str, c: usize) -> usize {
        let src = self.prev();
        let (cin, cout) = (self.width(src), self.cfg.channels(c));
        let op = LayerOp::Conv(ConvBnAct::new(cin, cout, 3, 2, self.rng));
        self.push(format!("Conv({from}, {c}, 3, 2)"), vec![src], op, cout)
    }

    fn c3k2(&mut self, from: &str, c: usize, c3k: bool, e: Option<f64>) -> Result<usize> {
        let src = self.prev();
        let (cin, cout) = (self.width(src), self.cfg.channels(c));
        let c3k_used = c3k || self.cfg.c3k_everywhere();
        let block = C3k2::new(cin, cout, self.cfg.repeats(2), c3k_used, e.unwrap_or(0.5), true, self.rng);
        let block = block.map_err(|err| Error::Build {
            layer: self.nodes.len(),
            msg: err.to_string(),
        })?;
        let flag = if c3k { "True" } else { "False" };
        let label = match e {
            Some(e) => format!("C3k2({from}, {c}, {flag}, {e})"),
            None => format!("C3k2({from}, {c}, {flag})"),
        };
        Ok(self.push(label, vec![src], LayerOp::C3k2(block), cout))
    }

    fn a2c2f(&mut self, from: &str, c: usize, area: Option<usize>, repeats: usize) -> Result<usize> {
        let src = self.prev();
        let (cin, cout) = (self.width(src), self.cfg.channels(c));
        let mut acfg = A2c2fConfig::new(cin, cout, self.cfg.repeats(repeats), area.is_some());
        acfg.area_segments = area.unwrap_or(1);
        let block = Aggregation::a2c2f(&acfg, self.rng).map_err(|err| Error::Build {
            layer: self.nodes.len(),
            msg: err.to_string(),
        })?;
        let label = match area {
            Some(l) => format!("A2C2F({from}, {c}, True, {l})"),
            None => format!("A2C2F({from}, {c}, False)"),
        };
        Ok(self.push(label, vec![src], LayerOp::A2C2F(block), cout))
    }

    fn upsample(&mut self, from: &str) -> usize {
        let src = self.prev();
        let w = self.width(src);
        self.push(format!("Upsample({from}, \"nearest\")"), vec![src], LayerOp::Upsample(2), w)
    }

    fn concat(&mut self, label: &str, other: usize) -> usize {
        let srcs = vec![self.prev(), Source::Node(other)];
        let w = srcs.iter().map(|s| self.width(*s)).sum();
        self.push(format!("Concat({label})"), srcs, LayerOp::Concat, w)
    }
}

impl<T: Element> Model<T> {
    /// Build the 22-node graph with weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed(seed);
        let mut b = Builder {
            cfg: &cfg,
            rng: &mut rng,
            nodes: Vec::new(),
            widths: Vec::new(),
        };
        // backbone
        b.conv("I", 64);
        b.conv("P1", 128);
        b.c3k2("P2", 256, false, Some(0.25))?;
        b.conv("P2", 256);
        let p3 = b.c3k2("P3", 512, false, Some(0.25))?;
        b.conv("P3", 512);
        let p4 = b.a2c2f("P4", 512, Some(4), 4)?;
        b.conv("P4", 1024);
        let p5 = b.a2c2f("P5", 1024, Some(1), 4)?;
        // head
        b.upsample("P5");
        b.concat("[U1, P4]", p4);
        b.a2c2f("C1", 512, None, 2)?;
        b.upsample("H1");
        b.concat("[U2, P3]", p3);
        let h2 = b.a2c2f("C2", 256, None, 2)?;
        b.conv("H2", 256);
        b.concat("[H3, P4]", p4);
        let h4 = b.a2c2f("C3", 512, None, 2)?;
        b.conv("H4", 512);
        b.concat("[H5, P5]", p5);
        let h6 = b.c3k2("C4", 1024, true, None)?;
        let chans = [b.widths[h2], b.widths[h4], b.widths[h6]];
        let detect = Detect::new(cfg.nc, chans, b.rng).map_err(|err| Error::Build {
            layer: b.nodes.len(),
            msg: err.to_string(),
        })?;
        let srcs = [h2, h4, h6].map(Source::Node).to_vec();
        b.push(format!("Detect([H2, H4, H6], {})", cfg.nc), srcs, LayerOp::Detect(detect), 4 + cfg.nc);
        let nodes = b.nodes;
        let model = Model { cfg, nodes };
        model.stats(model.cfg.input_size)?;
        Ok(model)
    }

    pub fn detect(&self) -> &Detect<T> {
        match &self.nodes[DETECT_LAYER].op {
            LayerOp::Detect(d) => d,
            _ => unreachable!("last node is the detector"),
        }
    }

    /// Raw per-level outputs `[N, 4 + nc, S/8, S/8]`, `/16`, `/32`.
    pub fn forward(&self, image: &Tensor<T>, ctx: &Ctx<T>) -> Result<Vec<Tensor<T>>> {
        let [_, c, h, w] = image.dims4("Model::forward")?;
        if c != 3 {
            return Err(Error::shape("Model::forward", "image channels", 3, c));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Preprocess(format!(
                "input {h}x{w} is not a multiple of 32; letterbox the image first"
            )));
        }
        let mut outs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Image => image,
                    Source::Node(i) => &outs[*i][0],
                })
                .collect();
            let y = match &node.op {
                LayerOp::Conv(m) => vec![m.forward(inputs[0], ctx)?],
                LayerOp::C3k2(m) => vec![m.forward(inputs[0], ctx)?],
                LayerOp::A2C2F(m) => vec![m.forward(inputs[0], ctx)?],
                LayerOp::Upsample(f) => vec![upsample_nearest(inputs[0], *f)?],
                LayerOp::Concat => vec![concat(&inputs, 1)?],
                LayerOp::Detect(m) => m.forward(&inputs, ctx)?,
            };
            outs.push(y);
        }
        Ok(outs.pop().expect("non-empty graph"))
    }

    /// Per-node output shapes, params and analytic MACs for a square input.
    pub fn stats(&self, size: usize) -> Result<Vec<NodeStats>> {
        self.stats_for([1, 3, size, size])
    }

    pub fn stats_for(&self, input: [usize; 4]) -> Result<Vec<NodeStats>> {
        let mut shapes: Vec<Vec<[usize; 4]>> = Vec::with_capacity(self.nodes.len());
        let mut rows = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<[usize; 4]> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Image => input,
                    Source::Node(i) => shapes[*i][0],
                })
                .collect();
            let build_err = |msg: String| Error::Build { layer: node.id, msg };
            let check_c = |cin: usize| {
                if ins[0][1] != cin {
                    Err(build_err(format!("expects {cin} input channels, gets {}", ins[0][1])))
                } else {
                    Ok(())
                }
            };
            let (macs, out) = match &node.op {
                LayerOp::Conv(m) => {
                    check_c(m.cin())?;
                    let (macs, o) = m.cost(ins[0]);
                    (macs, vec![o])
                }
                LayerOp::C3k2(m) => {
                    check_c(m.cv1.cin())?;
                    let (macs, o) = m.cost(ins[0]);
                    (macs, vec![o])
                }
                LayerOp::A2C2F(m) => {
                    check_c(m.in_channels())?;
                    let (macs, o) = m.cost(ins[0]).map_err(|e| build_err(e.to_string()))?;
                    (macs, vec![o])
                }
                LayerOp::Upsample(f) => {
                    let [n, c, h, w] = ins[0];
                    (0, vec![[n, c, h * f, w * f]])
                }
                LayerOp::Concat => {
                    let [n, _, h, w] = ins[0];
                    if ins.iter().any(|s| (s[0], s[2], s[3]) != (n, h, w)) {
                        return Err(build_err(format!("cannot concatenate shapes {ins:?}")));
                    }
                    (0, vec![[n, ins.iter().map(|s| s[1]).sum(), h, w]])
                }
                LayerOp::Detect(m) => {
                    for (s, l) in ins.iter().zip(&m.levels) {
                        if s[1] != l.box_convs[0].cin() {
                            return Err(build_err(format!(
                                "level expects {} channels, gets {}",
                                l.box_convs[0].cin(),
                                s[1]
                            )));
                        }
                    }
                    m.cost(&ins)
                }
            };
            rows.push(NodeStats {
                id: node.id,
                label: node.label.clone(),
                kind: node.op.kind(),
                output_shapes: out.clone(),
                params: node.num_params(),
                macs,
            });
            shapes.push(out);
        }
        Ok(rows)
    }

    /// Total MACs at a square input size.
    pub fn macs(&self, size: usize) -> Result<u64> {
        Ok(self.stats(size)?.iter().map(|r| r.macs).sum())
    }

    /// `[P3, P4, P5]` output shapes of the backbone and `[H2, H4, H6]` of the head.
    pub fn pyramid_shapes(&self, size: usize) -> Result<([[usize; 4]; 3], [[usize; 4]; 3])> {
        let st = self.stats(size)?;
        let pick = |ids: [usize; 3]| ids.map(|i| st[i].output_shapes[0]);
        Ok((pick([4, 6, 8]), pick(HEAD_OUTPUTS)))
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.nodes.iter().flat_map(|n| n.op.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.nodes.iter_mut().flat_map(|n| n.op.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests;
