use super::*;
use crate::nn::ConvBnAct;
use crate::tensor::Tensor;

fn nano() -> Model<f32> {
    Model::new(ModelConfig::new(Scale::N), 0).unwrap()
}

#[test]
fn graph_has_one_node_per_listing_line() {
    let m = nano();
    let kinds: Vec<&str> = m.nodes.iter().map(|n| n.op.kind()).collect();
    assert_eq!(
        kinds,
        [
            "Conv", "Conv", "C3k2", "Conv", "C3k2", "Conv", "A2C2F", "Conv", "A2C2F", "Upsample", "Concat", "A2C2F",
            "Upsample", "Concat", "A2C2F", "Conv", "Concat", "A2C2F", "Conv", "Concat", "C3k2", "Detect"
        ]
    );
    for n in &m.nodes {
        for s in &n.inputs {
            if let Source::Node(i) = s {
                assert!(*i < n.id);
            }
        }
    }
    assert_eq!(m.nodes[6].label, "A2C2F(P4, 512, True, 4)");
    assert_eq!(m.nodes[10].inputs, vec![Source::Node(9), Source::Node(6)]);
    assert_eq!(m.nodes[16].inputs, vec![Source::Node(15), Source::Node(6)]);
    assert_eq!(m.nodes[19].inputs, vec![Source::Node(18), Source::Node(8)]);
}

#[test]
fn nano_widths_at_640() {
    let m = nano();
    let (p, _) = m.pyramid_shapes(640).unwrap();
    assert_eq!(p, [[1, 128, 80, 80], [1, 128, 40, 40], [1, 256, 20, 20]]);
    match &m.nodes[0].op {
        LayerOp::Conv(c) => assert_eq!(c.cout(), 16),
        _ => panic!(),
    }
}

#[test]
fn head_grids_follow_strides() {
    for scale in Scale::ALL {
        let m: Model<f32> = Model::new(ModelConfig::new(scale), 1).unwrap();
        for s in [320, 640] {
            let st = m.stats(s).unwrap();
            let outs = &st[DETECT_LAYER].output_shapes;
            for (o, stride) in outs.iter().zip(STRIDES) {
                assert_eq!(o, &[1, 84, s / stride, s / stride]);
            }
        }
    }
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let m = nano();
    let x: Tensor<f32> = Rng::seed(3).uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0);
    let ctx = Ctx::eval();
    let a = m.forward(&x, &ctx).unwrap();
    let b = m.forward(&x, &ctx).unwrap();
    assert_eq!(a, b);
    let shapes: Vec<&[usize]> = a.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[1, 84, 8, 8][..], &[1, 84, 4, 4], &[1, 84, 2, 2]]);
    let bad = Tensor::<f32>::zeros(vec![1, 3, 48, 64]);
    assert!(matches!(m.forward(&bad, &ctx), Err(Error::Preprocess(_))));
}

#[test]
fn instrumented_macs_equal_analytic_total() {
    let m: Model<f32> = Model::new(ModelConfig::new(Scale::N).with_nc(3), 2).unwrap();
    let x = Tensor::<f32>::zeros(vec![1, 3, 96, 96]);
    let (_, counted) = crate::tensor::counter::count_macs(|| m.forward(&x, &Ctx::eval()).unwrap());
    assert_eq!(counted, m.macs(96).unwrap());
}

#[test]
fn size_and_cost_grow_with_scale() {
    let mut last = (0, 0);
    for scale in Scale::ALL {
        let m: Model<f32> = Model::new(ModelConfig::new(scale), 0).unwrap();
        let now = (m.num_params(), m.macs(640).unwrap());
        assert!(now.0 > last.0 && now.1 > last.1, "{scale}: {now:?} vs {last:?}");
        last = now;
    }
}

#[test]
fn conv_mac_formula() {
    let c = ConvBnAct::<f32>::new(16, 32, 3, 1, &mut Rng::seed(0));
    assert_eq!(c.cost([1, 16, 160, 160]).0, 117_964_800);
}

#[test]
fn weights_round_trip_bitwise() {
    let mut m: Model<f32> = Model::new(ModelConfig::new(Scale::N).with_nc(3), 4).unwrap();
    m.randomize(&mut Rng::seed(5));
    let bytes = to_bytes(&m);
    let back: Model<f32> = from_bytes(&bytes).unwrap();
    let x: Tensor<f32> = Rng::seed(6).uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0);
    let ctx = Ctx::eval();
    assert_eq!(m.forward(&x, &ctx).unwrap(), back.forward(&x, &ctx).unwrap());
    let trainable: usize = m.num_params();
    let buffers: usize = m.params().iter().filter(|p| !p.kind().trainable()).map(|p| p.numel()).sum();
    let records = m.params().len();
    let header = 4 + 2 + 2 + 4 + 4;
    let meta: usize = m.params().iter().map(|p| 4 + 3 + 4 * p.shape().len()).sum();
    assert_eq!(bytes.len(), header + meta + 4 * (trainable + buffers));
    assert!(records > 0);
}

#[test]
fn truncated_and_corrupt_files_fail() {
    let m: Model<f32> = Model::new(ModelConfig::new(Scale::N).with_nc(3), 4).unwrap();
    let bytes = to_bytes(&m);
    for cut in [3, 15, 100, bytes.len() - 1] {
        assert!(matches!(from_bytes::<f32>(&bytes[..cut]), Err(Error::Load { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Load { layer: None, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(from_bytes::<f32>(&bad).is_err());
    assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Load { layer: Some(0), .. })));
    // header claims 80 classes, tensors were written for 3
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&80u32.to_le_bytes());
    match from_bytes::<f32>(&bad) {
        Err(Error::Load { layer: Some(l), msg }) => {
            assert_eq!(l, DETECT_LAYER);
            assert!(msg.starts_with("Detect"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

fn raw_with(levels: [(usize, usize); 3], nc: usize, fill: f32) -> Vec<Tensor<f32>> {
    levels.iter().map(|&(h, w)| Tensor::full(vec![1, 4 + nc, h, w], fill)).collect()
}

#[test]
fn decode_examples() {
    let raw = raw_with([(4, 4), (2, 2), (1, 1)], 2, -1e4);
    assert!(decode(&raw, 0.25, 32, 32).unwrap().is_empty());
    assert_eq!(decode(&raw, 0.0, 32, 32).unwrap().len(), 16 + 4 + 1);
    // one hot cell at (1, 2) on the stride-8 level, distances 4 each
    let mut raw = raw_with([(8, 8), (4, 4), (2, 2)], 2, -1e4);
    let mut d = raw[0].to_vec();
    let at = |c: usize| (c * 8 + 1) * 8 + 2;
    for c in 0..4 {
        d[at(c)] = 4.0;
    }
    d[at(5)] = 3.0;
    raw[0] = Tensor::from_vec(vec![1, 6, 8, 8], d).unwrap();
    let dets = decode(&raw, 0.5, 64, 64).unwrap();
    assert_eq!(dets.len(), 1);
    let det = dets[0];
    assert_eq!(det.class_id, 1);
    assert!((det.score - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-7);
    let (cx, cy) = (2.5 * 8.0, 1.5 * 8.0);
    assert_eq!((det.x1, det.y1, det.x2, det.y2), (0.0, 0.0, cx + 32.0, cy + 32.0));
    assert!(decode(&raw, 1.5, 64, 64).is_err());
}

#[test]
fn decoded_boxes_are_proper() {
    let mut rng = Rng::seed(7);
    let raw: Vec<Tensor<f32>> = [(4, 4), (2, 2), (1, 1)]
        .iter()
        .map(|&(h, w)| rng.normal_tensor(&[1, 7, h, w], 3.0))
        .collect();
    for d in decode(&raw, 0.0, 32, 32).unwrap() {
        assert!(d.x1 < d.x2 && d.y1 < d.y2);
        assert!(d.x1 >= 0.0 && d.y1 >= 0.0 && d.x2 <= 32.0 && d.y2 <= 32.0);
        assert!((0.0..=1.0).contains(&d.score));
    }
}

fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        x1,
        y1,
        x2,
        y2,
        class_id,
        score,
    }
}

#[test]
fn nms_examples() {
    let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
    let b = det(0.0, 0.0, 10.0, 8.0, 0, 0.8);
    assert!((a.iou(&b) - 0.8).abs() < 1e-12);
    assert_eq!(nms(&[b, a], 0.5), vec![a]);
    let c = det(20.0, 20.0, 30.0, 30.0, 0, 0.7);
    assert_eq!(nms(&[a, c], 0.5).len(), 2);
    let other_class = det(0.0, 0.0, 10.0, 8.0, 1, 0.8);
    assert_eq!(nms(&[a, other_class], 0.5).len(), 2);
}

/// The unique subset K with: i in K iff no earlier same-class member of K overlaps i above the threshold.
fn brute_force(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let order = nms_order(dets);
    let n = dets.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let ok = (0..n).all(|pos| {
            let i = order[pos];
            let blocked = order[..pos]
                .iter()
                .any(|&j| inside(j) && dets[j].class_id == dets[i].class_id && dets[j].iou(&dets[i]) > thr);
            inside(i) == !blocked
        });
        if ok {
            found.push(order.iter().copied().filter(|&i| inside(i)).map(|i| dets[i]).collect::<Vec<_>>());
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

#[test]
fn nms_matches_brute_force() {
    let mut rng = Rng::seed(8);
    for _ in 0..200 {
        let dets: Vec<Detection> = (0..5)
            .map(|_| {
                let (x, y) = (rng.range(0.0, 20.0), rng.range(0.0, 20.0));
                let (w, h) = (rng.range(2.0, 15.0), rng.range(2.0, 15.0));
                det(x, y, x + w, y + h, rng.below(2), (rng.below(4) as f64) / 4.0)
            })
            .collect();
        assert_eq!(nms(&dets, 0.3), brute_force(&dets, 0.3));
    }
}
