use super::*;
use crate::nn::Mode;
use crate::tensor::{concat, counter, gradcheck_coords, Tape};

fn rand_x(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

#[test]
fn declared_shapes_hold_over_random_configs() {
    let mut rng = Rng::seed(100);
    let ctx = Ctx::<f32>::eval();
    for case in 0..200 {
        let kind = BlockKind::ALL[rng.below(BlockKind::ALL.len())];
        let c_in = 2 * (1 + rng.below(6));
        let c_out = 2 * (1 + rng.below(6));
        let mut spec = BlockSpec::new(kind, c_in, c_out).repeats(1 + rng.below(2));
        spec.stride = 1 + rng.below(2);
        spec.kernel = [1, 3][rng.below(2)];
        spec.expansion = [0.25, 0.5, 1.0][rng.below(3)];
        spec.c3k = rng.below(2) == 1;
        spec.use_area = rng.below(2) == 1;
        spec.area_segments = [1, 2, 4][rng.below(3)];
        let (h, w) = (2 * (2 + rng.below(3)), 2 * (2 + rng.below(3)));
        let block = match spec.build::<f32>(&mut rng) {
            Ok(b) => b,
            Err(e) => panic!("case {case} {spec:?}: {e}"),
        };
        let x: Tensor<f32> = rng.normal_tensor(&[1, c_in, h, w], 1.0);
        let (y, macs) = counter::count_macs(|| block.forward(&x, &ctx).unwrap());
        let (analytic, shape) = block.cost([1, c_in, h, w]).unwrap();
        assert_eq!(y.shape(), &shape, "case {case} {spec:?}");
        assert_eq!(shape[1], c_out);
        assert_eq!(macs, analytic, "case {case} {spec:?}");
    }
}

#[test]
fn spec_errors() {
    let mut rng = Rng::seed(101);
    assert!(BlockSpec::new(BlockKind::C3k2, 4, 4).repeats(0).build::<f64>(&mut rng).is_err());
    let mut s = BlockSpec::new(BlockKind::C3k2, 4, 4);
    s.expansion = 1.5;
    assert!(matches!(s.build::<f64>(&mut rng), Err(Error::Config(_))));
    s.expansion = 0.01;
    assert!(matches!(s.build::<f64>(&mut rng), Err(Error::Config(_))));
    assert!(BlockSpec::new(BlockKind::CspRef, 3, 4).build::<f64>(&mut rng).is_err());
    let a = BlockSpec::new(BlockKind::A2C2F, 8, 8).build::<f64>(&mut rng).unwrap();
    assert!(matches!(a.forward(&Tensor::zeros(vec![1, 8, 3, 3]), &Ctx::eval()), Err(Error::Partition(_))));
}

#[test]
fn relan_is_affine_in_alpha() {
    let mut rng = Rng::seed(102);
    for (c1, c2) in [(8, 8), (6, 10)] {
        let mut block = Aggregation::<f64>::r_elan(&RelanConfig::new(c1, c2, 2), &mut rng).unwrap();
        block.randomize(&mut rng);
        let x = rand_x(&mut rng, &[2, c1, 5, 5]);
        let ctx = Ctx::eval();
        let (shortcut, f) = block.forward_parts(&x, &ctx).unwrap();
        let shortcut = shortcut.unwrap();
        block.residual.as_mut().unwrap().alpha = 0.0;
        let y0 = block.forward(&x, &ctx).unwrap();
        assert_eq!(y0, shortcut);
        for alpha in [0.01, 0.3, 2.0] {
            block.residual.as_mut().unwrap().alpha = alpha;
            let y = block.forward(&x, &ctx).unwrap();
            let resid = y.sub(&y0).unwrap().sub(&f.mul_scalar(alpha).unwrap()).unwrap();
            assert!(resid.data().iter().all(|v| v.abs() < 1e-12));
        }
    }
}

#[test]
fn relan_with_zeroed_branch_is_identity() {
    let mut rng = Rng::seed(103);
    let mut block = Aggregation::<f64>::r_elan(&RelanConfig::new(6, 6, 3), &mut rng).unwrap();
    block.zero_weights();
    let x = rand_x(&mut rng, &[1, 6, 4, 4]);
    assert_eq!(block.forward(&x, &Ctx::eval()).unwrap(), x);
}

fn input_grad<F>(x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>, &Ctx<f64>) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let ctx = Ctx::new(Mode::Eval, Some(tape));
    f(&leaf, &ctx).unwrap().sum().unwrap().backward().unwrap();
    leaf.grad().unwrap()
}

#[test]
fn gradient_reaches_input_through_relan_but_not_elan() {
    let mut rng = Rng::seed(104);
    for _ in 0..5 {
        let c = 2 * (2 + rng.below(4));
        let depth = 1 + rng.below(3);
        let x = rand_x(&mut rng, &[1, c, 6, 6]);
        let mut relan = Aggregation::<f64>::r_elan(&RelanConfig::new(c, c, depth), &mut rng).unwrap();
        relan.zero_weights();
        let g = input_grad(&x, |x, ctx| relan.forward(x, ctx));
        assert!(g.data().iter().all(|v| *v == 1.0));
        let mut elan = ElanRef::<f64>::new(c, c, depth, &mut rng).unwrap();
        elan.zero_inner();
        let g = input_grad(&x, |x, ctx| elan.forward(x, ctx));
        assert!(g.data().iter().all(|v| v.abs() < 1.0));
    }
}

/// 1x1 conv-BN-SiLU evaluated pixel by pixel.
fn pointwise_oracle(layer: &ConvBnAct<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4("oracle").unwrap();
    let co = layer.cout();
    let wt = layer.weight.value().data();
    Tensor::from_fn(vec![n, co, h, w], |i| {
        let (b, o, p) = (i / (co * h * w), (i / (h * w)) % co, i % (h * w));
        let z: f64 = (0..c).map(|k| wt[o * c + k] * x.data()[(b * c + k) * h * w + p]).sum();
        let bn = layer.gamma.value().data()[o] * (z - layer.running_mean.value().data()[o])
            / (layer.running_var.value().data()[o] + 1e-3).sqrt()
            + layer.beta.value().data()[o];
        bn / (1.0 + (-bn).exp())
    })
    .unwrap()
}

#[test]
fn c3k2_with_zero_bottlenecks_matches_oracle() {
    let mut rng = Rng::seed(105);
    let mut block = C3k2::<f64>::new(6, 8, 2, false, 0.5, true, &mut rng).unwrap();
    block.randomize(&mut rng);
    for u in &mut block.m {
        if let CspUnit::Bottleneck(b) = u {
            b.zero_weights();
            for bn in [&mut b.cv1, &mut b.cv2] {
                bn.beta.fill(0.0);
                bn.running_mean.fill(0.0);
            }
        }
    }
    let x = rand_x(&mut rng, &[1, 6, 3, 3]);
    let y = block.forward(&x, &Ctx::eval()).unwrap();
    let t = pointwise_oracle(&block.cv1, &x);
    let (a, b) = (t.narrow(1, 0, 4).unwrap(), t.narrow(1, 4, 4).unwrap());
    let want = pointwise_oracle(&block.cv2, &concat(&[&a, &b, &b, &b], 1).unwrap());
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn a2c2f_without_area_is_c2f_of_c3k() {
    let mut rng = Rng::seed(106);
    let mut block = Aggregation::<f64>::a2c2f(&A2c2fConfig::new(6, 8, 1, false), &mut rng).unwrap();
    block.randomize(&mut rng);
    assert!(block.residual.is_none());
    let x = rand_x(&mut rng, &[1, 6, 4, 4]);
    let ctx = Ctx::eval();
    let y = block.forward(&x, &ctx).unwrap();
    let t = pointwise_oracle(&block.cv1, &x);
    let u = match &block.units[0] {
        AggUnit::C3k(c) => c.forward(&t, &ctx).unwrap(),
        other => panic!("{other:?}"),
    };
    let want = pointwise_oracle(&block.cv2, &concat(&[&t, &u], 1).unwrap());
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn a2c2f_with_silent_attention_passes_transition_through() {
    let mut rng = Rng::seed(107);
    let mut block = Aggregation::<f64>::a2c2f(&A2c2fConfig::new(8, 8, 2, true), &mut rng).unwrap();
    block.randomize(&mut rng);
    for u in &mut block.units {
        if let AggUnit::Attention(blocks) = u {
            for b in blocks {
                b.attn.zero_weights();
                b.mlp.fc2.zero_weights();
                for bn in [&mut b.attn.proj, &mut b.mlp.fc2] {
                    bn.beta.fill(0.0);
                    bn.running_mean.fill(0.0);
                }
            }
        }
    }
    let x = rand_x(&mut rng, &[1, 8, 4, 4]);
    let y = block.forward(&x, &Ctx::eval()).unwrap();
    let t = pointwise_oracle(&block.cv1, &x);
    let f = pointwise_oracle(&block.cv2, &concat(&[&t, &t, &t], 1).unwrap());
    let want = x.add(&f.mul_scalar(DEFAULT_ALPHA).unwrap()).unwrap();
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn a2c2f_single_area_equals_full_attention_composition() {
    let mut rng = Rng::seed(108);
    let mut cfg = A2c2fConfig::new(8, 8, 2, true).with_segments(1);
    cfg.perceiver = false;
    let mut block = Aggregation::<f64>::a2c2f(&cfg, &mut rng).unwrap();
    block.randomize(&mut rng);
    let x = rand_x(&mut rng, &[2, 8, 3, 5]);
    let ctx = Ctx::eval();
    let y = block.forward(&x, &ctx).unwrap();
    let flat = |t: &Tensor<f64>| t.reshape(&[2, 4, 15]).unwrap().permute(&[0, 2, 1]).unwrap();
    let unflat = |t: &Tensor<f64>| t.permute(&[0, 2, 1]).unwrap().reshape(&[2, 4, 3, 5]).unwrap();
    let mut ys = vec![block.cv1.forward(&x, &ctx).unwrap()];
    for u in &block.units {
        let AggUnit::Attention(blocks) = u else { panic!() };
        let mut z = ys.last().unwrap().clone();
        for b in blocks {
            z = z.add(&unflat(&b.attn.full_attention(&flat(&z), &ctx).unwrap())).unwrap();
            z = z.add(&b.mlp.forward(&z, &ctx).unwrap()).unwrap();
        }
        ys.push(z);
    }
    let f = block.cv2.forward(&concat(&ys.iter().collect::<Vec<_>>(), 1).unwrap(), &ctx).unwrap();
    let want = x.add(&f.mul_scalar(DEFAULT_ALPHA).unwrap()).unwrap();
    assert!(y.max_abs_diff(&want) < 1e-10);
}

#[test]
fn csp_passes_first_half_untouched() {
    let mut rng = Rng::seed(109);
    let block = CspRef::<f64>::new(8, 6, 2, &mut rng).unwrap();
    let x = rand_x(&mut rng, &[2, 8, 4, 4]);
    let (merged, y) = block.forward_parts(&x, &Ctx::eval()).unwrap();
    assert_eq!(merged.narrow(1, 0, 4).unwrap(), x.narrow(1, 0, 4).unwrap());
    assert_eq!(y.shape(), &[2, 6, 4, 4]);
}

#[test]
fn a2c2f_mid_resolution_cost() {
    let mut rng = Rng::seed(110);
    let block = Aggregation::<f32>::a2c2f(&A2c2fConfig::new(128, 128, 4, true), &mut rng).unwrap();
    let x: Tensor<f32> = rng.normal_tensor(&[1, 128, 40, 40], 1.0);
    let (y, macs) = counter::count_macs(|| block.forward(&x, &Ctx::eval()).unwrap());
    assert_eq!(y.shape(), &[1, 128, 40, 40]);
    assert_eq!(macs, block.cost([1, 128, 40, 40]).unwrap().0);
}

#[test]
fn every_block_passes_gradcheck() {
    let mut rng = Rng::seed(111);
    for kind in BlockKind::ALL {
        let mut spec = BlockSpec::new(kind, 4, 4).repeats(2);
        spec.c3k = true;
        let mut block = spec.build::<f64>(&mut rng).unwrap();
        block.randomize(&mut rng);
        let x = rand_x(&mut rng, &[1, 4, 4, 4]);
        let r = rand_x(&mut rng, &[1, 4, 4, 4]);
        for mode in [Mode::Eval, Mode::Train] {
            let rep = gradcheck_coords(
                |x| {
                    let ctx = Ctx::new(mode, x.tape().cloned());
                    block.forward(x, &ctx)?.mul(&r)?.sum()
                },
                &x,
                1e-5,
                &(0..64).step_by(3).collect::<Vec<_>>(),
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "{kind:?} {mode:?}: {rep:?}");
        }
    }
}
