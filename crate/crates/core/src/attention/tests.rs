use super::*;
use crate::error::Error;
use crate::nn::{ConvBnAct, Ctx, Module};
use crate::rng::Rng;
use crate::tensor::{counter, gradcheck_coords, Tensor};

fn layer(c: usize, h: usize, l: usize, pe: bool, seed: u64) -> AreaAttention<f64> {
    let mut rng = Rng::seed(seed);
    let cfg = AttentionConfig::new(c, h).unwrap().with_segments(l).with_perceiver(pe);
    let mut a = AreaAttention::new(cfg, &mut rng).unwrap();
    a.randomize(&mut rng);
    a
}

/// Eval-mode 1x1 conv + BN applied to one token.
fn pointwise(layer: &ConvBnAct<f64>, x: &[f64]) -> Vec<f64> {
    let (cout, cin) = (layer.cout(), layer.cin());
    let w = layer.weight.value().data();
    (0..cout)
        .map(|o| {
            let z: f64 = (0..cin).map(|i| w[o * cin + i] * x[i]).sum();
            let g = layer.gamma.value().data()[o];
            let b = layer.beta.value().data()[o];
            let m = layer.running_mean.value().data()[o];
            let v = layer.running_var.value().data()[o];
            g * (z - m) / (v + 1e-3).sqrt() + b
        })
        .collect()
}

/// Token-by-token, head-by-head reference for `full_attention` on one image.
fn loop_oracle(a: &AreaAttention<f64>, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = a.cfg.channels;
    let (heads, d) = (a.cfg.heads, a.cfg.head_dim());
    let qkv: Vec<Vec<f64>> = tokens.iter().map(|t| pointwise(&a.qkv, t)).collect();
    let n = tokens.len();
    let mut mixed = vec![vec![0.0; c]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|e| qkv[i][h * d + e] * qkv[j][c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for e in 0..d {
                mixed[i][h * d + e] = (0..n).map(|j| (scores[j] - max).exp() / z * qkv[j][2 * c + h * d + e]).sum();
            }
        }
    }
    mixed.iter().map(|t| pointwise(&a.proj, t)).collect()
}

#[test]
fn full_attention_matches_loop_oracle() {
    let a = layer(32, 2, 1, false, 1);
    let mut rng = Rng::seed(2);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 16, 32], 1.0);
    let y = a.full_attention(&x, &Ctx::eval()).unwrap();
    let tokens: Vec<Vec<f64>> = x.data().chunks(32).map(|c| c.to_vec()).collect();
    let want = loop_oracle(&a, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((y.at(&[0, i, j]) - v).abs() < 1e-10);
        }
    }
}

#[test]
fn single_token_output_is_projected_value() {
    let a = layer(8, 2, 1, false, 3);
    let x: Tensor<f64> = Rng::seed(4).normal_tensor(&[1, 1, 8], 1.0);
    let y = a.full_attention(&x, &Ctx::eval()).unwrap();
    let qkv = pointwise(&a.qkv, x.data());
    let want = pointwise(&a.proj, &qkv[16..]);
    for (g, w) in y.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn full_attention_is_permutation_equivariant() {
    let a = layer(16, 2, 1, false, 5);
    let mut rng = Rng::seed(6);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 12, 16], 1.0);
    let mut perm: Vec<usize> = (0..12).collect();
    rng.shuffle(&mut perm);
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn(vec![1, 12, 16], |i| t.at(&[0, perm[i / 16], i % 16])).unwrap()
    };
    let ctx = Ctx::eval();
    let lhs = a.full_attention(&permute(&x), &ctx).unwrap();
    let rhs = permute(&a.full_attention(&x, &ctx).unwrap());
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn heads_must_divide_channels() {
    assert!(matches!(AttentionConfig::new(30, 4), Err(Error::Config(_))));
    assert!(matches!(AttentionConfig::new(32, 0), Err(Error::Config(_))));
}

#[test]
fn mlp_hidden_width_rounds_half_up() {
    assert_eq!(AttentionConfig::new(64, 2).unwrap().mlp_hidden(), 77);
    assert_eq!(AttentionConfig::new(5, 1).unwrap().with_mlp_ratio(1.1).mlp_hidden(), 6);
    assert_eq!(AttentionConfig::new(32, 1).unwrap().mlp_hidden(), 38);
}

fn flatten(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4("t").unwrap();
    x.reshape(&[n, c, h * w]).unwrap().permute(&[0, 2, 1]).unwrap()
}

#[test]
fn one_area_equals_full_attention() {
    for (seed, (c, h, hh, ww)) in [(8, 2, 3, 5), (16, 4, 4, 4), (32, 1, 2, 7)].into_iter().enumerate() {
        let a = layer(c, h, 1, false, seed as u64);
        let x: Tensor<f64> = Rng::seed(10 + seed as u64).normal_tensor(&[2, c, hh, ww], 1.0);
        let ctx = Ctx::eval();
        let area = flatten(&a.forward(&x, &ctx).unwrap());
        let full = a.full_attention(&flatten(&x), &ctx).unwrap();
        assert!(area.max_abs_diff(&full) < 1e-10);
    }
}

#[test]
fn areas_match_slab_by_slab_oracle() {
    for axis in [PartitionAxis::Horizontal, PartitionAxis::Vertical] {
        let mut a = layer(32, 2, 4, false, 7);
        a.cfg.axis = axis;
        let x: Tensor<f64> = Rng::seed(8).normal_tensor(&[1, 32, 16, 16], 1.0);
        let ctx = Ctx::eval();
        let y = a.forward(&x, &ctx).unwrap();
        let mut whole = a.clone();
        whole.cfg.area_segments = 1;
        let spatial = if axis == PartitionAxis::Horizontal { 2 } else { 3 };
        let slabs: Vec<Tensor<f64>> = (0..4)
            .map(|s| whole.forward(&x.narrow(spatial, 4 * s, 4).unwrap(), &ctx).unwrap())
            .collect();
        let want = crate::tensor::concat(&slabs.iter().collect::<Vec<_>>(), spatial).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12, "{axis:?}");
    }
}

#[test]
fn perturbation_stays_in_its_segment() {
    let ctx = Ctx::eval();
    let x: Tensor<f64> = Rng::seed(9).normal_tensor(&[1, 16, 16, 16], 1.0);
    // pixel on the last row of segment 0 (rows 0..4)
    let (py, px) = (3, 8);
    let bumped = x.with_value(x.offset(&[0, 5, py, px]), x.at(&[0, 5, py, px]) + 0.5).unwrap();
    for pe in [false, true] {
        let a = layer(16, 2, 4, pe, 10);
        let (y0, y1) = (a.forward(&x, &ctx).unwrap(), a.forward(&bumped, &ctx).unwrap());
        let mut deepest = 0;
        for c in 0..16 {
            for yy in 4..16 {
                for xx in 0..16 {
                    if y0.at(&[0, c, yy, xx]) != y1.at(&[0, c, yy, xx]) {
                        assert!(pe, "changed outside segment without perceiver at ({yy},{xx})");
                        assert!(yy - py <= 3 && xx.abs_diff(px) <= 3);
                        deepest = deepest.max(yy - py);
                    }
                }
            }
        }
        assert_eq!(deepest, if pe { 3 } else { 0 });
    }
}

#[test]
fn perceiver_support_is_chebyshev_three() {
    let a = layer(4, 1, 1, true, 11);
    let ctx = Ctx::eval();
    let delta = Tensor::from_fn(vec![1, 4, 11, 11], |i| if i % 121 == 5 * 11 + 5 { 1.0 } else { 0.0 }).unwrap();
    let y = a.position_perceiver(&delta, &ctx).unwrap();
    for c in 0..4 {
        for yy in 0..11usize {
            for xx in 0..11usize {
                let far = yy.abs_diff(5).max(xx.abs_diff(5)) > 3;
                assert_eq!(far, y.at(&[0, c, yy, xx]) == 0.0, "({yy},{xx})");
            }
        }
    }
    let zero = a.position_perceiver(&Tensor::zeros(vec![1, 4, 5, 5]), &ctx).unwrap();
    assert!(zero.data().iter().all(|v| *v == 0.0));
}

#[test]
fn perceiver_breaks_permutation_equivariance() {
    let ctx = Ctx::eval();
    let x: Tensor<f64> = Rng::seed(12).normal_tensor(&[1, 8, 4, 4], 1.0);
    // swap two pixels
    let swap = |t: &Tensor<f64>| {
        Tensor::from_fn(vec![1, 8, 4, 4], |i| {
            let p = i % 16;
            let q = match p {
                0 => 15,
                15 => 0,
                p => p,
            };
            t.data()[i - p + q]
        })
        .unwrap()
    };
    let with = layer(8, 2, 1, true, 13);
    let d = with.forward(&swap(&x), &ctx).unwrap().max_abs_diff(&swap(&with.forward(&x, &ctx).unwrap()));
    assert!(d > 1e-6);
    let mut without = with.clone();
    without.pe = None;
    let d = without.forward(&swap(&x), &ctx).unwrap().max_abs_diff(&swap(&without.forward(&x, &ctx).unwrap()));
    assert!(d < 1e-12);
}

#[test]
fn partition_round_trip_and_errors() {
    let x: Tensor<f64> = Rng::seed(14).normal_tensor(&[2, 3, 8, 6], 1.0);
    for axis in [PartitionAxis::Horizontal, PartitionAxis::Vertical] {
        for l in [1, 2, 4, 8] {
            let p = AreaPartition::new(8, 6, l, axis).unwrap();
            let t = p.split(&x).unwrap();
            assert_eq!(t.shape(), &[2 * l, 48 / l, 3]);
            assert_eq!(p.merge(&t).unwrap(), x);
        }
    }
    let p = AreaPartition::new(8, 6, 4, PartitionAxis::Vertical).unwrap();
    assert_eq!(p.segment_shape(), None);
    assert_eq!(AreaPartition::new(8, 6, 4, PartitionAxis::Horizontal).unwrap().segment_shape(), Some((2, 6)));
    // 10x10 with four areas: runs of 25 tokens
    let p = AreaPartition::new(10, 10, 4, PartitionAxis::Horizontal).unwrap();
    assert_eq!((p.segment_of(2, 4), p.segment_of(2, 5)), (0, 1));
    match AreaPartition::new(5, 5, 4, PartitionAxis::Horizontal) {
        Err(Error::Partition(msg)) => assert!(msg.contains("H = 5") && msg.contains("25 tokens"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let a = layer(8, 2, 4, true, 15);
    assert!(matches!(a.forward(&Tensor::zeros(vec![1, 8, 5, 5]), &Ctx::eval()), Err(Error::Partition(_))));
}

#[test]
fn cost_examples() {
    assert_eq!(attention_cost(256, 4, 32, 1).unwrap(), 16_777_216);
    assert_eq!(attention_cost(256, 4, 32, 4).unwrap(), 4_194_304);
    assert_eq!(attention_cost(256, 4, 32, 4).unwrap(), 256 * 256 * 4 * 32 / 2);
    assert_eq!(attention_cost(64, 2, 8, 64).unwrap(), 2 * 64 * 2 * 8);
    assert!(matches!(attention_cost(10, 1, 1, 4), Err(Error::Partition(_))));
}

#[test]
fn layer_cost_matches_instrumented_count() {
    for (l, pe) in [(1, false), (4, true), (2, true)] {
        let a = layer(16, 2, l, pe, 16);
        let x: Tensor<f64> = Rng::seed(17).normal_tensor(&[2, 16, 8, 8], 1.0);
        let (_, macs) = counter::count_macs(|| a.forward(&x, &Ctx::eval()).unwrap());
        assert_eq!(macs, a.cost([2, 16, 8, 8]).unwrap().0);
    }
}

#[test]
fn mlp_zero_weights_and_cost() {
    let mut rng = Rng::seed(18);
    let cfg = AttentionConfig::new(64, 2).unwrap();
    let mut mlp = AttentionMlp::<f64>::new(&cfg, &mut rng).unwrap();
    assert_eq!(mlp.hidden(), 77);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 10, 64], 1.0);
    let (_, macs) = counter::count_macs(|| mlp.forward_tokens(&x, &Ctx::eval()).unwrap());
    assert_eq!(macs, 2 * 10 * 64 * 77);
    mlp.zero_weights();
    let y = mlp.forward_tokens(&x, &Ctx::eval()).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

fn naive_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|e| q.at(&[i, e]) * k.at(&[j, e])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
        for e in 0..d {
            out[i * d + e] = (0..n).map(|j| (s[j] - max).exp() / z * v.at(&[j, e])).sum();
        }
    }
    Tensor::from_vec(vec![n, d], out).unwrap()
}

#[test]
fn tiled_matches_naive_for_all_block_sizes() {
    let mut rng = Rng::seed(19);
    let n = 64;
    let (q, k, v): (Tensor<f64>, Tensor<f64>, Tensor<f64>) = (
        rng.normal_tensor(&[n, 16], 1.0),
        rng.normal_tensor(&[n, 16], 1.0),
        rng.normal_tensor(&[n, 16], 1.0),
    );
    let want = naive_oracle(&q, &k, &v);
    let (naive, nstats) = naive_attention(&q, &k, &v, 1).unwrap();
    assert!(naive.max_abs_diff(&want) < 1e-12);
    assert_eq!(nstats.peak_aux, n * n);
    for block in [1, 2, 7, 8, n / 2, n, 2 * n] {
        let (got, stats) = tiled_attention(&q, &k, &v, block).unwrap();
        assert!(got.max_abs_diff(&naive) < 1e-12, "block {block}");
        assert_eq!(stats.peak_aux, block.min(n) + 16);
        assert_eq!(stats.macs, attention_cost(n, 1, 16, 1).unwrap());
    }
    let (q32, k32, v32) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
    let (got, _) = tiled_attention(&q32, &k32, &v32, 8).unwrap();
    assert!(got.cast::<f64>().max_abs_diff(&want) < 1e-5);
    assert!(matches!(tiled_attention(&q, &k, &v, 0), Err(Error::Config(_))));
}

#[test]
fn area_kernel_matches_per_segment_naive() {
    let mut rng = Rng::seed(20);
    let (n, heads, d, l) = (32, 2, 4, 4);
    let q: Tensor<f64> = rng.normal_tensor(&[n, heads * d], 1.0);
    let k: Tensor<f64> = rng.normal_tensor(&[n, heads * d], 1.0);
    let v: Tensor<f64> = rng.normal_tensor(&[n, heads * d], 1.0);
    let ((got, stats), counted) = counter::count_macs(|| area_attention_kernel(&q, &k, &v, heads, l).unwrap());
    assert_eq!(stats.macs, counted);
    assert_eq!(counted, attention_cost(n, heads, d, l).unwrap());
    for s in 0..l {
        for h in 0..heads {
            let pick = |t: &Tensor<f64>| t.narrow(0, s * 8, 8).unwrap().narrow(1, h * d, d).unwrap();
            let want = naive_oracle(&pick(&q), &pick(&k), &pick(&v));
            assert!(pick(&got).max_abs_diff(&want) < 1e-12);
        }
    }
    let (multi, _) = tiled_attention_heads(&q, &k, &v, heads, 5).unwrap();
    let (full, _) = naive_attention(&q, &k, &v, heads).unwrap();
    assert!(multi.max_abs_diff(&full) < 1e-12);
}

#[test]
fn ablock_gradcheck() {
    let mut rng = Rng::seed(21);
    let cfg = AttentionConfig::new(16, 2).unwrap();
    let mut block = ABlock::<f64>::new(cfg, &mut rng).unwrap();
    block.randomize(&mut rng);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 16, 4, 4], 1.0);
    let r: Tensor<f64> = rng.normal_tensor(&[1, 16, 4, 4], 1.0);
    let coords: Vec<usize> = (0..x.numel()).step_by(7).collect();
    let rep = gradcheck_coords(
        |x| {
            let ctx = Ctx::new(crate::nn::Mode::Eval, x.tape().cloned());
            block.forward(x, &ctx)?.mul(&r)?.sum()
        },
        &x,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}
