//! Measurements shared by the integration tests and the acceptance run.

use lcau_tensor::gradcheck::{check_inputs, check_params, GradCheckCfg, GradCheckReport};
use lcau_tensor::{Param, ParamStore, Tensor};
use lcaunet::body_encoder::{swin_block_pair, SwinBlock, TokenGrid, WindowAttention};
use lcaunet::data::{self, SynthConfig};
use lcaunet::decoder::{LcauNet, ModelConfig, PgmfFuse, ResidualBlock};
use lcaunet::edge_encoder::{pdc_conv2d, pdc_to_vanilla_kernel, vanilla_conv2d, PdcBlock};
use lcaunet::attention::attend;
use lcaunet::lcaf::{Lcaf, LcafConfig};
use lcaunet::supervision::{
    bce_loss, binarize, confusion, dice_loss, edge_loss, edge_map_loss, total_loss, EdgeLossParams, LossConfig, Metrics, Reduction,
};
use rand::Rng;

use super::*;

#[derive(Debug, Default)]
pub struct PdcReport {
    pub cases: usize,
    /// PDC vs vanilla conv with the transformed kernel.
    pub transform_diff: f64,
    /// PDC vs the direct-summation oracle.
    pub oracle_diff: f64,
    /// Largest response to a constant input at positions whose window lies
    /// inside the image.
    pub constant_response: f64,
}

pub fn pdc_equivalence(cases: usize, seed: u64) -> PdcReport {
    let mut r = rng(seed);
    let mut rep = PdcReport { cases, ..Default::default() };
    for case in 0..cases {
        let k = if r.gen_bool(0.7) { 3 } else { 5 };
        let cin = r.gen_range(1..=4);
        let depthwise = r.gen_bool(0.5);
        let (groups, cout) = if depthwise { (cin, cin * r.gen_range(1..=2)) } else { (1, r.gen_range(1..=4)) };
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=k / 2);
        let h = r.gen_range(k..=k + 6);
        let w = r.gen_range(k..=k + 6);
        let b = r.gen_range(1..=2);
        let xd = [b, cin, h, w];
        let wd = [cout, cin / groups, k, k];
        let s = seed.wrapping_mul(1000) + case as u64;
        let x = rand_t(&xd, s);
        let wt = rand_t(&wd, s ^ 0x55);
        let y = pdc_conv2d(&x, &wt, stride, pad, groups).unwrap();
        let wv = Tensor::from_vec(pdc_to_vanilla_kernel(&wt.to_vec(), wd), wd.to_vec()).unwrap();
        let yv = vanilla_conv2d(&x, &wv, stride, pad, groups).unwrap();
        rep.transform_diff = rep.transform_diff.max(max_abs_diff(&y.to_vec(), &yv.to_vec()));
        let (yo, od) = pdc_direct(&x.to_vec(), xd, &wt.to_vec(), wd, stride, pad, groups);
        assert_eq!(y.dims(), &od);
        rep.oracle_diff = rep.oracle_diff.max(max_abs_diff(&y.to_vec(), &yo));

        let level = r.gen_range(-3.0..3.0);
        let xc = Tensor::full(level, xd.to_vec());
        let yc = pdc_conv2d(&xc, &wt, stride, pad, groups).unwrap().to_vec();
        let [_, _, oh, ow] = od;
        for (i, v) in yc.iter().enumerate() {
            let (oy, ox) = ((i / ow) % oh, i % ow);
            let (y0, x0) = ((oy * stride) as isize - pad as isize, (ox * stride) as isize - pad as isize);
            let inside = y0 >= 0 && x0 >= 0 && y0 as usize + k <= h && x0 as usize + k <= w;
            if inside {
                rep.constant_response = rep.constant_response.max(v.abs());
            }
        }
    }
    rep
}

fn param_vec(p: &Param<f64>) -> Vec<f64> {
    p.to_vec()
}

/// Window attention whose window covers the whole grid vs dense attention
/// computed from the same weights; returns the max abs difference of the
/// projected outputs over both the regular and the shifted configuration.
pub fn full_window_attention_vs_dense(seed: u64) -> f64 {
    let (b, g, c, heads) = (2, 7, 12, 3);
    let store = ParamStore::<f64>::new(seed);
    let attn = WindowAttention::new(&store.builder().pp("attn"), c, heads, g).unwrap();
    let tokens = rand_t(&[b, g * g, c], seed + 1);
    let z = TokenGrid { tokens: tokens.clone(), grid_h: g, grid_w: g };
    let n = g * g;
    let wqkv = param_vec(&attn.qkv.weight);
    let bqkv = param_vec(attn.qkv.bias.as_ref().unwrap());
    let wp = param_vec(&attn.proj.weight);
    let bp = param_vec(attn.proj.bias.as_ref().unwrap());
    let mut worst = 0.0f64;
    for shifted in [false, true] {
        let got = attn.forward(&z, shifted).unwrap().to_vec();
        for i in 0..b {
            let x = &tokens.to_vec()[i * n * c..(i + 1) * n * c];
            let qkv = linear(x, n, &wqkv, Some(&bqkv), c, 3 * c);
            let pick = |off: usize| -> Vec<f64> { (0..n).flat_map(|t| qkv[t * 3 * c + off..t * 3 * c + off + c].to_vec()).collect() };
            let o = dense_attention(&pick(0), &pick(c), &pick(2 * c), n, c, heads);
            let want = linear(&o, n, &wp, Some(&bp), c, c);
            worst = worst.max(max_abs_diff(&got[i * n * c..(i + 1) * n * c], &want));
        }
    }
    worst
}

/// Windowed cross-attention with a full-map window vs (a) the same module's
/// projections attended globally with no partitioning and (b) a dense
/// scalar oracle. Returns (vs global, vs oracle).
pub fn lca_vs_gca(seed: u64) -> (f64, f64) {
    let (b, g, c, heads) = (2, 6, 8, 2);
    let store = ParamStore::<f64>::new(seed);
    let cfg = LcafConfig { window_h: g, window_w: g, heads, dim: c, ffn_ratio: 2.0 };
    let m = Lcaf::new(&store.builder().pp("f"), cfg).unwrap();
    // non-trivial norm affine parameters
    for (i, p) in store.params().iter().enumerate() {
        if p.name().contains("norm") {
            p.set(rand_vec(p.tensor().elem_count(), seed + 100 + i as u64).iter().map(|v| 1.0 + 0.3 * v).collect()).unwrap();
        }
    }
    let edge = rand_t(&[b, c, g, g], seed + 2);
    let body = rand_t(&[b, c, g, g], seed + 3);
    let local = m.attend_tokens(&edge, &body).unwrap().to_vec();

    let tok = |x: &Tensor<f64>| lcaunet::nn::to_tokens(x).unwrap();
    let e = m.norm_q.forward(&tok(&edge)).unwrap();
    let bt = m.norm_kv.forward(&tok(&body)).unwrap();
    let q = m.wq.forward(&e).unwrap();
    let k = m.wk.forward(&bt).unwrap();
    let v = m.wv.forward(&bt).unwrap();
    let global = attend(&q, &k, &v, heads, None).unwrap().to_vec();

    let n = g * g;
    let lin = |l: &lcaunet::nn::Linear<f64>, x: &[f64]| linear(x, n, &l.weight.to_vec(), l.bias.as_ref().map(|b| b.to_vec()).as_deref(), c, c);
    let ln = |l: &lcaunet::nn::LayerNorm<f64>, x: &[f64]| layer_norm_rows(x, c, &l.gamma.to_vec(), &l.beta.to_vec(), 1e-5);
    let mut oracle = Vec::new();
    let (et, btk) = (tok(&edge).to_vec(), tok(&body).to_vec());
    for i in 0..b {
        let es = ln(&m.norm_q, &et[i * n * c..(i + 1) * n * c]);
        let bs = ln(&m.norm_kv, &btk[i * n * c..(i + 1) * n * c]);
        oracle.extend(dense_attention(&lin(&m.wq, &es), &lin(&m.wk, &bs), &lin(&m.wv, &bs), n, c, heads));
    }
    (max_abs_diff(&local, &global), max_abs_diff(&local, &oracle))
}

/// Finite differences at eps 1e-6 carry roundoff near 1e-9, so gradients
/// below the floor are compared on an absolute scale.
const FD: GradCheckCfg = GradCheckCfg { eps: 1e-6, floor: 1e-5, per_tensor: 0 };

fn project(y: &Tensor<f64>, seed: u64) -> lcau_tensor::Result<Tensor<f64>> {
    Ok(y.mul(&rand_t(y.dims(), seed ^ 0xABCD))?.sum_all())
}

fn jitter(store: &ParamStore<f64>, scale: f64, seed: u64) {
    for (i, p) in store.params().iter().enumerate() {
        let noise = rand_vec(p.tensor().elem_count(), seed + i as u64);
        p.set(p.to_vec().iter().zip(noise).map(|(a, n)| a + scale * n).collect()).unwrap();
    }
}

fn both(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> lcau_tensor::Result<Tensor<f64>>) -> GradCheckReport {
    let cfg = FD;
    let a = check_inputs(&f, inputs, cfg).unwrap();
    let p = check_params(|| f(inputs), &store.params(), cfg).unwrap();
    a.merge(p)
}

fn lift<T>(r: lcaunet::Result<T>) -> lcau_tensor::Result<T> {
    r.map_err(|e| match e {
        lcaunet::ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

/// Worst relative finite-difference error per building block, with the
/// tolerance each must meet.
pub fn gradient_suite(seed: u64, include_model: bool) -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();

    let s = ParamStore::<f64>::new(seed);
    let blk = PdcBlock::new(&s.builder().pp("pdc"), 3).unwrap();
    let r = both(&s, &[rand_t(&[1, 3, 5, 5], seed + 1)], |x| project(&lift(blk.forward(&x[0]))?, 1));
    out.push(("pdc_block", r.max_rel_err, 1e-3));

    let s = ParamStore::<f64>::new(seed);
    let pb = s.builder();
    let a = SwinBlock::new(&pb.pp("a"), 8, 2, 2, 2.0, false).unwrap();
    let b = SwinBlock::new(&pb.pp("b"), 8, 2, 2, 2.0, true).unwrap();
    jitter(&s, 0.2, seed + 50);
    let r = both(&s, &[rand_t(&[1, 16, 8], seed + 2)], |x| {
        let z = TokenGrid { tokens: x[0].clone(), grid_h: 4, grid_w: 4 };
        project(&lift(swin_block_pair(&z, &a, &b))?.tokens, 2)
    });
    out.push(("swin_block_pair", r.max_rel_err, 1e-3));

    let s = ParamStore::<f64>::new(seed);
    let m = Lcaf::new(&s.builder().pp("f"), LcafConfig { window_h: 2, window_w: 2, heads: 2, dim: 8, ffn_ratio: 2.0 }).unwrap();
    jitter(&s, 0.2, seed + 60);
    let r = both(&s, &[rand_t(&[1, 8, 4, 4], seed + 3), rand_t(&[1, 8, 4, 4], seed + 4)], |x| {
        project(&lift(m.multi_head_lca(&x[0], &x[1]))?, 3)
    });
    out.push(("multi_head_lca", r.max_rel_err, 1e-3));

    let s = ParamStore::<f64>::new(seed);
    let rb = ResidualBlock::new(&s.builder().pp("res"), 3).unwrap();
    jitter(&s, 0.2, seed + 70);
    let r = both(&s, &[rand_t(&[1, 3, 5, 5], seed + 5)], |x| project(&lift(rb.forward(&x[0]))?, 4));
    out.push(("residual_block", r.max_rel_err, 1e-3));

    let s = ParamStore::<f64>::new(seed);
    let pg = PgmfFuse::new(&s.builder().pp("pgmf"), 4, 6).unwrap();
    jitter(&s, 0.3, seed + 80);
    let r = both(&s, &[rand_t(&[1, 4, 6, 6], seed + 6), rand_t(&[1, 6, 3, 3], seed + 7)], |x| {
        project(&lift(pg.forward(&x[0], &x[1]))?, 5)
    });
    out.push(("pgmf_fuse", r.max_rel_err, 1e-3));

    let disk: Vec<f32> = (0..64).map(|i| ((i / 8) as f32 - 3.5).hypot((i % 8) as f32 - 4.0) < 2.6).map(|b| b as u8 as f32).collect();
    let mask = Tensor::from_vec(disk.iter().map(|&v| v as f64).collect(), (1, 1, 8, 8)).unwrap();
    let mut edge_gt: Vec<f64> = data::derive_edge_gt(&disk, 8, 8).iter().map(|&v| v as f64).collect();
    // fractional labels exercise the ignore band and the soft-positive branch
    edge_gt[0] = 0.2;
    edge_gt[9] = 0.6;
    let edge_gt = Tensor::from_vec(edge_gt, (1, 1, 8, 8)).unwrap();
    let mut inputs = vec![rand_t(&[1, 1, 8, 8], seed + 8).scale(2.0)];
    inputs.extend((0..4).map(|j| rand_t(&[1, 1, 8, 8], seed + 9 + j)));
    let cfg = LossConfig::default();
    let f = |x: &[Tensor<f64>]| {
        let maps: Vec<Tensor<f64>> = x[1..].iter().map(|t| t.sigmoid()).collect();
        Ok(lift(total_loss(&x[0], &maps, &mask, &edge_gt, &cfg))?.total)
    };
    let r = check_inputs(f, &inputs, FD).unwrap();
    out.push(("total_loss", r.max_rel_err, 1e-3));

    if include_model {
        let net = LcauNet::<f64>::new(ModelConfig::micro(), seed).unwrap();
        jitter(&net.store, 0.05, seed + 90);
        let size = net.cfg.image_size;
        let sample = data::synth_lesion_sample(seed + 1, size, size, &SynthConfig::default()).unwrap();
        let (img, mask, edge) = data::batch_tensors::<f64>(&[&sample]).unwrap();
        let f = || -> lcau_tensor::Result<Tensor<f64>> {
            let o = lift(net.forward(&img))?;
            Ok(lift(total_loss(&o.logits, &o.edge_maps, &mask, &edge, &cfg))?.total)
        };
        let r = check_params(f, &net.store.params(), GradCheckCfg { per_tensor: 2, ..FD }).unwrap();
        out.push(("micro_model", r.max_rel_err, 1e-2));
    }
    out
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub instances: usize,
    pub loss_diff: f64,
    pub metric_diff: f64,
}

/// Losses and metrics against the scalar oracles on random instances with
/// sides between 4 and 16.
pub fn loss_metric_oracles(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut rep = OracleReport { instances, ..Default::default() };
    let params = EdgeLossParams::default();
    for _ in 0..instances {
        let (b, h, w) = (r.gen_range(1..=3), r.gen_range(4..=16), r.gen_range(4..=16));
        let n = b * h * w;
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let fg = r.gen_range(0.05..0.95);
        let g: Vec<f64> = (0..n).map(|_| if r.gen_bool(fg) { 1.0 } else { 0.0 }).collect();
        let e: Vec<f64> = (0..n).map(|_| [0.0, 0.0, 0.0, 0.1, 0.5, 1.0][r.gen_range(0..6)]).collect();
        let pt = Tensor::from_vec(p.clone(), (b, 1, h, w)).unwrap();
        let gt = Tensor::from_vec(g.clone(), (b, 1, h, w)).unwrap();
        let et = Tensor::from_vec(e.clone(), (b, 1, h, w)).unwrap();
        let scalar = |t: Tensor<f64>| t.to_scalar().unwrap();
        let d = [
            (scalar(bce_loss(&pt, &gt, Reduction::Mean).unwrap()) - bce_oracle(&p, &g)).abs(),
            (scalar(dice_loss(&pt, &gt, 1.0, Reduction::Mean).unwrap()) - dice_oracle(&p, &g, b, 1.0)).abs(),
            (scalar(edge_map_loss(&pt, &et, &params, Reduction::Mean).unwrap()) - edge_oracle(&p, &e, params.eta, params.lambda)).abs(),
            {
                let maps = vec![pt.clone(), pt.affine(0.5, 0.25), pt.sqr(), pt.affine(-1.0, 1.0)];
                let want: f64 = maps.iter().map(|m| edge_oracle(&m.to_vec(), &e, params.eta, params.lambda)).sum();
                (scalar(edge_loss(&maps, &et, &params, Reduction::Mean).unwrap().0) - want).abs()
            },
        ];
        rep.loss_diff = d.iter().cloned().fold(rep.loss_diff, f64::max);

        let pred = binarize(&p);
        let m = Metrics::from_counts(&confusion(&pred, &g).unwrap());
        let o = metrics_oracle(&pred, &g);
        let got = [m.acc, m.dice, m.iou, m.se, m.sp];
        rep.metric_diff = rep.metric_diff.max(max_abs_diff(&got, &o));
    }
    rep
}

/// Metrics of the tp=2, fp=1, fn=1, tn=0 example.
pub fn worked_example() -> Metrics {
    let pred = [1.0, 1.0, 1.0, 0.0];
    let gt = [1.0, 1.0, 0.0, 1.0];
    Metrics::from_counts(&confusion(&pred, &gt).unwrap())
}
