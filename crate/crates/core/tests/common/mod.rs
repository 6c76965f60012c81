//! Finite-difference oracles and small fixtures shared by the integration
//! tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokd::datagen::{shuffled, LabeledDataset, Split};
use tokd::distill::{kd_loss, teacher_features, DistillBatch, DistillConfig, DistillMode, Distiller};
use tokd::nn::{prefixed, Adam};
use tokd::nn::{cross_entropy, BnGrad, Grads, Layer, NetworkGraph};
use tokd::rotation::{manifold_update, rotation_loss, Branch, GradientRecord, RotationPair};
use tokd::student::{StudentConfig, StudentNet};
use tokd::teacher::{fre_projector, rgb_projector, RfamBlock, TeacherConfig, TeacherNet};
use tokd::nn::StepLrSchedule;
use tokd::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Magnitude floor of the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-5;
/// Entries probed per tensor.
pub const FD_PROBES: usize = 6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= FD_PROBES {
        (0..len).collect()
    } else {
        (0..FD_PROBES).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Central difference of `loss` along entry `i` of the tensor that `slot`
/// selects inside a fresh copy of `model`.
fn central<M: Clone>(
    model: &M,
    slot: &impl for<'a> Fn(&'a mut M, &str) -> &'a mut Tensor,
    name: &str,
    i: usize,
    loss: &impl Fn(&mut M) -> f64,
) -> f64 {
    let mut plus = model.clone();
    slot(&mut plus, name).data_mut()[i] += FD_STEP;
    let mut minus = model.clone();
    slot(&mut minus, name).data_mut()[i] -= FD_STEP;
    (loss(&mut plus) - loss(&mut minus)) / (2.0 * FD_STEP)
}

/// Largest relative error over sampled entries of every tensor in `grads`.
/// `slot(model, name)` must return the tensor that `name` refers to.
pub fn check_named<M: Clone>(
    model: &M,
    grads: &[(String, Tensor)],
    slot: impl for<'a> Fn(&'a mut M, &str) -> &'a mut Tensor,
    loss: impl Fn(&mut M) -> f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, g) in grads {
        for i in probes(g.len(), rng) {
            let numeric = central(model, &slot, name, i, &loss);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

pub fn graph_param<'a>(g: &'a mut NetworkGraph, name: &str) -> &'a mut Tensor {
    g.params_mut().into_iter().find(|(k, _)| k == name).map(|(_, t)| t).expect("parameter name")
}

fn weighted_sum(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn sorted(grads: Grads) -> Vec<(String, Tensor)> {
    grads.into_iter().collect()
}

/// FD check of a graph in training mode under `L = Σ w·out`, for all
/// parameters and the input.
pub fn check_graph(graph: &NetworkGraph, x: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = graph.clone();
    let out = g.forward_train(x).unwrap();
    let w = randn(out.shape(), rng);
    let (dx, grads) = g.backward(&w).unwrap();
    let params = check_named(
        graph,
        &sorted(grads),
        |m, n| graph_param(m, n),
        |m| weighted_sum(&m.forward_train(x).unwrap(), &w),
        rng,
    );
    let input = check_named(
        &(graph.clone(), x.clone()),
        &[("x".into(), dx)],
        |m, _| &mut m.1,
        |m| weighted_sum(&m.0.forward_train(&m.1).unwrap(), &w),
        rng,
    );
    params.max(input)
}

/// FD check of the frozen-statistics backward: the reference function is
/// the network with batch-norm statistics pinned to the current batch.
pub fn check_graph_frozen(graph: &NetworkGraph, x: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = graph.clone();
    let out = g.forward_train(x).unwrap();
    let pinned = g.with_pinned_batch_stats().unwrap();
    let w = randn(out.shape(), rng);
    let (dx, grads) = g.backward_with(&w, BnGrad::FrozenStats).unwrap();
    let params = check_named(
        &pinned,
        &sorted(grads),
        |m, n| graph_param(m, n),
        |m| weighted_sum(&m.infer(x).unwrap(), &w),
        rng,
    );
    let input = check_named(
        &(pinned.clone(), x.clone()),
        &[("x".into(), dx)],
        |m, _| &mut m.1,
        |m| weighted_sum(&m.0.infer(&m.1).unwrap(), &w),
        rng,
    );
    params.max(input)
}

/// One graph per layer kind, each with a matching random input.
pub fn layer_zoo(rng: &mut ChaCha8Rng) -> Vec<(&'static str, NetworkGraph, Tensor)> {
    let n = 3;
    let img = [2usize, 5, 5];
    let mut out = Vec::new();
    let mut push = |name, shape: &[usize], layers: Vec<Layer>, rng: &mut ChaCha8Rng| {
        let g = NetworkGraph::new(shape, layers).unwrap();
        let mut s = vec![n];
        s.extend_from_slice(shape);
        out.push((name, g, randn(&s, rng)));
    };
    let l = Layer::conv(2, 3, 3, 1, 1, rng);
    push("conv 3x3 s1 p1", &img, vec![l], rng);
    let l = Layer::conv(2, 3, 3, 2, 1, rng);
    push("conv 3x3 s2 p1", &img, vec![l], rng);
    let l = Layer::conv(2, 4, 1, 1, 0, rng);
    push("conv 1x1", &img, vec![l], rng);
    let mut bn = Layer::batch_norm(2);
    if let Layer::BatchNorm(b) = &mut bn {
        b.gamma = randn(&[2], rng);
        b.beta = randn(&[2], rng);
    }
    push("batch_norm", &img, vec![bn], rng);
    push("relu", &img, vec![Layer::relu()], rng);
    push("sigmoid", &img, vec![Layer::sigmoid()], rng);
    push("global_avg_pool", &img, vec![Layer::global_avg_pool()], rng);
    push("flatten", &img, vec![Layer::flatten()], rng);
    let l = Layer::linear(6, 4, rng);
    push("linear", &[6], vec![l], rng);
    out
}

pub fn check_rfam(residual: bool, rng: &mut ChaCha8Rng) -> f64 {
    let shape = [2usize, 3, 3];
    let block = RfamBlock::new(&shape, 2, residual, rng).unwrap();
    let fr = randn(&[3, 2, 3, 3], rng);
    let ff = randn(&[3, 2, 3, 3], rng);
    let wr = randn(fr.shape(), rng);
    let wf = randn(ff.shape(), rng);
    let loss = |b: &mut RfamBlock, a: &Tensor, c: &Tensor| {
        let (or, of) = b.forward_train(a, c).unwrap();
        weighted_sum(&or, &wr) + weighted_sum(&of, &wf)
    };
    let mut b = block.clone();
    b.forward_train(&fr, &ff).unwrap();
    let (dr, df, grads) = b.backward(&wr, &wf).unwrap();
    let params = check_named(
        &block,
        &sorted(grads),
        |m, n| graph_param(m.net_mut(), n),
        |m| loss(m, &fr, &ff),
        rng,
    );
    let inputs = check_named(
        &(block.clone(), fr.clone(), ff.clone()),
        &[("rgb".into(), dr), ("fre".into(), df)],
        |m, n| if n == "rgb" { &mut m.1 } else { &mut m.2 },
        |m| {
            let (a, c) = (m.1.clone(), m.2.clone());
            loss(&mut m.0, &a, &c)
        },
        rng,
    );
    params.max(inputs)
}

/// The four projector graphs over a small feature map.
pub fn projectors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, NetworkGraph)> {
    let shape = [4usize, 3, 3];
    vec![
        ("teacher rgb projector", rgb_projector(&shape, 3, rng).unwrap()),
        ("teacher fre projector", fre_projector(&shape, 3, rng).unwrap()),
        ("student rgb projector", tokd::student::student_rgb_projector(&shape, 3, rng).unwrap()),
        ("student fre projector", tokd::student::student_fre_projector(&shape, 3, rng).unwrap()),
    ]
}

pub fn check_kd(rng: &mut ChaCha8Rng) -> f64 {
    let s = randn(&[4, 2, 2, 3], rng);
    let t = randn(&[4, 2, 2, 3], rng);
    let k = kd_loss(&s, &t).unwrap();
    check_named(
        &(s, t),
        &[("s".into(), k.grad_student), ("t".into(), k.grad_teacher)],
        |m, n| if n == "s" { &mut m.0 } else { &mut m.1 },
        |m| kd_loss(&m.0, &m.1).unwrap().loss,
        rng,
    )
}

pub fn check_ce(rng: &mut ChaCha8Rng) -> f64 {
    let logits = randn(&[6, 3], rng).scale(3.0);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    check_named(&logits, &[("logits".into(), g)], |m, _| m, |m| cross_entropy(m, &labels).unwrap().0, rng)
}

/// A rotation a small random walk away from the identity.
pub fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let g = randn(&[d, d], rng);
    manifold_update(&Tensor::identity(d), &g, 0.5).unwrap()
}

pub fn tiny_student(seed: u64) -> StudentNet {
    StudentNet::new(StudentConfig {
        image_size: 8,
        in_channels: 3,
        stages: vec![3, 4],
        proj_channels: 3,
        rotation_dim: 10,
        seed,
    })
    .unwrap()
}

/// FD check of `CE + α₁·kd(F_Sr, T_r) + α₂·kd(F_Sf, T_f)` with respect to
/// every student parameter, through non-identity rotations.
pub fn check_student_loss(seed: u64, rng: &mut ChaCha8Rng) -> f64 {
    let mut s = tiny_student(seed);
    let d = s.rotation.dim();
    s.rotation.set(Branch::Rgb, random_rotation(d, rng)).unwrap();
    s.rotation.set(Branch::Fre, random_rotation(d, rng)).unwrap();
    let x = randn(&[3, 3, 8, 8], rng);
    let labels = vec![0, 1, 1];
    let (a1, a2) = (1.5, 0.7);
    let mut pshape = vec![3];
    pshape.extend_from_slice(s.projection_shape());
    let tr = randn(&pshape, rng);
    let tf = randn(&pshape, rng);
    let loss = |m: &mut StudentNet| {
        let o = m.forward_train(&x, true, true).unwrap();
        cross_entropy(&o.logits, &labels).unwrap().0
            + a1 * kd_loss(o.f_rgb.as_ref().unwrap(), &tr).unwrap().loss
            + a2 * kd_loss(o.f_fre.as_ref().unwrap(), &tf).unwrap().loss
    };
    let mut m = s.clone();
    let o = m.forward_train(&x, true, true).unwrap();
    let (_, dl) = cross_entropy(&o.logits, &labels).unwrap();
    let gr = kd_loss(o.f_rgb.as_ref().unwrap(), &tr).unwrap().grad_student.scale(a1);
    let gf = kd_loss(o.f_fre.as_ref().unwrap(), &tf).unwrap().grad_student.scale(a2);
    let grads = m.backward(&dl, Some(&gr), Some(&gf)).unwrap();
    check_named(
        &s,
        &sorted(grads),
        |m, n| m.trainable_params_mut(true, true).into_iter().find(|(k, _)| k == n).map(|(_, t)| t).expect("name"),
        loss,
        rng,
    )
}

/// FD check of the teacher's classification loss through both branches,
/// the attention blocks and the fusion head.
pub fn check_teacher_loss(seed: u64, rng: &mut ChaCha8Rng) -> f64 {
    let t = TeacherNet::new(TeacherConfig {
        image_size: 8,
        in_channels: 3,
        stages: vec![3, 4],
        rfam_blocks: 2,
        rfam_modules: 1,
        rfam_residual: false,
        proj_channels: 2,
        seed,
    })
    .unwrap();
    let x = randn(&[3, 3, 8, 8], rng);
    let xf = randn(&[3, 3, 8, 8], rng);
    let labels = vec![1, 0, 1];
    let mut m = t.clone();
    let o = m.forward_train(&x, &xf).unwrap();
    let (_, dl) = cross_entropy(&o.logits, &labels).unwrap();
    let grads = m.backward(&dl).unwrap();
    check_named(
        &t,
        &sorted(grads),
        |m, n| m.classifier_params_mut().into_iter().find(|(k, _)| k == n).map(|(_, t)| t).expect("name"),
        |m| cross_entropy(&m.forward_train(&x, &xf).unwrap().logits, &labels).unwrap().0,
        rng,
    )
}

/// Max absolute error between the analytic rotation-loss gradient and
/// central differences, on a random `(d, N)` instance.
pub fn check_rotation_loss(d: usize, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut pair = RotationPair::new(d, StepLrSchedule::new(0.1, 1, 1.0).unwrap()).unwrap();
    pair.set(Branch::Rgb, random_rotation(d, rng)).unwrap();
    pair.set(Branch::Fre, random_rotation(d, rng)).unwrap();
    let ur = randn(&[n, d + 2], rng);
    let uf = randn(&[n, d + 2], rng);
    let rec = GradientRecord::build(&ur, &uf, &pair, false).unwrap();
    let mut worst = 0.0f64;
    for branch in [Branch::Rgb, Branch::Fre] {
        let r = pair.get(branch).clone();
        let u = rec.grads(branch).clone();
        let analytic = rotation_loss(&rec, &r, &u).unwrap().grad;
        for i in 0..d * d {
            let mut p = r.clone();
            p.data_mut()[i] += FD_STEP;
            let mut q = r.clone();
            q.data_mut()[i] -= FD_STEP;
            let numeric =
                (rotation_loss(&rec, &p, &u).unwrap().loss - rotation_loss(&rec, &q, &u).unwrap().loss) / (2.0 * FD_STEP);
            worst = worst.max((analytic.data()[i] - numeric).abs());
        }
    }
    worst
}

/// Worst DCT round-trip error over `count` random 32×32 images.
pub fn dct_roundtrip_err(count: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..count {
        let x = randn(&[32, 32], rng);
        let back = tokd::frequency::idct2(&tokd::frequency::dct2(&x).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&x).unwrap());
    }
    worst
}

/// Orthonormal DCT-II by the O(N⁴) definition sum.
pub fn dct_by_definition(x: &Tensor) -> Tensor {
    let (h, w) = (x.dim(0), x.dim(1));
    let alpha = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let pi = std::f64::consts::PI;
    let mut out = Tensor::zeros(&[h, w]);
    for u in 0..h {
        for v in 0..w {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x.get(&[i, j])
                        * (pi * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                        * (pi * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                }
            }
            out.set(&[u, v], alpha(u, h) * alpha(v, w) * s);
        }
    }
    out
}

pub fn dct_definition_err(rng: &mut ChaCha8Rng) -> f64 {
    let x = randn(&[8, 8], rng);
    tokd::frequency::dct2(&x).unwrap().max_abs_diff(&dct_by_definition(&x)).unwrap()
}

pub fn matmul_by_loops(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(&[i, t]) * b.get(&[t, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

pub fn conv_by_loops(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (iy, ix) = ((y * stride + i) as isize - pad as isize, (xx * stride + j) as isize - pad as isize);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.get(&[b, c, iy as usize, ix as usize]) * k.get(&[o, c, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, y, xx], s);
                }
            }
        }
    }
    out
}

/// Worst deviation of matmul and conv2d from their loop oracles.
pub fn linear_algebra_err(rng: &mut ChaCha8Rng) -> f64 {
    let a = randn(&[7, 5], rng);
    let b = randn(&[5, 3], rng);
    let mut worst = tokd::tensor::matmul(&a, &b).unwrap().max_abs_diff(&matmul_by_loops(&a, &b)).unwrap();
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let x = randn(&[2, 3, 8, 8], rng);
        let k = randn(&[4, 3, 3, 3], rng);
        let got = tokd::tensor::conv2d(&x, &k, stride, pad).unwrap();
        worst = worst.max(got.max_abs_diff(&conv_by_loops(&x, &k, stride, pad)).unwrap());
    }
    worst
}

/// Runs `steps` random-gradient Cayley updates from the identity and
/// returns the worst orthogonality error and determinant deviation.
pub fn cayley_drift(d: usize, steps: usize, lr: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut r = Tensor::identity(d);
    let (mut orth, mut det) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        r = manifold_update(&r, &randn(&[d, d], rng), lr).unwrap();
        orth = orth.max(tokd::rotation::orthogonality_error(&r));
        det = det.max((tokd::rotation::determinant(&r) - 1.0).abs());
    }
    (orth, det)
}

/// Worst change of the subspace row norm under `rotate` with a random rotation.
pub fn rotate_norm_err(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m, d) = (6, 20, 12);
    let z = randn(&[n, m], rng);
    let r = random_rotation(d, rng);
    let out = tokd::rotation::rotate(&z, &r).unwrap();
    let mut worst = 0.0f64;
    for i in 0..n {
        let a = &z.data()[i * m..i * m + d];
        let b = &out.data()[i * m..i * m + d];
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((na - nb).abs());
        worst = worst.max(tokd::Tensor::from_vec(z.data()[i * m + d..(i + 1) * m].to_vec())
            .max_abs_diff(&tokd::Tensor::from_vec(out.data()[i * m + d..(i + 1) * m].to_vec()))
            .unwrap());
    }
    worst
}

/// Mann-Whitney AUC by comparing every positive with every negative.
pub fn auc_all_pairs(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// EER from error rates evaluated on a dense threshold grid, with linear
/// interpolation across the first grid interval where FPR - FNR turns
/// negative. Scores must lie on a lattice of spacing `lattice`, coarser
/// than the grid.
pub fn eer_dense_grid(scores: &[f64], labels: &[usize], lattice: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min) - lattice;
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + lattice;
    let step = lattice / 4.0;
    let rates = |t: f64| {
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| l == 0 && s >= t).count() as f64 / neg;
        let fne = scores.iter().zip(labels).filter(|(&s, &l)| l == 1 && s < t).count() as f64 / pos;
        (fp, fne)
    };
    let mut prev = rates(lo);
    let mut t = lo + step;
    while t <= hi + step {
        let cur = rates(t);
        let (d1, d2) = (prev.0 - prev.1, cur.0 - cur.1);
        if d1 >= 0.0 && d2 < 0.0 {
            if d1 == 0.0 {
                return prev.0;
            }
            let lam = d1 / (d1 - d2);
            return prev.0 + lam * (cur.0 - prev.0);
        }
        prev = cur;
        t += step;
    }
    panic!("no crossing on the grid")
}

/// Lattice scores in `[0, 1]` (spacing 0.01, ties likely) with both classes.
pub fn lattice_scores(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = labels.iter().map(|&l| (rng.gen_range(0..=70) + 30 * l) as f64 / 100.0).collect();
    (scores, labels)
}

/// Training batches in the order the distillation loop visits them.
pub fn batches(cfg: &DistillConfig, data: &LabeledDataset, feats: &(Tensor, Tensor)) -> Vec<(usize, DistillBatch)> {
    let train = data.indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        for chunk in shuffled(&train, &mut rng).chunks(cfg.batch_size) {
            let (x, _, labels) = data.batch(chunk).unwrap();
            let teacher_rgb = feats.0.select_rows(chunk).unwrap();
            let teacher_fre = feats.1.select_rows(chunk).unwrap();
            out.push((epoch, DistillBatch { x, labels, teacher_rgb, teacher_fre }));
        }
    }
    out
}

pub fn student_core(s: &StudentNet) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        s.backbone.params().into_iter().map(|(k, t)| (format!("backbone.{k}"), t.clone())).collect();
    out.extend(s.classifier.params().into_iter().map(|(k, t)| (format!("classifier.{k}"), t.clone())));
    out
}


/// Steps a vanilla distiller and an independently written supervised loop
/// over the same batches; reports the first step whose parameters differ.
pub fn vanilla_vs_plain_loop(cfg: &DistillConfig, teacher: &TeacherNet, data: &LabeledDataset) -> Result<(), String> {
    let cfg = DistillConfig { mode: DistillMode::Vanilla, ..cfg.clone() };
    let feats = teacher_features(teacher, data).unwrap();
    let student = StudentNet::new(cfg.student_config(data, teacher)).unwrap();
    let mut plain = student.clone();
    let mut dist = Distiller::new(cfg.clone(), student, teacher.clone()).unwrap();
    let mut adam = Adam::new(cfg.eta_s.lr(0));
    for (step, (epoch, b)) in batches(&cfg, data, &feats).into_iter().enumerate() {
        dist.step(&b, epoch).unwrap();

        let z = plain.backbone.forward_train(&b.x).unwrap();
        let logits = plain.classifier.forward_train(&z).unwrap();
        let (_, dl) = cross_entropy(&logits, &b.labels).unwrap();
        let (dz, gc) = plain.classifier.backward(&dl).unwrap();
        let (_, gb) = plain.backbone.backward(&dz).unwrap();
        let mut grads = prefixed("classifier", gc);
        grads.extend(prefixed("backbone", gb));
        adam.lr = cfg.eta_s.lr(epoch);
        let mut params: Vec<(String, &mut Tensor)> =
            plain.backbone.params_mut().into_iter().map(|(k, t)| (format!("backbone.{k}"), t)).collect();
        params.extend(plain.classifier.params_mut().into_iter().map(|(k, t)| (format!("classifier.{k}"), t)));
        adam.step(params, &grads).unwrap();

        if student_core(&dist.student) != student_core(&plain) {
            return Err(format!("parameters differ after step {step}"));
        }
    }
    Ok(())
}

/// Steps a tokd distiller with both alphas zero next to a vanilla one;
/// rotations must stay exactly at the identity and the backbone and
/// classifier must follow the vanilla trajectory bit for bit.
pub fn zero_alpha_tokd_vs_vanilla(cfg: &DistillConfig, teacher: &TeacherNet, data: &LabeledDataset) -> Result<(), String> {
    let cfg = DistillConfig { mode: DistillMode::Tokd, alpha1: 0.0, alpha2: 0.0, ..cfg.clone() };
    let vcfg = DistillConfig { mode: DistillMode::Vanilla, ..cfg.clone() };
    let feats = teacher_features(teacher, data).unwrap();
    let student = StudentNet::new(cfg.student_config(data, teacher)).unwrap();
    let eye = Tensor::identity(cfg.d);
    let mut tokd = Distiller::new(cfg.clone(), student.clone(), teacher.clone()).unwrap();
    let mut vanilla = Distiller::new(vcfg, student, teacher.clone()).unwrap();
    for (step, (epoch, b)) in batches(&cfg, data, &feats).into_iter().enumerate() {
        tokd.step(&b, epoch).unwrap();
        vanilla.step(&b, epoch).unwrap();
        if tokd.student.rotation.get(Branch::Rgb) != &eye || tokd.student.rotation.get(Branch::Fre) != &eye {
            return Err(format!("rotation left the identity at step {step}"));
        }
        if student_core(&tokd.student) != student_core(&vanilla.student) {
            return Err(format!("trajectory departs from vanilla at step {step}"));
        }
    }
    Ok(())
}
