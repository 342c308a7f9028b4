//! Central finite differences against reverse-mode gradients for every tape
//! primitive, every layer and every loss. Each group returns the relative error
//! of every probed tensor.
#![allow(dead_code)]

use std::sync::Arc;

use natmotion::data::binary_tree;
use natmotion::model::layers::{block_forward, gcn_forward, tcn_forward, BlockSpec};
use natmotion::model::{Forward, Mode, Model, ModelConfig, ParamStore};
use natmotion::numerics::{Tape, Tensor, Var};
use natmotion::skeleton::GraphType;
use natmotion::training::{loss_cls, loss_pnlty, loss_recst, nat_step, Objective};
use natmotion::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Entries probed per tensor; larger tensors are sampled at an even stride.
const PROBES: usize = 12;
/// Denominator floor: gradients that are exactly zero (a bias feeding a
/// train-mode batch norm) otherwise compare rounding noise with itself.
const FLOOR: f64 = 1e-4;

/// Name of each probed tensor with its relative error.
pub type Checks = Vec<(String, f64)>;

const B: usize = 2;
const N: usize = 10;
const J: usize = 5;
const M: usize = 4;

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn probe_indices(n: usize) -> Vec<usize> {
    if n <= PROBES {
        (0..n).collect()
    } else {
        (0..PROBES).map(|k| k * (n - 1) / (PROBES - 1)).collect()
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(FLOOR)
}

/// Sums `out` against fixed random weights so every output element matters.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(tape.sum(out));
    }
    let w = rand_tensor(tape.shape(out), 99, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Checks gradients of a pure tape function with respect to all its inputs.
fn check_op(out: &mut Checks, name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
        let y = f(&mut t, &vars).unwrap();
        let l = reduce(&mut t, y).unwrap();
        t.value(l).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let y = f(&mut t, &vars).unwrap();
    let l = reduce(&mut t, y).unwrap();
    let grads = t.backward(l).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let g = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let idx = probe_indices(inputs[k].numel());
        let analytic: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * STEP)
            })
            .collect();
        let e = rel_err(&analytic, &numeric);
        out.push((format!("{name} input {k}"), e));
    }
}

/// Checks gradients of a model function with respect to every trainable
/// parameter and the input.
fn check_params(
    out: &mut Checks,
    name: &str,
    params: &ParamStore,
    input: &Tensor,
    mode: Mode,
    f: impl Fn(&mut Forward, Var) -> Result<Var>,
) {
    let eval = |p: &ParamStore, x: &Tensor| -> f64 {
        let mut fw = Forward::new(p, mode).with_dropout_seed(5).with_grads(false);
        let xv = fw.constant(x.clone());
        let y = f(&mut fw, xv).unwrap();
        let l = reduce(&mut fw.tape, y).unwrap();
        fw.tape.value(l).item()
    };
    let mut fw = Forward::new(params, mode).with_dropout_seed(5).with_grads(true);
    let xv = fw.tape.leaf(input.clone(), true);
    let y = f(&mut fw, xv).unwrap();
    let l = reduce(&mut fw.tape, y).unwrap();
    let grads = fw.tape.backward(l).unwrap();

    let idx = probe_indices(input.numel());
    let gx = grads.get(xv).expect("input gradient");
    let analytic: Vec<f64> = idx.iter().map(|&i| gx.data()[i]).collect();
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let (mut a, mut b) = (input.clone(), input.clone());
            a.data_mut()[i] += STEP;
            b.data_mut()[i] -= STEP;
            (eval(params, &a) - eval(params, &b)) / (2.0 * STEP)
        })
        .collect();
    let e = rel_err(&analytic, &numeric);
    out.push((format!("{name} input"), e));

    let by_path = grads.by_path();
    assert!(!by_path.is_empty(), "{name}: no parameter gradients");
    for (path, g) in by_path {
        let idx = probe_indices(g.numel());
        let analytic: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let (mut a, mut b) = (params.clone(), params.clone());
                a.param_mut(path).unwrap().data_mut()[i] += STEP;
                b.param_mut(path).unwrap().data_mut()[i] -= STEP;
                (eval(&a, input) - eval(&b, input)) / (2.0 * STEP)
            })
            .collect();
        let e = rel_err(&analytic, &numeric);
        out.push((format!("{name} {path}"), e));
    }
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::new(&binary_tree(J).unwrap(), 3);
    c.kernel = 3;
    c.encoder_channels = vec![6, 6, 8];
    c.decoder_channels = vec![8, 6, 4];
    c.arc_hidden = vec![8, 6];
    c.ar_hidden = 8;
    c.init_seed = 11;
    c
}

/// Initialised model with every parameter jittered so no gradient is trivially symmetric.
fn small_model(config: ModelConfig) -> Model {
    let mut model = Model::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let paths: Vec<String> = model.params.params().keys().cloned().collect();
    for p in paths {
        for v in model.params.param_mut(&p).unwrap().data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    model
}

fn motion(frames: usize, seed: u64) -> Tensor {
    let mut t = rand_tensor(&[B, frames, J, 4], seed, 0.3);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 4 == 0 {
            *v += 1.0;
        }
    }
    t
}

fn adjacency() -> Arc<Tensor> {
    Arc::new(
        binary_tree(J)
            .unwrap()
            .normalized_adjacency(GraphType::Bidirectional)
            .unwrap(),
    )
}

fn block_store(prefix: &str, spec: BlockSpec, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let mut k = seed;
    let mut put = |s: &mut ParamStore, path: String, shape: &[usize], centre: f64| {
        k += 1;
        let mut t = rand_tensor(shape, k, 0.4);
        t.data_mut().iter_mut().for_each(|v| *v += centre);
        s.insert_param(path, t);
    };
    let (ci, co) = (spec.c_in, spec.c_out);
    put(&mut s, format!("{prefix}.gcn.weight"), &[ci, ci], 0.0);
    put(&mut s, format!("{prefix}.gcn.bn.gamma"), &[ci], 1.0);
    put(&mut s, format!("{prefix}.gcn.bn.beta"), &[ci], 0.0);
    put(&mut s, format!("{prefix}.tcn.weight"), &[spec.kernel, ci, co], 0.0);
    put(&mut s, format!("{prefix}.tcn.bias"), &[co], 0.0);
    put(&mut s, format!("{prefix}.tcn.bn.gamma"), &[co], 1.0);
    put(&mut s, format!("{prefix}.tcn.bn.beta"), &[co], 0.0);
    if spec.has_shortcut() {
        put(&mut s, format!("{prefix}.shortcut.weight"), &[ci, co], 0.0);
        put(&mut s, format!("{prefix}.shortcut.bias"), &[co], 0.0);
    }
    for bn in ["gcn.bn", "tcn.bn"] {
        let c = if bn == "gcn.bn" { ci } else { co };
        s.insert_buffer(format!("{prefix}.{bn}.running_mean"), rand_tensor(&[c], 70, 0.2));
        s.insert_buffer(format!("{prefix}.{bn}.running_var"), Tensor::full([c], 0.8));
    }
    s
}

pub fn elementwise_primitives() -> Checks {
    let mut out = Vec::new();
    let a = rand_tensor(&[B, 3, 4], 1, 1.0);
    let b = rand_tensor(&[B, 3, 4], 2, 1.0);
    check_op(&mut out, "add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op(&mut out, "sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op(&mut out, "mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op(&mut out, "scale", std::slice::from_ref(&a), |t, v| {
        Ok(t.scale(v[0], -2.5))
    });
    check_op(&mut out, "add_scalar", std::slice::from_ref(&a), |t, v| {
        Ok(t.add_scalar(v[0], 0.7))
    });
    let factor: Vec<f64> = (0..a.numel()).map(|i| (i % 3) as f64 - 0.5).collect();
    check_op(&mut out, "mul_const", std::slice::from_ref(&a), move |t, v| {
        t.mul_const(v[0], factor.clone())
    });
    check_op(&mut out, "abs", std::slice::from_ref(&a), |t, v| Ok(t.abs(v[0])));
    check_op(&mut out, "leaky_relu", std::slice::from_ref(&a), |t, v| {
        Ok(t.leaky_relu(v[0], 0.01))
    });
    out
}

pub fn reduction_primitives() -> Checks {
    let mut out = Vec::new();
    let a = rand_tensor(&[B, 3, 4], 3, 1.0);
    check_op(&mut out, "sum", std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])));
    check_op(&mut out, "mean", std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])));
    check_op(&mut out, "sum_last", std::slice::from_ref(&a), |t, v| {
        Ok(t.sum_last(v[0]))
    });
    let x = rand_tensor(&[B, N, J, 3], 4, 1.0);
    check_op(&mut out, "mean_middle", &[x], |t, v| t.mean_middle(v[0]));
    out
}

pub fn linear_primitives() -> Checks {
    let mut out = Vec::new();
    let x = rand_tensor(&[B, 3, 5], 5, 1.0);
    let w = rand_tensor(&[5, 4], 6, 1.0);
    let b = rand_tensor(&[4], 7, 1.0);
    check_op(&mut out, "matmul", &[x.clone(), w.clone()], |t, v| t.matmul(v[0], v[1]));
    let y = rand_tensor(&[B, 3, 4], 8, 1.0);
    check_op(&mut out, "add_bias", &[y, b], |t, v| t.add_bias(v[0], v[1]));
    let h = rand_tensor(&[B, N, J, 3], 9, 1.0);
    let adj = adjacency();
    check_op(&mut out, "graph_mix", std::slice::from_ref(&h), move |t, v| {
        t.graph_mix(v[0], adj.clone())
    });
    for ks in [1, 3, 9] {
        let w = rand_tensor(&[ks, 3, 2], 10 + ks as u64, 0.5);
        let b = rand_tensor(&[2], 20, 0.5);
        check_op(
            &mut out,
            &format!("temporal_conv ks={ks}"),
            &[h.clone(), w, b],
            |t, v| t.temporal_conv(v[0], v[1], v[2]),
        );
    }
    out
}

pub fn normalization_and_softmax() -> Checks {
    let mut out = Vec::new();
    let x = rand_tensor(&[B, N, J, 3], 30, 2.0);
    let gamma = rand_tensor(&[3], 31, 0.5).map(|v| v + 1.0);
    let beta = rand_tensor(&[3], 32, 0.5);
    check_op(
        &mut out,
        "batch_norm_train",
        &[x.clone(), gamma.clone(), beta.clone()],
        |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5),
    );
    check_op(&mut out, "batch_norm_eval", &[x, gamma, beta], |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
    });
    let logits = rand_tensor(&[B, 4], 33, 2.0);
    check_op(&mut out, "log_softmax", std::slice::from_ref(&logits), |t, v| {
        Ok(t.log_softmax(v[0]))
    });
    check_op(&mut out, "nll", &[logits], |t, v| {
        let lp = t.log_softmax(v[0]);
        t.nll(lp, &[1, 3])
    });
    out
}

pub fn shape_primitives() -> Checks {
    let mut out = Vec::new();
    let c = rand_tensor(&[B, 6], 40, 1.0);
    let pe = rand_tensor(&[M, 6], 41, 1.0);
    check_op(&mut out, "tile_context", &[c, pe], |t, v| t.tile_context(v[0], v[1], J));
    let y0 = rand_tensor(&[B, J, 4], 42, 1.0);
    check_op(&mut out, "repeat_time", std::slice::from_ref(&y0), |t, v| {
        t.repeat_time(v[0], M)
    });
    let a = rand_tensor(&[B, M, J, 3], 43, 1.0);
    let b = rand_tensor(&[B, M, J, 2], 44, 1.0);
    check_op(&mut out, "concat_last", &[a, b], |t, v| t.concat_last(v[0], v[1]));
    let y1 = rand_tensor(&[B, J, 4], 45, 1.0);
    check_op(&mut out, "stack", &[y0.clone(), y1], |t, v| {
        t.stack(&[v[0], v[1], v[0]])
    });
    check_op(&mut out, "reshape", &[y0], |t, v| t.reshape(v[0], [B, J * 4]));
    out
}

pub fn gcn_tcn_and_blocks() -> Checks {
    let mut out = Vec::new();
    let adj = adjacency();
    let h = rand_tensor(&[B, N, J, 3], 50, 1.0);
    for mode in [Mode::Train, Mode::Eval] {
        let spec = BlockSpec {
            c_in: 3,
            c_out: 5,
            kernel: 3,
        };
        let store = block_store("b", spec, 60);
        let a = adj.clone();
        check_params(&mut out, &format!("gcn {mode:?}"), &store, &h, mode, move |fw, x| {
            gcn_forward(fw, "b.gcn", x, &a, 0.01)
        });
        check_params(&mut out, &format!("tcn {mode:?}"), &store, &h, mode, |fw, x| {
            tcn_forward(fw, "b.tcn", x, 0.01)
        });
        let a = adj.clone();
        check_params(
            &mut out,
            &format!("block+shortcut {mode:?}"),
            &store,
            &h,
            mode,
            move |fw, x| block_forward(fw, "b", &spec, x, &a, 0.01),
        );
        let same = BlockSpec {
            c_in: 3,
            c_out: 3,
            kernel: 9,
        };
        let store = block_store("s", same, 80);
        let a = adj.clone();
        check_params(
            &mut out,
            &format!("block identity {mode:?}"),
            &store,
            &h,
            mode,
            move |fw, x| block_forward(fw, "s", &same, x, &a, 0.01),
        );
    }
    out
}

pub fn encoder_decoder_and_arc() -> Checks {
    let mut out = Vec::new();
    let model = small_model(small_config());
    let x = motion(N, 90);
    let m = &model;
    check_params(&mut out, "encoder", &model.params, &x, Mode::Train, |fw, xv| {
        m.encode(fw, xv)
    });

    let c = rand_tensor(&[B, 8], 91, 1.0);
    let y0 = Model::seed_pose(&x).unwrap();
    let times: Vec<usize> = (1..=M).collect();
    check_params(&mut out, "decoder", &model.params, &c, Mode::Train, |fw, cv| {
        let y0 = fw.constant(y0.clone());
        m.decoder_residual(fw, cv, y0, m.posenc_rows(&times))
    });
    check_params(&mut out, "arc", &model.params, &c, Mode::Train, |fw, cv| {
        m.classify(fw, cv)
    });

    let mut ar_cfg = small_config();
    ar_cfg.kind = natmotion::model::ModelKind::Ar;
    let ar = small_model(ar_cfg);
    let (last, before) = Model::history(&x).unwrap();
    let ar_ref = &ar;
    check_params(&mut out, "ar rollout", &ar.params, &c, Mode::Train, |fw, cv| {
        let l = fw.constant(last.clone());
        let p = fw.constant(before.clone());
        ar_ref.ar_rollout(fw, cv, l, p, M, None)
    });
    out
}

pub fn losses() -> Checks {
    let mut out = Vec::new();
    let pred = motion(M, 100);
    let truth = motion(M, 101);
    check_op(&mut out, "recst", &[pred.clone(), truth], |t, v| {
        loss_recst(t, v[0], v[1])
    });
    check_op(&mut out, "pnlty", &[pred], |t, v| loss_pnlty(t, v[0]));
    let logits = rand_tensor(&[B, 3], 102, 1.0);
    check_op(&mut out, "cls", &[logits], |t, v| {
        let lp = t.log_softmax(v[0]);
        loss_cls(t, lp, &[2, 0])
    });
    out
}

pub fn total_multitask_objective() -> Checks {
    let mut out = Vec::new();
    let model = small_model(small_config());
    let x = motion(N, 110);
    let y = motion(M, 111);
    let labels = [0usize, 2];
    let obj = Objective {
        lambda_pnlty: 0.3,
        lambda_cls: 0.5,
        cycle_gradient: true,
    };
    let step = nat_step(&model, &x, &y, Some(&labels), &obj, 7).unwrap();
    let total = |p: &ParamStore| -> f64 {
        let mut mm = model.clone();
        mm.params = p.clone();
        nat_step(&mm, &x, &y, Some(&labels), &obj, 7).unwrap().losses.total
    };
    for (path, g) in &step.grads {
        let idx = probe_indices(g.numel()).into_iter().take(4).collect::<Vec<_>>();
        let analytic: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let (mut a, mut b) = (model.params.clone(), model.params.clone());
                a.param_mut(path).unwrap().data_mut()[i] += STEP;
                b.param_mut(path).unwrap().data_mut()[i] -= STEP;
                (total(&a) - total(&b)) / (2.0 * STEP)
            })
            .collect();
        let e = rel_err(&analytic, &numeric);
        out.push((format!("total objective {path}"), e));
    }
    out
}

/// Every group, in order.
pub fn all() -> Vec<(&'static str, Checks)> {
    vec![
        ("elementwise primitives", elementwise_primitives()),
        ("reduction primitives", reduction_primitives()),
        ("linear primitives", linear_primitives()),
        ("normalization and softmax", normalization_and_softmax()),
        ("shape primitives", shape_primitives()),
        ("gcn, tcn and blocks", gcn_tcn_and_blocks()),
        ("encoder, decoder, arc and ar head", encoder_decoder_and_arc()),
        ("losses", losses()),
        ("total multitask objective", total_multitask_objective()),
    ]
}
