//! Central finite differences against reverse-mode gradients.

use chandiff::denoiser::{DenoiserConfig, DenoiserModel};
use chandiff::numerics::{Graph, Rng, Tensor, Var};

const H: f64 = 1e-5;
const GUARD: f64 = 1e-8;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GUARD)
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Scalarise `out` as `sum(out * r)` for a fixed random `r` and return the
/// worst relative error over every input entry.
pub fn check(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let eval = |ins: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(&inputs);
    let r = Rng::new(99, 1).normal_tensor(g.value(out).shape().to_vec());
    let project = |ins: &[Tensor]| -> f64 {
        let (g, _, out) = eval(ins);
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let grads = g.backward_with_seed(out, &r).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (project(&plus) - project(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Rng::new(seed, 7).normal_tensor(shape.to_vec())
}

/// Worst relative error for every differentiable primitive, by name.
pub fn primitives() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3)] {
        let ins = vec![rand(&[2, 3, 5, 5], 1), rand(&[4, 3, k, k], 2), rand(&[4], 3)];
        let e = check(ins, &move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap());
        out.push((format!("conv2d s{stride} p{pad} k{k}"), e));
    }
    let mut push = |name: &str, ins: Vec<Tensor>, build: &Build| out.push((name.to_string(), check(ins, build)));
    push("linear", vec![rand(&[3, 5], 1), rand(&[4, 5], 2), rand(&[4], 3)], &|g, v| g.linear(v[0], v[1], v[2]).unwrap());
    push("add", vec![rand(&[2, 3], 1), rand(&[2, 3], 2)], &|g, v| g.add(v[0], v[1]).unwrap());
    push("scale", vec![rand(&[2, 3], 1)], &|g, v| g.scale(v[0], -1.7).unwrap());
    push("add_channel", vec![rand(&[2, 3, 2, 2], 1), rand(&[2, 3], 2)], &|g, v| g.add_channel(v[0], v[1]).unwrap());
    push("concat_channels", vec![rand(&[2, 1, 2, 3], 1), rand(&[2, 2, 2, 3], 2)], &|g, v| {
        g.concat_channels(v[0], v[1]).unwrap()
    });
    push("upsample2x", vec![rand(&[1, 2, 2, 3], 1)], &|g, v| g.upsample2x(v[0]).unwrap());
    push("mean_pool", vec![rand(&[2, 3, 2, 2], 1)], &|g, v| g.mean_pool(v[0]).unwrap());
    push("silu", vec![rand(&[3, 4], 1).map(|x| 3.0 * x)], &|g, v| g.silu(v[0]).unwrap());
    let norm_in = vec![rand(&[2, 4, 3, 3], 1), rand(&[4], 2), rand(&[4], 3)];
    push("group_norm", norm_in.clone(), &|g, v| g.group_norm(v[0], 2, v[1], v[2]).unwrap());
    push("group_norm single group", norm_in, &|g, v| g.group_norm(v[0], 1, v[1], v[2]).unwrap());
    push("matmul", vec![rand(&[2, 3, 4], 1), rand(&[2, 4, 2], 2)], &|g, v| g.matmul(v[0], v[1]).unwrap());
    push("transpose", vec![rand(&[2, 3, 4], 1)], &|g, v| g.transpose(v[0]).unwrap());
    push("softmax", vec![rand(&[2, 3, 4], 1)], &|g, v| g.softmax(v[0]).unwrap());
    push("reshape", vec![rand(&[2, 3, 4], 1)], &|g, v| g.reshape(v[0], &[6, 4]).unwrap());
    push("mse", vec![rand(&[2, 3], 1), rand(&[2, 3], 2)], &|g, v| g.mse(v[0], v[1]).unwrap());
    push("cross_entropy", vec![rand(&[4, 3], 1)], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
    out
}

/// Worst relative error of the loss gradient of a small denoiser with respect to
/// a seeded sample of every parameter tensor and every input entry.
pub fn tiny_denoiser() -> f64 {
    let cfg = DenoiserConfig {
        in_channels: 2,
        base_width: 16,
        width_mult: vec![1, 2],
        res_blocks: 1,
        time_dim: 8,
        attention: vec![false, true],
        timesteps: 10,
    };
    let mut model = DenoiserModel::build(cfg, &mut Rng::new(3, 0)).unwrap();
    // The output projection starts at zero, which would zero every upstream gradient.
    let mut perturb = Rng::new(5, 0);
    let names: Vec<String> = model.params().names().cloned().collect();
    for n in &names {
        for v in model.params_mut().get_mut(n).unwrap().data_mut() {
            *v += 0.1 * perturb.normal();
        }
    }
    let z = rand(&[1, 2, 8, 8], 11);
    let target = rand(&[1, 2, 8, 8], 12);
    let ts = [7];
    let loss_of = |m: &DenoiserModel, z: &Tensor| -> f64 {
        let mut g = Graph::new();
        let zv = g.constant(z.clone()).unwrap();
        let tv = g.constant(target.clone()).unwrap();
        let out = m.forward(&mut g, zv, &ts, false).unwrap();
        let l = g.mse(out, tv).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let zv = g.variable(z.clone()).unwrap();
    let tv = g.constant(target.clone()).unwrap();
    let out = model.forward(&mut g, zv, &ts, true).unwrap();
    let l = g.mse(out, tv).unwrap();
    let grads = g.backward(l).unwrap();
    let pgrads = g.param_grads(&grads);
    assert_eq!(pgrads.len(), names.len(), "every parameter receives a gradient");

    let mut pick = Rng::new(6, 0);
    let mut worst: f64 = 0.0;
    for n in &names {
        let analytic = &pgrads[n];
        let entries: Vec<usize> = if analytic.numel() <= 8 {
            (0..analytic.numel()).collect()
        } else {
            (0..8).map(|_| pick.below(analytic.numel() as u64) as usize).collect()
        };
        for i in entries {
            let orig = model.params().get(n).unwrap().data()[i];
            model.params_mut().get_mut(n).unwrap().data_mut()[i] = orig + H;
            let up = loss_of(&model, &z);
            model.params_mut().get_mut(n).unwrap().data_mut()[i] = orig - H;
            let down = loss_of(&model, &z);
            model.params_mut().get_mut(n).unwrap().data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * H)));
        }
    }
    let gz = grads.get(zv).unwrap();
    for i in 0..z.numel() {
        let (mut up, mut down) = (z.clone(), z.clone());
        up.data_mut()[i] += H;
        down.data_mut()[i] -= H;
        worst = worst.max(rel_err(gz.data()[i], (loss_of(&model, &up) - loss_of(&model, &down)) / (2.0 * H)));
    }
    worst
}
