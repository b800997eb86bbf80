//! Central finite-difference gradient checks shared by the gradient and
//! acceptance suites.

#![allow(dead_code)]

use capocr::data::render::render_line;
use capocr::data::{Task, Vocab};
use capocr::graph::{AttentionSpec, Graph, Var};
use capocr::model::{Captioner, ModelConfig};
use capocr::preprocess::Preprocess;
use capocr::{stream, Result, Tensor};
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error. The floor sits near the rounding noise of a central
/// difference on an O(1) loss (about 1e-16 / STEP), so entries with
/// gradients below it are held to an absolute 1e-10 instead.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
        .requiring_grad()
}

/// Evaluates `f` on the inputs, reducing its output to a scalar through a
/// fixed random projection so every output entry matters.
fn evaluate<F>(inputs: &[Tensor], f: &F) -> (f64, Vec<Vec<f64>>)
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    let (r, c) = g.dims(out);
    let loss = if (r, c) == (1, 1) {
        out
    } else {
        let mut rng = stream(99);
        let w = g.constant(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };
    let value = g.value(loss)[0];
    let grads = g.backward(loss).unwrap();
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (value, per_input)
}

/// Worst relative error over every input entry that requires a gradient.
pub fn op_error<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&inputs, &f);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        for j in 0..t.numel() {
            let mut shifted = inputs.clone();
            shifted[i].data_mut()[j] += STEP;
            let up = evaluate(&shifted, &f).0;
            shifted[i].data_mut()[j] -= 2.0 * STEP;
            let down = evaluate(&shifted, &f).0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Worst error of each primitive op, including plain, causal and cross
/// attention and a composite chain.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("matmul", op_error(vec![random(&[3, 4], 1), random(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]))),
        ("add", op_error(vec![random(&[3, 4], 1), random(&[3, 4], 2)], |g, v| g.add(v[0], v[1]))),
        ("add_rows", op_error(vec![random(&[3, 4], 3), random(&[1, 4], 4)], |g, v| g.add_rows(v[0], v[1]))),
        ("mul", op_error(vec![random(&[2, 5], 1), random(&[2, 5], 2)], |g, v| g.mul(v[0], v[1]))),
        ("mul_self", op_error(vec![random(&[2, 5], 3)], |g, v| g.mul(v[0], v[0]))),
        ("scale", op_error(vec![random(&[2, 5], 4)], |g, v| Ok(g.scale(v[0], -2.5)))),
    ];
    let mut wide = random(&[4, 6], 1);
    wide.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    out.push(("gelu", op_error(vec![wide], |g, v| Ok(g.gelu(v[0])))));
    out.push((
        "layer_norm",
        op_error(vec![random(&[3, 8], 1), random(&[1, 8], 2), random(&[1, 8], 3)], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
    ));
    out.push(("softmax_rows", op_error(vec![random(&[3, 5], 1)], |g, v| Ok(g.softmax_rows(v[0])))));
    for (name, causal) in [("attention", false), ("causal attention", true)] {
        let spec = AttentionSpec { heads: 2, batch: 2, causal };
        out.push((
            name,
            op_error(vec![random(&[6, 4], 1), random(&[6, 4], 2), random(&[6, 4], 3)], move |g, v| {
                g.attention(v[0], v[1], v[2], spec)
            }),
        ));
    }
    let cross = AttentionSpec { heads: 2, batch: 2, causal: false };
    out.push((
        "cross attention",
        op_error(vec![random(&[4, 4], 4), random(&[6, 4], 5), random(&[6, 4], 6)], move |g, v| {
            g.attention(v[0], v[1], v[2], cross)
        }),
    ));
    out.push(("gather_rows", op_error(vec![random(&[5, 3], 1)], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))));
    out.push(("sum", op_error(vec![random(&[3, 3], 1)], |g, v| Ok(g.sum(v[0])))));
    out.push((
        "softmax_cross_entropy",
        op_error(vec![random(&[4, 6], 1)], |g, v| g.softmax_cross_entropy(v[0], &[3, 0, 5, 0], 0)),
    ));
    out.push((
        "chain",
        op_error(vec![random(&[3, 4], 1), random(&[4, 4], 2), random(&[1, 4], 3)], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_rows(h, v[2])?;
            let h = g.gelu(h);
            let s = g.softmax_rows(h);
            g.softmax_cross_entropy(s, &[1, 2, 3], 0)
        }),
    ));
    out
}

/// Checks `per_tensor` entries of every captioner parameter (the largest
/// gradient plus random ones) on a one-sample batch. Returns the worst error,
/// where it occurred and how many entries were checked.
pub fn captioner_error(config: ModelConfig, per_tensor: usize) -> (f64, String, usize) {
    let vocab = Vocab::default();
    let model = Captioner::new(config.clone(), 7).unwrap();
    let mut rng = stream(3);
    let line = render_line("K7Q", Task::Document, &mut rng).unwrap();
    let img = Preprocess::Stretch {
        resolution: config.input_resolution,
    }
    .apply_deterministic(&line.image)
    .unwrap();
    let seq = vocab.encode("K7Q");
    let loss_of = |m: &Captioner| {
        let mut g = Graph::new();
        let (loss, _) = m.batch_loss(&mut g, &[&img], std::slice::from_ref(&seq), None).unwrap();
        g.value(loss)[0]
    };

    let mut analytic = model.clone();
    {
        let mut g = Graph::new();
        let (loss, bound) = model.batch_loss(&mut g, &[&img], std::slice::from_ref(&seq), None).unwrap();
        let grads = g.backward(loss).unwrap();
        bound.accumulate(&grads, analytic.params_mut()).unwrap();
    }

    let mut pick = stream(11);
    let mut probe = model.clone();
    let mut checked = 0;
    let mut worst = (0.0f64, String::new());
    for (idx, p) in analytic.params().iter().enumerate() {
        let grad = p.tensor.grad().expect("every parameter receives a gradient").to_vec();
        // the largest-magnitude entry plus random ones
        let top = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
        let mut coords = vec![top];
        coords.extend((1..per_tensor).map(|_| pick.random_range(0..grad.len())));
        for j in coords {
            let id = capocr::params::ParamId(idx);
            let orig = probe.params().get(id).data()[j];
            probe.params_mut().get_mut(id).data_mut()[j] = orig + STEP;
            let up = loss_of(&probe);
            probe.params_mut().get_mut(id).data_mut()[j] = orig - STEP;
            let down = loss_of(&probe);
            probe.params_mut().get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(grad[j], numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{j}]: analytic {:e} numeric {numeric:e}", p.name, grad[j]));
            }
            checked += 1;
        }
    }
    (worst.0, worst.1, checked)
}
