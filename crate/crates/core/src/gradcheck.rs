//! Central finite-difference verification of recorded backward rules.
//!
//! Each check rebuilds the forward graph for every perturbed element, so it
//! is only meant for small shapes. Non-scalar outputs are reduced with a
//! fixed pseudo-random projection before differentiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst relative error over one checked tensor.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Scalar objective from an arbitrary output: the value itself when it has
/// one element, else its dot product with fixed weights in `[-1, 1)`.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Tensor::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn objective<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    Ok((g, vars, loss))
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> CheckResult {
    let mut res = CheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > res.max_rel_error || i == 0 {
            res = CheckResult { name: name.to_string(), max_rel_error: e, worst_index: i, analytic: *a, numeric: *n };
        }
    }
    res
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<CheckResult>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = objective(&f, inputs, true)?;
    let grads = g.backward(loss)?;
    let mut results = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[k]) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = vec![0.0; input.numel()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let (gp, _, lp) = objective(&f, &work, false)?;
            work[k].data_mut()[i] = orig - h;
            let (gm, _, lm) = objective(&f, &work, false)?;
            work[k].data_mut()[i] = orig;
            numeric[i] = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
        }
        results.push(compare(&format!("input{k}"), &analytic, &numeric));
    }
    Ok(results)
}

/// Worst relative error of `f`'s gradient with respect to `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let r = check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), h)?;
    Ok(r[0].max_rel_error)
}

/// Checks every trainable, unfrozen entry of `store` against the objective
/// built by `f`. Running statistics produced by `f` are discarded.
pub fn check_params<F>(f: F, store: &ParamStore, h: f64) -> Result<Vec<CheckResult>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let loss = project(&mut g, out)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let loss = project(&mut g, out)?;
    let grads = g.backward(loss)?;
    let var_of: std::collections::HashMap<_, _> = g.param_vars().into_iter().collect();

    let mut work = store.clone();
    let mut results = Vec::new();
    for id in store.ids() {
        let e = store.entry(id);
        if !e.requires_grad() {
            continue;
        }
        let analytic = var_of
            .get(&id)
            .and_then(|v| grads.get(*v))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; e.value.numel()]);
        let mut numeric = vec![0.0; e.value.numel()];
        for i in 0..e.value.numel() {
            let orig = e.value.data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        results.push(compare(&e.name, &analytic, &numeric));
    }
    Ok(results)
}

pub fn worst(results: &[CheckResult]) -> f64 {
    results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// Verdict of one named case of [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_error: f64,
    /// The tensor (input index or parameter name) where the worst error occurred.
    pub worst_at: String,
}

impl SuiteCase {
    fn from_results(name: &str, results: &[CheckResult]) -> Self {
        let w = results
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|r| r.name.clone())
            .unwrap_or_default();
        Self { name: name.to_string(), max_rel_error: worst(results), worst_at: w }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so that ReLU is differentiable at every
/// probe point.
fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

type InputCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<InputCase> {
    vec![
        ("add", vec![rand_tensor(&[2, 3, 4], 1), rand_tensor(&[3, 1], 2)], Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]))),
        ("sub", vec![rand_tensor(&[2, 3], 3), rand_tensor(&[1, 3], 4)], Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]))),
        ("mul", vec![rand_tensor(&[2, 3, 4], 5), rand_tensor(&[2, 1, 4], 6)], Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]))),
        ("scale", vec![rand_tensor(&[5], 7)], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.scale(v[0], -1.7)))),
        ("matmul", vec![rand_tensor(&[2, 3, 4], 8), rand_tensor(&[4, 5], 9)], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]))),
        (
            "conv",
            vec![rand_tensor(&[2, 2, 5, 4], 10), rand_tensor(&[3, 2, 3, 3], 11)],
            Box::new(|g: &mut Graph, v: &[Var]| g.conv(v[0], v[1], crate::autodiff::ConvGeom::new(2, 1, 1))),
        ),
        ("relu", vec![off_kink(&[3, 4], 12)], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.relu(v[0])))),
        ("sigmoid", vec![rand_tensor(&[3, 4], 13)], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sigmoid(v[0])))),
        ("softmax", vec![rand_tensor(&[2, 4, 3], 14)], Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0], 1))),
        ("mean", vec![rand_tensor(&[2, 3, 4], 15)], Box::new(|g: &mut Graph, v: &[Var]| g.mean(v[0], &[1, 2], true))),
        ("sum", vec![rand_tensor(&[2, 3], 16)], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sum(v[0])))),
        ("reshape", vec![rand_tensor(&[2, 6], 17)], Box::new(|g: &mut Graph, v: &[Var]| g.reshape(v[0], &[3, 4]))),
        ("permute", vec![rand_tensor(&[2, 3, 4], 18)], Box::new(|g: &mut Graph, v: &[Var]| g.permute(v[0], &[2, 0, 1]))),
        (
            "batch_norm_train",
            vec![rand_tensor(&[3, 2, 4], 19), rand_tensor(&[2], 20), rand_tensor(&[2], 21)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![rand_tensor(&[3, 2, 4], 22), rand_tensor(&[2], 23), rand_tensor(&[2], 24)],
            Box::new(|g: &mut Graph, v: &[Var]| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[1.5, 0.7], 1e-5)),
        ),
        ("cross_entropy", vec![rand_tensor(&[3, 4], 25)], Box::new(|g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &[0, 3, 1]))),
    ]
}

/// A custom op that squares its input but reports `3x` as the derivative.
/// Used as a negative control: the suite must flag it.
pub fn corrupted_case(h: f64) -> Result<SuiteCase> {
    let x = rand_tensor(&[5], 99);
    let r = check_inputs(
        |g, v| {
            let val = g.value(v[0]).map(|e| e * e);
            Ok(g.custom(
                &[v[0]],
                val,
                std::sync::Arc::new(|go, ins| vec![Tensor::from_fn(ins[0].shape(), |i| 3.0 * ins[0].data()[i] * go.data()[i])]),
            ))
        },
        &[x],
        h,
    )?;
    Ok(SuiteCase::from_results("corrupted_square", &r))
}

/// Replaces zero initial values (attention, embeddings, gates, biases) so
/// that every parameter path carries a non-degenerate gradient.
fn perturb_zero_inits(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let e = store.entry(id);
        if e.requires_grad() && e.value.data().iter().all(|v| *v == 0.0) {
            let t = rand_tensor(e.value.shape(), seed + i as u64).map(|v| 0.5 * v);
            store.set_value(id, t).expect("same shape");
        }
    }
}

/// The 2-block model used by the suite: 3 joints on a path, adaptive graphs
/// unfrozen, attention on, training-mode batch norm.
fn toy_model_case(h: f64) -> Result<SuiteCase> {
    use crate::network::{BlockSpec, Model, ModelConfig, TopologyConfig};
    use crate::skeleton::Preset;
    let blocks = vec![
        BlockSpec { c_in: 3, c_out: 4, stride: 1, adaptive: true, attention: true },
        BlockSpec { c_in: 4, c_out: 4, stride: 2, adaptive: true, attention: true },
    ];
    let cfg = ModelConfig {
        blocks,
        temporal_kernel: 3,
        attention_spatial_kernel: 3,
        attention_temporal_kernel: 3,
        topology: TopologyConfig { preset: Preset::Custom, edges: Some(vec![(0, 1), (1, 2)]), center_joint: Some(1) },
        ..ModelConfig::standard(Preset::Custom, 3, 3, 4, 1)
    };
    let (model, mut store) = Model::new(cfg, 7)?;
    model.unfreeze_global_graphs(&mut store);
    perturb_zero_inits(&mut store, 700);
    let x = rand_tensor(&[2, 3, 4, 3, 1], 31);
    let r = check_params(
        |g, s| {
            let vx = g.constant(x.clone());
            let scores = model.forward(g, s, vx, crate::nn::Mode::Train)?;
            g.cross_entropy(scores, &[0, 2])
        },
        &store,
        h,
    )?;
    Ok(SuiteCase::from_results("toy_model_2_blocks", &r))
}

/// Runs the finite-difference check for every differentiable op and for a
/// small end-to-end model, one [`SuiteCase`] per op plus one for the model.
pub fn run_suite(h: f64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        let r = check_inputs(|g, v| f(g, v), &inputs, h)?;
        out.push(SuiteCase::from_results(name, &r));
    }
    out.push(toy_model_case(h)?);
    Ok(out)
}
