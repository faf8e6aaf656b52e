//! Helpers shared by the integration tests: a central-difference gradient
//! oracle and small deterministic fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segmenter::encoder::Mode;
use segmenter::image::LabelMap;
use segmenter::{Graph, ModelConfig, Result, SegmenterModel, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Worst element error of `analytic` against `numeric`, relative to the
/// largest numeric magnitude (floored at `1e-8`).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_error_floor(analytic, numeric, 1e-8)
}

pub fn rel_error_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central differences of `f` with respect to every element of `inputs[which]`.
pub fn numeric_grad(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    step: f64,
) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + step;
            let up = f(&work);
            work[which].data_mut()[i] = orig - step;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Checks every input of `build` against central differences. `build` maps the
/// input vars to an arbitrary-shaped output, which is reduced with fixed random
/// weights so that non-uniform upstream gradients are exercised.
/// Returns the worst relative error across inputs.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let weights = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        let shape = g.shape(out).to_vec();
        random_tensor(&mut rng(seed ^ 0x9e37), &shape, 1.0)
    };
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = numeric_grad(&eval, inputs, i, 1e-5);
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Loss of a model on one image against one label map, in evaluation mode.
pub fn model_loss(model: &SegmenterModel<f64>, image: &Tensor<f64>, labels: &LabelMap) -> f64 {
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, image, &mut Mode::Eval)
        .expect("forward");
    let loss = model.loss(&mut g, out.logits, labels).expect("loss");
    g.value(loss.loss).item()
}

/// Compares the analytic gradient of the pixel loss with central differences
/// for every element of every parameter. Weights are jittered away from their
/// initial values so that gradients are not trivially small. Returns the
/// relative error per parameter tensor. The magnitude floor of `1e-6` keeps
/// structurally zero gradients (attention key biases cancel inside the
/// softmax) from dividing finite-difference roundoff by a near-zero scale.
pub fn model_gradcheck(config: ModelConfig, seed: u64) -> Vec<(String, f64)> {
    let mut model = SegmenterModel::<f64>::new(config, seed).expect("model");
    let mut r = rng(seed ^ 0x51);
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let (h, w) = model.config.crop_size();
    let k = model.config.num_classes() as u8;
    let image = random_tensor(&mut r, &[h, w, 3], 2.0);
    let mut labels =
        LabelMap::new(w, h, (0..h * w).map(|_| r.random_range(0..k)).collect()).unwrap();
    labels.data[0] = 255;

    let grads = {
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &image, &mut Mode::Eval)
            .expect("forward");
        let loss = model.loss(&mut g, out.logits, &labels).expect("loss");
        g.backward(loss.loss).expect("backward")
    };
    let mut analytic = model.store.clone();
    analytic.zero_grad();
    analytic.accumulate(&grads).unwrap();

    let step = 1e-5;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    ids.into_iter()
        .map(|id| {
            let n = model.store.value(id).numel();
            let numeric: Vec<f64> = (0..n)
                .map(|i| {
                    let orig = model.store.value(id).data()[i];
                    model.store.value_mut(id).data_mut()[i] = orig + step;
                    let up = model_loss(&model, &image, &labels);
                    model.store.value_mut(id).data_mut()[i] = orig - step;
                    let down = model_loss(&model, &image, &labels);
                    model.store.value_mut(id).data_mut()[i] = orig;
                    (up - down) / (2.0 * step)
                })
                .collect();
            let a = analytic.grad(id).expect("every parameter is reachable");
            (
                model.store.get(id).name.clone(),
                rel_error_floor(a.data(), &numeric, 1e-6),
            )
        })
        .collect()
}
