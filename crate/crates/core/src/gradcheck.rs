//! Central finite-difference verification of the differentiation engine,
//! both per primitive and through the full unrolled tracker loss.
//!
//! A coordinate passes when `|a - n| / max(|a|, |n|, REL_FLOOR) < tol` for
//! analytic gradient `a` and numeric estimate `n`. Coordinates whose
//! perturbation crosses a kink (relu, max pool, or a discrete selection
//! flipping) show one-sided slopes that disagree by more than the mismatch
//! itself; those are counted as skipped, and the suite fails if more than
//! [`MAX_SKIP_FRACTION`] of all coordinates are skipped.

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::config::{Activation, FeatureNetConfig, LayerSpec, ModelConfig, TrackerConfig};
use crate::error::Result;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{episode_loss, gt_response, ClipInputs};
use crate::Rng;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
pub const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub seed: u64,
    pub coords: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn coords(&self) -> usize {
        self.checks.iter().map(|c| c.coords).sum()
    }

    pub fn skipped(&self) -> usize {
        self.checks.iter().map(|c| c.skipped).sum()
    }

    pub fn max_rel(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.max_rel.is_finite() || c.max_rel >= self.tol).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && (self.skipped() as f64) <= MAX_SKIP_FRACTION * self.coords() as f64
    }
}

/// Builds a scalar loss from leaf values; returns the loss and the tape
/// handle of every leaf, in order.
type Build<'a> = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)> + Sync + 'a;

fn value(build: &Build, leaves: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = build(&mut tape, leaves)?;
    Ok(tape.item(loss))
}

/// Compares analytic and numeric gradients over every leaf coordinate.
pub fn check_leaves(name: &str, seed: u64, tol: f64, leaves: Vec<Tensor<f64>>, build: &Build) -> Result<Check> {
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, &leaves)?;
    let f0 = tape.item(loss);
    let grads = tape.backward(loss)?;
    let mut leaves = leaves;
    let mut out = Check { name: name.to_string(), seed, coords: 0, skipped: 0, max_rel: 0.0 };
    for (li, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; leaves[li].len()]);
        for (k, &a) in analytic.iter().enumerate() {
            let x = leaves[li].data()[k];
            leaves[li].data_mut()[k] = x + STEP;
            let fp = value(build, &leaves)?;
            leaves[li].data_mut()[k] = x - STEP;
            let fm = value(build, &leaves)?;
            leaves[li].data_mut()[k] = x;
            let n = (fp - fm) / (2.0 * STEP);
            let err = (a - n).abs();
            let rel = err / a.abs().max(n.abs()).max(REL_FLOOR);
            out.coords += 1;
            let asym = ((fp - f0) / STEP - (f0 - fm) / STEP).abs();
            if rel >= tol && asym > err {
                out.skipped += 1;
                continue;
            }
            out.max_rel = out.max_rel.max(rel);
        }
    }
    Ok(out)
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `sum(out * P)` for a fixed pseudo-random `P`, so every output element
/// contributes with a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = Rng::seed_from_u64(seed ^ 0xA5A5);
    let p = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync>;

fn primitive_table() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    let v = |n: usize| vec![n];
    vec![
        ("add", vec![v(5), v(5)], Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![v(5), v(5)], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![v(5), v(5)], Box::new(|t, x| t.mul(x[0], x[1]))),
        ("scale", vec![v(4)], Box::new(|t, x| Ok(t.scale(x[0], -1.7)))),
        ("offset", vec![v(4)], Box::new(|t, x| Ok(t.offset(x[0], 0.3)))),
        ("mul_scalar", vec![vec![2, 3], v(1)], Box::new(|t, x| t.mul_scalar(x[0], x[1]))),
        ("mul_channels", vec![vec![3, 2, 4], v(4)], Box::new(|t, x| t.mul_channels(x[0], x[1]))),
        ("tanh", vec![v(6)], Box::new(|t, x| Ok(t.tanh(x[0])))),
        ("sigmoid", vec![v(6)], Box::new(|t, x| Ok(t.sigmoid(x[0])))),
        ("relu", vec![v(6)], Box::new(|t, x| Ok(t.relu(x[0])))),
        ("softplus", vec![v(6)], Box::new(|t, x| Ok(t.softplus(x[0])))),
        ("softmax", vec![v(6)], Box::new(|t, x| t.softmax(x[0]))),
        ("matvec", vec![vec![3, 4], v(4)], Box::new(|t, x| t.matvec(x[0], x[1]))),
        ("affine", vec![vec![3, 4], v(4), v(3)], Box::new(|t, x| t.affine(x[0], x[1], x[2]))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("add_row_bias", vec![vec![3, 4], v(4)], Box::new(|t, x| t.add_row_bias(x[0], x[1]))),
        ("mean_rows", vec![vec![3, 4]], Box::new(|t, x| t.mean_rows(x[0]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, x| t.reshape(x[0], &[3, 4]))),
        ("spatial_mean", vec![vec![3, 3, 2]], Box::new(|t, x| t.spatial_mean(x[0]))),
        ("index", vec![v(5)], Box::new(|t, x| t.index(x[0], 3))),
        ("concat", vec![v(2), vec![2, 2]], Box::new(|t, x| t.concat(&[x[0], x[1]]))),
        ("cosine", vec![v(5), v(5)], Box::new(|t, x| t.cosine(x[0], x[1]))),
        ("weighted_sum", vec![v(3), vec![2, 2], vec![2, 2], vec![2, 2]], Box::new(|t, x| t.weighted_sum(x[0], &x[1..]))),
        ("lerp", vec![v(4), v(4), v(1)], Box::new(|t, x| t.lerp(x[0], x[1], x[2]))),
        ("conv2d", vec![vec![5, 5, 2], vec![3, 3, 2, 3], v(3)], Box::new(|t, x| t.conv2d(x[0], x[1], x[2], 1))),
        ("conv2d_stride2", vec![vec![7, 7, 2], vec![3, 3, 2, 2], v(2)], Box::new(|t, x| t.conv2d(x[0], x[1], x[2], 2))),
        ("max_pool", vec![vec![6, 6, 2]], Box::new(|t, x| t.max_pool(x[0], 2, 2))),
        ("max_pool_overlap", vec![vec![5, 5, 2]], Box::new(|t, x| t.max_pool(x[0], 3, 2))),
        ("avg_pool", vec![vec![5, 5, 2]], Box::new(|t, x| t.avg_pool(x[0], 3, 1))),
        ("xcorr", vec![vec![6, 6, 2], vec![3, 3, 2]], Box::new(|t, x| t.xcorr(x[0], x[1]))),
        ("slice2d", vec![vec![5, 5, 2]], Box::new(|t, x| t.slice2d(x[0], 1, 2, 3))),
        ("layer_norm", vec![v(6), v(6), v(6)], Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5))),
        ("dropout", vec![v(6)], Box::new(|t, x| t.dropout(x[0], vec![1.25, 0.0, 1.25, 1.25, 0.0, 1.25]))),
        ("sum", vec![v(5)], Box::new(|t, x| Ok(t.sum(x[0])))),
        ("mean", vec![v(5)], Box::new(|t, x| Ok(t.mean(x[0])))),
        (
            "sigmoid_bce",
            vec![v(6)],
            Box::new(|t, x| t.sigmoid_bce(x[0], vec![1., 0., 1., 0., 0., 1.], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1])),
        ),
        ("softmax_ce", vec![v(5)], Box::new(|t, x| t.softmax_ce(x[0], 2))),
    ]
}

/// Every tape primitive on random inputs drawn from `seed`.
pub fn primitive_checks(seed: u64, tol: f64) -> Result<Vec<Check>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, (name, shapes, op)) in primitive_table().into_iter().enumerate() {
        let leaves: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s, -2.0, 2.0)).collect();
        let pseed = seed.wrapping_mul(1000) + i as u64;
        let build = move |tape: &mut Tape<f64>, vals: &[Tensor<f64>]| -> Result<(Var, Vec<Var>)> {
            let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
            let y = op(tape, &vars)?;
            Ok((project(tape, y, pseed)?, vars))
        };
        out.push(check_leaves(name, seed, tol, leaves, &build)?);
    }
    Ok(out)
}

/// Smallest configuration that still exercises every component: two conv
/// layers with pooling, 5x5 score maps and a few memory slots.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        featnet: FeatureNetConfig {
            object_size: 12,
            search_size: 20,
            layers: vec![
                LayerSpec::new(3, 1, 4, Activation::Relu).pooled(2, 2),
                LayerSpec::new(3, 1, 4, Activation::Linear),
            ],
        },
        hidden_size: 6,
        attention_size: 5,
        num_classes: 3,
        class_hidden: 5,
        patch_stride: 1,
        keep_prob: 1.0,
        ln_eps: 1e-5,
    }
}

pub fn tiny_tracker_config() -> TrackerConfig {
    TrackerConfig { npos: 3, nneg: 4, tau: 1.5, gamma: 0.3, max_distractors: 2, ..TrackerConfig::default() }
}

fn random_clip(rng: &mut Rng, cfg: &ModelConfig, steps: usize) -> Result<ClipInputs<f64>> {
    let (o, s, m) = (cfg.featnet.object_size, cfg.featnet.search_size, cfg.score_extent());
    let mut labels = Vec::new();
    for _ in 0..steps {
        let off = (rng.gen_range(0.0..(m - 1) as f64), rng.gen_range(0.0..(m - 1) as f64));
        labels.push(gt_response(off, m, 1.0)?);
    }
    Ok(ClipInputs {
        object_patches: (0..=steps).map(|_| random(rng, &[o, o, 3], 0.0, 255.0)).collect(),
        search_patches: (0..steps).map(|_| random(rng, &[s, s, 3], 0.0, 255.0)).collect(),
        labels,
        class: rng.gen_range(0..cfg.num_classes),
    })
}

/// Gradient of the unrolled tracker loss over one and two steps with
/// respect to every model parameter.
pub fn composed_checks(seed: u64, tol: f64) -> Result<Vec<Check>> {
    let cfg = tiny_model_config();
    let tcfg = tiny_tracker_config();
    let model: Model<f64> = Model::init(&cfg, seed)?;
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut rng = Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let mut out = Vec::new();
    for steps in [1, 2] {
        let clip = random_clip(&mut rng, &cfg, steps)?;
        let leaves: Vec<Tensor<f64>> = names.iter().map(|n| model.params.get(n).cloned()).collect::<Result<_>>()?;
        let build = |tape: &mut Tape<f64>, vals: &[Tensor<f64>]| -> Result<(Var, Vec<Var>)> {
            let mut store = ParamStore::new();
            for (n, v) in names.iter().zip(vals) {
                store.insert(n.clone(), v.clone());
            }
            let bound = store.bind(tape, true);
            let loss = episode_loss(tape, &bound, &cfg, &tcfg, &clip, 0.5, None)?;
            let vars = names.iter().map(|n| bound.get(n)).collect::<Result<_>>()?;
            Ok((loss, vars))
        };
        out.push(check_leaves(&format!("tracker_loss_{steps}step"), seed, tol, leaves, &build)?);
    }
    Ok(out)
}

/// Primitive and composed checks for `num_seeds` consecutive seeds
/// starting at `seed`, run in parallel.
pub fn run_suite(seed: u64, num_seeds: usize, tol: f64) -> Result<GradcheckReport> {
    let per_seed: Vec<Result<Vec<Check>>> = (seed..seed + num_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let mut v = primitive_checks(s, tol)?;
            v.extend(composed_checks(s, tol)?);
            Ok(v)
        })
        .collect();
    let mut checks = Vec::new();
    for r in per_seed {
        checks.extend(r?);
    }
    Ok(GradcheckReport { checks, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let checks = primitive_checks(3, 1e-4).unwrap();
        for c in &checks {
            assert!(c.max_rel < 1e-4, "{c:?}");
        }
        assert_eq!(checks.iter().map(|c| c.skipped).sum::<usize>(), 0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detach hides the dependence from backward but not from the values
        let build = |tape: &mut Tape<f64>, vals: &[Tensor<f64>]| -> Result<(Var, Vec<Var>)> {
            let x = tape.param(vals[0].clone());
            let d = tape.detach(x);
            let y = tape.mul(x, d)?;
            Ok((tape.sum(y), vec![x]))
        };
        let c = check_leaves("bad", 0, 1e-4, vec![Tensor::vector(vec![0.5, -1.5])], &build).unwrap();
        assert!(c.max_rel > 0.3, "{c:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let build = |tape: &mut Tape<f64>, vals: &[Tensor<f64>]| -> Result<(Var, Vec<Var>)> {
            let x = tape.param(vals[0].clone());
            let r = tape.relu(x);
            Ok((tape.sum(r), vec![x]))
        };
        let c = check_leaves("kink", 0, 1e-4, vec![Tensor::vector(vec![1e-7, 1.0])], &build).unwrap();
        assert_eq!((c.coords, c.skipped), (2, 1));
        assert!(c.max_rel < 1e-8);
    }

    #[test]
    fn composed_loss_passes() {
        for c in composed_checks(1, 1e-4).unwrap() {
            assert!(c.max_rel < 1e-4, "{c:?}");
            assert!(c.skipped * 100 <= c.coords, "{c:?}");
        }
    }
}
