//! Losses, clip preparation and the optimization loop.

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::config::{Config, ModelConfig, SynthConfig, TrackerConfig, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::feature_net::{class_logits, extract_features};
use crate::geometry::{object_roi, search_roi, Roi};
use crate::image::crop_resize;
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::pipeline::Episode;
use crate::synth::{synth_sequence, Sequence};
use crate::template;
use crate::tensor::{s, Scalar, Tensor};
use crate::Rng;

/// Binary target map with class-balanced per-cell weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub extent: usize,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LabelMap {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1.0).count()
    }
}

/// Cells within `r_pos` of the (fractional) offset `(row, col)` are
/// positive; the nearest cell always is. Each class carries total weight
/// one half (all of it if the other class is empty).
pub fn gt_response(offset: (f64, f64), extent: usize, r_pos: f64) -> Result<LabelMap> {
    let max = extent as f64 - 1.0;
    let (oy, ox) = offset;
    if !(0.0..=max).contains(&oy) || !(0.0..=max).contains(&ox) {
        return invalid(format!("offset {offset:?} outside a {extent}x{extent} map"));
    }
    let (ny, nx) = (oy.round() as usize, ox.round() as usize);
    let mut labels = vec![0.0; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let d = (y as f64 - oy).hypot(x as f64 - ox);
            if d <= r_pos || (y, x) == (ny, nx) {
                labels[y * extent + x] = 1.0;
            }
        }
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (wp, wn) = if neg == 0.0 { (1.0 / pos, 0.0) } else { (0.5 / pos, 0.5 / neg) };
    let weights = labels.iter().map(|&l| if l == 1.0 { wp } else { wn }).collect();
    Ok(LabelMap { extent, labels, weights })
}

/// Class-balanced sigmoid cross entropy over the score map.
pub fn matching_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, label: &LabelMap) -> Result<Var> {
    if tape.value(logits).len() != label.labels.len() {
        return invalid(format!("logits {:?} for a {0}x{0} label map", label.extent));
    }
    let targets = label.labels.iter().map(|&v| s(v)).collect();
    let weights = label.weights.iter().map(|&v| s(v)).collect();
    tape.sigmoid_bce(logits, targets, weights)
}

/// `matching + kappa * (-ln p[class])`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    label: &LabelMap,
    class_logits: Var,
    class: usize,
    kappa: f64,
) -> Result<Var> {
    let m = matching_loss(tape, logits, label)?;
    let c = tape.softmax_ce(class_logits, class)?;
    let c = tape.scale(c, s(kappa));
    tape.add(m, c)
}

/// `t` strictly increasing frame indices drawn uniformly without
/// replacement from `0..len`.
pub fn sample_clip(len: usize, t: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if t == 0 || len < t {
        return invalid(format!("cannot draw {t} frames from {len}"));
    }
    let mut idx = sample(rng, len, t).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Network inputs for one teacher-forced clip.
#[derive(Debug, Clone)]
pub struct ClipInputs<T> {
    /// Object patches at the ground-truth box of every clip frame.
    pub object_patches: Vec<Tensor<T>>,
    /// Search patches for frames `1..T`.
    pub search_patches: Vec<Tensor<T>>,
    pub labels: Vec<LabelMap>,
    pub class: usize,
}

/// Crops a clip around ground truth. Search crops are shifted by up to
/// `jitter` times the box size and stretched by up to `stretch`.
pub fn prepare_clip<T: Scalar>(
    seq: &Sequence,
    frames: &[usize],
    model: &ModelConfig,
    tcfg: &TrackerConfig,
    train: &TrainConfig,
    rng: &mut Rng,
) -> Result<ClipInputs<T>> {
    let fc = &model.featnet;
    let m = model.score_extent();
    let stride = fc.total_stride() as f64;
    let mut out = ClipInputs { object_patches: Vec::new(), search_patches: Vec::new(), labels: Vec::new(), class: seq.class };
    for (k, &i) in frames.iter().enumerate() {
        let (img, gt) = (&seq.frames[i], &seq.boxes[i]);
        out.object_patches.push(crop_resize(img, &object_roi(gt, tcfg.context), fc.object_size)?);
        if k == 0 {
            continue;
        }
        let base = search_roi(gt, tcfg.context, fc.object_size, fc.search_size);
        let roi = Roi {
            cx: gt.cx + rng.gen_range(-1.0..=1.0) * train.jitter * gt.w,
            cy: gt.cy + rng.gen_range(-1.0..=1.0) * train.jitter * gt.h,
            side: base.side * (1.0 + rng.gen_range(-1.0..=1.0) * train.stretch),
        };
        let px = fc.search_size as f64 / roi.side;
        let centre = (m as f64 - 1.0) / 2.0;
        let off = (
            ((gt.cy - roi.cy) * px / stride + centre).clamp(0.0, m as f64 - 1.0),
            ((gt.cx - roi.cx) * px / stride + centre).clamp(0.0, m as f64 - 1.0),
        );
        out.search_patches.push(crop_resize(img, &roi, fc.search_size)?);
        out.labels.push(gt_response(off, m, train.r_pos)?);
    }
    Ok(out)
}

/// Summed loss of one unrolled clip: the first object patch seeds the
/// tracker, every later frame adds a matching loss on its search patch and
/// a weighted classification loss on its object template, then writes the
/// object template and distractors to memory.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    model: &ModelConfig,
    tcfg: &TrackerConfig,
    inputs: &ClipInputs<T>,
    kappa: f64,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let steps = inputs.search_patches.len();
    if inputs.object_patches.len() != steps + 1 || inputs.labels.len() != steps || steps == 0 {
        return invalid("clip inputs: need T object patches, T-1 search patches and labels");
    }
    let fc = &model.featnet;
    let p0 = tape.constant(inputs.object_patches[0].clone());
    let t0 = extract_features(tape, params, fc, p0)?;
    let mut ep = Episode::start(tape, params, model, tcfg, t0)?;
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let sp = tape.constant(inputs.search_patches[t].clone());
        let search = extract_features(tape, params, fc, sp)?;
        let step = ep.next_template(tape, params, model, tcfg, search, dropout.as_deref_mut())?;
        let resp = template::response(tape, search, step.template)?;
        let logits = template::response_logits(tape, params, resp)?;
        let op = tape.constant(inputs.object_patches[t + 1].clone());
        let t_new = extract_features(tape, params, fc, op)?;
        let cls = class_logits(tape, params, model, t_new)?;
        let loss = total_loss(tape, logits, &inputs.labels[t], cls, inputs.class, kappa)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        ep.write(tape, model, tcfg, &step, t_new, search, resp)?;
    }
    Ok(total.expect("at least one step"))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: ParamStore<T>,
    v: ParamStore<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name)?.data();
            let m = self.m.get_mut(&name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = s::<T>(b1) * *mi + s::<T>(1.0 - b1) * gi;
            }
            let v = self.v.get_mut(&name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = s::<T>(b2) * *vi + s::<T>(1.0 - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(&name)?.data(), self.v.get(&name)?.data());
            let p = params.get_mut(&name)?.data_mut();
            for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
                let mhat = mi.as_f64() / c1;
                let vhat = vi.as_f64() / c2;
                *pi -= s(lr * mhat / (vhat.sqrt() + cfg.adam_eps));
            }
        }
        Ok(())
    }
}

/// Where training clips come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// A fresh procedural sequence for every clip.
    Synthetic(SynthConfig),
    /// Fixed sequences, visited in order; `cycle` restarts at the end,
    /// otherwise training stops once every sequence has been used.
    Sequences { seqs: Vec<Sequence>, cycle: bool },
}

/// Deterministic 64-bit mix of a seed and two counters.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean clip loss of every completed step.
    pub losses: Vec<f64>,
    /// True when the data source ran out before `steps`.
    pub exhausted: bool,
}

struct ClipJob {
    seq_seed: Option<u64>,
    seq_index: Option<usize>,
    rng_seed: u64,
}

fn clip_gradient(
    model: &Model<f32>,
    cfg: &Config,
    source: &DataSource,
    job: &ClipJob,
) -> Result<(f64, ParamStore<f32>)> {
    let mut rng = Rng::seed_from_u64(job.rng_seed);
    let owned;
    let seq = match (source, job.seq_seed, job.seq_index) {
        (DataSource::Synthetic(sc), Some(seed), _) => {
            owned = synth_sequence(seed, sc)?;
            &owned
        }
        (DataSource::Sequences { seqs, .. }, _, Some(i)) => &seqs[i],
        _ => return Err(Error::State("clip job does not match data source".into())),
    };
    let frames = sample_clip(seq.len(), cfg.train.clip_len, &mut rng)?;
    let inputs = prepare_clip::<f32>(seq, &frames, &model.config, &cfg.tracker, &cfg.train, &mut rng)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let loss = episode_loss(&mut tape, &bound, &model.config, &cfg.tracker, &inputs, cfg.train.kappa, Some(&mut rng))?;
    let value = tape.item(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::State(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, model.params.collect_grads(&bound, &grads)))
}

/// Runs `cfg.train.steps` Adam steps (or until the data runs out) starting
/// from `init`. `progress` sees `(step, mean loss)` after each step.
pub fn train(
    cfg: &Config,
    init: Model<f32>,
    source: &DataSource,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut model = init;
    let mut adam = Adam::new(&model.params);
    let mut losses = Vec::with_capacity(tc.steps);
    let mut next_seq = 0usize;
    let mut exhausted = false;
    for step in 0..tc.steps {
        let mut jobs = Vec::with_capacity(tc.batch);
        for b in 0..tc.batch {
            let rng_seed = mix_seed(tc.seed, step as u64, b as u64);
            let job = match source {
                DataSource::Synthetic(_) => ClipJob { seq_seed: Some(mix_seed(tc.seed ^ 0x5EED, step as u64, b as u64)), seq_index: None, rng_seed },
                DataSource::Sequences { seqs, cycle } => {
                    if seqs.is_empty() {
                        return invalid("no training sequences");
                    }
                    if next_seq >= seqs.len() {
                        if !cycle {
                            exhausted = true;
                            break;
                        }
                        next_seq = 0;
                    }
                    next_seq += 1;
                    ClipJob { seq_seed: None, seq_index: Some(next_seq - 1), rng_seed }
                }
            };
            jobs.push(job);
        }
        if exhausted && jobs.len() < tc.batch {
            break;
        }
        let results: Vec<Result<(f64, ParamStore<f32>)>> =
            jobs.par_iter().map(|j| clip_gradient(&model, cfg, source, j)).collect();
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_scaled(1.0, &g);
        }
        let inv = 1.0 / tc.batch as f32;
        grads.scale_all(inv);
        loss /= tc.batch as f64;
        if tc.clip_norm > 0.0 {
            let norm = grads.sq_norm().sqrt();
            if norm > tc.clip_norm {
                grads.scale_all((tc.clip_norm / norm) as f32);
            }
        }
        let lr = tc.lr * tc.lr_decay.powi((step / tc.lr_decay_interval) as i32);
        adam.step(&mut model.params, &grads, lr, tc)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { model, losses, exhausted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_labels() {
        let l = gt_response((8.0, 8.0), 17, 2.0).unwrap();
        assert_eq!(l.positives(), 13);
        assert!(l.labels.iter().all(|&v| v == 0.0 || v == 1.0));
        let one = gt_response((3.0, 4.0), 17, 0.0).unwrap();
        assert_eq!(one.positives(), 1);
        assert_eq!(one.labels[3 * 17 + 4], 1.0);
        assert!((l.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gt_response((17.5, 0.0), 17, 2.0).is_err());
    }

    #[test]
    fn matching_loss_examples() {
        let label = gt_response((5.0, 5.0), 11, 2.0).unwrap();
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros(&[11, 11]));
        let l = matching_loss(&mut t, z, &label).unwrap();
        assert!((t.item(l) - 2f64.ln()).abs() < 1e-12);
        let signed: Vec<f64> = label.labels.iter().map(|&v| if v == 1.0 { 50.0 } else { -50.0 }).collect();
        let x = t.constant(Tensor::new(vec![11, 11], signed).unwrap());
        let l = matching_loss(&mut t, x, &label).unwrap();
        assert!(t.item(l) < 1e-3 && t.item(l) >= 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let label = gt_response((5.0, 5.0), 11, 2.0).unwrap();
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros(&[11, 11]));
        let c = t.constant(Tensor::zeros(&[30]));
        let l = total_loss(&mut t, z, &label, c, 3, 0.05).unwrap();
        assert!((t.item(l) - (2f64.ln() + 0.05 * 30f64.ln())).abs() < 1e-12);
        assert!((t.item(l) - 0.8632).abs() < 1e-4);
        let l0 = total_loss(&mut t, z, &label, c, 3, 0.0).unwrap();
        assert!((t.item(l0) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clip_sampling() {
        let mut rng = Rng::seed_from_u64(0);
        assert_eq!(sample_clip(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_clip(4, 5, &mut rng).is_err());
        for seed in 0..50 {
            let mut rng = Rng::seed_from_u64(seed);
            let c = sample_clip(60, 16, &mut rng).unwrap();
            assert!(c.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let mut g = ParamStore::new();
        g.insert("w", Tensor::vector(vec![0.5, -3.0]));
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1, &TrainConfig::desk()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }
}
