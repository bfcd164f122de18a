//! Shared-weight fully convolutional feature extractor and the auxiliary
//! classification head.

use rand::SeedableRng;

use crate::autodiff::{Tape, Var};
use crate::config::{Activation, FeatureNetConfig, ModelConfig};
use crate::error::{invalid, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::{s, Scalar, Tensor};
use crate::Rng;

pub const PREFIX: &str = "featnet/";
pub const CLASS_PREFIX: &str = "cls/";

fn conv_names(i: usize) -> (String, String) {
    (format!("{PREFIX}conv{i}/w"), format!("{PREFIX}conv{i}/b"))
}

/// Deterministic per seed; weights uniform in `±sqrt(6/(fan_in+fan_out))`,
/// biases zero.
pub fn init_feature_net<T: Scalar>(cfg: &FeatureNetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    add_feature_net(cfg, &mut rng, &mut store);
    Ok(store)
}

pub(crate) fn add_feature_net<T: Scalar>(cfg: &FeatureNetConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let mut ci = 3;
    for (i, l) in cfg.layers.iter().enumerate() {
        let (w, b) = conv_names(i);
        let k2 = l.kernel * l.kernel;
        store.insert(w, glorot(rng, &[l.kernel, l.kernel, ci, l.channels], k2 * ci, k2 * l.channels));
        store.insert(b, Tensor::zeros(&[l.channels]));
        ci = l.channels;
    }
}

/// Closed-form parameter count of the convolution stack.
pub fn feature_net_param_count(cfg: &FeatureNetConfig) -> usize {
    let mut ci = 3;
    let mut total = 0;
    for l in &cfg.layers {
        total += l.kernel * l.kernel * ci * l.channels + l.channels;
        ci = l.channels;
    }
    total
}

pub(crate) fn add_class_head<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let n = cfg.template_extent();
    let flat = n * n * cfg.channels();
    let (hid, k) = (cfg.class_hidden, cfg.num_classes);
    store.insert(format!("{CLASS_PREFIX}hidden/w"), glorot(rng, &[hid, flat], flat, hid));
    store.insert(format!("{CLASS_PREFIX}hidden/b"), Tensor::zeros(&[hid]));
    store.insert(format!("{CLASS_PREFIX}out/w"), glorot(rng, &[k, hid], hid, k));
    store.insert(format!("{CLASS_PREFIX}out/b"), Tensor::zeros(&[k]));
}

/// Runs an `S x S x 3` patch (pixel values in `[0, 255]`) through the
/// convolution stack. `S` must be the object or the search input size; both
/// branches use the same weights.
pub fn extract_features<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    cfg: &FeatureNetConfig,
    patch: Var,
) -> Result<Var> {
    let shape = tape.shape(patch).to_vec();
    let ok = matches!(shape.as_slice(), [h, w, 3] if h == w && (*h == cfg.object_size || *h == cfg.search_size));
    if !ok {
        return invalid(format!(
            "patch {shape:?} is neither {0}x{0}x3 nor {1}x{1}x3",
            cfg.object_size, cfg.search_size
        ));
    }
    let scaled = tape.scale(patch, s(1.0 / 127.5));
    let mut x = tape.offset(scaled, s(-1.0));
    for (i, l) in cfg.layers.iter().enumerate() {
        let (w, b) = conv_names(i);
        x = tape.conv2d(x, params.get(&w)?, params.get(&b)?, l.stride)?;
        if l.activation == Activation::Relu {
            x = tape.relu(x);
        }
        if let Some((size, stride)) = l.pool {
            x = tape.max_pool(x, size, stride)?;
        }
    }
    Ok(x)
}

/// Class logits for a template; apply [`Tape::softmax`] for probabilities.
pub fn class_logits<T: Scalar>(tape: &mut Tape<T>, params: &Bound, cfg: &ModelConfig, template: Var) -> Result<Var> {
    let n = cfg.template_extent();
    let expected = [n, n, cfg.channels()];
    if tape.shape(template) != expected {
        return invalid(format!("template {:?}, expected {expected:?}", tape.shape(template)));
    }
    let flat = tape.reshape(template, &[n * n * cfg.channels()])?;
    let hid = tape.affine(
        params.get(&format!("{CLASS_PREFIX}hidden/w"))?,
        flat,
        params.get(&format!("{CLASS_PREFIX}hidden/b"))?,
    )?;
    let hid = tape.relu(hid);
    tape.affine(
        params.get(&format!("{CLASS_PREFIX}out/w"))?,
        hid,
        params.get(&format!("{CLASS_PREFIX}out/b"))?,
    )
}

/// Class probabilities (a simplex over `num_classes`).
pub fn classify_object<T: Scalar>(tape: &mut Tape<T>, params: &Bound, cfg: &ModelConfig, template: Var) -> Result<Var> {
    let logits = class_logits(tape, params, cfg, template)?;
    tape.softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LayerSpec, ModelConfig};

    #[test]
    fn desk_param_count_matches_hand_total() {
        // 5*5*3*16+16 + 3*3*16*32+32 + 3*3*32*32+32
        let expected = 1216 + 4640 + 9248;
        let cfg = FeatureNetConfig::desk();
        assert_eq!(feature_net_param_count(&cfg), expected);
        let p: ParamStore<f32> = init_feature_net(&cfg, 3).unwrap();
        assert_eq!(p.count(), expected);
        assert!(p.names().all(|n| n.starts_with(PREFIX)));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = FeatureNetConfig::desk();
        let a: ParamStore<f32> = init_feature_net(&cfg, 1).unwrap();
        let b: ParamStore<f32> = init_feature_net(&cfg, 1).unwrap();
        let c: ParamStore<f32> = init_feature_net(&cfg, 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        let mut cfg = FeatureNetConfig::desk();
        cfg.layers.push(LayerSpec::new(9, 1, 8, Activation::Relu));
        assert!(init_feature_net::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn desk_shapes_and_shared_branches() {
        let cfg = FeatureNetConfig::desk();
        let p: ParamStore<f32> = init_feature_net(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let obj = tape.constant(Tensor::full(&[40, 40, 3], 100.0));
        let f = extract_features(&mut tape, &b, &cfg, obj).unwrap();
        assert_eq!(tape.shape(f), &[6, 6, 32]);
        let search = tape.constant(Tensor::full(&[80, 80, 3], 100.0));
        let g = extract_features(&mut tape, &b, &cfg, search).unwrap();
        assert_eq!(tape.shape(g), &[16, 16, 32]);
        let again = extract_features(&mut tape, &b, &cfg, obj).unwrap();
        assert_eq!(tape.value(f), tape.value(again));
        let wrong = tape.constant(Tensor::zeros(&[41, 41, 3]));
        assert!(extract_features(&mut tape, &b, &cfg, wrong).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut cfg = ModelConfig::desk();
        cfg.num_classes = 30;
        let mut rng = Rng::seed_from_u64(0);
        let mut p = ParamStore::<f64>::new();
        add_class_head(&cfg, &mut rng, &mut p);
        let names: Vec<String> = p.names().cloned().collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let t = tape.constant(Tensor::full(&[6, 6, 32], 0.3));
        let probs = classify_object(&mut tape, &b, &cfg, t).unwrap();
        assert!(tape.value(probs).data().iter().all(|&q| (q - 1.0 / 30.0).abs() < 1e-15));
        let logits = class_logits(&mut tape, &b, &cfg, t).unwrap();
        let ce = tape.softmax_ce(logits, 7).unwrap();
        assert!((tape.item(ce) - 30f64.ln()).abs() < 1e-12);
        assert!((tape.item(ce) - 3.4012).abs() < 1e-4);
    }

    #[test]
    fn saturated_logits_pick_the_class() {
        let mut tape = Tape::<f64>::new();
        let mut l = vec![0.0; 30];
        l[4] = 50.0;
        let v = tape.constant(Tensor::vector(l));
        let p = tape.softmax(v).unwrap();
        let probs = tape.value(p).data();
        assert!(probs[4] > 1.0 - 1e-6);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
