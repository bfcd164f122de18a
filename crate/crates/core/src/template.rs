//! Final matching template from the initial, retrieved and negative
//! templates, and the response map it produces.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::{s, Scalar, Tensor};
use crate::Rng;

pub const CANCEL_PREFIX: &str = "cancel/";
pub const RESPONSE_PREFIX: &str = "resp/";

pub(crate) fn add_params<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let c = cfg.channels();
    for w in ["wpos", "wneg", "wc"] {
        store.insert(format!("{CANCEL_PREFIX}{w}"), glorot(rng, &[c, c], c, c));
    }
    store.insert(format!("{CANCEL_PREFIX}b"), Tensor::zeros(&[c]));
    // raw correlations grow with template size; start the logits near unit scale
    let n = cfg.template_extent();
    store.insert(format!("{RESPONSE_PREFIX}gain"), Tensor::scalar(s(1.0 / (n * n * c) as f64)));
    store.insert(format!("{RESPONSE_PREFIX}bias"), Tensor::scalar(T::zero()));
}

/// `T_0 + r * T_retr`, with `r` one gate per channel.
pub fn residual_combine<T: Scalar>(tape: &mut Tape<T>, t0: Var, retrieved: Var, gate: Var) -> Result<Var> {
    let gated = tape.mul_channels(retrieved, gate)?;
    tape.add(t0, gated)
}

/// Channel gate comparing the positive and negative templates:
/// `sigmoid(W^c mean(tanh(T_pos W^pos + T_neg W^neg + b)))`, where the
/// products are 1x1 convolutions and the mean runs over spatial cells.
pub fn cancel_gate<T: Scalar>(tape: &mut Tape<T>, params: &Bound, t_pos: Var, t_neg: Var) -> Result<Var> {
    let shape = tape.shape(t_pos).to_vec();
    if tape.shape(t_neg) != shape.as_slice() || shape.len() != 3 {
        return invalid(format!("cancel: {shape:?} vs {:?}", tape.shape(t_neg)));
    }
    let (cells, c) = (shape[0] * shape[1], shape[2]);
    let pos = tape.reshape(t_pos, &[cells, c])?;
    let neg = tape.reshape(t_neg, &[cells, c])?;
    let a = tape.matmul(pos, params.get(&format!("{CANCEL_PREFIX}wpos"))?)?;
    let b = tape.matmul(neg, params.get(&format!("{CANCEL_PREFIX}wneg"))?)?;
    let sum = tape.add(a, b)?;
    let pre = tape.add_row_bias(sum, params.get(&format!("{CANCEL_PREFIX}b"))?)?;
    let act = tape.tanh(pre);
    let pooled = tape.mean_rows(act)?;
    let wc = tape.matvec(params.get(&format!("{CANCEL_PREFIX}wc"))?, pooled)?;
    Ok(tape.sigmoid(wc))
}

/// `T_pos - c * T_neg`. Returns `(T_final, c)`.
pub fn cancel_distractor<T: Scalar>(tape: &mut Tape<T>, params: &Bound, t_pos: Var, t_neg: Var) -> Result<(Var, Var)> {
    let gate = cancel_gate(tape, params, t_pos, t_neg)?;
    let gated = tape.mul_channels(t_neg, gate)?;
    Ok((tape.sub(t_pos, gated)?, gate))
}

/// Cross-correlation of the search features with the final template.
pub fn response<T: Scalar>(tape: &mut Tape<T>, search: Var, template: Var) -> Result<Var> {
    tape.xcorr(search, template)
}

/// Affine rescaling of a response map into loss logits.
pub fn response_logits<T: Scalar>(tape: &mut Tape<T>, params: &Bound, response: Var) -> Result<Var> {
    let scaled = tape.mul_scalar(response, params.get(&format!("{RESPONSE_PREFIX}gain"))?)?;
    let shape = tape.shape(scaled).to_vec();
    let bias = params.get(&format!("{RESPONSE_PREFIX}bias"))?;
    let flat = tape.reshape(scaled, &[shape.iter().product(), 1])?;
    let shifted = tape.add_row_bias(flat, bias)?;
    tape.reshape(shifted, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cancel_params(c: usize, seed: u64) -> ParamStore<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for w in ["wpos", "wneg", "wc"] {
            p.insert(format!("cancel/{w}"), random(&mut rng, &[c, c]));
        }
        p.insert("cancel/b", random(&mut rng, &[c]));
        p
    }

    #[test]
    fn residual_examples() {
        let mut rng = Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let t0 = t.constant(random(&mut rng, &[3, 3, 4]));
        let tr = t.constant(random(&mut rng, &[3, 3, 4]));
        let zero = t.constant(Tensor::zeros(&[4]));
        let one = t.constant(Tensor::full(&[4], 1.0));
        let e0 = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let a = residual_combine(&mut t, t0, tr, zero).unwrap();
        assert_eq!(t.value(a), t.value(t0));
        let b = residual_combine(&mut t, t0, tr, one).unwrap();
        let sum = t.add(t0, tr).unwrap();
        assert_eq!(t.value(b), t.value(sum));
        let c = residual_combine(&mut t, t0, tr, e0).unwrap();
        let (vc, v0) = (t.value(c).data(), t.value(t0).data());
        for i in 0..vc.len() {
            assert_eq!(vc[i] != v0[i], i % 4 == 0);
        }
    }

    #[test]
    fn zero_negative_leaves_positive() {
        let mut rng = Rng::seed_from_u64(2);
        let p = cancel_params(4, 3);
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let pos = t.constant(random(&mut rng, &[3, 3, 4]));
        let neg = t.constant(Tensor::zeros(&[3, 3, 4]));
        let (fin, gate) = cancel_distractor(&mut t, &b, pos, neg).unwrap();
        assert_eq!(t.value(fin), t.value(pos));
        assert!(t.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn unit_gate_subtracts() {
        let mut rng = Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let pos = t.constant(random(&mut rng, &[2, 2, 3]));
        let neg = t.constant(random(&mut rng, &[2, 2, 3]));
        let one = t.constant(Tensor::full(&[3], 1.0));
        let g = t.mul_channels(neg, one).unwrap();
        let fin = t.sub(pos, g).unwrap();
        let direct = t.sub(pos, neg).unwrap();
        assert_eq!(t.value(fin), t.value(direct));
    }

    #[test]
    fn gate_matches_hand_evaluation() {
        let p = cancel_params(2, 5);
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let pos = t.constant(Tensor::from_f64(&[1, 2, 2], &[0.5, -1.0, 2.0, 0.25]).unwrap());
        let neg = t.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 1.0, -0.5, 0.0]).unwrap());
        let gate = cancel_gate(&mut t, &b, pos, neg).unwrap();
        let get = |n: &str| p.get(n).unwrap().data().to_vec();
        let (wp, wn, wc, bc) = (get("cancel/wpos"), get("cancel/wneg"), get("cancel/wc"), get("cancel/b"));
        let cells = [([0.5, -1.0], [1.0, 1.0]), ([2.0, 0.25], [-0.5, 0.0])];
        let mut pooled = [0.0; 2];
        for (tp, tn) in cells {
            for o in 0..2 {
                let mut z = bc[o];
                for i in 0..2 {
                    z += tp[i] * wp[i * 2 + o] + tn[i] * wn[i * 2 + o];
                }
                pooled[o] += z.tanh() / 2.0;
            }
        }
        for o in 0..2 {
            let z = wc[o * 2] * pooled[0] + wc[o * 2 + 1] * pooled[1];
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((t.value(gate).data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn response_peaks_at_embedded_template() {
        let mut rng = Rng::seed_from_u64(6);
        let tmpl = random(&mut rng, &[3, 3, 2]);
        let mut search = Tensor::zeros(&[9, 9, 2]);
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..2 {
                    search.data_mut()[((4 + y) * 9 + 2 + x) * 2 + c] = tmpl.at(&[y, x, c]);
                }
            }
        }
        let mut t = Tape::new();
        let s = t.constant(search);
        let k = t.constant(tmpl);
        let r = response(&mut t, s, k).unwrap();
        let v = t.value(r).data();
        let best = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!((best / 7, best % 7), (4, 2));
        let z = t.constant(Tensor::zeros(&[3, 3, 2]));
        let flat = response(&mut t, s, z).unwrap();
        assert!(t.value(flat).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn response_is_linear_in_template() {
        let mut rng = Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let s = t.constant(random(&mut rng, &[6, 6, 3]));
        let k = t.constant(random(&mut rng, &[2, 2, 3]));
        let k3 = t.scale(k, 3.0);
        let r = response(&mut t, s, k).unwrap();
        let r3 = response(&mut t, s, k3).unwrap();
        let scaled = t.value(r).map(|x| 3.0 * x);
        assert!(scaled.max_abs_diff(t.value(r3)) < 1e-12);
    }
}
