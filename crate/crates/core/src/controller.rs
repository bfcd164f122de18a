//! Layer-normalized LSTM controller and its memory-control heads.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::{s, Scalar, Tensor};
use crate::Rng;

pub const PREFIX: &str = "ctrl/";

const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Per-step controller outputs.
#[derive(Debug, Clone, Copy)]
pub struct ControlSignals {
    /// Read key, length `C`.
    pub key: Var,
    /// Read strength, `>= 1`.
    pub strength: Var,
    /// Residual gate, length `C`.
    pub residual: Var,
    /// Write gates `[skip, read, allocate]`, a simplex.
    pub write: Var,
    /// Decay rate in `(0, 1)`.
    pub decay: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

fn name(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

pub(crate) fn add_params<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let (h, c) = (cfg.hidden_size, cfg.channels());
    for g in GATES {
        store.insert(name(&format!("lstm/{g}/wx")), glorot(rng, &[h, c], c, h));
        store.insert(name(&format!("lstm/{g}/wh")), glorot(rng, &[h, h], h, h));
        store.insert(name(&format!("lstm/{g}/ln_gain")), Tensor::full(&[h], T::one()));
        // forget gate starts open
        let bias = if g == "f" { T::one() } else { T::zero() };
        store.insert(name(&format!("lstm/{g}/ln_bias")), Tensor::full(&[h], bias));
    }
    for (head, out) in [("key", c), ("strength", 1), ("residual", c), ("write", 3), ("decay", 1)] {
        store.insert(name(&format!("{head}/w")), glorot(rng, &[out, h], h, out));
        store.insert(name(&format!("{head}/b")), Tensor::zeros(&[out]));
    }
    for init in ["init_h", "init_c"] {
        store.insert(name(&format!("{init}/w")), glorot(rng, &[h, c], c, h));
        store.insert(name(&format!("{init}/b")), Tensor::zeros(&[h]));
    }
}

/// `h_0 = tanh(A mean(T_0) + a)`, `c_0 = tanh(B mean(T_0) + b)` with the
/// mean taken over the spatial extent of the template.
pub fn init_state<T: Scalar>(tape: &mut Tape<T>, params: &Bound, cfg: &ModelConfig, t0: Var) -> Result<LstmState> {
    let n = cfg.template_extent();
    let expected = [n, n, cfg.channels()];
    if tape.shape(t0) != expected {
        return invalid(format!("initial template {:?}, expected {expected:?}", tape.shape(t0)));
    }
    let pooled = tape.spatial_mean(t0)?;
    let mut out = [pooled; 2];
    for (slot, init) in out.iter_mut().zip(["init_h", "init_c"]) {
        let pre = tape.affine(params.get(&name(&format!("{init}/w")))?, pooled, params.get(&name(&format!("{init}/b")))?)?;
        *slot = tape.tanh(pre);
    }
    Ok(LstmState { h: out[0], c: out[1] })
}

/// Inverted-dropout mask with entries `0` or `1 / keep`.
pub fn dropout_mask<T: Scalar>(rng: &mut Rng, len: usize, keep: f64) -> Vec<T> {
    let scale = s::<T>(1.0 / keep);
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect()
}

/// One LSTM update. Returns the new state and the output fed to the heads,
/// which carries dropout when `dropout` is given (training).
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    cfg: &ModelConfig,
    input: Var,
    prev: LstmState,
    dropout: Option<&mut Rng>,
) -> Result<(LstmState, Var)> {
    if tape.shape(input) != [cfg.channels()] || tape.shape(prev.h) != [cfg.hidden_size] {
        return invalid(format!(
            "controller input {:?} / state {:?} for C = {}, H = {}",
            tape.shape(input),
            tape.shape(prev.h),
            cfg.channels(),
            cfg.hidden_size
        ));
    }
    let eps = s::<T>(cfg.ln_eps);
    let mut acts = Vec::with_capacity(4);
    for g in GATES {
        let wx = tape.matvec(params.get(&name(&format!("lstm/{g}/wx")))?, input)?;
        let wh = tape.matvec(params.get(&name(&format!("lstm/{g}/wh")))?, prev.h)?;
        let pre = tape.add(wx, wh)?;
        let normed = tape.layer_norm(
            pre,
            params.get(&name(&format!("lstm/{g}/ln_gain")))?,
            params.get(&name(&format!("lstm/{g}/ln_bias")))?,
            eps,
        )?;
        acts.push(if g == "g" { tape.tanh(normed) } else { tape.sigmoid(normed) });
    }
    let (i, f, o, g) = (acts[0], acts[1], acts[2], acts[3]);
    let keep = tape.mul(f, prev.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    let out = match dropout {
        Some(rng) if cfg.keep_prob < 1.0 => {
            let mask = dropout_mask(rng, cfg.hidden_size, cfg.keep_prob);
            tape.dropout(h, mask)?
        }
        _ => h,
    };
    Ok((LstmState { h, c }, out))
}

pub fn control_signals<T: Scalar>(tape: &mut Tape<T>, params: &Bound, h: Var) -> Result<ControlSignals> {
    let head = |tape: &mut Tape<T>, which: &str| -> Result<Var> {
        tape.affine(params.get(&name(&format!("{which}/w")))?, h, params.get(&name(&format!("{which}/b")))?)
    };
    let key = head(tape, "key")?;
    let raw = head(tape, "strength")?;
    let sp = tape.softplus(raw);
    let strength = tape.offset(sp, T::one());
    let raw = head(tape, "residual")?;
    let residual = tape.sigmoid(raw);
    let raw = head(tape, "write")?;
    let write = tape.softmax(raw)?;
    let raw = head(tape, "decay")?;
    let decay = tape.sigmoid(raw);
    Ok(ControlSignals { key, strength, residual, write, decay })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.hidden_size = 5;
        cfg
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        add_params(cfg, &mut Rng::seed_from_u64(seed), &mut p);
        p
    }

    fn zeroed(mut p: ParamStore<f64>) -> ParamStore<f64> {
        let names: Vec<String> = p.names().cloned().collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn zero_init_weights_give_zero_state() {
        let cfg = tiny();
        let p = zeroed(store(&cfg, 0));
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let t0 = t.constant(Tensor::full(&[6, 6, 32], 0.7));
        let st = init_state(&mut t, &b, &cfg, t0).unwrap();
        assert!(t.value(st.h).data().iter().all(|&x| x == 0.0));
        assert!(t.value(st.c).data().iter().all(|&x| x == 0.0));
        let bad = t.constant(Tensor::zeros(&[5, 5, 32]));
        assert!(init_state(&mut t, &b, &cfg, bad).is_err());
    }

    #[test]
    fn zero_lstm_gives_zero_output() {
        let cfg = tiny();
        let p = zeroed(store(&cfg, 0));
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let a = t.constant(Tensor::full(&[32], 1.3));
        let h = t.constant(Tensor::zeros(&[5]));
        let c = t.constant(Tensor::zeros(&[5]));
        let (st, out) = lstm_step(&mut t, &b, &cfg, a, LstmState { h, c }, None).unwrap();
        assert!(t.value(st.h).data().iter().all(|&x| x == 0.0));
        assert!(t.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_heads_closed_form() {
        let cfg = tiny();
        let p = zeroed(store(&cfg, 0));
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let h = t.constant(Tensor::full(&[5], 0.4));
        let sig = control_signals(&mut t, &b, h).unwrap();
        assert!((t.item(sig.strength) - (1.0 + 2f64.ln())).abs() < 1e-12);
        assert!((t.item(sig.strength) - 1.6931).abs() < 1e-4);
        assert!(t.value(sig.write).data().iter().all(|&g| (g - 1.0 / 3.0).abs() < 1e-15));
        assert!(t.value(sig.residual).data().iter().all(|&r| r == 0.5));
        assert_eq!(t.item(sig.decay), 0.5);
        assert_eq!(t.shape(sig.key), &[32]);
    }

    #[test]
    fn signal_ranges_hold_for_random_states() {
        let cfg = tiny();
        let p = store(&cfg, 9);
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut t = Tape::new();
            let b = p.bind(&mut t, false);
            let hv: Vec<f64> = (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let h = t.constant(Tensor::vector(hv));
            let sig = control_signals(&mut t, &b, h).unwrap();
            assert!(t.item(sig.strength) >= 1.0);
            let g = t.value(sig.write).data();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(t.value(sig.residual).data().iter().all(|&r| (0.0..=1.0).contains(&r)));
            assert!((0.0..=1.0).contains(&t.item(sig.decay)));
        }
    }

    #[test]
    fn eval_step_is_deterministic_and_dropout_only_in_training() {
        let cfg = tiny();
        let p = store(&cfg, 4);
        let run = |drop: Option<&mut Rng>| {
            let mut t = Tape::new();
            let b = p.bind(&mut t, false);
            let a = t.constant(Tensor::full(&[32], 0.25));
            let h = t.constant(Tensor::full(&[5], 0.1));
            let c = t.constant(Tensor::full(&[5], -0.2));
            let (st, out) = lstm_step(&mut t, &b, &cfg, a, LstmState { h, c }, drop).unwrap();
            (t.value(st.h).clone(), t.value(out).clone())
        };
        let (h1, o1) = run(None);
        let (h2, o2) = run(None);
        assert_eq!(h1, h2);
        assert_eq!(o1, o2);
        assert_eq!(h1, o1);
        let mut rng = Rng::seed_from_u64(3);
        let (h3, o3) = run(Some(&mut rng));
        assert_eq!(h1, h3);
        for (&x, &y) in h3.data().iter().zip(o3.data()) {
            assert!(y == 0.0 || (y - x / 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_keeps_expected_fraction() {
        let mut rng = Rng::seed_from_u64(11);
        let m: Vec<f64> = dropout_mask(&mut rng, 20_000, 0.8);
        let kept = m.iter().filter(|&&x| x > 0.0).count() as f64 / 20_000.0;
        assert!((kept - 0.8).abs() < 0.02);
        assert!(m.iter().all(|&x| x == 0.0 || x == 1.25));
    }
}
