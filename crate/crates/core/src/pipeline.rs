//! One unrolled tracking step on a tape: attention, controller, memory
//! reads, template construction and memory writes. Shared by inference
//! and training so both run the same computation.

use crate::attention::{self, PatchBank};
use crate::autodiff::{Tape, Var};
use crate::config::{Ablation, ModelConfig, TrackerConfig};
use crate::controller::{self, ControlSignals, LstmState};
use crate::error::Result;
use crate::memory::{self, Memory, MemoryState, ReadMode, ReadOut};
use crate::params::Bound;
use crate::template;
use crate::tensor::{s, Scalar, Tensor};
use crate::Rng;

/// Recurrent tracker state living on a tape.
#[derive(Debug, Clone)]
pub struct Episode {
    pub t0: Var,
    pub lstm: LstmState,
    pub pos: Memory,
    pub neg: Memory,
}

/// Detached [`Episode`] carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState<T> {
    pub t0: Tensor<T>,
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    pub pos: MemoryState<T>,
    pub neg: MemoryState<T>,
}

/// Everything produced while forming one frame's template.
#[derive(Debug, Clone)]
pub struct StepTemplate {
    pub template: Var,
    pub signals: Option<ControlSignals>,
    pub attention: Option<Var>,
    pub pos_read: Option<ReadOut>,
    pub neg_read: Option<ReadOut>,
    pub residual: Option<Var>,
    pub cancel: Option<Var>,
}

fn read_mode(ablation: Ablation) -> (ReadMode, ReadMode) {
    match ablation {
        Ablation::Queue => (ReadMode::Mean, ReadMode::Soft),
        Ablation::HardRead => (ReadMode::Hard, ReadMode::Hard),
        _ => (ReadMode::Soft, ReadMode::Soft),
    }
}

impl Episode {
    /// Controller state from `t0`, `t0` written into the positive memory,
    /// negative memory zeroed.
    pub fn start<T: Scalar>(
        tape: &mut Tape<T>,
        params: &Bound,
        cfg: &ModelConfig,
        tcfg: &TrackerConfig,
        t0: Var,
    ) -> Result<Self> {
        let lstm = controller::init_state(tape, params, cfg, t0)?;
        let shape = tape.shape(t0).to_vec();
        let mut pos = Memory::zeros(tape, tcfg.npos, &shape, tcfg.decay)?;
        let neg = Memory::zeros(tape, tcfg.nneg, &shape, tcfg.decay)?;
        if tcfg.ablation == Ablation::Queue {
            pos.write_queue(tape, t0)?;
        } else {
            pos.write_initial(tape, t0)?;
        }
        Ok(Episode { t0, lstm, pos, neg })
    }

    pub fn resume<T: Scalar>(tape: &mut Tape<T>, st: &EpisodeState<T>) -> Result<Self> {
        Ok(Episode {
            t0: tape.constant(st.t0.clone()),
            lstm: LstmState { h: tape.constant(st.h.clone()), c: tape.constant(st.c.clone()) },
            pos: Memory::from_state(tape, &st.pos)?,
            neg: Memory::from_state(tape, &st.neg)?,
        })
    }

    pub fn snapshot<T: Scalar>(&self, tape: &Tape<T>) -> EpisodeState<T> {
        EpisodeState {
            t0: tape.value(self.t0).clone(),
            h: tape.value(self.lstm.h).clone(),
            c: tape.value(self.lstm.c).clone(),
            pos: self.pos.to_state(tape),
            neg: self.neg.to_state(tape),
        }
    }

    /// Advances the controller on `search` features and forms the final
    /// template.
    pub fn next_template<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &Bound,
        cfg: &ModelConfig,
        tcfg: &TrackerConfig,
        search: Var,
        dropout: Option<&mut Rng>,
    ) -> Result<StepTemplate> {
        if tcfg.ablation == Ablation::Frozen {
            return Ok(StepTemplate {
                template: self.t0,
                signals: None,
                attention: None,
                pos_read: None,
                neg_read: None,
                residual: None,
                cancel: None,
            });
        }
        let bank: PatchBank = attention::pool_patches(tape, search, cfg.template_extent(), cfg.patch_stride)?;
        let (input, alpha) = if tcfg.ablation == Ablation::NoAtt {
            (attention::mean_vector(tape, &bank)?, None)
        } else {
            let scores = attention::attention_scores(tape, params, self.lstm.h, &bank)?;
            let (a, alpha) = attention::attended_vector(tape, scores, &bank)?;
            (a, Some(alpha))
        };
        let (lstm, out) = controller::lstm_step(tape, params, cfg, input, self.lstm, dropout)?;
        self.lstm = lstm;
        let sig = controller::control_signals(tape, params, out)?;
        let (pos_mode, neg_mode) = read_mode(tcfg.ablation);
        let pos_read = self.pos.read(tape, sig.key, sig.strength, pos_mode)?;
        let gate = match (tcfg.residual_gate, tcfg.ablation) {
            (Some(g), _) => tape.constant(Tensor::full(&[cfg.channels()], s(g))),
            (None, Ablation::NoRes) => tape.constant(Tensor::full(&[cfg.channels()], T::one())),
            _ => sig.residual,
        };
        let t_pos = template::residual_combine(tape, self.t0, pos_read.template, gate)?;
        let mut step = StepTemplate {
            template: t_pos,
            signals: Some(sig),
            attention: alpha,
            pos_read: Some(pos_read),
            neg_read: None,
            residual: Some(gate),
            cancel: None,
        };
        if tcfg.ablation != Ablation::NoNegative {
            let neg_read = self.neg.read(tape, sig.key, sig.strength, neg_mode)?;
            let (fin, c) = template::cancel_distractor(tape, params, t_pos, neg_read.template)?;
            step.template = fin;
            step.neg_read = Some(neg_read);
            step.cancel = Some(c);
        }
        Ok(step)
    }

    /// Writes `t_new` into the positive memory and the distractors found in
    /// `scores` (the raw response on `search`) into the negative memory.
    #[allow(clippy::too_many_arguments)]
    pub fn write<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        cfg: &ModelConfig,
        tcfg: &TrackerConfig,
        step: &StepTemplate,
        t_new: Var,
        search: Var,
        scores: Var,
    ) -> Result<()> {
        if tcfg.skip_writes || tcfg.ablation == Ablation::Frozen {
            return Ok(());
        }
        let (Some(sig), Some(pos_read)) = (step.signals, step.pos_read) else {
            return Ok(());
        };
        if tcfg.ablation == Ablation::Queue {
            self.pos.write_queue(tape, t_new)?;
        } else {
            self.pos.write_positive(tape, t_new, sig.write, pos_read.weights, sig.decay)?;
        }
        if let Some(neg_read) = step.neg_read {
            let (h, w) = (tape.shape(scores)[0], tape.shape(scores)[1]);
            let values = tape.value(scores).to_f64_vec();
            let at = memory::distractor_positions(&values, h, w, tcfg.tau, tcfg.gamma, tcfg.max_distractors);
            let found = memory::distractor_templates(tape, search, &at, cfg.template_extent())?;
            let wr = tape.value(neg_read.weights).to_f64_vec();
            self.neg.write_negative(tape, &found, Some(&wr))?;
        }
        Ok(())
    }
}
