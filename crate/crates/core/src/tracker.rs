//! Frame-by-frame tracking with a trained model.

use crate::autodiff::{Tape, Var};
use crate::config::TrackerConfig;
use crate::error::{invalid, Error, Result};
use crate::feature_net::extract_features;
use crate::geometry::{object_roi, search_roi, BoundingBox, Roi};
use crate::image::{crop_resize, Image};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::pipeline::{Episode, EpisodeState};
use crate::template;
use crate::synth::Sequence;
use crate::tensor::Tensor;

use rayon::prelude::*;

/// Smallest box side kept after an update, in pixels.
const MIN_SIDE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub bbox: BoundingBox,
    pub episode: EpisodeState<f32>,
    pub frame: usize,
}

impl TrackState {
    /// Tensor-container dump of the recurrent state and both memories.
    pub fn export(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        out.insert("state/t0", self.episode.t0.clone());
        out.insert("state/h", self.episode.h.clone());
        out.insert("state/c", self.episode.c.clone());
        let b = &self.bbox;
        out.insert(
            "state/box",
            Tensor::vector(vec![b.cx as f32, b.cy as f32, b.w as f32, b.h as f32]),
        );
        self.episode.pos.export("pos/", &mut out);
        self.episode.neg.export("neg/", &mut out);
        out
    }
}

/// Result of one tracking step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub bbox: BoundingBox,
    pub scale_index: usize,
    pub peak: (usize, usize),
    /// Attention weights over search patches, row-major.
    pub attention: Option<Vec<f32>>,
}

/// Raised-cosine window of extent `m`, peak one at the center.
pub fn cosine_window(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let hann: Vec<f64> = (0..m)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1) as f64).cos())
        .collect();
    let mut out = Vec::with_capacity(m * m);
    for &a in &hann {
        for &b in &hann {
            out.push(a * b);
        }
    }
    out
}

/// Picks `(scale, row, col)` from per-scale `m x m` maps. All maps share
/// one min-max normalization so scales stay comparable, then each is mixed
/// with the cosine window. Ties go to the middle scale, then to lower
/// scale indices, then to the first cell in row-major order.
pub fn select_peak(maps: &[Vec<f64>], m: usize, window_weight: f64) -> (usize, usize, usize) {
    let lo = maps.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = maps.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let window = cosine_window(m);
    let mid = maps.len() / 2;
    let order = std::iter::once(mid).chain((0..maps.len()).filter(|&k| k != mid));
    let mut best = (f64::NEG_INFINITY, mid, 0);
    for k in order {
        for (i, &v) in maps[k].iter().enumerate() {
            let norm = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let score = (1.0 - window_weight) * norm + window_weight * window[i];
            if score > best.0 {
                best = (score, k, i);
            }
        }
    }
    (best.1, best.2 / m, best.2 % m)
}

pub struct Tracker {
    model: Model<f32>,
    cfg: TrackerConfig,
    state: Option<TrackState>,
}

impl Tracker {
    pub fn new(model: Model<f32>, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        model.config.validate()?;
        Ok(Tracker { model, cfg, state: None })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn state(&self) -> Option<&TrackState> {
        self.state.as_ref()
    }

    fn bind(&self, tape: &mut Tape<f32>) -> Bound {
        self.model.params.bind(tape, false)
    }

    fn object_features(&self, tape: &mut Tape<f32>, params: &Bound, frame: &Image, b: &BoundingBox) -> Result<Var> {
        let fc = &self.model.config.featnet;
        let roi = object_roi(b, self.cfg.context);
        let patch = tape.constant(crop_resize(frame, &roi, fc.object_size)?);
        extract_features(tape, params, fc, patch)
    }

    /// Starts a sequence from the first frame and its box.
    pub fn init(&mut self, frame: &Image, bbox: BoundingBox) -> Result<()> {
        bbox.check()?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let t0 = self.object_features(&mut tape, &params, frame, &bbox)?;
        let ep = Episode::start(&mut tape, &params, &self.model.config, &self.cfg, t0)?;
        self.state = Some(TrackState { bbox, episode: ep.snapshot(&tape), frame: 0 });
        Ok(())
    }

    /// Locates the target in the next frame and updates both memories.
    pub fn step(&mut self, frame: &Image) -> Result<StepReport> {
        let st = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("tracker stepped before init".into()))?;
        let mcfg = &self.model.config;
        let fc = &mcfg.featnet;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let mut ep = Episode::resume(&mut tape, &st.episode)?;
        let scales = self.cfg.scales();
        let base = search_roi(&st.bbox, self.cfg.context, fc.object_size, fc.search_size);
        let mut feats = Vec::with_capacity(scales.len());
        for &sc in &scales {
            let roi = Roi { side: base.side * sc, ..base };
            let patch = tape.constant(crop_resize(frame, &roi, fc.search_size)?);
            feats.push(extract_features(&mut tape, &params, fc, patch)?);
        }
        let mid = scales.len() / 2;
        let step = ep.next_template(&mut tape, &params, mcfg, &self.cfg, feats[mid], None)?;
        let mut responses = Vec::with_capacity(scales.len());
        let mut maps = Vec::with_capacity(scales.len());
        for &f in &feats {
            let r = template::response(&mut tape, f, step.template)?;
            maps.push(tape.value(r).to_f64_vec());
            responses.push(r);
        }
        let m = mcfg.score_extent();
        let (k, row, col) = select_peak(&maps, m, self.cfg.window_weight);
        let sc = scales[k];
        let pixel = base.side * sc / fc.search_size as f64 * fc.total_stride() as f64;
        let centre = (m as f64 - 1.0) / 2.0;
        let old = st.bbox;
        let factor = 1.0 - self.cfg.scale_smoothing + self.cfg.scale_smoothing * sc;
        let bbox = BoundingBox {
            cx: (old.cx + (col as f64 - centre) * pixel).clamp(0.0, frame.width as f64),
            cy: (old.cy + (row as f64 - centre) * pixel).clamp(0.0, frame.height as f64),
            w: (old.w * factor).clamp(MIN_SIDE, frame.width as f64),
            h: (old.h * factor).clamp(MIN_SIDE, frame.height as f64),
        };
        if !self.cfg.skip_writes && self.cfg.ablation != crate::config::Ablation::Frozen {
            let t_new = self.object_features(&mut tape, &params, frame, &bbox)?;
            ep.write(&mut tape, mcfg, &self.cfg, &step, t_new, feats[k], responses[k])?;
        }
        let attention = step.attention.map(|a| tape.value(a).data().to_vec());
        self.state = Some(TrackState { bbox, episode: ep.snapshot(&tape), frame: st.frame + 1 });
        Ok(StepReport { bbox, scale_index: k, peak: (row, col), attention })
    }

    /// Tracks a whole sequence; the first box is returned unchanged.
    pub fn run(&mut self, frames: &[Image], first: BoundingBox) -> Result<Vec<BoundingBox>> {
        if frames.is_empty() {
            return invalid("empty sequence");
        }
        self.init(&frames[0], first)?;
        let mut out = vec![first];
        for f in &frames[1..] {
            out.push(self.step(f)?.bbox);
        }
        Ok(out)
    }
}

/// Tracks every sequence from its first ground-truth box, in parallel.
/// Output order follows `seqs`.
pub fn track_all(model: &Model<f32>, cfg: &TrackerConfig, seqs: &[Sequence]) -> Result<Vec<Vec<BoundingBox>>> {
    seqs.par_iter()
        .map(|seq| {
            let first = *seq.boxes.first().ok_or_else(|| Error::InvalidArgument(format!("{}: no boxes", seq.name)))?;
            Tracker::new(model.clone(), cfg.clone())?.run(&seq.frames, first)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_peaks_at_center() {
        let w = cosine_window(11);
        assert_eq!(w[5 * 11 + 5], 1.0);
        assert_eq!(w[0], 0.0);
        assert!((w[5 * 11 + 4] - w[5 * 11 + 6]).abs() < 1e-15);
    }

    #[test]
    fn flat_maps_choose_center_of_middle_scale() {
        let maps = vec![vec![0.3; 121]; 3];
        assert_eq!(select_peak(&maps, 11, 0.19), (1, 5, 5));
    }

    #[test]
    fn strong_peak_wins_across_scales() {
        let mut maps = vec![vec![0.0; 121]; 3];
        maps[2][2 * 11 + 7] = 5.0;
        maps[1][5 * 11 + 5] = 1.0;
        assert_eq!(select_peak(&maps, 11, 0.19), (2, 2, 7));
    }

    #[test]
    fn scale_smoothing_example() {
        let cfg = TrackerConfig::default();
        let f = 1.0 - cfg.scale_smoothing + cfg.scale_smoothing * 1.05;
        assert!((f - 1.025).abs() < 1e-15);
    }
}
