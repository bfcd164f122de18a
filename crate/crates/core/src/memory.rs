//! External template memories: content-addressed reads, gated positive
//! writes with least-used allocation, queue-like negative writes, and
//! distractor extraction from a response map.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{s, Scalar, Tensor};

/// How slot weights are formed when reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    /// Softmax of strength-scaled cosine similarities.
    Soft,
    /// All weight on the slot with the highest cosine similarity.
    Hard,
    /// Uniform over occupied slots.
    Mean,
}

/// Memory living on a tape. Slot contents are tape values so gradients
/// can flow through reads and writes during training.
#[derive(Debug, Clone)]
pub struct Memory {
    pub slots: Vec<Var>,
    pub keys: Vec<Var>,
    /// Usage counters, decayed every update.
    pub access: Vec<f64>,
    pub decay: f64,
    /// Number of write operations performed so far.
    pub writes: usize,
}

/// Detached memory contents carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    pub slots: Vec<Tensor<T>>,
    pub access: Vec<f64>,
    pub decay: f64,
    pub writes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOut {
    pub template: Var,
    pub weights: Var,
}

/// Per-channel spatial mean of an `n x n x C` template.
pub fn memory_key<T: Scalar>(tape: &mut Tape<T>, template: Var) -> Result<Var> {
    tape.spatial_mean(template)
}

/// Index of the least-used slot, lowest index on ties.
pub fn allocation_index(access: &[f64]) -> usize {
    least_used(access, 1)[0]
}

/// One-hot allocation weights.
pub fn allocation_weight(access: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; access.len()];
    w[allocation_index(access)] = 1.0;
    w
}

/// The `k` least-used slots in ascending usage, lowest index first on ties.
pub fn least_used(access: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..access.len()).collect();
    idx.sort_by(|&a, &b| access[a].total_cmp(&access[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn one_hot_argmax(values: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let mut w = vec![0.0; values.len()];
    w[best] = 1.0;
    w
}

impl Memory {
    /// `n` zero-filled slots of the given template shape.
    pub fn zeros<T: Scalar>(tape: &mut Tape<T>, n: usize, shape: &[usize], decay: f64) -> Result<Self> {
        if n == 0 {
            return invalid("memory needs at least one slot");
        }
        let zero = tape.constant(Tensor::zeros(shape));
        let key = memory_key(tape, zero)?;
        Ok(Memory { slots: vec![zero; n], keys: vec![key; n], access: vec![0.0; n], decay, writes: 0 })
    }

    /// Puts stored contents on the tape as constants and recomputes keys.
    pub fn from_state<T: Scalar>(tape: &mut Tape<T>, state: &MemoryState<T>) -> Result<Self> {
        if state.slots.is_empty() || state.slots.len() != state.access.len() {
            return invalid("memory state: slot and access counts differ");
        }
        let mut slots = Vec::with_capacity(state.slots.len());
        let mut keys = Vec::with_capacity(state.slots.len());
        for t in &state.slots {
            let v = tape.constant(t.clone());
            keys.push(memory_key(tape, v)?);
            slots.push(v);
        }
        Ok(Memory { slots, keys, access: state.access.clone(), decay: state.decay, writes: state.writes })
    }

    pub fn to_state<T: Scalar>(&self, tape: &Tape<T>) -> MemoryState<T> {
        MemoryState {
            slots: self.slots.iter().map(|&v| tape.value(v).clone()).collect(),
            access: self.access.clone(),
            decay: self.decay,
            writes: self.writes,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Cosine similarities between `key` and every slot key.
    pub fn similarities<T: Scalar>(&self, tape: &mut Tape<T>, key: Var) -> Result<Var> {
        let cos = self
            .keys
            .iter()
            .map(|&k| tape.cosine(key, k))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&cos)
    }

    /// Weighted sum of slots. Hard and mean weights enter as constants.
    pub fn read<T: Scalar>(&self, tape: &mut Tape<T>, key: Var, strength: Var, mode: ReadMode) -> Result<ReadOut> {
        let weights = match mode {
            ReadMode::Soft => {
                let cos = self.similarities(tape, key)?;
                let scaled = tape.mul_scalar(cos, strength)?;
                tape.softmax(scaled)?
            }
            ReadMode::Hard => {
                let cos = self.similarities(tape, key)?;
                let w = one_hot_argmax(&tape.value(cos).to_f64_vec());
                tape.constant(Tensor::vector(w.into_iter().map(s).collect()))
            }
            ReadMode::Mean => {
                let occupied = self.writes.clamp(1, self.len());
                let w: Vec<T> = (0..self.len())
                    .map(|j| if j < occupied { s(1.0 / occupied as f64) } else { T::zero() })
                    .collect();
                tape.constant(Tensor::vector(w))
            }
        };
        let template = tape.weighted_sum(weights, &self.slots)?;
        Ok(ReadOut { template, weights })
    }

    fn refresh_key<T: Scalar>(&mut self, tape: &mut Tape<T>, j: usize) -> Result<()> {
        self.keys[j] = memory_key(tape, self.slots[j])?;
        Ok(())
    }

    /// Gated write of `t_new`. `gates` is `[skip, read, allocate]`,
    /// `read_weights` the weights of this step's read and `decay` the
    /// erase rate of read-addressed slots. Returns the write weights.
    pub fn write_positive<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        t_new: Var,
        gates: Var,
        read_weights: Var,
        decay: Var,
    ) -> Result<Vec<f64>> {
        let n = self.len();
        if tape.shape(gates) != [3] || tape.shape(read_weights) != [n] || tape.value(decay).len() != 1 {
            return invalid("write_positive: expected 3 gates, N read weights and a scalar decay");
        }
        let alloc = allocation_index(&self.access);
        let g_read = tape.index(gates, 1)?;
        let g_alloc = tape.index(gates, 2)?;
        let erase_read = tape.mul(decay, g_read)?;
        let erase = tape.add(erase_read, g_alloc)?;
        let mut written = vec![0.0; n];
        for (j, w) in written.iter_mut().enumerate() {
            let wr = tape.index(read_weights, j)?;
            let mut ww = tape.mul(g_read, wr)?;
            if j == alloc {
                ww = tape.add(ww, g_alloc)?;
            }
            *w = tape.item(ww).as_f64();
            let blend = tape.mul(ww, erase)?;
            if !tape.is_tracked(blend) && tape.item(blend) == T::zero() {
                continue;
            }
            self.slots[j] = tape.lerp(self.slots[j], t_new, blend)?;
            self.refresh_key(tape, j)?;
        }
        let wr = tape.value(read_weights).to_f64_vec();
        for j in 0..n {
            self.access[j] = self.decay * self.access[j] + wr[j] + written[j];
        }
        self.writes += 1;
        Ok(written)
    }

    /// Forced allocation write used to seed the memory with the first
    /// template: the least-used slot becomes exactly `t0`.
    pub fn write_initial<T: Scalar>(&mut self, tape: &mut Tape<T>, t0: Var) -> Result<()> {
        let gates = tape.constant(Tensor::vector(vec![T::zero(), T::zero(), T::one()]));
        let wr = tape.constant(Tensor::zeros(&[self.len()]));
        let d = tape.scalar_constant(s(0.5));
        self.write_positive(tape, t0, gates, wr, d).map(|_| ())
    }

    /// Queue write: replaces slot `writes mod N`.
    pub fn write_queue<T: Scalar>(&mut self, tape: &mut Tape<T>, t_new: Var) -> Result<usize> {
        let j = self.writes % self.len();
        self.slots[j] = t_new;
        self.refresh_key(tape, j)?;
        self.writes += 1;
        Ok(j)
    }

    /// Replaces the least-used slots with `templates`, one each, and
    /// updates usage with this step's read weights plus the allocations.
    pub fn write_negative<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        templates: &[Var],
        read_weights: Option<&[f64]>,
    ) -> Result<Vec<usize>> {
        if templates.is_empty() || templates.len() > self.len() {
            return invalid(format!("{} distractors for {} slots", templates.len(), self.len()));
        }
        let targets = least_used(&self.access, templates.len());
        let mut alloc = vec![0.0; self.len()];
        for (&j, &t) in targets.iter().zip(templates) {
            self.slots[j] = t;
            self.refresh_key(tape, j)?;
            alloc[j] = 1.0;
        }
        for j in 0..self.len() {
            let wr = read_weights.map_or(0.0, |w| w[j]);
            self.access[j] = self.decay * self.access[j] + wr + alloc[j];
        }
        self.writes += 1;
        Ok(targets)
    }
}

impl<T: Scalar> MemoryState<T> {
    /// Stores the state under `prefix` in a tensor container.
    pub fn export(&self, prefix: &str, out: &mut ParamStore<T>) {
        for (j, t) in self.slots.iter().enumerate() {
            out.insert(format!("{prefix}slot{j:03}"), t.clone());
        }
        let access = self.access.iter().map(|&a| s(a)).collect();
        out.insert(format!("{prefix}access"), Tensor::vector(access));
        out.insert(
            format!("{prefix}meta"),
            Tensor::vector(vec![s(self.decay), s(self.writes as f64)]),
        );
    }

    pub fn import(prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        let access = store.get(&format!("{prefix}access"))?.to_f64_vec();
        let meta = store.get(&format!("{prefix}meta"))?.to_f64_vec();
        if meta.len() != 2 {
            return Err(Error::Format(format!("{prefix}meta must hold two values")));
        }
        let slots = (0..access.len())
            .map(|j| store.get(&format!("{prefix}slot{j:03}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryState { slots, access, decay: meta[0], writes: meta[1] as usize })
    }
}

/// Score-map cells `(row, col)` chosen as distractors. Candidates are strict
/// local maxima (above all in-bounds 8-neighbors); the `k` highest are kept
/// (lowest row-major index first on ties) and then filtered to those farther
/// than `tau` cells from the global maximum and scoring above `gamma` times
/// it. A non-positive global maximum yields no distractors.
pub fn distractor_positions(scores: &[f64], h: usize, w: usize, tau: f64, gamma: f64, k: usize) -> Vec<(usize, usize)> {
    assert_eq!(scores.len(), h * w, "score map size");
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    let peak = scores[best];
    let (py, px) = (best / w, best % w);
    let mut cands = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = scores[y * w + x];
            let mut is_max = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if scores[ny as usize * w + nx as usize] >= v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                cands.push((y * w + x, v));
            }
        }
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(k);
    if peak <= 0.0 {
        return Vec::new();
    }
    cands
        .into_iter()
        .map(|(i, _)| (i / w, i % w))
        .filter(|&(y, x)| {
            let d = ((y as f64 - py as f64).powi(2) + (x as f64 - px as f64).powi(2)).sqrt();
            d > tau && scores[y * w + x] > gamma * peak
        })
        .collect()
}

/// `n x n` windows of the search features at the chosen cells, or a single
/// zero template when there are none.
pub fn distractor_templates<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    positions: &[(usize, usize)],
    n: usize,
) -> Result<Vec<Var>> {
    if positions.is_empty() {
        let c = *tape.shape(features).last().unwrap_or(&1);
        return Ok(vec![tape.constant(Tensor::zeros(&[n, n, c]))]);
    }
    positions.iter().map(|&(y, x)| tape.slice2d(features, y, x, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpl(t: &mut Tape<f64>, v: &[f64]) -> Var {
        t.constant(Tensor::from_f64(&[1, 1, v.len()], v).unwrap())
    }

    #[test]
    fn key_is_spatial_mean() {
        let mut t = Tape::<f64>::new();
        let m = t.constant(Tensor::from_f64(&[2, 2, 1], &[1., 2., 3., 4.]).unwrap());
        let k = memory_key(&mut t, m).unwrap();
        assert_eq!(t.value(k).data(), &[2.5]);
        let c = t.constant(Tensor::full(&[3, 3, 4], -0.5));
        let k = memory_key(&mut t, c).unwrap();
        assert!(t.value(k).data().iter().all(|&x| x == -0.5));
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocation_weight(&[0.5, 0.2, 0.9]), vec![0.0, 1.0, 0.0]);
        assert_eq!(allocation_weight(&[0.2, 0.2]), vec![1.0, 0.0]);
        assert_eq!(least_used(&[0.0; 4], 2), vec![0, 1]);
        assert_eq!(least_used(&[3.0, 1.0, 2.0, 1.0], 3), vec![1, 3, 2]);
    }

    #[test]
    fn identical_keys_read_the_mean() {
        let mut t = Tape::<f64>::new();
        let mut m = Memory::zeros(&mut t, 2, &[1, 1, 2], 0.99).unwrap();
        m.slots = vec![tmpl(&mut t, &[1.0, 2.0]), tmpl(&mut t, &[2.0, 4.0])];
        for j in 0..2 {
            m.refresh_key(&mut t, j).unwrap();
        }
        let key = t.constant(Tensor::vector(vec![3.0, 1.0]));
        let beta = t.scalar_constant(2.0);
        let r = m.read(&mut t, key, beta, ReadMode::Soft).unwrap();
        assert_eq!(t.value(r.weights).data(), &[0.5, 0.5]);
        assert_eq!(t.value(r.template).data(), &[1.5, 3.0]);
    }

    #[test]
    fn sharp_read_weights() {
        let mut t = Tape::<f64>::new();
        let mut m = Memory::zeros(&mut t, 2, &[1, 1, 2], 0.99).unwrap();
        m.slots = vec![tmpl(&mut t, &[1.0, 0.0]), tmpl(&mut t, &[0.0, 1.0])];
        for j in 0..2 {
            m.refresh_key(&mut t, j).unwrap();
        }
        let beta = t.scalar_constant(20.0);
        let key = t.constant(Tensor::vector(vec![2.0, 0.0]));
        let r = m.read(&mut t, key, beta, ReadMode::Soft).unwrap();
        let w = t.value(r.weights).clone();
        let small = 1.0 / (1.0 + 20f64.exp());
        assert!((w.data()[1] - small).abs() < 1e-18);
        assert!((w.data()[1] - 2.06e-9).abs() < 1e-11);
        let scaled = t.constant(Tensor::vector(vec![7.0, 0.0]));
        let r2 = m.read(&mut t, scaled, beta, ReadMode::Soft).unwrap();
        let w2 = t.value(r2.weights).clone();
        assert!(w.max_abs_diff(&w2) < 1e-15);
        let hard = m.read(&mut t, key, beta, ReadMode::Hard).unwrap();
        assert_eq!(t.value(hard.weights).data(), &[1.0, 0.0]);
    }

    fn seeded(t: &mut Tape<f64>) -> Memory {
        let mut m = Memory::zeros(t, 3, &[1, 1, 2], 0.99).unwrap();
        m.slots = vec![tmpl(t, &[1.0, 1.0]), tmpl(t, &[2.0, -1.0]), tmpl(t, &[0.0, 3.0])];
        for j in 0..3 {
            m.refresh_key(t, j).unwrap();
        }
        m.access = vec![0.5, 0.1, 0.9];
        m
    }

    #[test]
    fn skip_gate_leaves_slots() {
        let mut t = Tape::<f64>::new();
        let mut m = seeded(&mut t);
        let before: Vec<_> = m.slots.clone();
        let g = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let wr = t.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let d = t.scalar_constant(0.4);
        let new = tmpl(&mut t, &[9.0, 9.0]);
        m.write_positive(&mut t, new, g, wr, d).unwrap();
        assert_eq!(m.slots, before);
        let expect = [0.99 * 0.5 + 0.2, 0.99 * 0.1 + 0.3, 0.99 * 0.9 + 0.5];
        for (a, e) in m.access.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn allocation_write_replaces_exactly() {
        let mut t = Tape::<f64>::new();
        let mut m = seeded(&mut t);
        let g = t.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let wr = t.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let d = t.scalar_constant(0.4);
        let new = tmpl(&mut t, &[0.1, 0.7]);
        let ww = m.write_positive(&mut t, new, g, wr, d).unwrap();
        assert_eq!(ww, vec![0.0, 1.0, 0.0]);
        assert_eq!(t.value(m.slots[1]).data(), &[0.1, 0.7]);
        assert_eq!(t.value(m.slots[0]).data(), &[1.0, 1.0]);
    }

    #[test]
    fn read_gate_blends_by_decay() {
        let mut t = Tape::<f64>::new();
        let mut m = seeded(&mut t);
        let g = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let wr = t.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let d = t.scalar_constant(0.3);
        let new = tmpl(&mut t, &[1.0, -1.0]);
        m.write_positive(&mut t, new, g, wr, d).unwrap();
        let got = t.value(m.slots[2]).data().to_vec();
        assert!((got[0] - 0.3).abs() < 1e-12 && (got[1] - (0.7 * 3.0 - 0.3)).abs() < 1e-12);
        assert_eq!(t.value(m.keys[2]).data(), &got[..]);
    }

    #[test]
    fn initial_write_seeds_slot_zero() {
        let mut t = Tape::<f64>::new();
        let mut m = Memory::zeros(&mut t, 4, &[1, 1, 2], 0.99).unwrap();
        let t0 = tmpl(&mut t, &[0.25, -4.0]);
        m.write_initial(&mut t, t0).unwrap();
        assert_eq!(t.value(m.slots[0]).data(), &[0.25, -4.0]);
        assert_eq!(m.access, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(allocation_index(&m.access), 1);
    }

    #[test]
    fn negative_queue_cycles_all_slots() {
        let mut t = Tape::<f64>::new();
        let mut m = Memory::zeros(&mut t, 16, &[1, 1, 1], 0.99).unwrap();
        let mut seen = Vec::new();
        for r in 0..8 {
            let a = tmpl(&mut t, &[r as f64]);
            let b = tmpl(&mut t, &[r as f64 + 0.5]);
            seen.extend(m.write_negative(&mut t, &[a, b], None).unwrap());
        }
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        assert_eq!(&seen[..2], &[0, 1]);
    }

    #[test]
    fn queue_mode_reads_occupied_mean() {
        let mut t = Tape::<f64>::new();
        let mut m = Memory::zeros(&mut t, 3, &[1, 1, 1], 0.99).unwrap();
        for v in [2.0, 4.0] {
            let x = tmpl(&mut t, &[v]);
            m.write_queue(&mut t, x).unwrap();
        }
        let key = t.constant(Tensor::vector(vec![1.0]));
        let beta = t.scalar_constant(1.0);
        let r = m.read(&mut t, key, beta, ReadMode::Mean).unwrap();
        assert_eq!(t.value(r.template).data(), &[3.0]);
        for v in [6.0, 8.0] {
            let x = tmpl(&mut t, &[v]);
            m.write_queue(&mut t, x).unwrap();
        }
        assert_eq!(t.value(m.slots[0]).data(), &[8.0]);
    }

    #[test]
    fn distractor_examples() {
        let (h, w) = (11, 11);
        let mut map = vec![0.0; h * w];
        map[5 * w + 5] = 1.0;
        map[5 * w + 10] = 0.8;
        assert_eq!(distractor_positions(&map, h, w, 4.0, 0.7, 2), vec![(5, 10)]);
        let mut near = vec![0.0; h * w];
        near[5 * w + 5] = 1.0;
        near[5 * w + 7] = 0.9;
        assert!(distractor_positions(&near, h, w, 4.0, 0.7, 2).is_empty());
        assert!(distractor_positions(&vec![0.3; h * w], h, w, 4.0, 0.7, 2).is_empty());
    }

    #[test]
    fn empty_distractors_give_zero_sentinel() {
        let mut t = Tape::<f64>::new();
        let f = t.constant(Tensor::full(&[5, 5, 3], 1.0));
        let d = distractor_templates(&mut t, f, &[], 2).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(t.shape(d[0]), &[2, 2, 3]);
        assert!(t.value(d[0]).data().iter().all(|&x| x == 0.0));
        let d = distractor_templates(&mut t, f, &[(3, 3)], 2).unwrap();
        assert_eq!(t.shape(d[0]), &[2, 2, 3]);
    }

    #[test]
    fn state_round_trips_through_container() {
        let mut t = Tape::<f64>::new();
        let m = seeded(&mut t);
        let st = m.to_state(&t);
        let mut store = ParamStore::new();
        st.export("pos/", &mut store);
        let back = MemoryState::import("pos/", &store).unwrap();
        assert_eq!(back, st);
        let again = Memory::from_state(&mut t, &back).unwrap();
        assert_eq!(t.value(again.keys[1]).data(), t.value(m.keys[1]).data());
    }
}
