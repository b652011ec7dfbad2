//! Per-learner transition storage laid out as fixed-length sequences.

use ndarray::Array2;

use super::gae::compute_gae;
use crate::env::EGO_DIM;
use crate::error::{Error, Result};
use crate::policy::{Features, RecurrentState, SeqBatch, SeqBatchBuilder, ACTION_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub features: Features,
    /// Pre-squash action.
    pub u: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// The recurrent state is zeroed before this step.
    pub reset: bool,
    /// False for placeholder rows of agents that were not racing.
    pub valid: bool,
}

impl Transition {
    pub fn placeholder() -> Self {
        Self {
            features: Features {
                ego: [0.0; EGO_DIM],
                opponents: Vec::new(),
            },
            u: [0.0; ACTION_DIM],
            log_prob: 0.0,
            value: 0.0,
            reward: 0.0,
            done: true,
            reset: false,
            valid: false,
        }
    }
}

/// Steps `index * segment_len ..` of sequence `seq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub seq: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    n_seq: usize,
    steps: usize,
    segment_len: usize,
    rows: Vec<Option<Transition>>,
    seg_states: Vec<Option<RecurrentState<f32>>>,
    last_values: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(n_seq: usize, steps: usize, segment_len: usize) -> Self {
        let segs = steps.div_ceil(segment_len);
        Self {
            n_seq,
            steps,
            segment_len,
            rows: vec![None; n_seq * steps],
            seg_states: vec![None; n_seq * segs],
            last_values: vec![0.0; n_seq],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn n_seq(&self) -> usize {
        self.n_seq
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn segments_per_seq(&self) -> usize {
        self.steps.div_ceil(self.segment_len)
    }

    /// Stores step `t` of sequence `seq`. `state` is the recurrent state
    /// before the step; it is kept at segment starts.
    pub fn push(&mut self, seq: usize, t: usize, row: Transition, state: &RecurrentState<f32>) {
        if t % self.segment_len == 0 {
            let k = seq * self.segments_per_seq() + t / self.segment_len;
            self.seg_states[k] = Some(state.clone());
        }
        self.rows[seq * self.steps + t] = Some(row);
    }

    pub fn set_last_value(&mut self, seq: usize, v: f64) {
        self.last_values[seq] = v;
    }

    pub fn row(&self, seq: usize, t: usize) -> Option<&Transition> {
        self.rows[seq * self.steps + t].as_ref()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.rows.iter().flatten()
    }

    pub fn n_valid(&self) -> usize {
        self.transitions().filter(|r| r.valid).count()
    }

    pub fn is_full(&self) -> bool {
        self.rows.iter().all(Option::is_some)
    }

    /// Computes advantages and returns; the buffer must be full.
    pub fn finish(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if !self.is_full() {
            return Err(Error::Dimension("rollout buffer is not full".into()));
        }
        self.advantages = vec![0.0; self.rows.len()];
        self.returns = vec![0.0; self.rows.len()];
        for s in 0..self.n_seq {
            let rows: Vec<&Transition> = (0..self.steps).map(|t| self.row(s, t).expect("full")).collect();
            let r: Vec<f64> = rows.iter().map(|x| x.reward).collect();
            let v: Vec<f64> = rows.iter().map(|x| x.value).collect();
            let d: Vec<bool> = rows.iter().map(|x| x.done).collect();
            let (a, ret) = compute_gae(&r, &v, &d, self.last_values[s], gamma, lambda)?;
            let base = s * self.steps;
            self.advantages[base..base + self.steps].copy_from_slice(&a);
            self.returns[base..base + self.steps].copy_from_slice(&ret);
        }
        Ok(())
    }

    pub fn advantage(&self, seq: usize, t: usize) -> f64 {
        self.advantages[seq * self.steps + t]
    }

    pub fn ret(&self, seq: usize, t: usize) -> f64 {
        self.returns[seq * self.steps + t]
    }

    pub fn segments(&self) -> Vec<Segment> {
        (0..self.n_seq)
            .flat_map(|seq| (0..self.segments_per_seq()).map(move |index| Segment { seq, index }))
            .collect()
    }

    /// Steps covered by `seg`; only the last segment of a sequence can be
    /// shorter than `segment_len`.
    pub fn segment_steps(&self, seg: Segment) -> usize {
        self.segment_len.min(self.steps - seg.index * self.segment_len)
    }

    /// Builds a time-major batch over `segs`, as long as the longest of them.
    /// Shorter segments are padded with invalid rows. Also returns, per row,
    /// the `(seq, t)` it came from when the row is valid.
    #[allow(clippy::type_complexity)]
    pub fn batch(&self, segs: &[Segment], hidden: usize) -> Result<(SeqBatch<f32>, Vec<Option<(usize, usize)>>)> {
        let l = segs.iter().map(|&s| self.segment_steps(s)).max().unwrap_or(0);
        let b = segs.len();
        let mut builder = SeqBatchBuilder::<f32>::new(l, b);
        let mut origin = Vec::with_capacity(l * b);
        let none: &[[f64; 6]] = &[];
        for k in 0..l {
            for sg in segs {
                let t = sg.index * self.segment_len + k;
                match (k < self.segment_steps(*sg)).then(|| self.row(sg.seq, t)).flatten() {
                    Some(row) => {
                        builder.push(&row.features.ego, &row.features.opponents, row.reset);
                        origin.push(row.valid.then_some((sg.seq, t)));
                    }
                    None => {
                        builder.push(&[0.0f64; EGO_DIM], none, false);
                        origin.push(None);
                    }
                }
            }
        }
        let mut h0 = Array2::zeros((b, hidden));
        let mut c0 = Array2::zeros((b, hidden));
        for (j, sg) in segs.iter().enumerate() {
            if let Some(st) = &self.seg_states[sg.seq * self.segments_per_seq() + sg.index] {
                h0.row_mut(j).assign(&st.h);
                c0.row_mut(j).assign(&st.c);
            }
        }
        Ok((builder.finish(h0, c0)?, origin))
    }
}
