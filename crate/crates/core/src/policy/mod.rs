//! Recurrent actor-critic with a permutation-invariant opponent encoder.
//!
//! Rows are processed as time-major sequence batches: the encoder and all
//! dense layers run on every row at once, only the LSTM recurrence walks the
//! time axis. Gradients are computed by hand from a recorded [`Tape`].

pub mod checkpoint;
pub mod distribution;
pub mod encoder;
pub mod layers;
pub mod lstm;
pub mod params;

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Observation, EGO_DIM, OPPONENT_DIM};
use crate::error::{Error, Result};
pub use distribution::{sample_action, ActionSample, ACTION_DIM};
pub use encoder::{AttentionEncoder, OpponentSets};
use layers::{Mlp, MlpTape};
use lstm::{Lstm, LstmTape};
pub use params::{FlatTensors, Layout, ParamSet, Real, TensorId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Attention,
    /// Fixed zero-padded slots instead of attention.
    Concat,
}

/// Fixed affine input scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsNormalization {
    pub position: f64,
    pub velocity: f64,
    pub gate: f64,
    pub opponent_position: f64,
    pub opponent_velocity: f64,
}

impl Default for ObsNormalization {
    fn default() -> Self {
        Self {
            position: 0.1,
            velocity: 0.1,
            gate: 0.2,
            opponent_position: 0.5,
            opponent_velocity: 0.2,
        }
    }
}

impl ObsNormalization {
    pub fn ego(&self, obs: &Observation) -> [f64; EGO_DIM] {
        let mut x = obs.ego.to_array();
        for (k, v) in x.iter_mut().enumerate() {
            *v *= match k {
                0..3 => self.position,
                3..6 => self.velocity,
                6..15 => 1.0,
                _ => self.gate,
            };
        }
        x
    }

    pub fn opponents(&self, obs: &Observation) -> Vec<[f64; OPPONENT_DIM]> {
        obs.opponents
            .iter()
            .filter(|o| o.valid)
            .map(|o| {
                let mut r = o.to_array();
                for (k, v) in r.iter_mut().enumerate() {
                    *v *= if k < 3 { self.opponent_position } else { self.opponent_velocity };
                }
                r
            })
            .collect()
    }

    pub fn features(&self, obs: &Observation) -> Features {
        Features {
            ego: self.ego(obs),
            opponents: self.opponents(obs),
        }
    }
}

/// Normalized network inputs of one agent at one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub ego: [f64; EGO_DIM],
    pub opponents: Vec<[f64; OPPONENT_DIM]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub n_latents: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub max_concat_opponents: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub log_std_init: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Gain of the final actor layer at initialization.
    pub actor_output_gain: f64,
    /// Start the collective-thrust mean at the hover command.
    pub hover_bias: bool,
    pub normalization: ObsNormalization,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Attention,
            embed_dim: 128,
            n_latents: 4,
            n_heads: 4,
            head_dim: 32,
            max_concat_opponents: 10,
            lstm_hidden: 256,
            mlp_hidden: vec![512, 512],
            leaky_slope: 0.01,
            log_std_init: -0.5,
            log_std_min: -5.0,
            log_std_max: 1.0,
            actor_output_gain: 0.01,
            hover_bias: true,
            normalization: ObsNormalization::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("policy.embed_dim", self.embed_dim),
            ("policy.n_latents", self.n_latents),
            ("policy.n_heads", self.n_heads),
            ("policy.head_dim", self.head_dim),
            ("policy.lstm_hidden", self.lstm_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::config("policy.mlp_hidden", "layer sizes must be positive"));
        }
        if !(self.log_std_min < self.log_std_max)
            || !(self.log_std_min..=self.log_std_max).contains(&self.log_std_init)
        {
            return Err(Error::config("policy.log_std_init", "must lie in [log_std_min, log_std_max]"));
        }
        Ok(())
    }
}

/// Layer structure shared by every parameter set of one configuration.
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Option<AttentionEncoder>,
    pub lstm: Lstm,
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: TensorId,
    pub encoding_dim: usize,
}

impl Network {
    pub fn build(cfg: &PolicyConfig) -> (Self, Layout) {
        let mut layout = Layout::default();
        let (encoder, encoding_dim) = match cfg.encoder {
            EncoderKind::Attention => {
                let e = AttentionEncoder::register(
                    &mut layout,
                    cfg.embed_dim,
                    cfg.n_latents,
                    cfg.n_heads,
                    cfg.head_dim,
                    cfg.leaky_slope,
                );
                let d = e.output_dim();
                (Some(e), d)
            }
            EncoderKind::Concat => (None, cfg.max_concat_opponents * OPPONENT_DIM),
        };
        let lstm = Lstm::register(&mut layout, EGO_DIM + encoding_dim, cfg.lstm_hidden);
        let mut actor_sizes = vec![cfg.lstm_hidden];
        actor_sizes.extend(&cfg.mlp_hidden);
        let mut critic_sizes = actor_sizes.clone();
        actor_sizes.push(ACTION_DIM);
        critic_sizes.push(1);
        let actor = Mlp::register(&mut layout, "actor", &actor_sizes, cfg.leaky_slope);
        let critic = Mlp::register(&mut layout, "critic", &critic_sizes, cfg.leaky_slope);
        let log_std = layout.add("log_std", &[ACTION_DIM]);
        (
            Self {
                encoder,
                lstm,
                actor,
                critic,
                log_std,
                encoding_dim,
            },
            layout,
        )
    }
}

/// Time-major batch of `steps x batch` rows with their opponent sets,
/// episode-start flags and the recurrent state before the first step.
#[derive(Clone, Debug)]
pub struct SeqBatch<F> {
    pub steps: usize,
    pub batch: usize,
    pub ego: Array2<F>,
    pub opponents: OpponentSets<F>,
    pub resets: Vec<bool>,
    pub h0: Array2<F>,
    pub c0: Array2<F>,
}

/// Accumulates normalized rows in time-major order.
#[derive(Clone, Debug)]
pub struct SeqBatchBuilder<F> {
    steps: usize,
    batch: usize,
    ego: Vec<F>,
    records: Vec<F>,
    offsets: Vec<usize>,
    resets: Vec<bool>,
}

impl<F: Real> SeqBatchBuilder<F> {
    pub fn new(steps: usize, batch: usize) -> Self {
        let rows = steps * batch;
        Self {
            steps,
            batch,
            ego: Vec::with_capacity(rows * EGO_DIM),
            records: Vec::new(),
            offsets: {
                let mut v = Vec::with_capacity(rows + 1);
                v.push(0);
                v
            },
            resets: Vec::with_capacity(rows),
        }
    }

    pub fn push<G: Real, O: AsRef<[G]>>(&mut self, ego: &[G], opponents: &[O], reset: bool) {
        debug_assert_eq!(ego.len(), EGO_DIM);
        self.ego.extend(ego.iter().map(|&x| F::of(x.f64())));
        for o in opponents {
            self.records.extend(o.as_ref().iter().map(|&x| F::of(x.f64())));
        }
        self.offsets.push(self.offsets.last().unwrap() + opponents.len());
        self.resets.push(reset);
    }

    pub fn finish(self, h0: Array2<F>, c0: Array2<F>) -> Result<SeqBatch<F>> {
        let rows = self.steps * self.batch;
        if self.resets.len() != rows {
            return Err(Error::Dimension(format!("expected {rows} rows, got {}", self.resets.len())));
        }
        if h0.nrows() != self.batch || c0.nrows() != self.batch {
            return Err(Error::Dimension("initial recurrent state must have one row per sequence".into()));
        }
        let n_rec = self.records.len() / OPPONENT_DIM;
        Ok(SeqBatch {
            steps: self.steps,
            batch: self.batch,
            ego: Array2::from_shape_vec((rows, EGO_DIM), self.ego).expect("row count checked"),
            opponents: OpponentSets {
                records: Array2::from_shape_vec((n_rec, OPPONENT_DIM), self.records).expect("record width"),
                offsets: self.offsets,
            },
            resets: self.resets,
            h0,
            c0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PolicyOutput<F> {
    /// Pre-squash action mean per row.
    pub mean: Array2<F>,
    pub log_std: Array1<F>,
    pub value: Array1<F>,
    pub h: Array2<F>,
    pub c: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct Tape<F> {
    version: u64,
    encoder: Option<encoder::AttentionTape<F>>,
    lstm: LstmTape<F>,
    actor: MlpTape<F>,
    critic: MlpTape<F>,
}

/// Per-agent LSTM state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub h: Array1<F>,
    pub c: Array1<F>,
}

impl<F: Real> RecurrentState<F> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

/// Result of acting on a batch of observations.
#[derive(Clone, Debug)]
pub struct ActStep {
    pub samples: Vec<ActionSample>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Policy<F> {
    config: PolicyConfig,
    net: Arc<Network>,
    params: ParamSet<F>,
}

impl<F: Real> Policy<F> {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (net, layout) = Network::build(&config);
        let mut values = FlatTensors::zeros(Arc::new(layout));
        if let Some(e) = &net.encoder {
            e.init(&mut values, rng);
        }
        net.lstm.init(&mut values, rng);
        net.actor.init(&mut values, config.actor_output_gain, rng);
        net.critic.init(&mut values, 1.0, rng);
        values.slice_mut(net.log_std).fill(F::of(config.log_std_init));
        Ok(Self {
            config,
            net: Arc::new(net),
            params: ParamSet::new(values),
        })
    }

    /// Rebuilds a policy around stored parameter values.
    pub fn from_values(config: PolicyConfig, values: Vec<F>) -> Result<Self> {
        config.validate()?;
        let (net, layout) = Network::build(&config);
        let values = FlatTensors::from_vec(Arc::new(layout), values)?;
        Ok(Self {
            config,
            net: Arc::new(net),
            params: ParamSet::new(values),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }

    pub fn hidden(&self) -> usize {
        self.config.lstm_hidden
    }

    /// Applies `f` to the parameter values and clamps log-std into range.
    pub fn update_params<T>(&mut self, f: impl FnOnce(&mut FlatTensors<F>) -> T) -> T {
        let (lo, hi) = (F::of(self.config.log_std_min), F::of(self.config.log_std_max));
        let id = self.net.log_std;
        self.params.update(|v| {
            let out = f(v);
            for x in v.slice_mut(id) {
                *x = x.max(lo).min(hi);
            }
            out
        })
    }

    /// Sets the bias of action channel `k` in the actor's output layer.
    pub fn set_mean_bias(&mut self, k: usize, value: f64) {
        let b = self.net.actor.layers.last().expect("actor has layers").b;
        self.update_params(|v| v.slice_mut(b)[k] = F::of(value));
    }

    pub fn cast<G: Real>(&self) -> Policy<G> {
        Policy {
            config: self.config.clone(),
            net: self.net.clone(),
            params: ParamSet::new(self.params.values().cast()),
        }
    }

    pub fn log_std(&self) -> [f64; ACTION_DIM] {
        let v = self.params.view1(self.net.log_std);
        std::array::from_fn(|k| v[k].f64())
    }

    pub fn forward(&self, batch: &SeqBatch<F>) -> Result<(PolicyOutput<F>, Tape<F>)> {
        let p = self.params.values();
        let rows = batch.steps * batch.batch;
        if batch.ego.nrows() != rows || batch.ego.ncols() != EGO_DIM || batch.resets.len() != rows {
            return Err(Error::Dimension(format!("sequence batch must have {rows} rows of width {EGO_DIM}")));
        }
        if batch.opponents.rows() != rows {
            return Err(Error::Dimension("opponent sets must cover every row".into()));
        }
        if !batch.ego.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("ego observation".into()));
        }
        let (enc, enc_tape) = match &self.net.encoder {
            Some(e) => {
                let (z, t) = e.forward(p, &batch.opponents)?;
                (z, Some(t))
            }
            None => (
                encoder::concat_encode(&batch.opponents, self.config.max_concat_opponents)?,
                None,
            ),
        };
        let mut x = Array2::zeros((rows, EGO_DIM + self.net.encoding_dim));
        x.slice_mut(s![.., ..EGO_DIM]).assign(&batch.ego);
        x.slice_mut(s![.., EGO_DIM..]).assign(&enc);
        let (hs, h, c, lstm_tape) = self.net.lstm.forward(
            p,
            x,
            &batch.resets,
            batch.h0.view(),
            batch.c0.view(),
            batch.steps,
            batch.batch,
        )?;
        let (mean, actor_tape) = self.net.actor.forward(p, hs.clone(), "actor")?;
        let (value, critic_tape) = self.net.critic.forward(p, hs, "critic")?;
        Ok((
            PolicyOutput {
                mean,
                log_std: p.view1(self.net.log_std).to_owned(),
                value: value.column(0).to_owned(),
                h,
                c,
            },
            Tape {
                version: self.params.version(),
                encoder: enc_tape,
                lstm: lstm_tape,
                actor: actor_tape,
                critic: critic_tape,
            },
        ))
    }

    /// Gradients of a scalar loss given its derivatives with respect to the
    /// outputs of the recorded forward pass.
    pub fn backward(
        &self,
        tape: &Tape<F>,
        d_mean: ArrayView2<F>,
        d_log_std: ArrayView1<F>,
        d_value: ArrayView1<F>,
    ) -> Result<FlatTensors<F>> {
        if tape.version != self.params.version() {
            return Err(Error::StaleTape {
                recorded: tape.version,
                current: self.params.version(),
            });
        }
        let p = self.params.values();
        let mut g = FlatTensors::zeros(self.layout().clone());
        let mut d_h = self.net.actor.backward(p, &mut g, &tape.actor, d_mean.to_owned());
        let d_v = d_value.to_owned().insert_axis(Axis(1));
        d_h += &self.net.critic.backward(p, &mut g, &tape.critic, d_v);
        let d_enc = self.net.lstm.backward(p, &mut g, &tape.lstm, d_h.view(), EGO_DIM);
        if let (Some(e), Some(t)) = (&self.net.encoder, &tape.encoder) {
            e.backward(p, &mut g, t, d_enc.view());
        }
        g.view1_mut(self.net.log_std).zip_mut_with(&d_log_std, |a, &b| *a += b);
        Ok(g)
    }

    /// One tick for a batch of agents. `states[k]` is read and replaced.
    pub fn act<R: Rng + ?Sized>(
        &self,
        observations: &[&Observation],
        states: &mut [RecurrentState<F>],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<ActStep> {
        let norm = &self.config.normalization;
        let feats: Vec<Features> = observations.iter().map(|o| norm.features(o)).collect();
        let refs: Vec<&Features> = feats.iter().collect();
        self.act_features(&refs, states, rng, deterministic)
    }

    pub fn act_features<R: Rng + ?Sized>(
        &self,
        features: &[&Features],
        states: &mut [RecurrentState<F>],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<ActStep> {
        let n = features.len();
        if states.len() != n {
            return Err(Error::Dimension("one recurrent state per observation".into()));
        }
        let mut b = SeqBatchBuilder::<F>::new(1, n);
        for f in features {
            b.push(&f.ego, &f.opponents, false);
        }
        let hd = self.hidden();
        let mut h0 = Array2::zeros((n, hd));
        let mut c0 = Array2::zeros((n, hd));
        for (k, s) in states.iter().enumerate() {
            h0.row_mut(k).assign(&s.h);
            c0.row_mut(k).assign(&s.c);
        }
        let (out, _) = self.forward(&b.finish(h0, c0)?)?;
        let log_std = self.log_std();
        let mut samples = Vec::with_capacity(n);
        for (k, s) in states.iter_mut().enumerate() {
            s.h.assign(&out.h.row(k));
            s.c.assign(&out.c.row(k));
            let mean: [f64; ACTION_DIM] = std::array::from_fn(|j| out.mean[(k, j)].f64());
            samples.push(sample_action(&mean, &log_std, rng, deterministic));
        }
        Ok(ActStep {
            samples,
            values: out.value.iter().map(|v| v.f64()).collect(),
        })
    }
}
