//! Opponent-set encoders.
//!
//! The attention encoder embeds each opponent record, then lets a fixed set
//! of learned latent queries attend over the embedded set with multi-head
//! scaled dot-product attention. Latent outputs pass through an output
//! projection and are concatenated, so the encoding size does not depend on
//! the number of opponents. An empty set attends to a single learned null
//! token instead.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::layers::{ensure_finite, init_uniform, leaky, leaky_backward, Linear};
use super::params::{FlatTensors, Layout, Real, TensorId};
use crate::env::OPPONENT_DIM;
use crate::error::{Error, Result};

/// Variable-length opponent sets for a batch of rows, stored CSR-style:
/// row `r` owns `records[offsets[r]..offsets[r + 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OpponentSets<F> {
    pub records: Array2<F>,
    pub offsets: Vec<usize>,
}

impl<F: Real> OpponentSets<F> {
    pub fn empty(rows: usize) -> Self {
        Self {
            records: Array2::zeros((0, OPPONENT_DIM)),
            offsets: vec![0; rows + 1],
        }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty()
            || self.offsets[0] != 0
            || *self.offsets.last().unwrap() != self.records.nrows()
            || self.offsets.windows(2).any(|w| w[0] > w[1])
            || self.records.ncols() != OPPONENT_DIM
        {
            return Err(Error::Dimension("malformed opponent set offsets".into()));
        }
        if !self.records.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("opponent records".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionEncoder {
    pub embed: Linear,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub out: Linear,
    pub latents: TensorId,
    pub null: TensorId,
    pub n_latents: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct AttentionTape<F> {
    records: Array2<F>,
    embed_pre: Array2<F>,
    e_all: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention weights, per row laid out as [head][latent][key].
    weights: Vec<F>,
    weight_offsets: Vec<usize>,
    offsets: Vec<usize>,
    attended: Array2<F>,
}

impl AttentionEncoder {
    pub fn register(
        layout: &mut Layout,
        embed_dim: usize,
        n_latents: usize,
        n_heads: usize,
        head_dim: usize,
        slope: f64,
    ) -> Self {
        let d = n_heads * head_dim;
        Self {
            embed: Linear::register(layout, "encoder.embed", OPPONENT_DIM, embed_dim),
            wq: layout.add("encoder.wq", &[embed_dim, d]),
            wk: layout.add("encoder.wk", &[embed_dim, d]),
            wv: layout.add("encoder.wv", &[embed_dim, d]),
            out: Linear::register(layout, "encoder.out", d, d),
            latents: layout.add("encoder.latents", &[n_latents, embed_dim]),
            null: layout.add("encoder.null", &[1, embed_dim]),
            n_latents,
            n_heads,
            head_dim,
            slope,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn output_dim(&self) -> usize {
        self.n_latents * self.model_dim()
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, p: &mut FlatTensors<F>, rng: &mut R) {
        self.embed.init(p, 1.0, rng);
        self.out.init(p, 1.0, rng);
        let e = p.layout().spec(self.wq).shape[0] as f64;
        for id in [self.wq, self.wk, self.wv, self.latents, self.null] {
            init_uniform(p.slice_mut(id), 1.0 / e.sqrt(), rng);
        }
    }

    /// Key rows attended by row `r`: its records, or the null token.
    fn keys(offsets: &[usize], null_row: usize, r: usize) -> std::ops::Range<usize> {
        let (a, b) = (offsets[r], offsets[r + 1]);
        if a == b {
            null_row..null_row + 1
        } else {
            a..b
        }
    }

    pub fn forward<F: Real>(&self, p: &FlatTensors<F>, sets: &OpponentSets<F>) -> Result<(Array2<F>, AttentionTape<F>)> {
        sets.validate()?;
        let rows = sets.rows();
        let n_rec = sets.records.nrows();
        let (l_n, h_n, dh, d) = (self.n_latents, self.n_heads, self.head_dim, self.model_dim());
        let embed_pre = self.embed.forward(p, sets.records.view());
        ensure_finite(&embed_pre, "encoder.embed")?;
        let e_dim = embed_pre.ncols();
        let mut e_all = Array2::zeros((n_rec + 1, e_dim));
        e_all.slice_mut(s![..n_rec, ..]).assign(&leaky(&embed_pre, F::of(self.slope)));
        e_all.row_mut(n_rec).assign(&p.view2(self.null).row(0));
        let k = e_all.dot(&p.view2(self.wk));
        let v = e_all.dot(&p.view2(self.wv));
        let q = p.view2(self.latents).dot(&p.view2(self.wq));
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut attended = Array2::zeros((rows * l_n, d));
        let mut weights = Vec::new();
        let mut weight_offsets = Vec::with_capacity(rows + 1);
        let mut scores = Vec::new();
        for r in 0..rows {
            weight_offsets.push(weights.len());
            let keys = Self::keys(&sets.offsets, n_rec, r);
            for h in 0..h_n {
                let cols = h * dh..(h + 1) * dh;
                for l in 0..l_n {
                    let ql = q.slice(s![l, cols.clone()]);
                    scores.clear();
                    for j in keys.clone() {
                        scores.push(ql.dot(&k.slice(s![j, cols.clone()])) * scale);
                    }
                    let m = scores.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - m).exp();
                        z += *sc;
                    }
                    let mut o = attended.slice_mut(s![r * l_n + l, cols.clone()]);
                    for (sc, j) in scores.iter().zip(keys.clone()) {
                        let a = *sc / z;
                        weights.push(a);
                        o.scaled_add(a, &v.slice(s![j, cols.clone()]));
                    }
                }
            }
        }
        weight_offsets.push(weights.len());
        ensure_finite(&attended, "encoder.attention")?;
        let z = self.out.forward(p, attended.view());
        ensure_finite(&z, "encoder.out")?;
        let z = z.into_shape_with_order((rows, l_n * d)).expect("contiguous");
        Ok((
            z,
            AttentionTape {
                records: sets.records.clone(),
                embed_pre,
                e_all,
                q,
                k,
                v,
                weights,
                weight_offsets,
                offsets: sets.offsets.clone(),
                attended,
            },
        ))
    }

    pub fn backward<F: Real>(&self, p: &FlatTensors<F>, g: &mut FlatTensors<F>, tape: &AttentionTape<F>, dz: ArrayView2<F>) {
        let rows = tape.offsets.len() - 1;
        let n_rec = tape.records.nrows();
        let (l_n, h_n, dh, d) = (self.n_latents, self.n_heads, self.head_dim, self.model_dim());
        let dz = dz.to_owned().into_shape_with_order((rows * l_n, d)).expect("contiguous");
        let d_att = self
            .out
            .backward(p, g, tape.attended.view(), dz.view(), true)
            .expect("dx requested");
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut dq = Array2::<F>::zeros(tape.q.raw_dim());
        let mut dk = Array2::<F>::zeros(tape.k.raw_dim());
        let mut dv = Array2::<F>::zeros(tape.v.raw_dim());
        let mut da = Vec::new();
        for r in 0..rows {
            let keys = Self::keys(&tape.offsets, n_rec, r);
            let nk = keys.len();
            let mut w = tape.weight_offsets[r];
            for h in 0..h_n {
                let cols = h * dh..(h + 1) * dh;
                for l in 0..l_n {
                    let a = &tape.weights[w..w + nk];
                    w += nk;
                    let d_o = d_att.slice(s![r * l_n + l, cols.clone()]);
                    da.clear();
                    for (j, &aj) in keys.clone().zip(a) {
                        da.push(d_o.dot(&tape.v.slice(s![j, cols.clone()])));
                        dv.slice_mut(s![j, cols.clone()]).scaled_add(aj, &d_o);
                    }
                    let mean: F = a.iter().zip(&da).map(|(&x, &y)| x * y).sum();
                    for ((j, &aj), &daj) in keys.clone().zip(a).zip(&da) {
                        let ds = aj * (daj - mean) * scale;
                        dq.slice_mut(s![l, cols.clone()]).scaled_add(ds, &tape.k.slice(s![j, cols.clone()]));
                        dk.slice_mut(s![j, cols.clone()]).scaled_add(ds, &tape.q.slice(s![l, cols.clone()]));
                    }
                }
            }
        }
        let latents = p.view2(self.latents);
        ndarray::linalg::general_mat_mul(F::one(), &latents.t(), &dq, F::one(), &mut g.view2_mut(self.wq));
        let d_latents = dq.dot(&p.view2(self.wq).t());
        g.view2_mut(self.latents).zip_mut_with(&d_latents, |a, &b| *a += b);
        ndarray::linalg::general_mat_mul(F::one(), &tape.e_all.t(), &dk, F::one(), &mut g.view2_mut(self.wk));
        ndarray::linalg::general_mat_mul(F::one(), &tape.e_all.t(), &dv, F::one(), &mut g.view2_mut(self.wv));
        let mut de = dk.dot(&p.view2(self.wk).t());
        de += &dv.dot(&p.view2(self.wv).t());
        g.view2_mut(self.null).row_mut(0).zip_mut_with(&de.row(n_rec), |a, &b| *a += b);
        if n_rec > 0 {
            let de_rec = de.slice(s![..n_rec, ..]).to_owned();
            let d_pre = leaky_backward(&tape.embed_pre, &de_rec, F::of(self.slope));
            self.embed.backward(p, g, tape.records.view(), d_pre.view(), false);
        }
    }
}

/// Ablation: the first `max_opponents` records concatenated, zero-padded.
pub fn concat_encode<F: Real>(sets: &OpponentSets<F>, max_opponents: usize) -> Result<Array2<F>> {
    sets.validate()?;
    let rows = sets.rows();
    let mut out = Array2::zeros((rows, max_opponents * OPPONENT_DIM));
    for r in 0..rows {
        let (a, b) = (sets.offsets[r], sets.offsets[r + 1]);
        for (slot, j) in (a..b).take(max_opponents).enumerate() {
            out.slice_mut(s![r, slot * OPPONENT_DIM..(slot + 1) * OPPONENT_DIM])
                .assign(&sets.records.row(j));
        }
    }
    Ok(out)
}
