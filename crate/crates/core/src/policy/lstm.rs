//! Single-layer LSTM over time-major batches with per-step state resets.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{ensure_finite, init_orthogonal_blocks, init_uniform};
use super::params::{FlatTensors, Layout, Real, TensorId};

/// Gate order in the packed weight matrices: input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub bias: TensorId,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct LstmTape<F> {
    x: Array2<F>,
    /// Post-activation gates (i, f, g, o) per row.
    gates: Array2<F>,
    h_prev: Array2<F>,
    c_prev: Array2<F>,
    tanh_c: Array2<F>,
    resets: Vec<bool>,
    steps: usize,
    batch: usize,
}

/// Below this many rows the recurrent products skip matrixmultiply, whose
/// operand packing dominates at small batch sizes.
const SMALL_BATCH: usize = 8;
/// Register tile of the small-batch kernels: rows by columns.
const MR: usize = 4;
const NR: usize = 16;

/// `z += h · w` for row-major operands with few rows in `h`.
fn small_matmul_acc<F: Real>(h: &ArrayView2<F>, w: &ArrayView2<F>, z: &mut Array2<F>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { small_matmul_acc_avx2(h, w, z) };
    }
    small_matmul_acc_kernel(h, w, z)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_matmul_acc_avx2<F: Real>(h: &ArrayView2<F>, w: &ArrayView2<F>, z: &mut Array2<F>) {
    small_matmul_acc_kernel(h, w, z)
}

#[inline(always)]
fn small_matmul_acc_kernel<F: Real>(h: &ArrayView2<F>, w: &ArrayView2<F>, z: &mut Array2<F>) {
    let (m, k) = h.dim();
    let n = w.ncols();
    let w = w.as_slice().expect("standard layout");
    let z = z.as_slice_mut().expect("standard layout");
    for r0 in (0..m).step_by(MR) {
        let mr = MR.min(m - r0);
        let mut hp = vec![[F::zero(); MR]; k];
        for (j, col) in hp.iter_mut().enumerate() {
            for r in 0..mr {
                col[r] = h[(r0 + r, j)];
            }
        }
        let full = n - n % NR;
        for c0 in (0..full).step_by(NR) {
            let mut acc = [[F::zero(); NR]; MR];
            for (j, hv) in hp.iter().enumerate() {
                let wr: &[F; NR] = w[j * n + c0..j * n + c0 + NR].try_into().expect("tile");
                for r in 0..MR {
                    for l in 0..NR {
                        acc[r][l] = acc[r][l] + hv[r] * wr[l];
                    }
                }
            }
            for (r, a) in acc.iter().enumerate().take(mr) {
                for (x, &y) in z[(r0 + r) * n + c0..(r0 + r) * n + c0 + NR].iter_mut().zip(a) {
                    *x += y;
                }
            }
        }
        for c in full..n {
            for r in 0..mr {
                let s = hp.iter().enumerate().fold(F::zero(), |s, (j, hv)| s + hv[r] * w[j * n + c]);
                z[(r0 + r) * n + c] += s;
            }
        }
    }
}

/// `d · wᵀ` for row-major operands with few rows in `d`.
fn small_matmul_t<F: Real>(d: &ArrayView2<F>, w: &ArrayView2<F>) -> Array2<F> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { small_matmul_t_avx2(d, w) };
    }
    small_matmul_t_kernel(d, w)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_matmul_t_avx2<F: Real>(d: &ArrayView2<F>, w: &ArrayView2<F>) -> Array2<F> {
    small_matmul_t_kernel(d, w)
}

#[inline(always)]
fn small_matmul_t_kernel<F: Real>(d: &ArrayView2<F>, w: &ArrayView2<F>) -> Array2<F> {
    let m = d.nrows();
    let (k, n) = w.dim();
    let w = w.as_slice().expect("standard layout");
    let d = d.as_standard_layout();
    let d = d.as_slice().expect("standard layout");
    let mut out = Array2::zeros((m, k));
    let full = n - n % NR;
    for r0 in (0..m).step_by(MR) {
        let mr = MR.min(m - r0);
        let rows: [&[F]; MR] = std::array::from_fn(|r| {
            let i = r0 + r.min(mr - 1);
            &d[i * n..(i + 1) * n]
        });
        for j in 0..k {
            let wr = &w[j * n..(j + 1) * n];
            let mut acc = [[F::zero(); NR]; MR];
            for c0 in (0..full).step_by(NR) {
                let wt: &[F; NR] = wr[c0..c0 + NR].try_into().expect("tile");
                for r in 0..MR {
                    let dt: &[F; NR] = rows[r][c0..c0 + NR].try_into().expect("tile");
                    for l in 0..NR {
                        acc[r][l] = acc[r][l] + dt[l] * wt[l];
                    }
                }
            }
            for r in 0..mr {
                let mut sum = acc[r].iter().fold(F::zero(), |s, &x| s + x);
                for c in full..n {
                    sum += rows[r][c] * wr[c];
                }
                out[(r0 + r, j)] = sum;
            }
        }
    }
    out
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn tanh<F: Real>(x: F) -> F {
    let e = (x.abs() * F::of(-2.0)).exp();
    ((F::one() - e) / (F::one() + e)).copysign(x)
}

impl Lstm {
    pub fn register(layout: &mut Layout, input_dim: usize, hidden: usize) -> Self {
        Self {
            w_ih: layout.add("lstm.w_ih", &[input_dim, 4 * hidden]),
            w_hh: layout.add("lstm.w_hh", &[hidden, 4 * hidden]),
            bias: layout.add("lstm.b", &[4 * hidden]),
            input_dim,
            hidden,
        }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, p: &mut FlatTensors<F>, rng: &mut R) {
        init_uniform(p.slice_mut(self.w_ih), 1.0 / (self.input_dim as f64).sqrt(), rng);
        init_orthogonal_blocks(p.view2_mut(self.w_hh), rng);
        p.slice_mut(self.bias).fill(F::zero());
    }

    /// Runs `steps` ticks over a batch of `batch` sequences. Rows of `x` are
    /// time-major (`t * batch + b`); `resets[t * batch + b]` zeroes the state
    /// of sequence `b` before tick `t`. Returns all hidden outputs and the
    /// final (h, c).
    #[allow(clippy::type_complexity)]
    pub fn forward<F: Real>(
        &self,
        p: &FlatTensors<F>,
        x: Array2<F>,
        resets: &[bool],
        h0: ArrayView2<F>,
        c0: ArrayView2<F>,
        steps: usize,
        batch: usize,
    ) -> crate::Result<(Array2<F>, Array2<F>, Array2<F>, LstmTape<F>)> {
        let hd = self.hidden;
        let rows = steps * batch;
        let mut pre = x.dot(&p.view2(self.w_ih));
        pre += &p.view1(self.bias);
        let w_hh = p.view2(self.w_hh);
        let mut gates = Array2::<F>::zeros((rows, 4 * hd));
        let mut h_prev = Array2::<F>::zeros((rows, hd));
        let mut c_prev = Array2::<F>::zeros((rows, hd));
        let mut tanh_c = Array2::<F>::zeros((rows, hd));
        let mut out = Array2::<F>::zeros((rows, hd));
        let mut h = h0.as_standard_layout().into_owned();
        let mut c = c0.as_standard_layout().into_owned();
        for t in 0..steps {
            let r0 = t * batch;
            for b in 0..batch {
                if resets[r0 + b] {
                    h.row_mut(b).fill(F::zero());
                    c.row_mut(b).fill(F::zero());
                }
            }
            h_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&h);
            c_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&c);
            let mut z = pre.slice(s![r0..r0 + batch, ..]).to_owned();
            if batch <= SMALL_BATCH && w_hh.is_standard_layout() {
                small_matmul_acc(&h.view(), &w_hh, &mut z);
            } else {
                general_mat_mul(F::one(), &h, &w_hh, F::one(), &mut z);
            }
            let zs = z.as_slice().expect("owned");
            let hs = h.as_slice_mut().expect("owned");
            let cs = c.as_slice_mut().expect("owned");
            for b in 0..batch {
                let r = r0 + b;
                let zr = &zs[b * 4 * hd..(b + 1) * 4 * hd];
                let gr = gates.row_mut(r).into_slice().expect("owned");
                let tr = tanh_c.row_mut(r).into_slice().expect("owned");
                let or = out.row_mut(r).into_slice().expect("owned");
                let (hr, cr) = (&mut hs[b * hd..(b + 1) * hd], &mut cs[b * hd..(b + 1) * hd]);
                for j in 0..hd {
                    let i = sigmoid(zr[j]);
                    let f = sigmoid(zr[hd + j]);
                    let g = tanh(zr[2 * hd + j]);
                    let o = sigmoid(zr[3 * hd + j]);
                    gr[j] = i;
                    gr[hd + j] = f;
                    gr[2 * hd + j] = g;
                    gr[3 * hd + j] = o;
                    let cn = f * cr[j] + i * g;
                    let tc = tanh(cn);
                    cr[j] = cn;
                    hr[j] = o * tc;
                    tr[j] = tc;
                    or[j] = o * tc;
                }
            }
        }
        ensure_finite(&out, "lstm")?;
        Ok((
            out,
            h,
            c,
            LstmTape {
                x,
                gates,
                h_prev,
                c_prev,
                tanh_c,
                resets: resets.to_vec(),
                steps,
                batch,
            },
        ))
    }

    /// Truncated BPTT over the recorded window. Returns the gradient with
    /// respect to input columns `dx_from..`.
    pub fn backward<F: Real>(
        &self,
        p: &FlatTensors<F>,
        g: &mut FlatTensors<F>,
        tape: &LstmTape<F>,
        d_out: ArrayView2<F>,
        dx_from: usize,
    ) -> Array2<F> {
        let hd = self.hidden;
        let (steps, batch) = (tape.steps, tape.batch);
        let w_hh = p.view2(self.w_hh);
        let mut d_pre = Array2::<F>::zeros((steps * batch, 4 * hd));
        let mut dh_next = Array2::<F>::zeros((batch, hd));
        let mut dc_next = Array2::<F>::zeros((batch, hd));
        let one = F::one();
        for t in (0..steps).rev() {
            let r0 = t * batch;
            let dps = d_pre.as_slice_mut().expect("owned");
            let dhn = dh_next.as_slice().expect("owned");
            let dcn = dc_next.as_slice_mut().expect("owned");
            for b in 0..batch {
                let r = r0 + b;
                let gr = tape.gates.row(r).to_slice().expect("owned");
                let tr = tape.tanh_c.row(r).to_slice().expect("owned");
                let cp = tape.c_prev.row(r).to_slice().expect("owned");
                let dor = d_out.row(r);
                let dp = &mut dps[r * 4 * hd..(r + 1) * 4 * hd];
                let (dhr, dcr) = (&dhn[b * hd..(b + 1) * hd], &mut dcn[b * hd..(b + 1) * hd]);
                for j in 0..hd {
                    let (i, f, gg, o) = (gr[j], gr[hd + j], gr[2 * hd + j], gr[3 * hd + j]);
                    let tc = tr[j];
                    let dh = dor[j] + dhr[j];
                    let dc = dcr[j] + dh * o * (one - tc * tc);
                    dp[j] = dc * gg * i * (one - i);
                    dp[hd + j] = dc * cp[j] * f * (one - f);
                    dp[2 * hd + j] = dc * i * (one - gg * gg);
                    dp[3 * hd + j] = dh * tc * o * (one - o);
                    dcr[j] = dc * f;
                }
            }
            let d_step = d_pre.slice(s![r0..r0 + batch, ..]);
            dh_next = if batch <= SMALL_BATCH && w_hh.is_standard_layout() {
                small_matmul_t(&d_step, &w_hh)
            } else {
                d_step.dot(&w_hh.t())
            };
            for b in 0..batch {
                if tape.resets[r0 + b] {
                    dh_next.row_mut(b).fill(F::zero());
                    dc_next.row_mut(b).fill(F::zero());
                }
            }
        }
        general_mat_mul(one, &tape.h_prev.t(), &d_pre, one, &mut g.view2_mut(self.w_hh));
        general_mat_mul(one, &tape.x.t(), &d_pre, one, &mut g.view2_mut(self.w_ih));
        g.view1_mut(self.bias).zip_mut_with(&d_pre.sum_axis(Axis(0)), |a, &b| *a += b);
        d_pre.dot(&p.view2(self.w_ih).slice(s![dx_from.., ..]).t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn small_kernels_match_dense_products() {
        for m in 1..=SMALL_BATCH {
            let h = Array2::from_shape_fn((m, 37), |(i, j)| ((i * 31 + j * 7) % 11) as f64 - 5.0);
            let w = Array2::from_shape_fn((37, 150), |(i, j)| ((i * 13 + j * 3) % 17) as f64 * 0.1);
            let mut z = Array2::from_elem((m, 150), 0.5);
            small_matmul_acc(&h.view(), &w.view(), &mut z);
            let dense = h.dot(&w) + 0.5;
            assert!((&z - &dense).iter().all(|x| x.abs() < 1e-9));
            let d = Array2::from_shape_fn((m, 150), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0);
            let t = small_matmul_t(&d.view(), &w.view());
            assert!((&t - &d.dot(&w.t())).iter().all(|x| x.abs() < 1e-9));
        }
    }
}
