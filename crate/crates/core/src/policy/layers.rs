//! Dense layers, leaky-ReLU MLPs and weight initialization.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{FlatTensors, Layout, Real, TensorId};
use crate::error::{Error, Result};

pub fn ensure_finite<F: Real>(a: &Array2<F>, layer: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Activation(layer.to_string()))
    }
}

pub fn leaky<F: Real>(x: &Array2<F>, slope: F) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { v * slope })
}

/// `dy` pulled back through a leaky ReLU evaluated at `pre`.
pub fn leaky_backward<F: Real>(pre: &Array2<F>, dy: &Array2<F>, slope: F) -> Array2<F> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(pre).for_each(|o, &p| {
        if p <= F::zero() {
            *o *= slope;
        }
    });
    out
}

/// `y = x W + b` with `W` stored as (in, out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: TensorId,
    pub b: TensorId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register(layout: &mut Layout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: layout.add(format!("{name}.w"), &[fan_in, fan_out]),
            b: layout.add(format!("{name}.b"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Real>(&self, p: &FlatTensors<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&p.view2(self.w));
        y += &p.view1(self.b);
        y
    }

    /// Accumulates weight and bias gradients; returns `dx` when requested.
    pub fn backward<F: Real>(
        &self,
        p: &FlatTensors<F>,
        g: &mut FlatTensors<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.view2_mut(self.w));
        g.view1_mut(self.b).zip_mut_with(&dy.sum_axis(Axis(0)), |a, &b| *a += b);
        need_dx.then(|| dy.dot(&p.view2(self.w).t()))
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, p: &mut FlatTensors<F>, gain: f64, rng: &mut R) {
        let bound = gain / (self.fan_in as f64).sqrt();
        init_uniform(p.slice_mut(self.w), bound, rng);
        p.slice_mut(self.b).fill(F::zero());
    }
}

/// Hidden layers use leaky ReLU; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct MlpTape<F> {
    inputs: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
}

impl Mlp {
    pub fn register(layout: &mut Layout, name: &str, sizes: &[usize], slope: f64) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::register(layout, &format!("{name}.{k}"), w[0], w[1]))
            .collect();
        Self { layers, slope }
    }

    pub fn forward<F: Real>(&self, p: &FlatTensors<F>, x: Array2<F>, name: &str) -> Result<(Array2<F>, MlpTape<F>)> {
        let slope = F::of(self.slope);
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(p, h.view());
            ensure_finite(&z, &format!("{name}.{k}"))?;
            tape.inputs.push(h);
            if k < last {
                h = leaky(&z, slope);
                tape.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, tape))
    }

    pub fn backward<F: Real>(
        &self,
        p: &FlatTensors<F>,
        g: &mut FlatTensors<F>,
        tape: &MlpTape<F>,
        dy: Array2<F>,
    ) -> Array2<F> {
        let slope = F::of(self.slope);
        let mut d = dy;
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                d = leaky_backward(&tape.pre[k], &d, slope);
            }
            d = self.layers[k]
                .backward(p, g, tape.inputs[k].view(), d.view(), true)
                .expect("dx requested");
        }
        d
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, p: &mut FlatTensors<F>, last_gain: f64, rng: &mut R) {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.init(p, if k == last { last_gain } else { 1.0 }, rng);
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

pub fn init_uniform<F: Real, R: Rng + ?Sized>(slice: &mut [F], bound: f64, rng: &mut R) {
    for x in slice {
        *x = F::of(rng.random_range(-bound..=bound));
    }
}

/// Fills each `n x n` column block of `w` (shape (n, k*n)) with an
/// independent random orthogonal matrix.
pub fn init_orthogonal_blocks<F: Real, R: Rng + ?Sized>(mut w: ArrayViewMut2<F>, rng: &mut R) {
    let n = w.nrows();
    assert_eq!(w.ncols() % n, 0, "column count must be a multiple of the row count");
    for block in 0..w.ncols() / n {
        let q = random_orthogonal(n, rng);
        for i in 0..n {
            for j in 0..n {
                w[(i, block * n + j)] = F::of(q[(i, j)]);
            }
        }
    }
}

/// Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut q = Array2::<f64>::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| q[(i, j)] * q[(i, k)]).sum();
                for i in 0..n {
                    q[(i, j)] -= dot * q[(i, k)];
                }
            }
            let norm: f64 = (0..n).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..n {
                q[(i, j)] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Array2::<f64>::zeros((6, 12));
        init_orthogonal_blocks(w.view_mut(), &mut rng);
        for b in 0..2 {
            let q = w.slice(ndarray::s![.., b * 6..(b + 1) * 6]).to_owned();
            let qtq = q.t().dot(&q);
            for i in 0..6 {
                for j in 0..6 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq[(i, j)] - e).abs() < 1e-10);
                }
            }
        }
    }
}
