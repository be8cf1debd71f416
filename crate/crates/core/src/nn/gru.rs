use rand::Rng;

use super::{Dense, Mat, Param, Parameterized};
use crate::real::sigmoid;

/// Gated recurrent unit with the reset gate applied after the recurrent
/// projection:
///
/// ```text
/// r = σ(x Wr + h Ur + br)        u = σ(x Wu + h Uu + bu)
/// n = tanh(x Wn + bn + r ⊙ (h Un + cn))
/// h' = (1 - u) ⊙ n + u ⊙ h
/// ```
///
/// `h'` is a convex combination of `h` and `n ∈ (-1, 1)`, so starting from
/// `h = 0` every state stays inside `(-1, 1)`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: usize,
    pub units: usize,
    /// Input projection to `[r | u | n]`, shape `(input, 3U)`.
    pub input_proj: Dense,
    /// Recurrent projection to `[r | u | n]`, shape `(U, 3U)`.
    pub recurrent_proj: Dense,
}

/// Values saved by [`Gru::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Mat,
    pub h: Mat,
    r: Mat,
    u: Mat,
    n: Mat,
    /// Recurrent projection of the candidate branch, `h Un + cn`.
    hn: Mat,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, units: usize, rng: &mut R) -> Self {
        Self {
            input,
            units,
            input_proj: Dense::new(&format!("{name}.input"), input, 3 * units, rng),
            recurrent_proj: Dense::new(&format!("{name}.recurrent"), units, 3 * units, rng),
        }
    }

    pub fn forward(&self, x: &Mat, h: &Mat) -> (Mat, GruCache) {
        let units = self.units;
        let gi = self.input_proj.forward(x);
        let gh = self.recurrent_proj.forward(h);
        let rows = x.rows;
        let mut r = Mat::zeros(rows, units);
        let mut u = Mat::zeros(rows, units);
        let mut n = Mat::zeros(rows, units);
        let mut hn = Mat::zeros(rows, units);
        let mut out = Mat::zeros(rows, units);
        for b in 0..rows {
            let gi = gi.row(b);
            let gh = gh.row(b);
            let hp = h.row(b);
            for j in 0..units {
                let rj = sigmoid(gi[j] + gh[j]);
                let uj = sigmoid(gi[units + j] + gh[units + j]);
                let hnj = gh[2 * units + j];
                let nj = (gi[2 * units + j] + rj * hnj).tanh();
                r.data[b * units + j] = rj;
                u.data[b * units + j] = uj;
                n.data[b * units + j] = nj;
                hn.data[b * units + j] = hnj;
                out.data[b * units + j] = (1.0 - uj) * nj + uj * hp[j];
            }
        }
        (out, GruCache { x: x.clone(), h: h.clone(), r, u, n, hn })
    }

    /// Accumulates parameter gradients. Returns `(dx, dh_prev)`.
    pub fn backward(&mut self, cache: &GruCache, dh_next: &Mat) -> (Mat, Mat) {
        let units = self.units;
        let rows = dh_next.rows;
        let mut dgi = Mat::zeros(rows, 3 * units);
        let mut dgh = Mat::zeros(rows, 3 * units);
        let mut dh_prev = Mat::zeros(rows, units);
        for b in 0..rows {
            for j in 0..units {
                let k = b * units + j;
                let g = dh_next.data[k];
                let (r, u, n, hn) = (cache.r.data[k], cache.u.data[k], cache.n.data[k], cache.hn.data[k]);
                let dn = g * (1.0 - u);
                let du = g * (cache.h.data[k] - n);
                dh_prev.data[k] = g * u;
                let dn_pre = dn * (1.0 - n * n);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                let du_pre = du * u * (1.0 - u);
                let gi = dgi.row_mut(b);
                gi[j] = dr_pre;
                gi[units + j] = du_pre;
                gi[2 * units + j] = dn_pre;
                let gh = dgh.row_mut(b);
                gh[j] = dr_pre;
                gh[units + j] = du_pre;
                gh[2 * units + j] = dn_pre * r;
            }
        }
        let dx = self.input_proj.backward(&cache.x, &dgi);
        let dh_rec = self.recurrent_proj.backward(&cache.h, &dgh);
        dh_prev.add_assign(&dh_rec);
        (dx, dh_prev)
    }
}

impl Parameterized<f64> for Gru {
    fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.input_proj.visit(f);
        self.recurrent_proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.input_proj.visit_mut(f);
        self.recurrent_proj.visit_mut(f);
    }
}
