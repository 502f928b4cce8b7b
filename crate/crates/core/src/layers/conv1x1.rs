use covflow_autodiff::{Graph, NodeId};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LayerCtx, ParamStore};
use crate::{Error, Result, Tensor};

/// Smallest `|det W|` accepted when inverting.
pub const MIN_ABS_DET: f64 = 1e-12;

/// Per-pixel channel mixing `z = W x` with `W = P L (U + diag(sign * exp(log_s)))`.
///
/// `P` and `sign` are fixed at initialization; `L` is unit lower triangular
/// and `U` strictly upper triangular, so `log|det W| = sum(log_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    pub prefix: String,
    pub channels: usize,
}

fn mat_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |i| m[(i / m.ncols(), i % m.ncols())])
}

fn tensor_mat(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_slice(r, c, t.data())
}

impl Conv1x1 {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Conv1x1 { prefix: prefix.into(), channels }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn trainable(&self) -> Vec<String> {
        vec![self.name("lower"), self.name("upper"), self.name("log_s")]
    }

    /// Factorizes a random orthogonal matrix.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = self.channels;
        let gauss = DMatrix::from_fn(c, c, |_, _| StandardNormal.sample(rng));
        let q = gauss.qr().q();
        self.set_matrix(store, &q)
    }

    /// Stores the LU factorization of an arbitrary invertible `w`.
    pub fn set_matrix(&self, store: &mut ParamStore, w: &DMatrix<f64>) -> Result<()> {
        let c = self.channels;
        if w.nrows() != c || w.ncols() != c {
            return Err(Error::Input(format!("expected a {c}x{c} matrix, got {}x{}", w.nrows(), w.ncols())));
        }
        let lu = w.clone().lu();
        // lu gives P w = L U, so w = P^T L U
        let mut p = DMatrix::<f64>::identity(c, c);
        lu.p().permute_rows(&mut p);
        let u = lu.u();
        let diag: Vec<f64> = (0..c).map(|i| u[(i, i)]).collect();
        if diag.iter().any(|d| d.abs() < 1e-300) {
            return Err(Error::Numeric("singular 1x1 convolution matrix".into()));
        }
        store.insert(self.name("perm"), mat_tensor(&p.transpose()));
        // keep only the strict parts; the unit diagonal is implied
        let mut lower = lu.l();
        lower.fill_diagonal(0.0);
        store.insert(self.name("lower"), mat_tensor(&lower));
        let mut upper = u.clone();
        upper.fill_diagonal(0.0);
        store.insert(self.name("upper"), mat_tensor(&upper));
        store.insert(self.name("log_s"), Tensor::from_vec(diag.iter().map(|d| d.abs().ln()).collect()));
        store.insert(self.name("sign"), Tensor::from_vec(diag.iter().map(|d| d.signum()).collect()));
        Ok(())
    }

    /// Assembled mixing matrix from stored values.
    pub fn matrix(&self, store: &ParamStore) -> Result<DMatrix<f64>> {
        let c = self.channels;
        let p = tensor_mat(store.get(&self.name("perm"))?);
        let mut l = tensor_mat(store.get(&self.name("lower"))?).lower_triangle();
        l.fill_diagonal(1.0);
        let mut u = tensor_mat(store.get(&self.name("upper"))?).upper_triangle();
        let log_s = store.get(&self.name("log_s"))?;
        let sign = store.get(&self.name("sign"))?;
        for i in 0..c {
            u[(i, i)] = sign.data()[i] * log_s.data()[i].exp();
        }
        Ok(p * l * u)
    }

    fn weight(&self, g: &mut Graph, ctx: &LayerCtx<'_>) -> Result<NodeId> {
        let c = self.channels;
        let strict_lower = Tensor::from_fn(&[c, c], |i| if i % c < i / c { 1.0 } else { 0.0 });
        let strict_upper = Tensor::from_fn(&[c, c], |i| if i % c > i / c { 1.0 } else { 0.0 });
        let sign = ctx.values.get(&self.name("sign"))?;
        let signed_eye = Tensor::from_fn(&[c, c], |i| if i % c == i / c { sign.data()[i % c] } else { 0.0 });
        let perm = g.constant(ctx.values.get(&self.name("perm"))?.clone());

        let lm = g.constant(strict_lower);
        let lower = g.mul(ctx.params.get(&self.name("lower"))?, lm)?;
        let eye = g.constant(Tensor::from_fn(&[c, c], |i| if i % c == i / c { 1.0 } else { 0.0 }));
        let l = g.add(lower, eye)?;

        let um = g.constant(strict_upper);
        let upper = g.mul(ctx.params.get(&self.name("upper"))?, um)?;
        let s = g.exp(ctx.params.get(&self.name("log_s"))?)?;
        let s = g.reshape(s, &[1, c])?;
        let s = g.broadcast(s, &[c, c])?;
        let se = g.constant(signed_eye);
        let d = g.mul(s, se)?;
        let u = g.add(upper, d)?;

        let lu = g.matmul(l, u)?;
        let w = g.matmul(perm, lu)?;
        Ok(g.reshape(w, &[c, c, 1, 1])?)
    }

    fn check_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Input(format!(
                "1x1 convolution `{}` expects {} channels, got shape {s:?}",
                self.prefix, self.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ctx: &LayerCtx<'_>, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.check_input(g, x)?;
        let shape = g.shape(x).to_vec();
        let w = self.weight(g, ctx)?;
        let z = g.conv2d(x, w)?;
        let total = g.sum_all(ctx.params.get(&self.name("log_s"))?)?;
        let total = g.scale(total, (shape[2] * shape[3]) as f64)?;
        let ld = g.broadcast(total, &[shape[0]])?;
        Ok((z, ld))
    }

    pub fn inverse(&self, g: &mut Graph, ctx: &LayerCtx<'_>, z: NodeId) -> Result<NodeId> {
        self.check_input(g, z)?;
        let c = self.channels;
        let w = self.matrix(ctx.values)?;
        let det = w.determinant();
        if det.abs() < MIN_ABS_DET {
            return Err(Error::Numeric(format!("1x1 convolution `{}` is near-singular (det {det:e})", self.prefix)));
        }
        let inv = w
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("1x1 convolution `{}` is not invertible", self.prefix)))?;
        let winv = g.constant(mat_tensor(&inv).reshape(vec![c, c, 1, 1])?);
        Ok(g.conv2d(z, winv)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{apply_forward, apply_inverse, Layer};
    use rand::SeedableRng;

    #[test]
    fn factorization_reproduces_matrix() {
        let conv = Conv1x1::new("mix", 4);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let w = conv.matrix(&store).unwrap();
        let wtw = w.transpose() * &w;
        assert!((wtw - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-12);
        let w2 = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 1.0, 1.0, 0.5, 0.0, -1.0, 0.0, 3.0]);
        let conv3 = Conv1x1::new("m3", 3);
        conv3.set_matrix(&mut store, &w2).unwrap();
        assert!((conv3.matrix(&store).unwrap() - &w2).abs().max() < 1e-12);
    }

    #[test]
    fn identity_and_diag_examples() {
        let conv = Conv1x1::new("mix", 2);
        let mut store = ParamStore::new();
        conv.set_matrix(&mut store, &DMatrix::identity(2, 2)).unwrap();
        let layer = Layer::Conv1x1(conv.clone());
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64 - 3.0);
        let (z, ld) = apply_forward(&layer, &store, &x, None).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld.data(), &[0.0, 0.0]);

        conv.set_matrix(&mut store, &DMatrix::from_diagonal_element(2, 2, 2.0)).unwrap();
        let (z, ld) = apply_forward(&layer, &store, &x, None).unwrap();
        assert!(z.data().iter().zip(x.data()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-14));
        assert!((ld.data()[0] - 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_random() {
        let conv = Conv1x1::new("mix", 3);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        store.get_mut("mix.upper").unwrap().data_mut()[1] = 0.7;
        store.get_mut("mix.log_s").unwrap().data_mut()[2] = -0.4;
        let layer = Layer::Conv1x1(conv);
        let x = Tensor::from_fn(&[2, 3, 3, 2], |i| (i as f64).sin());
        let (z, _) = apply_forward(&layer, &store, &x, None).unwrap();
        let back = apply_inverse(&layer, &store, &z, None).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn near_singular_rejected() {
        let conv = Conv1x1::new("mix", 2);
        let mut store = ParamStore::new();
        conv.set_matrix(&mut store, &DMatrix::identity(2, 2)).unwrap();
        store.insert("mix.log_s", Tensor::from_vec(vec![-20.0, -20.0]));
        let z = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(apply_inverse(&Layer::Conv1x1(conv), &store, &z, None).is_err());
    }
}
