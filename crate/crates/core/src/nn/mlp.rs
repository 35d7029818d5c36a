use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FopError, Result};
use crate::optim::ParamSpec;
use crate::tensor::{Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    /// Linear logits; softmax is folded into the cross-entropy loss.
    SoftmaxOutput,
}

impl Activation {
    fn apply_in_place(self, z: &mut Mat) {
        match self {
            Activation::Tanh => z.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::SoftmaxOutput => {}
        }
    }

    /// Multiplies `delta` by the activation derivative, written in terms of the output `a`.
    fn backprop_in_place(self, delta: &mut Mat, a: &Mat) {
        let it = delta.data_mut().iter_mut().zip(a.data());
        match self {
            Activation::Tanh => it.for_each(|(d, a)| *d *= 1.0 - a * a),
            Activation::Relu => it.for_each(|(d, a)| {
                if *a <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::SoftmaxOutput => {}
        }
    }
}

/// Fully connected network. Parameters are stored flat: `W_l` (`in × out`) at
/// index `2l`, `b_l` (`1 × out`) at `2l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    pub params: Vec<Mat>,
}

/// Layer outputs from a forward pass; `activations[0]` is the input batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Mat>,
    pub logits: Mat,
}

impl MlpModel {
    /// `sizes = [input, hidden..., classes]`, uniform `±√(6/(in+out))` weights, zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(FopError::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if hidden == Activation::SoftmaxOutput {
            return Err(FopError::Config("softmax is only allowed at the output".into()));
        }
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
            params.push(Mat::new(fan_in, fan_out, data)?);
            params.push(Mat::zeros(1, fan_out));
        }
        let mut activations = vec![hidden; sizes.len() - 2];
        activations.push(Activation::SoftmaxOutput);
        Ok(Self { sizes: sizes.to_vec(), activations, params })
    }

    /// Builds a model from explicit `(W, b, activation)` layers.
    pub fn from_layers(layers: Vec<(Mat, Mat, Activation)>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(FopError::Config("a model needs at least one layer".into()));
        };
        let mut sizes = vec![first.0.rows()];
        let mut activations = Vec::with_capacity(layers.len());
        let mut params = Vec::with_capacity(2 * layers.len());
        let last = layers.len() - 1;
        for (i, (w, b, act)) in layers.into_iter().enumerate() {
            let fan_in = *sizes.last().expect("non-empty");
            if w.rows() != fan_in {
                return Err(shape_err("from_layers", (fan_in, w.cols()), w.shape()));
            }
            if b.shape() != (1, w.cols()) {
                return Err(shape_err("from_layers", (1, w.cols()), b.shape()));
            }
            if (act == Activation::SoftmaxOutput) != (i == last) {
                return Err(FopError::Config("softmax must be the output layer and only there".into()));
            }
            sizes.push(w.cols());
            activations.push(act);
            params.push(w);
            params.push(b);
        }
        Ok(Self { sizes, activations, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layer_count(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    /// Weights are preconditioned over their input dimension; biases are not.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        (0..self.layer_count())
            .flat_map(|l| {
                [
                    ParamSpec::matrix(self.sizes[l], self.sizes[l + 1], l),
                    ParamSpec::bias(self.sizes[l + 1], l),
                ]
            })
            .collect()
    }

    pub fn forward(&self, x: &Mat) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(shape_err("forward", (x.rows(), self.input_dim()), x.shape()));
        }
        let mut activations = Vec::with_capacity(self.layer_count());
        let mut a = x.clone();
        for (l, act) in self.activations.iter().enumerate() {
            let mut z = a.matmul(&self.params[2 * l])?;
            let b = self.params[2 * l + 1].data();
            for r in 0..z.rows() {
                z.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            act.apply_in_place(&mut z);
            activations.push(a);
            a = z;
        }
        Ok(ForwardCache { activations, logits: a })
    }

    /// Mean cross-entropy and its gradient for every parameter, in `params` order.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Vec<Mat>)> {
        let n = cache.logits.rows();
        if labels.len() != n {
            return Err(FopError::ShapeMismatch {
                op: "backward",
                expected: format!("{n} labels"),
                got: format!("{} labels", labels.len()),
            });
        }
        let (loss, mut delta) = softmax_cross_entropy(&cache.logits, labels)?;
        let mut grads = vec![Mat::zeros(0, 0); self.params.len()];
        for l in (0..self.layer_count()).rev() {
            let a_in = &cache.activations[l];
            grads[2 * l] = a_in.t_matmul(&delta)?;
            let mut db = Mat::zeros(1, delta.cols());
            for r in 0..delta.rows() {
                db.data_mut().iter_mut().zip(delta.row(r)).for_each(|(s, d)| *s += d);
            }
            grads[2 * l + 1] = db;
            if l > 0 {
                let mut next = delta.matmul_t(&self.params[2 * l])?;
                self.activations[l - 1].backprop_in_place(&mut next, a_in);
                delta = next;
            }
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, x: &Mat, labels: &[usize]) -> Result<f64> {
        let cache = self.forward(x)?;
        Ok(softmax_cross_entropy(&cache.logits, labels)?.0)
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let logits = self.forward(x)?.logits;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Mat, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_cross_entropy(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    let (n, classes) = logits.shape();
    let mut delta = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(FopError::LabelOutOfRange { label: y, classes });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        delta[(r, y)] -= 1.0;
    }
    let inv = 1.0 / n.max(1) as f64;
    delta.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::finite_diff_grad;

    fn tiny() -> MlpModel {
        let w = |v: f64| Mat::new(2, 2, vec![v; 4]).unwrap();
        MlpModel::from_layers(vec![
            (w(0.1), Mat::new(1, 2, vec![0.1; 2]).unwrap(), Activation::Tanh),
            (w(0.1), Mat::new(1, 2, vec![0.1; 2]).unwrap(), Activation::SoftmaxOutput),
        ])
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut rng = Rng::new(0);
        let mut m = MlpModel::new(&[3, 4, 5], Activation::Tanh, &mut rng).unwrap();
        m.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
        let x = Mat::new(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let p = softmax(&m.forward(&x).unwrap().logits);
        assert!(p.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn identity_linear_layer() {
        let m = MlpModel::from_layers(vec![(Mat::identity(3), Mat::zeros(1, 3), Activation::SoftmaxOutput)])
            .unwrap();
        let x = Mat::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
        assert_eq!(m.forward(&x).unwrap().logits, x);
    }

    #[test]
    fn tiny_forward_trace() {
        // h = tanh(0.1·1 + 0.1) = tanh(0.2) in both units; logits = 0.1·2h + 0.1
        let h = 0.2f64.tanh();
        let z = 0.2 * h + 0.1;
        let out = tiny().forward(&Mat::new(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        assert!((out.activations[1][(0, 0)] - h).abs() < 1e-12);
        assert!((out.logits[(0, 0)] - z).abs() < 1e-12);
        assert!((out.logits[(0, 1)] - z).abs() < 1e-12);
    }

    fn check_fd(model: &MlpModel, x: &Mat, labels: &[usize]) {
        let (_, grads) = model.backward(&model.forward(x).unwrap(), labels).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let base = model.params[i].data().to_vec();
            let fd = finite_diff_grad(
                |v: &[f64]| {
                    let mut m = model.clone();
                    m.params[i].data_mut().copy_from_slice(v);
                    m.loss(x, labels).unwrap()
                },
                &base,
                1e-6,
            );
            for (a, b) in g.data().iter().zip(&fd) {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                assert!(err < 1e-5, "param {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tiny_backward_matches_finite_differences() {
        let x = Mat::new(2, 2, vec![1.0, 0.0, -0.5, 2.0]).unwrap();
        check_fd(&tiny(), &x, &[0, 1]);
    }

    #[test]
    fn random_backward_matches_finite_differences() {
        for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu)] {
            let mut rng = Rng::new(seed);
            let model = MlpModel::new(&[4, 5, 3, 3], act, &mut rng).unwrap();
            let x = Mat::new(6, 4, (0..24).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
            check_fd(&model, &x, &[0, 1, 2, 2, 1, 0]);
        }
    }

    #[test]
    fn confident_prediction_has_tiny_gradient() {
        let m = MlpModel::from_layers(vec![(
            Mat::from_diag(&[40.0, 40.0]),
            Mat::zeros(1, 2),
            Activation::SoftmaxOutput,
        )])
        .unwrap();
        let x = Mat::new(1, 2, vec![1.0, 0.0]).unwrap();
        let (_, g) = m.backward(&m.forward(&x).unwrap(), &[0]).unwrap();
        let norm: f64 = g.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let mut rng = Rng::new(3);
        let m = MlpModel::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Mat::new(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let x2 = Mat::new(4, 3, doubled).unwrap();
        let (l1, g1) = m.backward(&m.forward(&x).unwrap(), &[0, 1]).unwrap();
        let (l2, g2) = m.backward(&m.forward(&x2).unwrap(), &[0, 1, 0, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.sub(b).unwrap().frobenius_norm() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(m.forward(&Mat::zeros(1, 3)).is_err());
        let cache = m.forward(&Mat::zeros(1, 2)).unwrap();
        assert!(matches!(m.backward(&cache, &[2]), Err(FopError::LabelOutOfRange { .. })));
        assert!(MlpModel::new(&[3], Activation::Tanh, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn param_specs_follow_layout() {
        let m = MlpModel::new(&[5, 4, 3], Activation::Tanh, &mut Rng::new(0)).unwrap();
        let specs = m.param_specs();
        assert_eq!(specs.len(), 4);
        assert_eq!((specs[0].rows, specs[0].cols, specs[0].precondition), (5, 4, true));
        assert_eq!((specs[1].rows, specs[1].cols, specs[1].precondition), (1, 4, false));
        assert_eq!(specs[3].layer, 1);
        for (s, p) in specs.iter().zip(&m.params) {
            assert_eq!((s.rows, s.cols), p.shape());
        }
    }
}
