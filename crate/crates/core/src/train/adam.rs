use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moments for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPSILON,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update from the gradients held in `store`,
    /// which are cleared afterwards. Missing gradients count as zero. Nothing
    /// is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.params().len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors but the model has {}",
                self.m.len(),
                store.params().len()
            )));
        }
        for p in store.params() {
            if let Some(g) = &p.grad {
                if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in {} at element {i}; step aborted",
                        p.name
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take();
            let g = grad.as_ref().map(|g| g.data());
            let value = p.value.data_mut();
            for (i, ((x, mi), vi)) in value.iter_mut().zip(m.data_mut()).zip(v.data_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *x = T::from_f64(x.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference_grad, Graph};

    fn scalar_store(v: f64, g: Option<f64>) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64_slice(&[1], &[v]).unwrap());
        store.param_mut(id).grad = g.map(|g| Tensor::from_f64_slice(&[1], &[g]).unwrap());
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0, Some(1.0));
        let mut opt = OptimizerState::new(&store, 0.001);
        opt.step(&mut store).unwrap();
        assert!((store.params()[0].value.data()[0] + 0.001).abs() < 1e-9);
        assert!(store.params()[0].grad.is_none());
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = scalar_store(0.5, Some(0.0));
        let mut opt = OptimizerState::new(&store, 0.001);
        opt.step(&mut store).unwrap();
        assert_eq!(store.params()[0].value.data()[0], 0.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut store = scalar_store(0.5, Some(f64::NAN));
        let mut opt = OptimizerState::new(&store, 0.001);
        let err = opt.step(&mut store).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains('w')));
        assert_eq!(opt.step, 0);
        assert_eq!(store.params()[0].value.data()[0], 0.5);
    }

    // Toy model: loss = Σ (w_i·x_i − y_i)² + (Σ w_i)², ten parameters.
    fn toy_loss(w: &Tensor<f64>) -> f64 {
        let d = w.data();
        let fit: f64 = d
            .iter()
            .enumerate()
            .map(|(i, &wi)| (wi * (i as f64 + 1.0) * 0.3 - (i as f64).sin()).powi(2))
            .sum();
        fit + d.iter().sum::<f64>().powi(2)
    }

    fn toy_graph_grad(w: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let wv = g.variable(w.clone());
        let xs = g.constant(Tensor::from_fn(&[10], |i| (i as f64 + 1.0) * 0.3));
        let ys = g.constant(Tensor::from_fn(&[10], |i| -(i as f64).sin()));
        let wx = g.mul(wv, xs).unwrap();
        let r = g.add(wx, ys).unwrap();
        let sq = g.mul(r, r).unwrap();
        let fit = g.sum(sq).unwrap();
        let total = g.sum(wv).unwrap();
        let reg = g.mul(total, total).unwrap();
        let loss = g.add(fit, reg).unwrap();
        g.backward(loss).unwrap();
        g.grad(wv).unwrap().clone()
    }

    #[test]
    fn analytic_and_numeric_steps_agree() {
        let w0 = Tensor::from_fn(&[10], |i| 0.1 * i as f64 - 0.4);
        let analytic = toy_graph_grad(&w0);
        let numeric = finite_difference_grad(toy_loss, &w0, 1e-6);
        let run = |g: Tensor<f64>| {
            let mut store = ParamStore::new();
            let id = store.add("w", w0.clone());
            store.param_mut(id).grad = Some(g);
            let mut opt = OptimizerState::new(&store, 0.01);
            opt.step(&mut store).unwrap();
            store.params()[0].value.clone()
        };
        let (a, b) = (run(analytic), run(numeric));
        let delta_a: Vec<f64> = a.data().iter().zip(w0.data()).map(|(x, y)| x - y).collect();
        let delta_b: Vec<f64> = b.data().iter().zip(w0.data()).map(|(x, y)| x - y).collect();
        let err = crate::autograd::relative_error(&delta_a, &delta_b);
        assert!(err < 1e-3, "{err}");
    }
}
