use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Momentum SGD: `v ← μ·v + g`, `θ ← θ − lr·v`. Gradients are zeroed after each step.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub lr: S,
    pub momentum: S,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            for ((w, g), m) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.data_mut())
            {
                *m = self.momentum * *m + *g;
                *w -= self.lr * *m;
            }
        }
        store.zero_grad();
    }

    pub fn buffers(&self) -> &[Tensor<S>] {
        &self.velocity
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: i32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = S::one() - self.beta1.powi(self.t);
        let c2 = S::one() - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (S::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (S::one() - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer<S> {
    Sgd(Sgd<S>),
    Adam(Adam<S>),
}

impl<S: Scalar> Optimizer<S> {
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        match self {
            Optimizer::Sgd(o) => o.step(store),
            Optimizer::Adam(o) => o.step(store),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(&[v.len()], v.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(&[1.0, -2.0, 3.5]);
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn unit_lr_no_momentum_subtracts_gradient() {
        let mut s = store_with(&[1.0, -2.0]);
        let id = s.ids().next().unwrap();
        s.get_mut(id).grad = Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap();
        Sgd::new(1.0, 0.0).step(&mut s);
        assert_eq!(s.get(id).value.data(), &[0.75, -1.5]);
        assert_eq!(s.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_sgd_converges_on_convex_quadratic() {
        // f(θ) = ½ Σ a_i (θ_i − c_i)², minimum at c.
        let a = [1.0, 2.0, 0.5];
        let c = [3.0, -1.0, 0.25];
        let mut s = store_with(&[0.0, 0.0, 0.0]);
        let id = s.ids().next().unwrap();
        let mut opt = Sgd::new(0.2, 0.5);
        for _ in 0..100 {
            let theta = s.get(id).value.data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| a[i] * (theta[i] - c[i])).collect();
            s.get_mut(id).grad = Tensor::from_vec(&[3], g).unwrap();
            opt.step(&mut s);
        }
        for (t, want) in s.get(id).value.data().iter().zip(c) {
            assert!((t - want).abs() < 1e-6, "{t} vs {want}");
        }
    }
}
