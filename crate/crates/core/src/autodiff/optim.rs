use super::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// Update per parameter: `d = g + wd·p; v = μ·v + d; p -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `decay[i]` selects whether weight decay applies to
    /// `params[i]`; a missing gradient slot counts as zero.
    ///
    /// The parameter list must keep the same order and lengths across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], decay: &[bool]) {
        assert_eq!(params.len(), decay.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter list changed");
        for ((p, vel), &wd_on) in params.iter_mut().zip(&mut self.velocity).zip(decay) {
            let wd = if wd_on { self.weight_decay } else { 0.0 };
            let grad = p.grad().map(<[f64]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                let d = g + wd * data[i];
                vel[i] = self.momentum * vel[i] + d;
                data[i] -= self.lr * vel[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_and_decay_arithmetic() {
        let mut p = Tensor::vector(vec![1.0]);
        p.accumulate_grad(&[0.5]);
        let mut opt = Sgd::new(0.1, 0.9, 0.1);
        opt.step(&mut [&mut p], &[true]);
        // d = 0.5 + 0.1 = 0.6; v = 0.6; p = 1 - 0.06
        assert!((p.data()[0] - 0.94).abs() < 1e-15);
        opt.step(&mut [&mut p], &[true]);
        // d = 0.5 + 0.094; v = 0.54 + 0.594 = 1.134
        assert!((p.data()[0] - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_frozen() {
        let mut p = Tensor::vector(vec![0.3, -7.25]);
        p.accumulate_grad(&[3.0, 1e6]);
        let before = p.data().to_vec();
        let mut opt = Sgd::new(0.0, 0.9, 5e-4);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[true]);
        }
        assert_eq!(p.data(), before.as_slice());
    }
}
