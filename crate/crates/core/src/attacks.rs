//! White-box l-infinity attacks: FGSM, BIM and PGD.
//!
//! All attacks ascend the mean cross-entropy of the supplied labels, use
//! `sign(0) = 0`, and return inputs inside both the epsilon-ball around the
//! clean batch and the clamp range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{input_gradient, softmax_cross_entropy, GradientEntry, Network};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_clamp")]
    pub clamp: (f64, f64),
}

fn default_clamp() -> (f64, f64) {
    (0.0, 1.0)
}

impl AttackConfig {
    pub fn new(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            epsilon,
            alpha,
            steps,
            random_start: false,
            clamp: default_clamp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config("attack.epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("attack.alpha", format!("must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack.steps", "must be at least 1"));
        }
        let (lo, hi) = self.clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("attack.clamp", format!("need lo < hi, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips `x_adv` into `[x0 - eps, x0 + eps]` and then into the clamp range.
pub fn project_linf(x_adv: &Tensor, x0: &Tensor, epsilon: f64, clamp: (f64, f64)) -> Result<Tensor> {
    x_adv.check_same_shape(x0, "projection")?;
    let mut out = x_adv.clone();
    project_in_place(&mut out, x0, epsilon, clamp);
    Ok(out)
}

fn project_in_place(x: &mut Tensor, x0: &Tensor, epsilon: f64, (lo, hi): (f64, f64)) {
    for (v, &c) in x.data_mut().iter_mut().zip(x0.data()) {
        *v = v.clamp(c - epsilon, c + epsilon).clamp(lo, hi);
    }
}

fn loss_input_gradient(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (logits, trace) = net.forward(batch)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
    input_gradient(net, &trace, &dlogits, GradientEntry::Logits)
}

/// One signed-gradient step of size `epsilon`, clamped to range.
pub fn fgsm(net: &Network, batch: &Tensor, labels: &[usize], epsilon: f64, clamp: (f64, f64)) -> Result<Tensor> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::config("attack.epsilon", format!("must be >= 0, got {epsilon}")));
    }
    let grad = loss_input_gradient(net, batch, labels)?;
    let mut out = batch.clone();
    for (v, g) in out.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + epsilon * sign(*g)).clamp(clamp.0, clamp.1);
    }
    Ok(out)
}

/// Projected gradient ascent for `cfg.steps` signed steps of size
/// `cfg.alpha`. With `random_start` the iterate starts at a uniform point
/// of the ball drawn from `rng`; otherwise `rng` is unused.
pub fn pgd(net: &Network, batch: &Tensor, labels: &[usize], cfg: &AttackConfig, rng: RngStream) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = batch.clone();
    if cfg.random_start {
        let mut rng = rng;
        for v in x.data_mut() {
            *v += rng.uniform(-cfg.epsilon, cfg.epsilon);
        }
        project_in_place(&mut x, batch, cfg.epsilon, cfg.clamp);
    }
    for _ in 0..cfg.steps {
        let grad = loss_input_gradient(net, &x, labels)?;
        for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += cfg.alpha * sign(*g);
        }
        project_in_place(&mut x, batch, cfg.epsilon, cfg.clamp);
    }
    Ok(x)
}

/// Basic iterative method: PGD without a random start.
pub fn bim(net: &Network, batch: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let cfg = AttackConfig {
        random_start: false,
        ..*cfg
    };
    pgd(net, batch, labels, &cfg, RngStream::new(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::nn::Activation;
    use proptest::prelude::*;

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = RngStream::new(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.next_f64()).collect()).unwrap()
    }

    fn linf(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b)
    }

    fn ce(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
        softmax_cross_entropy(&net.logits(x).unwrap(), y).unwrap().0
    }

    #[test]
    fn projection_cases() {
        let x0 = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let inside = Tensor::new(vec![1, 1], vec![0.55]).unwrap();
        assert_eq!(project_linf(&inside, &x0, 0.1, (0.0, 1.0)).unwrap(), inside);
        let far = Tensor::new(vec![1, 1], vec![0.9]).unwrap();
        assert_eq!(project_linf(&far, &x0, 0.1, (0.0, 1.0)).unwrap().data(), &[0.6]);
        let x0 = Tensor::new(vec![1, 1], vec![0.95]).unwrap();
        let over = Tensor::new(vec![1, 1], vec![1.2]).unwrap();
        assert_eq!(project_linf(&over, &x0, 0.1, (0.0, 1.0)).unwrap().data(), &[1.0]);
        assert!(project_linf(&over, &Tensor::zeros(vec![2, 1]), 0.1, (0.0, 1.0)).is_err());
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let net = Network::init(&[6, 5, 3], 1).unwrap();
        let x = batch(4, 6, 2);
        let y = [0, 1, 2, 0];
        assert_eq!(fgsm(&net, &x, &y, 0.0, (0.0, 1.0)).unwrap(), x);
        let cfg = AttackConfig::new(0.0, 0.01, 5);
        assert_eq!(pgd(&net, &x, &y, &cfg, RngStream::new(1)).unwrap(), x);
        assert_eq!(bim(&net, &x, &y, &cfg).unwrap(), x);
    }

    #[test]
    fn fgsm_sign_follows_linear_weights() {
        // logits = x W; for label 0 the loss gradient is W (softmax - onehot)^T
        let w = vec![1.0, -1.0, -2.0, 2.0, 0.0, 0.0];
        let net = Network::from_layers(vec![Layer::new(3, 2, w.clone(), vec![0.0; 2], Activation::Identity).unwrap()])
            .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        // at x the logits are (-0.5, 0.5)
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let p0 = 1.0 - p1;
        let d = [p0 - 1.0, p1];
        let expected: Vec<f64> = (0..3).map(|j| sign(w[j * 2] * d[0] + w[j * 2 + 1] * d[1])).collect();
        let adv = fgsm(&net, &x, &[0], 0.1, (0.0, 1.0)).unwrap();
        for (j, (&a, &e)) in adv.data().iter().zip(&expected).enumerate() {
            let delta = a - 0.5;
            assert!((delta - 0.1 * e).abs() < 1e-12, "{j}: {delta}");
        }
        assert_eq!(expected, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn one_step_pgd_equals_fgsm() {
        let net = Network::init(&[8, 6, 3], 5).unwrap();
        let x = batch(5, 8, 6);
        let y = [2, 1, 0, 2, 1];
        let cfg = AttackConfig::new(0.1, 0.25, 1);
        let a = pgd(&net, &x, &y, &cfg, RngStream::new(0)).unwrap();
        let b = fgsm(&net, &x, &y, 0.1, (0.0, 1.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn convex_model_loss_grows_with_steps() {
        let net = Network::init(&[10, 4], 7).unwrap();
        let x = batch(8, 10, 8);
        let y = [0, 1, 2, 3, 0, 1, 2, 3];
        let mut last = f64::NEG_INFINITY;
        for steps in [1, 5, 10, 40] {
            let cfg = AttackConfig::new(0.3, 0.01, steps);
            let adv = pgd(&net, &x, &y, &cfg, RngStream::new(0)).unwrap();
            let loss = ce(&net, &adv, &y);
            assert!(loss >= last - 1e-12, "{steps} steps: {loss} < {last}");
            last = loss;
        }
    }

    #[test]
    fn small_budget_stays_in_ball() {
        let net = Network::init(&[12, 6, 3], 3).unwrap();
        let x = batch(4, 12, 4);
        let cfg = AttackConfig::new(8.0 / 255.0, 2.0 / 255.0, 40);
        let adv = pgd(&net, &x, &[0, 1, 2, 0], &cfg, RngStream::new(0)).unwrap();
        assert!(linf(&adv, &x) <= 8.0 / 255.0 + 1e-12);
    }

    #[test]
    fn bim_equals_pgd_without_random_start() {
        let net = Network::init(&[6, 4, 2], 1).unwrap();
        let x = batch(3, 6, 9);
        let mut cfg = AttackConfig::new(0.2, 0.05, 7);
        cfg.random_start = true;
        let mut no_rs = cfg;
        no_rs.random_start = false;
        assert_eq!(
            bim(&net, &x, &[0, 1, 1], &cfg).unwrap(),
            pgd(&net, &x, &[0, 1, 1], &no_rs, RngStream::new(42)).unwrap()
        );
    }

    #[test]
    fn zero_steps_rejected() {
        let net = Network::init(&[2, 2], 1).unwrap();
        let err = bim(&net, &batch(1, 2, 1), &[0], &AttackConfig::new(0.1, 0.01, 0)).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn random_start_is_keyed() {
        let net = Network::init(&[6, 4, 2], 1).unwrap();
        let x = batch(3, 6, 9);
        let mut cfg = AttackConfig::new(0.2, 0.05, 3);
        cfg.random_start = true;
        let a = pgd(&net, &x, &[0, 1, 1], &cfg, RngStream::new(5)).unwrap();
        assert_eq!(a, pgd(&net, &x, &[0, 1, 1], &cfg, RngStream::new(5)).unwrap());
        assert_ne!(a, pgd(&net, &x, &[0, 1, 1], &cfg, RngStream::new(6)).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn attacks_respect_ball_and_range(
            seed in any::<u64>(),
            eps in 0.0f64..0.5,
            alpha in 0.001f64..0.2,
            steps in 1usize..6,
            random_start in any::<bool>(),
        ) {
            let net = Network::init(&[5, 4, 3], seed).unwrap();
            let x = batch(3, 5, seed.wrapping_add(1));
            let y = [0, 1, 2];
            let cfg = AttackConfig { epsilon: eps, alpha, steps, random_start, clamp: (0.0, 1.0) };
            for adv in [
                pgd(&net, &x, &y, &cfg, RngStream::new(seed)).unwrap(),
                bim(&net, &x, &y, &cfg).unwrap(),
                fgsm(&net, &x, &y, eps, (0.0, 1.0)).unwrap(),
            ] {
                prop_assert!(linf(&adv, &x) <= eps + 1e-12);
                prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
