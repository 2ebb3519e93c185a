//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each component is checked in 64-bit with central differences. The error
//! measure is `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`;
//! the floor keeps components whose true gradient is near zero from being
//! dominated by the roundoff of the difference quotient.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{FaceMask, ImageTensor};
use crate::losses::{
    bce_loss, composite_loss, dice_loss, kl_diag_gaussian, l1_loss, l2_loss, ssim_loss, GaussianPosterior, LossWeights,
    SsimConfig,
};
use crate::nn::{elu_backward, elu_forward, sigmoid_backward, sigmoid_forward, Conv2d, Dense};
use crate::vae::{loss_and_grad, standard_normal, ArchConfig, HypothesisConfig, Objective, VaeParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end network checks.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Every component the suite checks, in report order.
pub const COMPONENTS: [&str; 15] = [
    "loss/l1",
    "loss/l2",
    "loss/ssim",
    "loss/bce",
    "loss/dice",
    "loss/kl",
    "loss/composite",
    "layer/conv_stride2",
    "layer/upsample_conv",
    "layer/output_conv",
    "layer/dense",
    "layer/elu",
    "layer/sigmoid",
    "vae/end_to_end_masked",
    "vae/end_to_end_unmasked",
];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub checked: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub components: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(ComponentCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ComponentCheck> {
        self.components.iter().filter(|c| !c.passed())
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Name of a component whose analytic gradient is deliberately
    /// corrupted, to exercise the failure path.
    pub fault: Option<String>,
    /// Parameters sampled per end-to-end check.
    pub end_to_end_samples: usize,
}

impl GradCheckOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, fault: None, end_to_end_samples: 160 }
    }
}

/// Worst error between `analytic` and central differences of `value` at
/// the listed coordinates of `x`.
pub fn check_coordinates(
    x: &[f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    mut value: impl FnMut(&[f64]) -> f64,
) -> (usize, f64) {
    let mut probe = x.to_vec();
    let (mut count, mut worst) = (0, 0.0f64);
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + STEP;
        let plus = value(&probe);
        probe[i] = orig - STEP;
        let minus = value(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
        count += 1;
    }
    (count, worst)
}

struct Suite {
    rng: ChaCha8Rng,
    fault: Option<String>,
    samples: usize,
    report: GradCheckReport,
}

impl Suite {
    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    fn image(&mut self, h: usize, w: usize, c: usize) -> ImageTensor<f64> {
        let data = self.uniform(h * w * c, 0.05, 0.95);
        ImageTensor::new(h, w, c, data).expect("valid shape")
    }

    fn mask(&mut self, h: usize, w: usize) -> FaceMask<f64> {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let (ry, rx) = (self.rng.gen_range(0.25..0.45) * h as f64, self.rng.gen_range(0.25..0.45) * w as f64);
        FaceMask::from_fn(h, w, |r, c| {
            let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
            dy * dy + dx * dx <= 1.0
        })
    }

    fn corrupt(&self, name: &str, grad: &mut [f64]) {
        if self.fault.as_deref() == Some(name) {
            if let Some(g) = grad.first_mut() {
                *g = *g * 1.5 + 1e-3;
            }
        }
    }

    fn record(&mut self, name: &'static str, tolerance: f64, results: &[(usize, f64)]) {
        let checked = results.iter().map(|r| r.0).sum();
        let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
        self.report.components.push(ComponentCheck { name, checked, worst_relative_error: worst, tolerance });
    }

    fn image_loss(
        &mut self,
        name: &'static str,
        shape: (usize, usize, usize),
        f: impl Fn(&ImageTensor<f64>) -> crate::losses::LossValue<f64>,
    ) {
        let x = self.image(shape.0, shape.1, shape.2);
        let mut grad = f(&x).gradient;
        self.corrupt(name, &mut grad);
        let r = check_coordinates(x.data(), &grad, 0..x.len(), |v| {
            f(&ImageTensor::new(shape.0, shape.1, shape.2, v.to_vec()).unwrap()).value
        });
        self.record(name, TOLERANCE, &[r]);
    }

    fn losses(&mut self) {
        let target = self.image(8, 8, 3);
        self.image_loss("loss/l1", (8, 8, 3), |p| l1_loss(p, &target).unwrap());
        self.image_loss("loss/l2", (8, 8, 3), |p| l2_loss(p, &target).unwrap());
        let target = self.image(16, 16, 3);
        let cfg = SsimConfig::default();
        self.image_loss("loss/ssim", (16, 16, 3), |p| ssim_loss(p, &target, &cfg).unwrap());
        let m = self.mask(12, 12);
        self.image_loss("loss/bce", (12, 12, 1), |p| bce_loss(p, &m).unwrap());
        self.image_loss("loss/dice", (12, 12, 1), |p| dice_loss(p, &m).unwrap());

        let mu = self.uniform(8, -2.0, 2.0);
        let logvar = self.uniform(8, -2.0, 2.0);
        let x: Vec<f64> = mu.iter().chain(&logvar).copied().collect();
        let kl = |v: &[f64]| kl_diag_gaussian(&GaussianPosterior::new(v[..8].to_vec(), v[8..].to_vec()).unwrap());
        let k = kl(&x);
        let mut grad: Vec<f64> = k.grad_mu.iter().chain(&k.grad_logvar).copied().collect();
        self.corrupt("loss/kl", &mut grad);
        let r = check_coordinates(&x, &grad, 0..16, |v| kl(v).value);
        self.record("loss/kl", TOLERANCE, &[r]);

        let reference = self.image(16, 16, 3);
        let mask = self.mask(16, 16);
        let all = LossWeights::unit(true, true, true);
        self.image_loss("loss/composite", (16, 16, 3), |p| {
            composite_loss(p, &reference, Some(&mask), &all, &cfg).unwrap()
        });
    }

    /// Checks a layer through the scalar `sum(r * layer(x, params))`.
    fn layer(
        &mut self,
        name: &'static str,
        inputs: Vec<Vec<f64>>,
        forward_backward: impl Fn(&[Vec<f64>], &[f64]) -> (Vec<f64>, Vec<Vec<f64>>),
    ) {
        let out_len = forward_backward(&inputs, &[]).0.len();
        let proj = self.uniform(out_len, -1.0, 1.0);
        let (_, mut grads) = forward_backward(&inputs, &proj);
        if let Some(g) = grads.first_mut() {
            self.corrupt(name, g);
        }
        let mut results = Vec::new();
        for (k, x) in inputs.iter().enumerate() {
            let r = check_coordinates(x, &grads[k], 0..x.len(), |v| {
                let mut probe = inputs.clone();
                probe[k] = v.to_vec();
                let (y, _) = forward_backward(&probe, &[]);
                y.iter().zip(&proj).map(|(a, b)| a * b).sum()
            });
            results.push(r);
        }
        self.record(name, TOLERANCE, &results);
    }

    fn conv(&mut self, name: &'static str, conv: Conv2d, batch: usize, h: usize, w: usize) {
        let inputs = vec![
            self.uniform(batch * h * w * conv.cin, -1.0, 1.0),
            self.uniform(conv.weight_len(), -0.5, 0.5),
            self.uniform(conv.cout, -0.5, 0.5),
        ];
        self.layer(name, inputs, |v, proj| {
            let shape = conv.shape(batch, h, w);
            let y = conv.forward(&v[0], &shape, &v[1], &v[2]);
            if proj.is_empty() {
                return (y, Vec::new());
            }
            let mut dw = vec![0.0; v[1].len()];
            let mut db = vec![0.0; v[2].len()];
            let dx = conv.backward(proj, &v[0], &shape, &v[1], &mut dw, &mut db, true).unwrap();
            (y, vec![dx, dw, db])
        });
    }

    fn layers(&mut self) {
        self.conv("layer/conv_stride2", Conv2d::new(3, 4, 2), 2, 8, 6);
        self.conv("layer/upsample_conv", Conv2d::upsampling(3, 5), 2, 4, 3);
        self.conv("layer/output_conv", Conv2d::new(4, 3, 1), 2, 5, 4);

        let dense = Dense::new(7, 5);
        let batch = 3;
        let inputs = vec![self.uniform(batch * 7, -1.0, 1.0), self.uniform(35, -0.5, 0.5), self.uniform(5, -0.5, 0.5)];
        self.layer("layer/dense", inputs, |v, proj| {
            let y = dense.forward(&v[0], batch, &v[1], &v[2]);
            if proj.is_empty() {
                return (y, Vec::new());
            }
            let mut dw = vec![0.0; 35];
            let mut db = vec![0.0; 5];
            let dx = dense.backward(proj, &v[0], batch, &v[1], &mut dw, &mut db, true).unwrap();
            (y, vec![dx, dw, db])
        });

        // keep inputs away from the origin, where ELU changes branch
        let elu_in: Vec<f64> =
            self.uniform(40, 0.05, 2.0).into_iter().enumerate().map(|(i, v)| if i % 2 == 0 { v } else { -v }).collect();
        self.layer("layer/elu", vec![elu_in], |v, proj| {
            let mut y = v[0].clone();
            elu_forward(&mut y);
            let mut d = proj.to_vec();
            if !proj.is_empty() {
                elu_backward(&mut d, &y);
            }
            (y, vec![d])
        });

        let sig_in = self.uniform(40, -4.0, 4.0);
        self.layer("layer/sigmoid", vec![sig_in], |v, proj| {
            let mut y = v[0].clone();
            sigmoid_forward(&mut y);
            let mut d = proj.to_vec();
            if !proj.is_empty() {
                sigmoid_backward(&mut d, &y);
            }
            (y, vec![d])
        });
    }

    fn end_to_end(&mut self, name: &'static str, hypothesis: u8) {
        let arch = ArchConfig {
            resolution: 16,
            latent_dim: 4,
            enc_channels: [3, 4, 5],
            dec_channels: [4, 3, 3, 3],
            mask_channels: [3, 2, 2, 2],
        };
        let params = VaeParams::<f64>::init(arch, self.rng.gen()).unwrap();
        let images = [self.image(16, 16, 3), self.image(16, 16, 3)];
        let masks = [self.mask(16, 16), self.mask(16, 16)];
        let noise = standard_normal(&mut self.rng, 2 * arch.latent_dim);
        let objective = Objective::new(HypothesisConfig::by_id(hypothesis).unwrap(), 1e-3);
        let (_, mut grads) = loss_and_grad(&params, &images, Some(&masks), &noise, &objective).unwrap();
        if let Some(g) = grads.first_mut() {
            self.corrupt(name, g);
        }
        // sample coordinates from every tensor that receives gradient
        let used: Vec<usize> = (0..grads.len()).filter(|&t| grads[t].iter().any(|&g| g != 0.0)).collect();
        let per_tensor = (self.samples / used.len().max(1)).max(1);
        let mut results = Vec::new();
        for &t in &used {
            let len = grads[t].len();
            let coords: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                (0..per_tensor).map(|_| self.rng.gen_range(0..len)).collect()
            };
            let r = check_coordinates(&params.values()[t], &grads[t], coords, |v| {
                let mut probe = params.clone();
                probe.values_mut()[t].copy_from_slice(v);
                loss_and_grad(&probe, &images, Some(&masks), &noise, &objective).unwrap().0.total
            });
            results.push(r);
        }
        self.record(name, END_TO_END_TOLERANCE, &results);
    }
}

/// Runs every check in [`COMPONENTS`] order.
pub fn run_suite(options: &GradCheckOptions) -> GradCheckReport {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(options.seed),
        fault: options.fault.clone(),
        samples: options.end_to_end_samples.max(1),
        report: GradCheckReport::default(),
    };
    suite.losses();
    suite.layers();
    suite.end_to_end("vae/end_to_end_masked", 1);
    suite.end_to_end("vae/end_to_end_unmasked", 10);
    suite.report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn check_coordinates_on_a_quadratic() {
        let x = [1.0, -2.0, 0.5];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (n, worst) = check_coordinates(&x, &grad, 0..3, |v| v.iter().map(|a| a * a).sum());
        assert_eq!(n, 3);
        assert!(worst < 1e-9);
        let wrong = [2.0, -4.0, 1.5];
        assert!(check_coordinates(&x, &wrong, 0..3, |v| v.iter().map(|a| a * a).sum()).1 > 0.1);
    }
}
