//! Central finite-difference check of [`Network::backward`].

use super::{Mode, ModelParams, NetConfig, Network};
use crate::error::Result;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on a random
/// two-sample batch. Dropout is forced to zero so both routes see the same
/// function. Up to `max_coords` coordinates are sampled per tensor (all of
/// them when the tensor is smaller).
pub fn grad_check(cfg: &NetConfig, rs: &RandomSource, max_coords: usize) -> Result<GradReport> {
    let net = Network::new(NetConfig {
        dropout: 0.0,
        ..cfg.clone()
    })?;
    let mut data_rs = rs.child("gradcheck-data");
    let mut params = net.init_params(&rs.child("gradcheck-init"));
    // Non-zero biases so their gradients are not trivially symmetric.
    for layer in &mut params.layers {
        for b in layer.bias.data_mut() {
            *b = 0.2 * (data_rs.uniform() - 0.5);
        }
    }
    let n = 2;
    let batch = Tensor::rand_uniform(
        &mut data_rs,
        &[n, 1, cfg.input_height, cfg.input_width],
        0.0,
        1.0,
    )?;
    let head = cfg.head;
    let mut targets = Tensor::zeros(&[n, head.total()])?;
    for s in 0..n {
        for i in 0..head.length {
            let k = data_rs.below(head.classes as u64) as usize;
            targets.data_mut()[s * head.total() + i * head.classes + k] = 1.0;
        }
    }

    let eval_loss = |p: &ModelParams| -> Result<f64> {
        let cache = net.forward_cached(p, &batch, Mode::Train, &mut RandomSource::new(0))?;
        cache.loss(&targets)
    };

    let cache = net.forward_cached(&params, &batch, Mode::Train, &mut RandomSource::new(0))?;
    let grads = net.backward(&params, &cache, &targets)?;

    let mut pick_rs = rs.child("gradcheck-coords");
    let mut report = Vec::new();
    let names: Vec<String> = params.tensors().map(|(n, _, _)| n).collect();
    for (ti, name) in names.into_iter().enumerate() {
        let len = tensor_at(&params, ti).len();
        let coords = if len <= max_coords {
            (0..len).collect()
        } else {
            pick_rs.sample_indices(len, max_coords)
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let original = tensor_at(&params, ti).data()[c];
            tensor_at_mut(&mut params, ti).data_mut()[c] = original + FD_STEP;
            let plus = eval_loss(&params)?;
            tensor_at_mut(&mut params, ti).data_mut()[c] = original - FD_STEP;
            let minus = eval_loss(&params)?;
            tensor_at_mut(&mut params, ti).data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = tensor_at(&grads, ti).data()[c];
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.push(TensorCheck {
            name,
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradReport { tensors: report })
}

fn tensor_at(p: &ModelParams, i: usize) -> &Tensor {
    let l = &p.layers[i / 2];
    if i % 2 == 0 {
        &l.weight
    } else {
        &l.bias
    }
}

fn tensor_at_mut(p: &mut ModelParams, i: usize) -> &mut Tensor {
    let l = &mut p.layers[i / 2];
    if i % 2 == 0 {
        &mut l.weight
    } else {
        &mut l.bias
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ConvSpec, PoolSpec};

    #[test]
    fn tiny_preset_passes() {
        let report = grad_check(&NetConfig::tiny(), &RandomSource::new(1), usize::MAX).unwrap();
        assert_eq!(report.tensors.len(), 6);
        let names: Vec<_> = report.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            ["conv1.weight", "conv1.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
        );
        for t in &report.tensors {
            assert!(t.max_rel_error < 1e-4, "{t:?}");
        }
    }

    #[test]
    fn strided_two_stage_passes() {
        // Mirrors the paper topology's stride pattern at toy size.
        let cfg = NetConfig {
            input_height: 10,
            input_width: 14,
            convs: vec![
                ConvSpec { filters: 3, kernel: 5, pad: 2, stride: 2 },
                ConvSpec { filters: 2, kernel: 3, pad: 1, stride: 1 },
            ],
            pools: vec![
                PoolSpec { window: 2, stride: 1 },
                PoolSpec { window: 2, stride: 2 },
            ],
            fc1: 5,
            head: crate::codec::HeadLayout { length: 2, classes: 4 },
            dropout: 0.5,
        };
        let report = grad_check(&cfg, &RandomSource::new(9), 40).unwrap();
        assert_eq!(report.tensors.len(), 8);
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
    }
}
