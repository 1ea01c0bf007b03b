//! Efficient channel attention.
//!
//! Channels are summarised by their spatial mean, mixed with a single shared
//! odd-width 1-D convolution across the channel index, squashed by a sigmoid
//! and multiplied back onto the feature map. There is no bias and no fully
//! connected layer, so a module owns exactly `k` parameters.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::swin::FeatureMap;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EcaConfig {
    pub gamma: u32,
    pub b: u32,
    /// Fixed kernel size overriding the adaptive rule. Must be odd.
    pub explicit_k: Option<usize>,
}

impl Default for EcaConfig {
    fn default() -> Self {
        EcaConfig {
            gamma: 2,
            b: 1,
            explicit_k: None,
        }
    }
}

impl EcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::Config("eca gamma must be positive".into()));
        }
        match self.explicit_k {
            Some(k) if k % 2 == 0 => Err(Error::Config(format!(
                "eca kernel size must be odd, got {k}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Kernel width for `channels`: the odd integer nearest to
/// `log2(C)/gamma + b/gamma`, ties going to the larger odd, never below 1.
pub fn adaptive_kernel_size(channels: usize, cfg: &EcaConfig) -> usize {
    if let Some(k) = cfg.explicit_k {
        return k;
    }
    let gamma = cfg.gamma as f64;
    let t = (channels.max(1) as f64).log2() / gamma + cfg.b as f64 / gamma;
    // odd numbers are 2j+1; nearest j with ties rounded up
    let j = ((t - 1.0) / 2.0 + 0.5).floor();
    let k = 2.0 * j + 1.0;
    if k < 1.0 {
        1
    } else {
        k as usize
    }
}

/// Per-image channel means of a feature map: `[batch, channels]`.
pub fn global_average_pool<T: Scalar>(tape: &mut Tape<T>, fm: FeatureMap) -> Result<Var> {
    tape.mean_axis(fm.tokens, 1)
}

/// `sigmoid(conv1d(z, kernel))` over the channel axis of `z: [batch, C]`.
pub fn channel_weights<T: Scalar>(tape: &mut Tape<T>, z: Var, kernel: Var) -> Result<Var> {
    let conv = tape.conv1d_channels(z, kernel)?;
    Ok(tape.sigmoid(conv))
}

/// Reweight every channel of `fm` by its attention weight.
pub fn apply_eca<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    kernel: Var,
    cfg: &EcaConfig,
) -> Result<FeatureMap> {
    let expected = adaptive_kernel_size(fm.channels, cfg);
    let ks = tape.shape(kernel);
    if ks != [expected] {
        return Err(Error::Config(format!(
            "eca kernel shape {ks:?} does not match size {expected} for {} channels",
            fm.channels
        )));
    }
    let z = global_average_pool(tape, fm)?;
    let w = channel_weights(tape, z, kernel)?;
    let tokens = tape.scale_channels(fm.tokens, w)?;
    Ok(FeatureMap { tokens, ..fm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn kernel_sizes() {
        let cfg = EcaConfig::default();
        assert_eq!(adaptive_kernel_size(2, &cfg), 1);
        assert_eq!(adaptive_kernel_size(1, &cfg), 1);
        assert_eq!(adaptive_kernel_size(96, &cfg), 3);
        assert_eq!(adaptive_kernel_size(768, &cfg), 5);
        // t = 4 exactly lies between 3 and 5
        assert_eq!(
            adaptive_kernel_size(
                128,
                &EcaConfig {
                    gamma: 2,
                    b: 1,
                    explicit_k: None
                }
            ),
            5
        );
        let fixed = EcaConfig {
            explicit_k: Some(7),
            ..cfg
        };
        assert_eq!(adaptive_kernel_size(96, &fixed), 7);
        assert!(EcaConfig {
            explicit_k: Some(4),
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gap_of_small_channel() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let fm = FeatureMap::new(&tape, t, 2, 2).unwrap();
        let z = global_average_pool(&mut tape, fm).unwrap();
        assert_eq!(tape.data(z), &[2.5]);
    }

    #[test]
    fn zero_kernel_halves_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 9 * 4).map(|i| (i as f64 * 0.3).cos()).collect();
        let t = tape.constant(Tensor::new([2, 9, 4], data.clone()).unwrap());
        let fm = FeatureMap::new(&tape, t, 3, 3).unwrap();
        let k = tape.constant(Tensor::zeros([1]));
        let out = apply_eca(&mut tape, fm, k, &EcaConfig::default()).unwrap();
        for (o, i) in tape.data(out.tokens).iter().zip(&data) {
            assert_eq!(*o, 0.5 * i);
        }
        let wrong = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            apply_eca(&mut tape, fm, wrong, &EcaConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
