//! Attention residual blocks fusing the concatenated target and reference
//! features on the output grid.

use rand::Rng;

use super::attention::{ChannelAttention, ChannelCache, SpatialAttention, SpatialCache};
use super::conv::{conv_backward, conv_forward, relu_backward_in_place, relu_gated, ConvParams, Gates};
use crate::tensor::{FeatureMap, Real};

/// One block `L_i`: conv3x3, ReLU, conv3x3, channel gate, spatial gate.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub ca: ChannelAttention<T>,
    pub sa: SpatialAttention<T>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    relu: FeatureMap<T>,
    pre_gate: FeatureMap<T>,
    ca: ChannelCache<T>,
    gated: FeatureMap<T>,
    sa: SpatialCache<T>,
}

impl<T: Real> FusionCache<T> {
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        out.extend(self.relu.data.iter().map(|&v| (v > T::zero()) as u32));
        self.ca.activation_pattern(out);
        self.sa.activation_pattern(out);
    }
}

impl<T: Real> FusionLayer<T> {
    pub fn zeros(channels: usize, hidden: usize, reduction: usize, sa_kernel: usize) -> Self {
        FusionLayer {
            conv1: ConvParams::zeros(channels, hidden, 3),
            conv2: ConvParams::zeros(hidden, channels, 3),
            ca: ChannelAttention::zeros(channels, reduction),
            sa: SpatialAttention::zeros(sa_kernel),
        }
    }

    pub fn init(channels: usize, hidden: usize, reduction: usize, sa_kernel: usize, rng: &mut impl Rng) -> Self {
        FusionLayer {
            conv1: ConvParams::fan_in_uniform(channels, hidden, 3, rng),
            conv2: ConvParams::fan_in_uniform(hidden, channels, 3, rng),
            ca: ChannelAttention::init(channels, reduction, rng),
            sa: SpatialAttention::init(sa_kernel, rng),
        }
    }

    /// `L_i(x) + x`.
    pub fn forward(&self, x: &FeatureMap<T>, mut gates: Option<&mut Gates>) -> (FeatureMap<T>, FusionCache<T>) {
        let mut relu = conv_forward(&self.conv1, x);
        relu_gated(&mut relu.data, gates.as_deref_mut());
        let pre_gate = conv_forward(&self.conv2, &relu);
        let (gated, ca) = self.ca.forward(&pre_gate, gates.as_deref_mut());
        let (mut out, sa) = self.sa.forward(&gated, gates);
        out.add_assign(x);
        (
            out,
            FusionCache {
                relu,
                pre_gate,
                ca,
                gated,
                sa,
            },
        )
    }

    /// Returns the gradient with respect to `x` (residual path included).
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        cache: &FusionCache<T>,
        gout: &FeatureMap<T>,
        grad: &mut FusionLayer<T>,
    ) -> FeatureMap<T> {
        let g_gated = self.sa.backward(&cache.gated, &cache.sa, gout, &mut grad.sa);
        let g_pre = self.ca.backward(&cache.pre_gate, &cache.ca, &g_gated, &mut grad.ca);
        let mut g_relu = conv_backward(&self.conv2, &cache.relu, &g_pre, &mut grad.conv2, true).unwrap();
        relu_backward_in_place(&cache.relu.data, &mut g_relu.data);
        let mut gx = conv_backward(&self.conv1, x, &g_relu, &mut grad.conv1, true).unwrap();
        gx.add_assign(gout);
        gx
    }
}
