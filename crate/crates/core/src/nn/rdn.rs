//! Residual dense network feature extractor (no upsampling tail).

use rand::Rng;

use super::conv::{conv_backward, conv_forward, relu_backward_in_place, relu_gated, ConvParams, Gates};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RdnConfig {
    /// Number of residual dense blocks (D).
    pub num_blocks: usize,
    /// Convolutions per block (C).
    pub convs_per_block: usize,
    /// Growth rate (G).
    pub growth: usize,
    /// Base feature channels (G0).
    pub base_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<T> {
    pub convs: Vec<ConvParams<T>>,
    pub fuse: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdnParams<T> {
    pub sfe1: ConvParams<T>,
    pub sfe2: ConvParams<T>,
    pub blocks: Vec<DenseBlock<T>>,
    pub gff1: ConvParams<T>,
    pub gff2: ConvParams<T>,
}

impl<T: Real> RdnParams<T> {
    fn build(cfg: &RdnConfig, mut make: impl FnMut(usize, usize, usize) -> ConvParams<T>) -> Self {
        let (g0, g) = (cfg.base_channels, cfg.growth);
        let sfe1 = make(1, g0, 3);
        let sfe2 = make(g0, g0, 3);
        let blocks = (0..cfg.num_blocks)
            .map(|_| DenseBlock {
                convs: (0..cfg.convs_per_block).map(|c| make(g0 + c * g, g, 3)).collect(),
                fuse: make(g0 + cfg.convs_per_block * g, g0, 1),
            })
            .collect();
        let gff1 = make(cfg.num_blocks * g0, g0, 1);
        let gff2 = make(g0, g0, 3);
        RdnParams {
            sfe1,
            sfe2,
            blocks,
            gff1,
            gff2,
        }
    }

    pub fn zeros(cfg: &RdnConfig) -> Self {
        Self::build(cfg, |i, o, k| ConvParams::zeros(i, o, k))
    }

    pub fn init(cfg: &RdnConfig, rng: &mut impl Rng) -> Self {
        Self::build(cfg, |i, o, k| ConvParams::fan_in_uniform(i, o, k, rng))
    }

    pub fn convs(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out = vec![("sfe1".to_string(), &self.sfe1), ("sfe2".to_string(), &self.sfe2)];
        for (b, blk) in self.blocks.iter().enumerate() {
            for (c, conv) in blk.convs.iter().enumerate() {
                out.push((format!("rdb{b}.conv{c}"), conv));
            }
            out.push((format!("rdb{b}.lff"), &blk.fuse));
        }
        out.push(("gff1".to_string(), &self.gff1));
        out.push(("gff2".to_string(), &self.gff2));
        out
    }

    pub fn convs_mut(&mut self) -> Vec<(String, &mut ConvParams<T>)> {
        let mut out = vec![
            ("sfe1".to_string(), &mut self.sfe1),
            ("sfe2".to_string(), &mut self.sfe2),
        ];
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            for (c, conv) in blk.convs.iter_mut().enumerate() {
                out.push((format!("rdb{b}.conv{c}"), conv));
            }
            out.push((format!("rdb{b}.lff"), &mut blk.fuse));
        }
        out.push(("gff1".to_string(), &mut self.gff1));
        out.push(("gff2".to_string(), &mut self.gff2));
        out
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RdnCache<T> {
    input: FeatureMap<T>,
    shallow1: FeatureMap<T>,
    /// Per block: input followed by every ReLU output, concatenated.
    dense: Vec<FeatureMap<T>>,
    block_outs: FeatureMap<T>,
    gff_mid: FeatureMap<T>,
}

fn finite<T: Real>(x: &FeatureMap<T>, layer: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("encoder layer {layer}")))
    }
}

impl<T: Real> RdnCache<T> {
    /// Appends the on/off state of every ReLU unit.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        for buf in &self.dense {
            let skip = self.shallow1.c * buf.hw();
            out.extend(buf.data[skip..].iter().map(|&v| (v > T::zero()) as u32));
        }
    }
}

impl<T: Real> RdnParams<T> {
    pub fn forward(&self, img: &FeatureMap<T>, mut gates: Option<&mut Gates>) -> Result<(FeatureMap<T>, RdnCache<T>)> {
        let f1 = conv_forward(&self.sfe1, img);
        finite(&f1, "sfe1")?;
        let f2 = conv_forward(&self.sfe2, &f1);
        finite(&f2, "sfe2")?;
        let n = img.hw();
        let mut x = f2;
        let mut dense = Vec::with_capacity(self.blocks.len());
        let mut block_outs: Vec<T> = Vec::with_capacity(self.blocks.len() * x.data.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            let total = blk.fuse.cin;
            let mut buf = FeatureMap {
                c: x.c,
                h: x.h,
                w: x.w,
                data: Vec::with_capacity(total * n),
            };
            buf.data.extend_from_slice(&x.data);
            for conv in &blk.convs {
                let mut y = conv_forward(conv, &buf);
                relu_gated(&mut y.data, gates.as_deref_mut());
                buf.data.extend_from_slice(&y.data);
                buf.c += y.c;
            }
            let mut out = conv_forward(&blk.fuse, &buf);
            out.add_assign(&x);
            finite(&out, &format!("rdb{b}"))?;
            dense.push(buf);
            block_outs.extend_from_slice(&out.data);
            x = out;
        }
        let block_outs = FeatureMap::new(self.blocks.len() * x.c, x.h, x.w, block_outs)?;
        let mid = conv_forward(&self.gff1, &block_outs);
        let mut out = conv_forward(&self.gff2, &mid);
        out.add_assign(&f1);
        finite(&out, "gff")?;
        Ok((
            out,
            RdnCache {
                input: img.clone(),
                shallow1: f1,
                dense,
                block_outs,
                gff_mid: mid,
            },
        ))
    }

    /// Accumulates parameter gradients; the input image gradient is not needed.
    pub fn backward(&self, cache: &RdnCache<T>, gout: &FeatureMap<T>, grad: &mut RdnParams<T>) {
        let g_mid = conv_backward(&self.gff2, &cache.gff_mid, gout, &mut grad.gff2, true).unwrap();
        let g_outs = conv_backward(&self.gff1, &cache.block_outs, &g_mid, &mut grad.gff1, true).unwrap();
        let g0 = self.sfe2.cout;
        let n = gout.hw();
        // gradient flowing into the current block's output
        let mut g_x = FeatureMap::zeros(g0, gout.h, gout.w);
        for b in (0..self.blocks.len()).rev() {
            let blk = &self.blocks[b];
            let gb = &mut grad.blocks[b];
            let buf = &cache.dense[b];
            let mut g_out = g_outs.slice_channels(b * g0, (b + 1) * g0);
            g_out.add_assign(&g_x);
            let mut g_buf = conv_backward(&blk.fuse, buf, &g_out, &mut gb.fuse, true).unwrap();
            for (c, conv) in blk.convs.iter().enumerate().rev() {
                let (lo, hi) = (conv.cin, conv.cin + conv.cout);
                let mut g_y = g_buf.slice_channels(lo, hi);
                relu_backward_in_place(&buf.data[lo * n..hi * n], &mut g_y.data);
                let input = FeatureMap {
                    c: conv.cin,
                    h: buf.h,
                    w: buf.w,
                    data: buf.data[..lo * n].to_vec(),
                };
                let g_in = conv_backward(conv, &input, &g_y, &mut gb.convs[c], true).unwrap();
                for (a, &v) in g_buf.data[..lo * n].iter_mut().zip(&g_in.data) {
                    *a += v;
                }
            }
            // residual around the block plus the dense path into its input
            let mut g_in = g_buf.slice_channels(0, g0);
            g_in.add_assign(&g_out);
            g_x = g_in;
        }
        let mut g_f1 = conv_backward(&self.sfe2, &cache.shallow1, &g_x, &mut grad.sfe2, true).unwrap();
        g_f1.add_assign(gout);
        conv_backward(&self.sfe1, &cache.input, &g_f1, &mut grad.sfe1, false);
    }
}
