//! The dual-branch network: shared encoder, nearest alignment to the output
//! grid, attention fusion, and per-pixel implicit decoding plus skip branch.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    nearest_upsample, nearest_upsample_backward, relative_coords, unfold3x3, unfold3x3_backward, CoordMap, ScaleTask,
};
use crate::nn::conv::{ConvParams, Gates};
use crate::nn::fusion::{FusionCache, FusionLayer};
use crate::nn::idf::{skip_backward, skip_forward, IdfParams, Modulation, QueryGrid};
use crate::nn::rdn::{RdnCache, RdnConfig, RdnParams};
use crate::tensor::{FeatureMap, Plane, Real};

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rdn: RdnConfig,
    pub fusion_layers: usize,
    pub idf_layers: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
    /// Inner width of the fusion blocks; defaults to the fusion width.
    #[serde(default)]
    pub fusion_hidden: Option<usize>,
    pub seed: u64,
    /// Use the reference image; when off the target features stand in for it.
    #[serde(default = "yes")]
    pub use_ref: bool,
    /// Feed the two scale factors to the decoder.
    #[serde(default = "yes")]
    pub use_scale: bool,
    /// Feed target-grid relative coordinates to the decoder.
    #[serde(default = "yes")]
    pub use_coord: bool,
    /// Also feed coordinates relative to the reference grid.
    #[serde(default)]
    pub ref_coords: bool,
    /// Test mode: every fusion block contributes zero, so `F_i = F_0`.
    #[serde(default)]
    pub fusion_bypass: bool,
}

impl ModelConfig {
    fn with_rdn(num_blocks: usize, convs_per_block: usize, growth: usize, base_channels: usize) -> Self {
        ModelConfig {
            rdn: RdnConfig {
                num_blocks,
                convs_per_block,
                growth,
                base_channels,
            },
            fusion_layers: 5,
            idf_layers: 6,
            ca_reduction: 4,
            sa_kernel: 7,
            fusion_hidden: None,
            seed: 0,
            use_ref: true,
            use_scale: true,
            use_coord: true,
            ref_coords: false,
            fusion_bypass: false,
        }
    }

    /// D=4, C=4, G=16, G0=8, fusion blocks 32 wide inside.
    pub fn desk() -> Self {
        Self {
            fusion_hidden: Some(32),
            ..Self::with_rdn(4, 4, 16, 8)
        }
    }

    /// D=16, C=8, G=64, G0=64.
    pub fn full() -> Self {
        Self::with_rdn(16, 8, 64, 64)
    }

    /// D=2, C=2, G=8, G0=4; used for gradient checks.
    pub fn tiny() -> Self {
        Self::with_rdn(2, 2, 8, 4)
    }

    pub fn idf_width(&self) -> usize {
        9 * self.rdn.base_channels
    }

    pub fn fusion_channels(&self) -> usize {
        2 * self.idf_width()
    }

    pub fn fusion_hidden(&self) -> usize {
        self.fusion_hidden.unwrap_or_else(|| self.fusion_channels())
    }

    /// Input width of the first decoder layer.
    pub fn query_width(&self) -> usize {
        2 * self.use_scale as usize + 2 * self.use_coord as usize + 2 * self.ref_coords as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rdn;
        if r.num_blocks == 0 || r.convs_per_block == 0 || r.growth == 0 || r.base_channels == 0 {
            return Err(Error::InvalidArgument(format!("encoder sizes must be positive: {r:?}")));
        }
        if self.fusion_layers == 0 || self.idf_layers != self.fusion_layers + 1 {
            return Err(Error::InvalidArgument(format!(
                "decoder needs one more layer than the fusion branch ({} vs {})",
                self.idf_layers, self.fusion_layers
            )));
        }
        if self.ca_reduction == 0 || self.sa_kernel.is_multiple_of(2) || self.fusion_hidden == Some(0) {
            return Err(Error::InvalidArgument("invalid attention/fusion sizes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Target,
    Reference,
}

/// All learnable arrays. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub encoder: RdnParams<T>,
    pub fusion: Vec<FusionLayer<T>>,
    pub idf: IdfParams<T>,
    pub skip: ConvParams<T>,
}

/// Name and shape of one parameter array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn conv_arrays<'a, T: Real>(name: &str, c: &'a ConvParams<T>, out: &mut Vec<(ArraySpec, &'a [T])>) {
    out.push((
        ArraySpec {
            name: format!("{name}.weight"),
            shape: c.weight_shape(),
        },
        &c.weight,
    ));
    out.push((
        ArraySpec {
            name: format!("{name}.bias"),
            shape: vec![c.cout],
        },
        &c.bias,
    ));
}

fn conv_arrays_mut<'a, T: Real>(name: &str, c: &'a mut ConvParams<T>, out: &mut Vec<(String, &'a mut Vec<T>)>) {
    out.push((format!("{name}.weight"), &mut c.weight));
    out.push((format!("{name}.bias"), &mut c.bias));
}

impl<T: Real> ParameterSet<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let w = cfg.idf_width();
        ParameterSet {
            encoder: RdnParams::zeros(&cfg.rdn),
            fusion: (0..cfg.fusion_layers)
                .map(|_| FusionLayer::zeros(2 * w, cfg.fusion_hidden(), cfg.ca_reduction, cfg.sa_kernel))
                .collect(),
            idf: IdfParams::zeros(cfg.query_width(), w, cfg.idf_layers),
            skip: ConvParams::zeros(w, 1, 1),
        }
    }

    /// Every array in a fixed order with its name and shape.
    pub fn arrays(&self) -> Vec<(ArraySpec, &[T])> {
        let mut out = Vec::new();
        for (name, c) in self.encoder.convs() {
            conv_arrays(&format!("encoder.{name}"), c, &mut out);
        }
        for (i, l) in self.fusion.iter().enumerate() {
            let p = format!("fusion{}", i + 1);
            conv_arrays(&format!("{p}.conv1"), &l.conv1, &mut out);
            conv_arrays(&format!("{p}.conv2"), &l.conv2, &mut out);
            conv_arrays(&format!("{p}.ca.fc1"), &l.ca.fc1, &mut out);
            conv_arrays(&format!("{p}.ca.fc2"), &l.ca.fc2, &mut out);
            conv_arrays(&format!("{p}.sa"), &l.sa.conv, &mut out);
        }
        for (i, l) in self.idf.layers.iter().enumerate() {
            conv_arrays(&format!("idf{i}"), l, &mut out);
        }
        conv_arrays("idf.out", &self.idf.head, &mut out);
        conv_arrays("skip", &self.skip, &mut out);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (name, c) in self.encoder.convs_mut() {
            conv_arrays_mut(&format!("encoder.{name}"), c, &mut out);
        }
        for (i, l) in self.fusion.iter_mut().enumerate() {
            let p = format!("fusion{}", i + 1);
            conv_arrays_mut(&format!("{p}.conv1"), &mut l.conv1, &mut out);
            conv_arrays_mut(&format!("{p}.conv2"), &mut l.conv2, &mut out);
            conv_arrays_mut(&format!("{p}.ca.fc1"), &mut l.ca.fc1, &mut out);
            conv_arrays_mut(&format!("{p}.ca.fc2"), &mut l.ca.fc2, &mut out);
            conv_arrays_mut(&format!("{p}.sa"), &mut l.sa.conv, &mut out);
        }
        for (i, l) in self.idf.layers.iter_mut().enumerate() {
            conv_arrays_mut(&format!("idf{i}"), l, &mut out);
        }
        conv_arrays_mut("idf.out", &mut self.idf.head, &mut out);
        conv_arrays_mut("skip", &mut self.skip, &mut out);
        out
    }

    pub fn specs(&self) -> Vec<ArraySpec> {
        self.arrays().into_iter().map(|(s, _)| s).collect()
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, array by array.
    pub fn add_assign(&mut self, other: &ParameterSet<T>) {
        let src = other.arrays();
        for ((_, dst), (_, s)) in self.arrays_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for (_, a) in self.arrays_mut() {
            for v in a.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> ParameterSet<U> {
        let mut out = ParameterSet::<U>::zeros(cfg);
        let src = self.arrays();
        for ((_, dst), (_, s)) in out.arrays_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a = U::of(b.as_f64());
            }
        }
        out
    }
}

/// Seeded initialization: fan-in uniform convolutions, sine-aware decoder.
pub fn init_params<T: Real>(cfg: &ModelConfig) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = cfg.idf_width();
    let encoder = RdnParams::init(&cfg.rdn, &mut rng);
    let fusion = (0..cfg.fusion_layers)
        .map(|_| FusionLayer::init(2 * w, cfg.fusion_hidden(), cfg.ca_reduction, cfg.sa_kernel, &mut rng))
        .collect();
    let idf = IdfParams::init(cfg.query_width(), w, cfg.idf_layers, &mut rng);
    let skip = ConvParams::fan_in_uniform(w, 1, 1, &mut rng);
    Ok(ParameterSet {
        encoder,
        fusion,
        idf,
        skip,
    })
}

/// A configuration with its parameters.
#[derive(Clone, Debug)]
pub struct DualArbNet<T> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub sr_tar: Plane<T>,
    pub sr_ref: Option<Plane<T>>,
}

/// Everything the decoder needs for one query geometry. Decoding any subset
/// of pixels from the same `Prepared` gives the corresponding subset of the
/// full-grid result exactly.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub task: ScaleTask,
    pub tar_up: FeatureMap<T>,
    pub ref_up: Option<FeatureMap<T>>,
    /// `F_1 .. F_n`.
    pub fused: Vec<FeatureMap<T>>,
    pub query: QueryGrid,
}

/// Activations kept by [`DualArbNet::forward_train`].
pub struct TrainCache<T> {
    enc_tar: RdnCache<T>,
    enc_ref: Option<RdnCache<T>>,
    tar_dims: (usize, usize),
    ref_dims: (usize, usize),
    tar_up: FeatureMap<T>,
    /// `F_0 .. F_n`.
    fused: Vec<FeatureMap<T>>,
    fusion: Vec<FusionCache<T>>,
    query: QueryGrid,
}

impl<T: Real> TrainCache<T> {
    /// Identifies the piecewise-smooth region the forward pass ran in: the
    /// state of every ReLU and the winner of every max-pool.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.enc_tar.activation_pattern(&mut out);
        if let Some(e) = &self.enc_ref {
            e.activation_pattern(&mut out);
        }
        for f in &self.fusion {
            f.activation_pattern(&mut out);
        }
        out
    }
}

impl<T: Real> DualArbNet<T> {
    pub fn new(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let want = ParameterSet::<T>::zeros(&config).specs();
        if params.specs() != want {
            return Err(Error::ConfigConflict("parameter shapes do not match the config".into()));
        }
        Ok(DualArbNet { config, params })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(DualArbNet { config, params })
    }

    fn encode_cached(&self, img: &Plane<T>, gates: Option<&mut Gates>) -> Result<(FeatureMap<T>, RdnCache<T>)> {
        if img.h < 3 || img.w < 3 {
            return Err(Error::Dims(format!(
                "encoder input must be at least 3x3, got {}x{}",
                img.h, img.w
            )));
        }
        let (f, cache) = self.params.encoder.forward(&FeatureMap::from_plane(img), gates)?;
        Ok((unfold3x3(&f), cache))
    }

    /// Residual dense features followed by 3x3 unfolding: `9*G0 x h x w`.
    pub fn encode(&self, img: &Plane<T>) -> Result<FeatureMap<T>> {
        Ok(self.encode_cached(img, None)?.0)
    }

    fn fuse_cached(
        &self,
        tar_up: &FeatureMap<T>,
        ref_up: &FeatureMap<T>,
        mut gates: Option<&mut Gates>,
    ) -> Result<(Vec<FeatureMap<T>>, Vec<FusionCache<T>>)> {
        if !tar_up.same_spatial(ref_up) || tar_up.c != ref_up.c {
            return Err(Error::Dims(format!(
                "fusion inputs differ: {}x{}x{} vs {}x{}x{}",
                tar_up.c, tar_up.h, tar_up.w, ref_up.c, ref_up.h, ref_up.w
            )));
        }
        let mut maps = vec![FeatureMap::concat(tar_up, ref_up)?];
        let mut caches = Vec::with_capacity(self.params.fusion.len());
        for (i, layer) in self.params.fusion.iter().enumerate() {
            let prev = maps.last().unwrap();
            let next = if self.config.fusion_bypass {
                prev.clone()
            } else {
                let (out, cache) = layer.forward(prev, gates.as_deref_mut());
                caches.push(cache);
                out
            };
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("fusion layer {}", i + 1)));
            }
            maps.push(next);
        }
        Ok((maps, caches))
    }

    /// `F_1 .. F_n` from the aligned target and reference features.
    pub fn fuse(&self, tar_up: &FeatureMap<T>, ref_up: &FeatureMap<T>) -> Result<Vec<FeatureMap<T>>> {
        let (mut maps, _) = self.fuse_cached(tar_up, ref_up, None)?;
        maps.remove(0);
        Ok(maps)
    }

    /// Decoder query for `task`, honouring the ablation switches.
    pub fn query_grid(&self, task: &ScaleTask) -> Result<QueryGrid> {
        let cfg = &self.config;
        let s_tar = task.s_tar.value();
        let s_ref = if cfg.use_ref { task.s_ref.value() } else { s_tar };
        Ok(QueryGrid {
            scales: if cfg.use_scale { vec![s_tar, s_ref] } else { vec![] },
            coords: if cfg.use_coord {
                Some(relative_coords(task.hr_dims, task.tar_dims)?)
            } else {
                None
            },
            ref_coords: if cfg.ref_coords {
                Some(relative_coords(task.hr_dims, task.ref_dims)?)
            } else {
                None
            },
        })
    }

    fn modulation<'a>(&self, fused: &'a [FeatureMap<T>], branch: Branch) -> Modulation<'a, T> {
        let offset = match branch {
            Branch::Target => 0,
            Branch::Reference => self.config.idf_width(),
        };
        Modulation { maps: fused, offset }
    }

    /// Implicit decoding of the full grid for one branch (no skip term).
    pub fn idf_decode(
        &self,
        fused: &[FeatureMap<T>],
        coords: &CoordMap,
        task: &ScaleTask,
        branch: Branch,
    ) -> Result<Plane<T>> {
        if fused.len() != self.config.fusion_layers {
            return Err(Error::Dims(format!(
                "expected {} fused maps, got {}",
                self.config.fusion_layers,
                fused.len()
            )));
        }
        let (h, w) = task.hr_dims;
        if fused
            .iter()
            .any(|f| (f.h, f.w) != (h, w) || f.c != self.config.fusion_channels())
            || coords.dims() != (h, w)
        {
            return Err(Error::Dims(
                "fused features / coordinates do not match the output grid".into(),
            ));
        }
        let mut query = self.query_grid(task)?;
        if query.coords.is_some() {
            query.coords = Some(coords.clone());
        }
        let out = self
            .params
            .idf
            .decode(&query, &self.modulation(fused, branch), 0..h, 0..w);
        if !out.is_finite() {
            return Err(Error::NonFinite("implicit decoder output".into()));
        }
        Ok(out)
    }

    /// `sin(W_s F_up + b_s)` for every pixel.
    pub fn skip(&self, f_up: &FeatureMap<T>) -> Plane<T> {
        skip_forward(&self.params.skip, f_up, 0..f_up.h, 0..f_up.w)
    }

    fn check_inputs(&self, tar: &Plane<T>, reference: Option<&Plane<T>>, task: &ScaleTask) -> Result<()> {
        if tar.dims() != task.tar_dims {
            return Err(Error::Dims(format!(
                "target is {:?}, task expects {:?}",
                tar.dims(),
                task.tar_dims
            )));
        }
        if self.config.use_ref {
            match reference {
                Some(r) if r.dims() == task.ref_dims => {}
                Some(r) => {
                    return Err(Error::Dims(format!(
                        "reference is {:?}, task expects {:?}",
                        r.dims(),
                        task.ref_dims
                    )))
                }
                None => return Err(Error::Missing("reference image".into())),
            }
        }
        Ok(())
    }

    /// Encoder, alignment and fusion for the full output grid.
    pub fn prepare(&self, tar: &Plane<T>, reference: Option<&Plane<T>>, task: &ScaleTask) -> Result<Prepared<T>> {
        self.check_inputs(tar, reference, task)?;
        let tar_up = nearest_upsample(&self.encode(tar)?, task.hr_dims)?;
        let ref_up = match reference.filter(|_| self.config.use_ref) {
            Some(r) => Some(nearest_upsample(&self.encode(r)?, task.hr_dims)?),
            None => None,
        };
        let fused = self.fuse(&tar_up, ref_up.as_ref().unwrap_or(&tar_up))?;
        Ok(Prepared {
            task: *task,
            query: self.query_grid(task)?,
            tar_up,
            ref_up,
            fused,
        })
    }

    /// Decodes `rows x cols` of the output grid for one branch.
    pub fn decode_region(
        &self,
        prep: &Prepared<T>,
        branch: Branch,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<Plane<T>> {
        let (h, w) = prep.task.hr_dims;
        if rows.end > h || cols.end > w || rows.is_empty() || cols.is_empty() {
            return Err(Error::Dims(format!("region {rows:?} x {cols:?} outside {h}x{w}")));
        }
        let mut out = self.params.idf.decode(
            &prep.query,
            &self.modulation(&prep.fused, branch),
            rows.clone(),
            cols.clone(),
        );
        let f_up = match branch {
            Branch::Target => &prep.tar_up,
            Branch::Reference => prep.ref_up.as_ref().unwrap_or(&prep.tar_up),
        };
        let s = skip_forward(&self.params.skip, f_up, rows, cols);
        for (a, &b) in out.data.iter_mut().zip(&s.data) {
            *a += b;
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("decoder output".into()));
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tar: &Plane<T>,
        reference: Option<&Plane<T>>,
        task: &ScaleTask,
        want_ref_output: bool,
    ) -> Result<ForwardOutput<T>> {
        let prep = self.prepare(tar, reference, task)?;
        let (h, w) = task.hr_dims;
        let sr_tar = self.decode_region(&prep, Branch::Target, 0..h, 0..w)?;
        let sr_ref = if want_ref_output {
            Some(self.decode_region(&prep, Branch::Reference, 0..h, 0..w)?)
        } else {
            None
        };
        Ok(ForwardOutput { sr_tar, sr_ref })
    }

    /// Target-branch forward that keeps what [`Self::backward`] needs.
    pub fn forward_train(
        &self,
        tar: &Plane<T>,
        reference: Option<&Plane<T>>,
        task: &ScaleTask,
    ) -> Result<(Plane<T>, TrainCache<T>)> {
        self.forward_train_gated(tar, reference, task, None)
    }

    /// [`Self::forward_train`] with every ReLU state and max-pool winner
    /// taken from `pattern` (as returned by [`TrainCache::activation_pattern`])
    /// instead of the current values, i.e. the smooth piece of the network
    /// that contains the recorded point.
    pub fn forward_train_frozen(
        &self,
        tar: &Plane<T>,
        reference: Option<&Plane<T>>,
        task: &ScaleTask,
        pattern: &[u32],
    ) -> Result<(Plane<T>, TrainCache<T>)> {
        let mut gates = Gates::new(pattern);
        let out = self.forward_train_gated(tar, reference, task, Some(&mut gates))?;
        if !gates.consumed_exactly() {
            return Err(Error::InvalidArgument(format!(
                "activation pattern of length {} does not fit this network and task",
                pattern.len()
            )));
        }
        Ok(out)
    }

    fn forward_train_gated(
        &self,
        tar: &Plane<T>,
        reference: Option<&Plane<T>>,
        task: &ScaleTask,
        mut gates: Option<&mut Gates>,
    ) -> Result<(Plane<T>, TrainCache<T>)> {
        self.check_inputs(tar, reference, task)?;
        let (feat_tar, enc_tar) = self.encode_cached(tar, gates.as_deref_mut())?;
        let tar_up = nearest_upsample(&feat_tar, task.hr_dims)?;
        let (ref_up, enc_ref) = match reference.filter(|_| self.config.use_ref) {
            Some(r) => {
                let (f, c) = self.encode_cached(r, gates.as_deref_mut())?;
                (Some(nearest_upsample(&f, task.hr_dims)?), Some(c))
            }
            None => (None, None),
        };
        let (fused, fusion) = self.fuse_cached(&tar_up, ref_up.as_ref().unwrap_or(&tar_up), gates)?;
        let query = self.query_grid(task)?;
        let (h, w) = task.hr_dims;
        let mut sr = self
            .params
            .idf
            .decode(&query, &self.modulation(&fused[1..], Branch::Target), 0..h, 0..w);
        let s = skip_forward(&self.params.skip, &tar_up, 0..h, 0..w);
        for (a, &b) in sr.data.iter_mut().zip(&s.data) {
            *a += b;
        }
        if !sr.is_finite() {
            return Err(Error::NonFinite("decoder output".into()));
        }
        Ok((
            sr,
            TrainCache {
                enc_tar,
                enc_ref,
                tar_dims: task.tar_dims,
                ref_dims: task.ref_dims,
                tar_up,
                fused,
                fusion,
                query,
            },
        ))
    }

    /// Parameter gradients of `<g_sr, SR_tar>`.
    pub fn backward(&self, cache: &TrainCache<T>, g_sr: &Plane<T>) -> ParameterSet<T> {
        let cfg = &self.config;
        let w = cfg.idf_width();
        let mut grad = ParameterSet::zeros(cfg);
        let n_fuse = cfg.fusion_layers;
        let (h, wd) = (cache.tar_up.h, cache.tar_up.w);
        let mut g_maps: Vec<FeatureMap<T>> = (0..n_fuse).map(|_| FeatureMap::zeros(2 * w, h, wd)).collect();
        self.params.idf.decode_backward(
            &cache.query,
            &self.modulation(&cache.fused[1..], Branch::Target),
            g_sr,
            &mut grad.idf,
            &mut g_maps,
        );
        let mut g_tar_up = skip_backward(&self.params.skip, &cache.tar_up, g_sr, &mut grad.skip);

        // fusion, last layer first
        let mut g = g_maps.pop().unwrap();
        for i in (0..n_fuse).rev() {
            if !cfg.fusion_bypass {
                g = self.params.fusion[i].backward(&cache.fused[i], &cache.fusion[i], &g, &mut grad.fusion[i]);
            }
            if i > 0 {
                g.add_assign(&g_maps[i - 1]);
            }
        }
        let n = h * wd;
        let mut g_ref_up = g.slice_channels(w, 2 * w);
        for (a, &b) in g_tar_up.data.iter_mut().zip(&g.data[..w * n]) {
            *a += b;
        }
        if cache.enc_ref.is_none() {
            g_tar_up.add_assign(&g_ref_up);
            g_ref_up = FeatureMap::zeros(0, h, wd);
        }

        let mut encode_back = |g_up: &FeatureMap<T>, dims: (usize, usize), enc: &RdnCache<T>| {
            let g_unf = nearest_upsample_backward(g_up, dims);
            let g_feat = unfold3x3_backward(&g_unf);
            self.params.encoder.backward(enc, &g_feat, &mut grad.encoder);
        };
        encode_back(&g_tar_up, cache.tar_dims, &cache.enc_tar);
        if let Some(enc) = &cache.enc_ref {
            encode_back(&g_ref_up, cache.ref_dims, enc);
        }
        grad
    }
}
