//! Evaluation over the test split: per-scale PSNR/SSIM tables for the model
//! and interpolation baselines, plus the ablation variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::Strategy;
use crate::error::{Error, Result};
use crate::geometry::{src_index, RefMode, ScaleTask};
use crate::kspace::degrade_to;
use crate::metrics::{psnr, ssim};
use crate::model::DualArbNet;
use crate::tensor::Plane;
use crate::trainer::{run_epoch, PairSet, TrainConfig, TrainState};

/// Scales of the standard table; those above 4 were never trained on.
pub const TABLE_SCALES: [f64; 6] = [1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
pub const MAX_TRAIN_SCALE: f64 = 4.0;

pub fn nearest_resize(lr: &Plane<f32>, dims: (usize, usize)) -> Plane<f32> {
    Plane::from_fn(dims.0, dims.1, |i, j| {
        lr.get(src_index(i, dims.0, lr.h), src_index(j, dims.1, lr.w))
    })
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps and weights for every output index along one axis (pixel-center
/// alignment, edge samples repeated).
fn cubic_axis(n_out: usize, n_in: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let base = u.floor();
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let p = base + k as f64 - 1.0;
                idx[k] = p.clamp(0.0, (n_in - 1) as f64) as usize;
                w[k] = cubic_weight(u - p);
            }
            (idx, w)
        })
        .collect()
}

pub fn bicubic_resize(lr: &Plane<f32>, dims: (usize, usize)) -> Plane<f32> {
    let rows = cubic_axis(dims.0, lr.h);
    let cols = cubic_axis(dims.1, lr.w);
    let mut tmp = vec![0.0f64; lr.h * dims.1];
    for i in 0..lr.h {
        for (j, (idx, w)) in cols.iter().enumerate() {
            tmp[i * dims.1 + j] = (0..4).map(|k| w[k] * lr.get(i, idx[k]) as f64).sum();
        }
    }
    Plane::from_fn(dims.0, dims.1, |i, j| {
        let (idx, w) = &rows[i];
        (0..4).map(|k| w[k] * tmp[idx[k] * dims.1 + j]).sum::<f64>() as f32
    })
}

/// One evaluation case handed to a method.
pub struct Case<'a> {
    pub lr: &'a Plane<f32>,
    pub reference: &'a Plane<f32>,
    pub hr: &'a Plane<f32>,
    pub task: ScaleTask,
}

pub trait SrMethod: Sync {
    fn name(&self) -> String;
    fn super_resolve(&self, case: &Case) -> Result<Plane<f32>>;
}

pub struct Nearest;
pub struct Bicubic;

impl SrMethod for Nearest {
    fn name(&self) -> String {
        "nearest".into()
    }

    fn super_resolve(&self, case: &Case) -> Result<Plane<f32>> {
        Ok(nearest_resize(case.lr, case.task.hr_dims))
    }
}

impl SrMethod for Bicubic {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn super_resolve(&self, case: &Case) -> Result<Plane<f32>> {
        Ok(bicubic_resize(case.lr, case.task.hr_dims))
    }
}

/// The network, labelled.
pub struct ModelMethod<'a> {
    pub label: String,
    pub net: &'a DualArbNet<f32>,
}

impl SrMethod for ModelMethod<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn super_resolve(&self, case: &Case) -> Result<Plane<f32>> {
        let reference = self.net.config.use_ref.then_some(case.reference);
        Ok(self.net.forward(case.lr, reference, &case.task, false)?.sr_tar)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scale: f64,
    pub distribution: Distribution,
    pub metrics: BTreeMap<String, MetricPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub ref_mode: RefMode,
    pub slices: usize,
    pub methods: Vec<String>,
    pub rows: Vec<EvalRow>,
    /// Mean over the rows.
    pub averages: BTreeMap<String, MetricPair>,
}

/// LR dims of `dims / scale`, required to be integral.
pub fn exact_lr_dims(dims: (usize, usize), scale: f64) -> Result<(usize, usize)> {
    let f = |n: usize| {
        let v = n as f64 / scale;
        if (v - v.round()).abs() > 1e-9 || v.round() < 1.0 {
            Err(Error::Dims(format!("{n} px is not divisible by scale {scale}")))
        } else {
            Ok(v.round() as usize)
        }
    };
    Ok((f(dims.0)?, f(dims.1)?))
}

/// Evaluates `methods` on every pair at every scale. Outputs are clipped to
/// `[0, 1]` before scoring.
pub fn evaluate(
    label: &str,
    methods: &[&dyn SrMethod],
    data: &PairSet,
    scales: &[f64],
    ref_mode: RefMode,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if ref_mode == RefMode::Custom {
        return Err(Error::InvalidArgument("evaluation reference must be lr or hr".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..scales.len())
        .flat_map(|s| (0..data.len()).map(move |p| (s, p)))
        .collect();
    let scored: Vec<Result<Vec<MetricPair>>> = jobs
        .par_iter()
        .map(|&(si, pi)| {
            let (hr, reference) = &data.pairs[pi];
            let lr_dims = exact_lr_dims(hr.dims(), scales[si])?;
            let lr = degrade_to(&hr.cast::<f64>(), lr_dims)?.cast::<f32>();
            let reference = match ref_mode {
                RefMode::Lr => degrade_to(&reference.cast::<f64>(), lr_dims)?.cast::<f32>(),
                _ => reference.clone(),
            };
            let task = ScaleTask::new(lr_dims, reference.dims(), hr.dims(), ref_mode)?;
            let case = Case {
                lr: &lr,
                reference: &reference,
                hr,
                task,
            };
            methods
                .iter()
                .map(|m| {
                    let sr = m.super_resolve(&case)?.map(|v| v.clamp(0.0, 1.0));
                    Ok(MetricPair {
                        psnr: psnr(&sr, hr, 1.0)?,
                        ssim: ssim(&sr, hr)?,
                    })
                })
                .collect()
        })
        .collect();
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = methods.iter().map(|m| m.name()).collect();
    let n = data.len() as f64;
    let rows: Vec<EvalRow> = scales
        .iter()
        .enumerate()
        .map(|(si, &scale)| {
            let per = &scored[si * data.len()..(si + 1) * data.len()];
            EvalRow {
                scale,
                distribution: if scale <= MAX_TRAIN_SCALE {
                    Distribution::In
                } else {
                    Distribution::Out
                },
                metrics: names
                    .iter()
                    .enumerate()
                    .map(|(mi, name)| {
                        let psnr = per.iter().map(|v| v[mi].psnr).sum::<f64>() / n;
                        let ssim = per.iter().map(|v| v[mi].ssim).sum::<f64>() / n;
                        (name.clone(), MetricPair { psnr, ssim })
                    })
                    .collect(),
            }
        })
        .collect();
    let averages = average_rows(&names, &rows);
    Ok(EvalReport {
        label: label.to_string(),
        ref_mode,
        slices: data.len(),
        methods: names,
        rows,
        averages,
    })
}

fn average_rows(names: &[String], rows: &[EvalRow]) -> BTreeMap<String, MetricPair> {
    let k = rows.len() as f64;
    names
        .iter()
        .map(|name| {
            let psnr = rows.iter().map(|r| r.metrics[name].psnr).sum::<f64>() / k;
            let ssim = rows.iter().map(|r| r.metrics[name].ssim).sum::<f64>() / k;
            (name.clone(), MetricPair { psnr, ssim })
        })
        .collect()
}

fn scale_label(s: f64) -> String {
    format!("x{s}")
}

impl EvalReport {
    /// Methods as rows, scales as columns (`PSNR / SSIM`), then the average.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "## {} (reference: {}, {} slices)\n",
            self.label,
            self.ref_mode.as_str().to_uppercase(),
            self.slices
        );
        let mut head = String::from("| Method |");
        let mut group = String::from("| |");
        let mut rule = String::from("|---|");
        for r in &self.rows {
            let _ = write!(head, " {} |", scale_label(r.scale));
            let _ = write!(
                group,
                " {} |",
                if r.distribution == Distribution::In {
                    "in-distribution"
                } else {
                    "out-of-distribution"
                }
            );
            rule.push_str("---|");
        }
        head.push_str(" Average |");
        group.push_str(" |");
        rule.push_str("---|");
        let _ = writeln!(out, "{head}\n{rule}\n{group}");
        for m in &self.methods {
            let mut line = format!("| {m} |");
            for r in &self.rows {
                let v = r.metrics[m];
                let _ = write!(line, " {:.3} / {:.4} |", v.psnr, v.ssim);
            }
            let a = self.averages[m];
            let _ = write!(line, " {:.3} / {:.4} |", a.psnr, a.ssim);
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Column structure only: labels, scales, methods, key order.
    pub fn schema(&self) -> serde_json::Value {
        fn strip(v: &serde_json::Value) -> serde_json::Value {
            match v {
                serde_json::Value::Object(m) => {
                    serde_json::Value::Object(m.iter().map(|(k, v)| (k.clone(), strip(v))).collect())
                }
                serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(strip).collect()),
                serde_json::Value::Number(_) => serde_json::Value::from("number"),
                serde_json::Value::String(_) => serde_json::Value::from("string"),
                other => other.clone(),
            }
        }
        let mut v = serde_json::to_value(self).expect("report serializes");
        // method names differ per variant; keep their count
        if let Some(obj) = v.as_object_mut() {
            let n = self.methods.len();
            obj.insert("methods".into(), serde_json::Value::from(n));
            let anon = |m: &serde_json::Value| -> serde_json::Value {
                let vals: Vec<serde_json::Value> =
                    m.as_object().map(|o| o.values().cloned().collect()).unwrap_or_default();
                serde_json::Value::Array(vals)
            };
            if let Some(rows) = obj.get_mut("rows").and_then(|r| r.as_array_mut()) {
                for r in rows {
                    let m = anon(&r["metrics"]);
                    r["metrics"] = m;
                }
            }
            let a = anon(&obj["averages"]);
            obj.insert("averages".into(), a);
        }
        strip(&v)
    }
}

/// A training/model variant of the ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub strategy: Strategy,
    pub k_loss: bool,
    pub use_ref: bool,
    pub use_scale: bool,
    pub use_coord: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            label: "full".into(),
            strategy: Strategy::CurRandom,
            k_loss: true,
            use_ref: true,
            use_scale: true,
            use_coord: true,
        }
    }
}

/// Component switches accepted by [`Variant::with_flag`].
pub const ABLATION_FLAGS: [&str; 4] = ["w/o-ref", "w/o-scale", "w/o-coord", "w/o-k-loss"];

impl Variant {
    pub fn with_flag(mut self, flag: &str) -> Result<Self> {
        match flag {
            "w/o-ref" => self.use_ref = false,
            "w/o-scale" => self.use_scale = false,
            "w/o-coord" => self.use_coord = false,
            "w/o-k-loss" => self.k_loss = false,
            other => return Err(Error::InvalidArgument(format!("unknown ablation flag {other:?}"))),
        }
        self.label = self.describe();
        Ok(self)
    }

    pub fn with_strategy(mut self, s: Strategy) -> Self {
        self.strategy = s;
        self.label = self.describe();
        self
    }

    fn describe(&self) -> String {
        let mut parts = vec![self.strategy.as_str().to_string()];
        for (on, name) in [
            (self.use_ref, "w/o ref"),
            (self.use_scale, "w/o scale"),
            (self.use_coord, "w/o coord"),
            (self.k_loss, "w/o k-loss"),
        ] {
            if !on {
                parts.push(name.into());
            }
        }
        parts.join(", ")
    }

    /// `base` with this variant's switches applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.schedule.strategy = self.strategy;
        c.k_loss = self.k_loss;
        c.model.use_ref = self.use_ref;
        c.model.use_scale = self.use_scale;
        c.model.use_coord = self.use_coord;
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Comma-separated strategy and/or flags, e.g. `random,w/o-coord`.
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            v = match part.parse::<Strategy>() {
                Ok(st) => v.with_strategy(st),
                Err(_) => v.with_flag(part)?,
            };
        }
        v.label = v.describe();
        Ok(v)
    }
}

/// Every strategy with all components, then each component removed from
/// Cur-Random one at a time.
pub fn ablation_variants() -> Vec<Variant> {
    let mut out: Vec<Variant> = Strategy::ALL
        .iter()
        .map(|&s| Variant::default().with_strategy(s))
        .collect();
    for flag in ABLATION_FLAGS {
        out.push(
            Variant::default()
                .with_strategy(Strategy::CurRandom)
                .with_flag(flag)
                .unwrap(),
        );
    }
    out
}

/// Trains `variant` for `epochs` epochs from scratch and evaluates it with
/// LR and HR references.
pub fn run_variant(
    base: &TrainConfig,
    variant: &Variant,
    epochs: usize,
    train: &PairSet,
    test: &PairSet,
    scales: &[f64],
) -> Result<Vec<EvalReport>> {
    let mut state = TrainState::new(variant.apply(base))?;
    let total = state.config.schedule.total_epochs();
    for _ in 0..epochs.min(total) {
        run_epoch(&mut state, train, None, &mut |_| Ok(()))?;
    }
    let model = ModelMethod {
        label: "dual-arbnet".into(),
        net: &state.net,
    };
    let methods: [&dyn SrMethod; 3] = [&Nearest, &Bicubic, &model];
    [RefMode::Lr, RefMode::Hr]
        .into_iter()
        .map(|mode| evaluate(&variant.label, &methods, test, scales, mode))
        .collect()
}
