//! Three-stage Cur-Random schedule and the flat strategies it is compared to.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RefMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "warm-up")]
    WarmUp,
    #[serde(rename = "pre-learning")]
    PreLearning,
    #[serde(rename = "full-training")]
    FullTraining,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::WarmUp => "warm-up",
            Stage::PreLearning => "pre-learning",
            Stage::FullTraining => "full-training",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    CurRandom,
    Random,
    FixedHr,
    FixedLr,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::CurRandom,
        Strategy::Random,
        Strategy::FixedHr,
        Strategy::FixedLr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CurRandom => "cur-random",
            Strategy::Random => "random",
            Strategy::FixedHr => "fixed-hr",
            Strategy::FixedLr => "fixed-lr",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScaleSampler {
    FixedSet(Vec<f64>),
    /// `lo, lo + step, ..., hi`.
    Grid {
        lo: f64,
        hi: f64,
        step: f64,
    },
}

impl ScaleSampler {
    pub fn arbitrary() -> Self {
        ScaleSampler::Grid {
            lo: 1.0,
            hi: 4.0,
            step: 0.1,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            ScaleSampler::FixedSet(v) => v.clone(),
            ScaleSampler::Grid { lo, hi, step } => {
                let n = ((hi - lo) / step).round() as usize;
                // integer tenths so that 1.7 is exactly the literal 1.7
                (0..=n)
                    .map(|i| ((lo / step).round() + i as f64) * step)
                    .map(|v| (v * 1e9).round() / 1e9)
                    .collect()
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let v = self.values();
        v[rng.random_range(0..v.len())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefSampler {
    AlwaysHr,
    AlwaysLr,
    /// LR or HR with equal probability.
    UniformLrHr,
    /// Any reference scale between the LR and HR grids.
    Continuous,
}

/// Reference drawn for one training task: the mode plus, for continuous
/// references, the fraction of the way from the LR size to the HR size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefDraw {
    pub mode: RefMode,
    pub t: f64,
}

impl RefSampler {
    pub fn sample(self, rng: &mut impl Rng) -> RefDraw {
        match self {
            RefSampler::AlwaysHr => RefDraw {
                mode: RefMode::Hr,
                t: 1.0,
            },
            RefSampler::AlwaysLr => RefDraw {
                mode: RefMode::Lr,
                t: 0.0,
            },
            RefSampler::UniformLrHr => {
                if rng.random::<bool>() {
                    RefDraw {
                        mode: RefMode::Lr,
                        t: 0.0,
                    }
                } else {
                    RefDraw {
                        mode: RefMode::Hr,
                        t: 1.0,
                    }
                }
            }
            RefSampler::Continuous => RefDraw {
                mode: RefMode::Custom,
                t: rng.random::<f64>(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub stage: Stage,
    pub scale_sampler: ScaleSampler,
    pub ref_sampler: RefSampler,
    pub lr: f64,
}

/// A training task before patch extraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskDraw {
    pub s_nominal: f64,
    pub reference: RefDraw,
}

pub fn sample_task(stage: &StageParams, rng: &mut impl Rng) -> TaskDraw {
    let s_nominal = stage.scale_sampler.sample(rng);
    TaskDraw {
        s_nominal,
        reference: stage.ref_sampler.sample(rng),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub warmup_epochs: usize,
    pub prelearn_epochs: usize,
    pub fulltrain_epochs: usize,
    #[serde(default = "CurriculumSchedule::default_warmup_lr")]
    pub warmup_lr: f64,
    #[serde(default = "CurriculumSchedule::default_lr")]
    pub prelearn_lr: f64,
    #[serde(default = "CurriculumSchedule::default_lr")]
    pub fulltrain_lr0: f64,
    #[serde(default = "CurriculumSchedule::default_halving")]
    pub halving_period: usize,
    #[serde(default)]
    pub strategy: Strategy,
    /// Full training draws continuous reference scales instead of {LR, HR}.
    #[serde(default)]
    pub continuous_ref: bool,
}

impl CurriculumSchedule {
    fn default_warmup_lr() -> f64 {
        5e-5
    }

    fn default_lr() -> f64 {
        1e-4
    }

    fn default_halving() -> usize {
        40
    }

    pub fn new(warmup_epochs: usize, prelearn_epochs: usize, fulltrain_epochs: usize) -> Result<Self> {
        let s = CurriculumSchedule {
            warmup_epochs,
            prelearn_epochs,
            fulltrain_epochs,
            warmup_lr: Self::default_warmup_lr(),
            prelearn_lr: Self::default_lr(),
            fulltrain_lr0: Self::default_lr(),
            halving_period: Self::default_halving(),
            strategy: Strategy::CurRandom,
            continuous_ref: false,
        };
        s.validate()?;
        Ok(s)
    }

    /// (10, 40, 150).
    pub fn full() -> Self {
        Self::new(10, 40, 150).unwrap()
    }

    /// (2, 4, 14).
    pub fn desk() -> Self {
        Self::new(2, 4, 14).unwrap()
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::InvalidArgument("schedule has no epochs".into()));
        }
        if self.halving_period == 0 {
            return Err(Error::InvalidArgument("halving period must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.prelearn_epochs + self.fulltrain_epochs
    }

    fn full_training(&self, epoch_in_stage: usize, ref_sampler: RefSampler) -> StageParams {
        StageParams {
            stage: Stage::FullTraining,
            scale_sampler: ScaleSampler::arbitrary(),
            ref_sampler,
            lr: self.fulltrain_lr0 * 0.5f64.powi((epoch_in_stage / self.halving_period) as i32),
        }
    }

    pub fn stage_for_epoch(&self, epoch: usize) -> Result<StageParams> {
        let total = self.total_epochs();
        if epoch >= total {
            return Err(Error::EpochOutOfRange { epoch, total });
        }
        let full_ref = if self.continuous_ref {
            RefSampler::Continuous
        } else {
            RefSampler::UniformLrHr
        };
        Ok(match self.strategy {
            Strategy::Random => self.full_training(epoch, full_ref),
            Strategy::FixedHr => self.full_training(epoch, RefSampler::AlwaysHr),
            Strategy::FixedLr => self.full_training(epoch, RefSampler::AlwaysLr),
            Strategy::CurRandom => {
                if epoch < self.warmup_epochs {
                    StageParams {
                        stage: Stage::WarmUp,
                        scale_sampler: ScaleSampler::FixedSet(vec![2.0, 3.0, 4.0]),
                        ref_sampler: RefSampler::AlwaysHr,
                        lr: self.warmup_lr,
                    }
                } else if epoch < self.warmup_epochs + self.prelearn_epochs {
                    StageParams {
                        stage: Stage::PreLearning,
                        scale_sampler: ScaleSampler::arbitrary(),
                        ref_sampler: RefSampler::AlwaysHr,
                        lr: self.prelearn_lr,
                    }
                } else {
                    self.full_training(epoch - self.warmup_epochs - self.prelearn_epochs, full_ref)
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let s = CurriculumSchedule::full();
        let cases = [
            (5, Stage::WarmUp, 5e-5),
            (20, Stage::PreLearning, 1e-4),
            (60, Stage::FullTraining, 1e-4),
            (95, Stage::FullTraining, 5e-5),
            (199, Stage::FullTraining, 1e-4 / 8.0),
        ];
        for (epoch, stage, lr) in cases {
            let p = s.stage_for_epoch(epoch).unwrap();
            assert_eq!((p.stage, p.lr), (stage, lr), "epoch {epoch}");
        }
        assert_eq!(s.stage_for_epoch(5).unwrap().ref_sampler, RefSampler::AlwaysHr);
        assert_eq!(s.stage_for_epoch(20).unwrap().ref_sampler, RefSampler::AlwaysHr);
        assert_eq!(s.stage_for_epoch(60).unwrap().ref_sampler, RefSampler::UniformLrHr);
        assert!(matches!(s.stage_for_epoch(200), Err(Error::EpochOutOfRange { .. })));
    }

    #[test]
    fn stages_never_interleave() {
        let s = CurriculumSchedule::desk();
        let order: Vec<Stage> = (0..s.total_epochs())
            .map(|e| s.stage_for_epoch(e).unwrap().stage)
            .collect();
        let mut sorted = order.clone();
        sorted.sort_by_key(|st| *st as u8);
        assert_eq!(order, sorted);
        assert_eq!(order.iter().filter(|&&st| st == Stage::WarmUp).count(), 2);
    }

    #[test]
    fn grid_has_31_exact_points() {
        let v = ScaleSampler::arbitrary().values();
        assert_eq!(v.len(), 31);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[7], 1.7);
        assert_eq!(v[30], 4.0);
    }

    #[test]
    fn warmup_draws_are_uniform_over_integers() {
        let s = CurriculumSchedule::full();
        let st = s.stage_for_epoch(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            let t = sample_task(&st, &mut rng);
            counts[t.s_nominal as usize - 2] += 1;
            assert_eq!(t.reference.mode, RefMode::Hr);
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn full_training_reference_is_balanced() {
        let st = CurriculumSchedule::full().stage_for_epoch(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let lr = (0..n)
            .filter(|_| sample_task(&st, &mut rng).reference.mode == RefMode::Lr)
            .count();
        assert!((lr as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn strategies_parse_and_shape_the_reference() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("fixed".parse::<Strategy>().is_err());
        let fixed = CurriculumSchedule::desk().with_strategy(Strategy::FixedLr);
        assert_eq!(fixed.stage_for_epoch(0).unwrap().ref_sampler, RefSampler::AlwaysLr);
        assert_eq!(fixed.stage_for_epoch(0).unwrap().stage, Stage::FullTraining);
    }
}
