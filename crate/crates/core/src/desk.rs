//! The desk-scale reference experiment: the oriented-pattern task, a float
//! baseline, 16-bit profiling and allocation, a one-shot study and
//! fine-tuning under both rounding schemes. All settings are fixed here so
//! the CLI, the examples and the tests run the same protocol.

use crate::data::{oriented_patterns, pattern_net, Dataset};
use crate::fixedpoint::RoundingScheme;
use crate::inference::Model;
use crate::netdesc::NetDescriptor;
use crate::profiler::{
    allocate_bits, apply_allocation, measure_ranges, one_shot_study, profile_indices, sparsity_report,
    BitAllocation, DegradationReport, ProfileError, SparsityMode, SparsityReport, DEFAULT_PROFILE_SAMPLES,
};
use crate::training::{finetune, History, Init, TrainConfig};

pub const TRAIN_SAMPLES: usize = 2000;
pub const TEST_SAMPLES: usize = 500;
pub const TRAIN_SEED: u64 = 1;
pub const TEST_SEED: u64 = 2;
pub const PROFILE_SEED: u64 = 0;
pub const TOTAL_BITS: u32 = 16;
pub const THRESHOLD: f64 = 0.01;

pub fn split() -> (Dataset<f32>, Dataset<f32>) {
    (
        oriented_patterns(TRAIN_SAMPLES, TRAIN_SEED),
        oriented_patterns(TEST_SAMPLES, TEST_SEED),
    )
}

/// Float training from random initialization, fixed epoch budget.
pub fn float_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs: 20,
        batch_size: 32,
        seed: 3,
        patience: 0,
        ..TrainConfig::default()
    }
}

/// Fine-tuning from the float weights; the learning rate is divided by the
/// default divisor because the network is quantized.
pub fn finetune_config(scheme: RoundingScheme) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs: 4,
        batch_size: 32,
        seed: 5,
        scheme: Some(scheme),
        ..TrainConfig::default()
    }
}

pub struct FineTuned {
    pub model: Model<f32>,
    pub history: History,
    pub accuracy: f64,
    pub sparsity: SparsityReport,
}

pub struct Outcome {
    pub float_model: Model<f32>,
    pub float_history: History,
    pub float_accuracy: f64,
    pub float_sparsity: SparsityReport,
    pub allocation: BitAllocation,
    pub quantized_net: NetDescriptor,
    pub one_shot: DegradationReport,
    pub one_shot_sparsity: SparsityReport,
    pub deterministic: FineTuned,
    pub stochastic: FineTuned,
}

pub fn train_float(train: &Dataset<f32>, test: &Dataset<f32>) -> Result<(Model<f32>, History), ProfileError> {
    Ok(finetune(&pattern_net(), Init::Random, train, test, &float_config())?)
}

/// Profiles `model` on seeded training samples and allocates 16 bits.
pub fn allocate(model: &Model<f32>, train: &Dataset<f32>) -> Result<BitAllocation, ProfileError> {
    let idx = profile_indices(train.len(), DEFAULT_PROFILE_SAMPLES, PROFILE_SEED);
    let stats = measure_ranges(model, &train.images().gather(&idx))?;
    allocate_bits(&stats, TOTAL_BITS, THRESHOLD)
}

pub fn run() -> Result<Outcome, ProfileError> {
    let (train, test) = split();
    let (float_model, float_history) = train_float(&train, &test)?;
    let float_accuracy = float_history.final_accuracy().unwrap_or(0.0);
    let float_sparsity = sparsity_report(&float_model, &test, SparsityMode::Float)?;
    let allocation = allocate(&float_model, &train)?;
    let quantized_net = apply_allocation(float_model.net(), &allocation, RoundingScheme::Deterministic)?;
    let one_shot = one_shot_study(&float_model, &quantized_net, &test, PROFILE_SEED)?;
    let mut one_shot_model = float_model.with_net(quantized_net.clone())?;
    one_shot_model.refresh(crate::fixedpoint::StreamKey::new(PROFILE_SEED))?;
    let one_shot_sparsity = sparsity_report(&one_shot_model, &test, SparsityMode::OneShotQuantized)?;

    let tune = |scheme| -> Result<FineTuned, ProfileError> {
        let init = Init::Pretrained(float_model.clone());
        let (model, history) = finetune(&quantized_net, init, &train, &test, &finetune_config(scheme))?;
        let sparsity = sparsity_report(&model, &test, SparsityMode::FineTuned)?;
        Ok(FineTuned {
            accuracy: history.final_accuracy().unwrap_or(0.0),
            model,
            history,
            sparsity,
        })
    };
    Ok(Outcome {
        deterministic: tune(RoundingScheme::Deterministic)?,
        stochastic: tune(RoundingScheme::Stochastic)?,
        float_model,
        float_history,
        float_accuracy,
        float_sparsity,
        allocation,
        quantized_net,
        one_shot,
        one_shot_sparsity,
    })
}
