//! Canonical scenario files for the experimental arms.

use crate::correction::{CorrectionMode, DEFAULT_PATHWISE_LEVELS, DEFAULT_SINK_LAMBDA};
use crate::harness::config::{Scenario, StrategyKind, TtsMode};
use crate::ttx::{Optimizer, RewardKind};

pub const PRESET_NAMES: [&str; 8] = ["baseline", "ttc", "single-point", "sink", "bon", "sop", "tto-rec", "tto-sem"];

/// Swap level of the single-point arm.
pub const SINGLE_POINT_LEVEL: f64 = 0.25;

/// Gain of the drift scenario.
pub const DRIFT_GAIN: f64 = 1.02;

fn drift_scenario(name: &str) -> Scenario {
    let mut s = Scenario { name: name.into(), n_chunks: 30, n_seeds: 200, ..Scenario::default() };
    s.drift.gain = DRIFT_GAIN;
    if name != "baseline" {
        s.report.baseline = Some("self".into());
    }
    s
}

fn tto(name: &str, reward: RewardKind) -> Scenario {
    let mut s = drift_scenario(name);
    s.n_seeds = 100;
    s.strategy = StrategyKind::Tto;
    s.tto.reward = reward;
    s.tto.rank = 32;
    s.tto.steps = 200;
    s.tto.step_size = 0.02;
    s.tto.optimizer = Optimizer::Adam;
    s.tto.batch = 32;
    s
}

pub fn preset(name: &str) -> Option<Scenario> {
    let mut s = drift_scenario(name);
    match name {
        "baseline" => {}
        "ttc" => {
            s.correction.mode = CorrectionMode::PathWise;
            s.correction.levels = DEFAULT_PATHWISE_LEVELS.to_vec();
        }
        "single-point" => {
            s.correction.mode = CorrectionMode::SinglePoint;
            s.correction.levels = vec![SINGLE_POINT_LEVEL];
        }
        "sink" => {
            s.correction.mode = CorrectionMode::Sink;
            s.correction.sink_lambda = DEFAULT_SINK_LAMBDA;
        }
        "bon" | "sop" => {
            s.strategy = StrategyKind::Tts;
            s.tts.mode = if name == "bon" { TtsMode::Bon } else { TtsMode::Sop };
            s.tts.n = 5;
            s.tts.reward = RewardKind::DriftPenalty;
        }
        "tto-rec" => s = tto(name, RewardKind::Reconstruction),
        "tto-sem" => s = tto(name, RewardKind::Semantic),
        _ => return None,
    }
    Some(s)
}

pub fn presets() -> Vec<Scenario> {
    PRESET_NAMES.iter().filter_map(|n| preset(n)).collect()
}
