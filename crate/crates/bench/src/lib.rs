//! Shared inputs for the criterion benches.

use cfc_core::data::PromptRecord;
use cfc_core::synth::generate;
use cfc_core::{SynthConfig, SynthParams};

pub fn synthetic(n_cal: usize, n_test: usize, m: usize, seed: u64) -> (Vec<PromptRecord>, Vec<PromptRecord>) {
    generate(&SynthConfig {
        n_cal,
        n_test,
        seed,
        params: SynthParams {
            m,
            ..Default::default()
        },
    })
    .expect("valid synthetic config")
}
