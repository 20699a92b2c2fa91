#![allow(dead_code)]

use elastovb::io::{generate_data, BcConfig, MeshConfig, PhantomConfig, Problem, RunConfig, Shape};
use nalgebra::DVector;

/// A 4 x 4 phantom with a stiff square inclusion and a clamped top row.
pub fn small_config(noise_seed: u64, snr: f64) -> RunConfig {
    let mut cfg = RunConfig::example1();
    cfg.mesh = MeshConfig {
        nx: 4,
        ny: 4,
        lx: 4.0,
        ly: 4.0,
        poisson: 0.0,
    };
    cfg.phantom = PhantomConfig {
        background: 0.0,
        shapes: vec![Shape::Rectangle {
            x0: 1.0,
            x1: 2.0,
            y0: 1.0,
            y1: 2.0,
            value: 5.0f64.ln(),
        }],
        clamp_top_row: true,
    };
    cfg.bc = BcConfig::Platen { top_uy: -0.04 };
    cfg.noise.snr = Some(snr);
    cfg.noise.seed = noise_seed;
    cfg
}

pub fn problem_and_data(cfg: &RunConfig) -> (Problem, DVector<f64>) {
    let problem = Problem::new(cfg).expect("valid configuration");
    let data = generate_data(cfg).expect("data generation");
    (problem, data.observations.yhat())
}
