//! Shared setup for the engine benchmarks.

use mentalsim_core::harness::{NeemSink, World};
use mentalsim_core::scene::SceneGraph;
use mentalsim_core::sim::{Robot, RobotConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The bundled kitchen with its robot resolved.
pub fn kitchen() -> (World, SceneGraph, Robot) {
    let world = World::kitchen();
    let g = world.build().expect("bundled kitchen builds");
    let robot = Robot::resolve(&g, RobotConfig::default()).expect("kitchen has the default robot");
    (world, g, robot)
}

/// A kitchen simulation writing its episode to memory.
pub fn kitchen_sim(seed: u64) -> mentalsim_core::sim::Simulation {
    World::kitchen()
        .simulation(seed, "bench", &NeemSink::Memory)
        .expect("bundled kitchen simulates")
}

/// `n` points in `d` dimensions with correlated coordinates.
pub fn correlated_samples(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let base: f64 = rng.random_range(-1.0..1.0);
            (0..d).map(|k| base * (k + 1) as f64 + rng.random_range(-0.1..0.1)).collect()
        })
        .collect()
}
