//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;

use mapshare::runtime::Mode;
use mapshare::sim::{Bounds, FrameOffset, PathConfig, ProtocolConstants, Role, ScenarioConfig, SceneConfig, UserConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

pub fn load_scenario(name: &str) -> ScenarioConfig {
    let text = std::fs::read_to_string(scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    ScenarioConfig::from_toml(&text).unwrap()
}

pub fn with_mode(cfg: &ScenarioConfig, mode: Mode) -> ScenarioConfig {
    let mut c = cfg.clone();
    c.mode = mode;
    c
}

/// A street walked by 3 to 6 users in turn. Each user after the first starts
/// a random fraction of its route behind the mapped frontier and carries on
/// past it, so per-user overlap spreads over the whole range from none to
/// nearly total.
pub fn random_street(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=6u32);
    let mut frontier = 0.0f64;
    let users = (1..=n)
        .map(|id| {
            let len = rng.random_range(14.0..26.0f64);
            let behind = if id == 1 { 0.0 } else { rng.random_range(0.0..1.0f64) * len };
            let start = (frontier - behind).max(0.0);
            frontier = frontier.max(start + len);
            let frame_offset = (id > 1).then(|| FrameOffset {
                translation: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-0.5..0.5)],
                yaw: rng.random_range(-1.0..1.0),
            });
            UserConfig {
                id,
                camera: "future-city".into(),
                role: if id == 1 { Role::Mapper } else { Role::Follower },
                alpha: None,
                frame_offset,
                path: PathConfig::Line { from: [start, 0.0, 0.0], to: [start + len, 0.0, 0.0] },
                repeat: 1,
                mode: None,
            }
        })
        .collect();
    ScenarioConfig {
        name: format!("street-{seed}"),
        seed,
        mode: Mode::Mapxx,
        transport: Default::default(),
        execution: Default::default(),
        bandwidth_cap: None,
        protocol: ProtocolConstants::default(),
        scene: SceneConfig {
            bounds: Bounds { min: [-25.0, -17.0, -17.0], max: [135.0, 17.0, 17.0] },
            landmarks: 11_000,
            clusters: vec![],
            sparse_zones: vec![],
            seed: None,
        },
        users,
        mutations: vec![],
    }
}
