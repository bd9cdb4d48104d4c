//! Deterministic synthetic warehouse streams: repeated shelving with a small
//! texture bank renders deliberately aliased corridors, and scripted flights
//! produce frame/odometry/ground-truth triples for the pipeline.

mod flight;
mod render;
mod world;

pub use flight::{
    concat_records, mean_abs_delta, simulate_flight, FlightPlan, FlightRecord, GroundTruthSample,
    OdomSample,
};
pub use render::render_view;
pub use world::{generate_world, texture_value, SynthError, Wall, World, WorldSpec};

/// Canonical scenarios used throughout the test and evaluation suites.
///
/// The flight worlds use a bank of three textures over six corridors, so
/// same-direction corridor pairs (1, 4), (2, 5) and (3, 6) render as exact
/// visual aliases of each other. The flight cameras also carry per-pixel
/// sensor noise, so no two emitted frames are identical even when the
/// underlying views are. The square loop is a single shelving block with
/// every surface distinct and a noise-free camera, for clean revisit
/// detection.
/// Sensor noise on the builtin flight cameras. Without it every pass down an
/// aisle re-renders bit-identical pixels, which no physical camera delivers.
const FLIGHT_PIXEL_NOISE: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinScenario {
    /// Perimeter lap around the whole warehouse.
    Flight1,
    /// Corridor sweep ending in a long shuttle down the far aisle, which is
    /// an exact visual alias of the first corridor: the heavily revisited
    /// content looks like somewhere else entirely.
    Flight2,
    /// Flight1 spliced onto flight2: exploration, then aliased revisits.
    Flight3,
    /// Two laps around one block with noisy odometry.
    SquareLoop,
}

impl BuiltinScenario {
    pub const ALL: [BuiltinScenario; 4] = [
        BuiltinScenario::Flight1,
        BuiltinScenario::Flight2,
        BuiltinScenario::Flight3,
        BuiltinScenario::SquareLoop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinScenario::Flight1 => "flight1",
            BuiltinScenario::Flight2 => "flight2",
            BuiltinScenario::Flight3 => "flight3",
            BuiltinScenario::SquareLoop => "square-loop",
        }
    }

    fn world_spec(self, seed: u64, image_size: (u32, u32)) -> WorldSpec {
        match self {
            BuiltinScenario::Flight1 | BuiltinScenario::Flight2 | BuiltinScenario::Flight3 => {
                WorldSpec { aisle_count: 6, aisle_length: 8.0, texture_bank_size: 3, image_size, seed }
            }
            BuiltinScenario::SquareLoop => {
                WorldSpec { aisle_count: 0, aisle_length: 8.0, texture_bank_size: 8, image_size, seed }
            }
        }
    }

    fn plans(self) -> Vec<FlightPlan> {
        let perimeter = FlightPlan {
            waypoints: vec![
                (1.5, 1.5),
                (30.5, 1.5),
                (30.5, 12.5),
                (1.5, 12.5),
                (1.5, 1.5),
            ],
            noise_sigma_xy: 0.01,
            noise_sigma_theta: 0.001,
            pixel_noise_sigma: FLIGHT_PIXEL_NOISE,
            ..Default::default()
        };
        // Sweep corridors 1 and 2, then shuttle up and down corridor 4 — the
        // exact alias of corridor 1. The slatted texture lives only on the
        // corridor-2/3 shelves, so the long dwell never refreshes it.
        let shuttle = FlightPlan {
            waypoints: vec![
                (6.0, 1.5),
                (6.0, 12.5),
                (10.0, 12.5),
                (10.0, 1.5),
                (18.0, 1.5),
                (18.0, 12.5),
                (18.0, 1.5),
            ],
            noise_sigma_xy: 0.01,
            noise_sigma_theta: 0.001,
            pixel_noise_sigma: FLIGHT_PIXEL_NOISE,
            ..Default::default()
        };
        let square = FlightPlan {
            waypoints: vec![
                (1.5, 1.5),
                (6.5, 1.5),
                (6.5, 12.5),
                (1.5, 12.5),
                (1.5, 1.5),
                (6.5, 1.5),
                (6.5, 12.5),
                (1.5, 12.5),
                (1.5, 1.5),
            ],
            noise_sigma_xy: 0.02,
            noise_sigma_theta: 0.002,
            ..Default::default()
        };
        match self {
            BuiltinScenario::Flight1 => vec![perimeter],
            BuiltinScenario::Flight2 => vec![shuttle],
            BuiltinScenario::Flight3 => vec![perimeter, shuttle],
            BuiltinScenario::SquareLoop => vec![square],
        }
    }

    /// Generate the scenario's full record at the given seed and resolution.
    pub fn generate(self, seed: u64, image_size: (u32, u32)) -> Result<FlightRecord, SynthError> {
        let world = generate_world(&self.world_spec(seed, image_size))?;
        let records = self
            .plans()
            .into_iter()
            .map(|plan| simulate_flight(&world, &plan))
            .collect::<Result<Vec<_>, _>>()?;
        concat_records(records)
    }
}

impl std::str::FromStr for BuiltinScenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BuiltinScenario::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BuiltinScenario::ALL.iter().map(|b| b.name()).collect();
                format!("unknown scenario {s:?} (expected one of {})", names.join(", "))
            })
    }
}
