//! Waypoint flights through a world: turn in place at each corner, travel
//! legs at constant speed, and emit a frame plus odometry and ground-truth
//! samples at every tick.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::render::render_view;
use super::world::{SynthError, World};
use crate::backend::Pose;
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OdomSample {
    pub timestamp: f64,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundTruthSample {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
}

/// `noise_sigma_xy` / `noise_sigma_theta` corrupt the body-frame odometry
/// increments; zero sigmas give exact dead-reckoning. `pixel_noise_sigma`
/// adds per-pixel Gaussian sensor noise to the rendered frames (clamped back
/// to [0, 1]), drawn from its own stream so turning it on or off never
/// changes the odometry draws. `redundancy_bound` caps the mean per-pixel
/// change between consecutive noise-free renders — a plan that sweeps the
/// camera too fast for its frame rate is rejected rather than silently
/// producing a non-redundant stream.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlightPlan {
    pub waypoints: Vec<(f64, f64)>,
    pub speed: f64,
    pub frame_rate: f64,
    pub turn_rate: f64,
    pub noise_sigma_xy: f64,
    pub noise_sigma_theta: f64,
    #[serde(default)]
    pub pixel_noise_sigma: f64,
    pub redundancy_bound: f64,
}

impl Default for FlightPlan {
    fn default() -> Self {
        FlightPlan {
            waypoints: Vec::new(),
            speed: 1.0,
            frame_rate: 10.0,
            turn_rate: 1.2,
            noise_sigma_xy: 0.01,
            noise_sigma_theta: 0.001,
            pixel_noise_sigma: 0.0,
            redundancy_bound: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlightRecord {
    pub frames: Vec<Frame>,
    pub odometry: Vec<OdomSample>,
    pub ground_truth: Vec<GroundTruthSample>,
    pub poses: Vec<Pose>,
    pub frame_rate: f64,
    pub seed: u64,
}

pub fn mean_abs_delta(a: &Frame, b: &Frame) -> f64 {
    let d = a.pixels() - b.pixels();
    d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64
}

const PATH_CLEARANCE: f64 = 0.3;
const PATH_SAMPLE_STEP: f64 = 0.25;

fn validate_plan(world: &World, plan: &FlightPlan) -> Result<(), SynthError> {
    if plan.waypoints.len() < 2 {
        return Err(SynthError::InvalidPlan("need at least two waypoints".into()));
    }
    for &v in &[plan.speed, plan.frame_rate, plan.turn_rate] {
        if !v.is_finite() || v <= 0.0 {
            return Err(SynthError::InvalidPlan(format!("rates must be positive and finite, got {v}")));
        }
    }
    for &v in &[plan.noise_sigma_xy, plan.noise_sigma_theta, plan.pixel_noise_sigma] {
        if !v.is_finite() || v < 0.0 {
            return Err(SynthError::InvalidPlan(format!("noise sigma must be nonnegative, got {v}")));
        }
    }
    if !plan.redundancy_bound.is_finite() || plan.redundancy_bound <= 0.0 {
        return Err(SynthError::InvalidPlan("redundancy_bound must be positive".into()));
    }
    for pair in plan.waypoints.windows(2) {
        let (ax, ay) = pair[0];
        let (bx, by) = pair[1];
        let len = (bx - ax).hypot(by - ay);
        if len < 1e-9 {
            return Err(SynthError::InvalidPlan(format!("zero-length leg at ({ax}, {ay})")));
        }
        let steps = (len / PATH_SAMPLE_STEP).ceil() as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (x, y) = (ax + f * (bx - ax), ay + f * (by - ay));
            if !world.in_free_space(x, y, PATH_CLEARANCE) {
                return Err(SynthError::PathOutsideWorld { x, y });
            }
        }
    }
    Ok(())
}

fn bearing(from: (f64, f64), to: (f64, f64)) -> f64 {
    (to.1 - from.1).atan2(to.0 - from.0)
}

const PIXEL_NOISE_STREAM: u64 = 0x70c5_25a9_6e30_41e7;

/// Simulate the plan through the world. Rendering is pure; the randomness is
/// the odometry noise and the optional pixel noise, each drawn from its own
/// stream seeded by the world's seed, so the whole record is a function of
/// (world, plan).
pub fn simulate_flight(world: &World, plan: &FlightPlan) -> Result<FlightRecord, SynthError> {
    validate_plan(world, plan)?;
    let dt = 1.0 / plan.frame_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed);
    let mut px_rng = ChaCha8Rng::seed_from_u64(world.spec.seed ^ PIXEL_NOISE_STREAM);
    let noise_xy = Normal::new(0.0, plan.noise_sigma_xy).ok().filter(|_| plan.noise_sigma_xy > 0.0);
    let noise_theta =
        Normal::new(0.0, plan.noise_sigma_theta).ok().filter(|_| plan.noise_sigma_theta > 0.0);
    let noise_px =
        Normal::new(0.0, plan.pixel_noise_sigma).ok().filter(|_| plan.pixel_noise_sigma > 0.0);

    let mut record = FlightRecord {
        frames: Vec::new(),
        odometry: Vec::new(),
        ground_truth: Vec::new(),
        poses: Vec::new(),
        frame_rate: plan.frame_rate,
        seed: world.spec.seed,
    };
    let start = plan.waypoints[0];
    let mut pose = Pose { x: start.0, y: start.1, theta: bearing(start, plan.waypoints[1]) };
    let mut t = 0.0;
    let mut tick = 0u64;
    // Redundancy is judged on the noise-free renders: it bounds how fast the
    // camera sweeps the scene, which sensor noise should not obscure.
    let mut prev_clean: Option<Frame> = None;

    let emit = |pose: &Pose,
                    t: f64,
                    tick: u64,
                    record: &mut FlightRecord,
                    rng: &mut ChaCha8Rng,
                    px_rng: &mut ChaCha8Rng,
                    prev_clean: &mut Option<Frame>|
     -> Result<(), SynthError> {
        let clean = render_view(world, pose, tick, t)?;
        if let Some(prev) = prev_clean.as_ref() {
            let delta = mean_abs_delta(prev, &clean);
            if delta > plan.redundancy_bound {
                return Err(SynthError::RedundancyViolated {
                    index: record.frames.len(),
                    delta,
                    bound: plan.redundancy_bound,
                });
            }
        }
        let frame = match noise_px.as_ref() {
            None => clean.clone(),
            Some(n) => {
                let noised: Vec<f64> =
                    clean.pixels().iter().map(|&v| (v + n.sample(px_rng)).clamp(0.0, 1.0)).collect();
                let (w, h) = world.spec.image_size;
                Frame::new(clean.id, clean.timestamp, w, h, clean.mode, noised)
                    .expect("noised pixels stay in range")
            }
        };
        *prev_clean = Some(clean);
        record.frames.push(frame);
        record.ground_truth.push(GroundTruthSample { timestamp: t, x: pose.x, y: pose.y });
        let odom = match record.poses.last() {
            None => OdomSample { timestamp: t, dx: 0.0, dy: 0.0, dtheta: 0.0 },
            Some(prev) => {
                let rel = prev.rel_to(pose);
                let nx = noise_xy.as_ref().map_or(0.0, |n| n.sample(rng));
                let ny = noise_xy.as_ref().map_or(0.0, |n| n.sample(rng));
                let nt = noise_theta.as_ref().map_or(0.0, |n| n.sample(rng));
                OdomSample { timestamp: t, dx: rel.dx + nx, dy: rel.dy + ny, dtheta: rel.dtheta + nt }
            }
        };
        record.odometry.push(odom);
        record.poses.push(*pose);
        Ok(())
    };

    emit(&pose, t, tick, &mut record, &mut rng, &mut px_rng, &mut prev_clean)?;
    for leg in 1..plan.waypoints.len() {
        let a = plan.waypoints[leg - 1];
        let b = plan.waypoints[leg];
        let target_theta = bearing(a, b);

        // Turn in place toward the leg bearing, landing exactly on it.
        let mut remaining = crate::backend::wrap_angle(target_theta - pose.theta);
        let max_step = plan.turn_rate * dt;
        while remaining.abs() > 1e-12 {
            let step = remaining.clamp(-max_step, max_step);
            pose.theta = if (remaining - step).abs() <= 1e-12 {
                target_theta
            } else {
                crate::backend::wrap_angle(pose.theta + step)
            };
            remaining -= step;
            tick += 1;
            t = tick as f64 * dt;
            emit(&pose, t, tick, &mut record, &mut rng, &mut px_rng, &mut prev_clean)?;
        }
        pose.theta = target_theta;

        // Travel the leg; positions come from the leg start each tick so the
        // final tick snaps exactly onto the waypoint.
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let ds = plan.speed * dt;
        let mut k = 0u64;
        loop {
            k += 1;
            let along = ds * k as f64;
            if along >= len {
                pose.x = b.0;
                pose.y = b.1;
            } else {
                pose.x = a.0 + along * ux;
                pose.y = a.1 + along * uy;
            }
            tick += 1;
            t = tick as f64 * dt;
            emit(&pose, t, tick, &mut record, &mut rng, &mut px_rng, &mut prev_clean)?;
            if along >= len {
                break;
            }
        }
    }

    Ok(record)
}

/// Splice records end to end: timestamps continue on the shared tick grid and
/// the joint odometry sample carries the true relative pose between the last
/// pose of one record and the first pose of the next, so dead-reckoning stays
/// consistent across the splice.
pub fn concat_records(records: Vec<FlightRecord>) -> Result<FlightRecord, SynthError> {
    let mut iter = records.into_iter();
    let mut out = iter
        .next()
        .ok_or_else(|| SynthError::InvalidPlan("cannot concatenate zero records".into()))?;
    for rec in iter {
        if rec.frame_rate != out.frame_rate {
            return Err(SynthError::InvalidPlan(format!(
                "frame rate mismatch: {} vs {}",
                out.frame_rate, rec.frame_rate
            )));
        }
        let dt = 1.0 / out.frame_rate;
        let base_tick = out.frames.len() as u64;
        let prev_pose = *out.poses.last().expect("records are never empty");
        for (i, frame) in rec.frames.iter().enumerate() {
            let tick = base_tick + i as u64;
            let t = tick as f64 * dt;
            let mut f = frame.clone();
            f.id = tick;
            f.timestamp = t;
            out.frames.push(f);
            let gt = rec.ground_truth[i];
            out.ground_truth.push(GroundTruthSample { timestamp: t, ..gt });
            let odom = if i == 0 {
                let rel = prev_pose.rel_to(&rec.poses[0]);
                OdomSample { timestamp: t, dx: rel.dx, dy: rel.dy, dtheta: rel.dtheta }
            } else {
                OdomSample { timestamp: t, ..rec.odometry[i] }
            };
            out.odometry.push(odom);
            out.poses.push(rec.poses[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthstream::world::{generate_world, WorldSpec};

    fn test_world() -> World {
        generate_world(&WorldSpec { image_size: (32, 24), seed: 5, ..Default::default() }).unwrap()
    }

    fn straight_plan() -> FlightPlan {
        FlightPlan {
            waypoints: vec![(6.0, 1.5), (6.0, 12.5)],
            noise_sigma_xy: 0.0,
            noise_sigma_theta: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_plans() {
        let world = test_world();
        let through_shelf = FlightPlan {
            waypoints: vec![(1.5, 1.5), (12.0, 7.0)],
            ..Default::default()
        };
        assert!(matches!(
            simulate_flight(&world, &through_shelf),
            Err(SynthError::PathOutsideWorld { .. })
        ));
        let outside = FlightPlan { waypoints: vec![(1.5, 1.5), (1.5, 50.0)], ..Default::default() };
        assert!(simulate_flight(&world, &outside).is_err());
        let lone = FlightPlan { waypoints: vec![(1.5, 1.5)], ..Default::default() };
        assert!(matches!(simulate_flight(&world, &lone), Err(SynthError::InvalidPlan(_))));
    }

    #[test]
    fn streams_align_and_land_on_waypoints() {
        let world = test_world();
        let rec = simulate_flight(&world, &straight_plan()).unwrap();
        assert_eq!(rec.frames.len(), rec.odometry.len());
        assert_eq!(rec.frames.len(), rec.ground_truth.len());
        assert_eq!(rec.frames.len(), rec.poses.len());
        // 11 m at 0.1 m per tick, plus the initial frame.
        assert_eq!(rec.frames.len(), 111);
        let first = rec.odometry[0];
        assert_eq!((first.dx, first.dy, first.dtheta), (0.0, 0.0, 0.0));
        let last = rec.poses.last().unwrap();
        assert_eq!((last.x, last.y), (6.0, 12.5));
        for (i, f) in rec.frames.iter().enumerate() {
            assert_eq!(f.id, i as u64);
            assert!((f.timestamp - i as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn turning_inserts_frames_and_lands_on_bearing() {
        let world = test_world();
        let plan = FlightPlan {
            waypoints: vec![(6.0, 1.5), (6.0, 12.5), (10.0, 12.5)],
            noise_sigma_xy: 0.0,
            noise_sigma_theta: 0.0,
            ..Default::default()
        };
        let rec = simulate_flight(&world, &plan).unwrap();
        // Corner: pi/2 of turning at 0.12 rad per tick needs 14 ticks.
        assert_eq!(rec.frames.len(), 111 + 14 + 40);
        assert_eq!(rec.poses.last().unwrap().theta, 0.0);
        assert_eq!(rec.poses[124].theta, 0.0);
        assert!(rec.poses[118].theta > 0.0 && rec.poses[118].theta < std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn zero_noise_odometry_integrates_to_ground_truth() {
        let world = test_world();
        let plan = FlightPlan {
            waypoints: vec![(6.0, 1.5), (6.0, 12.5), (10.0, 12.5), (10.0, 1.5)],
            noise_sigma_xy: 0.0,
            noise_sigma_theta: 0.0,
            ..Default::default()
        };
        let rec = simulate_flight(&world, &plan).unwrap();
        let mut pose = rec.poses[0];
        for (odom, truth) in rec.odometry.iter().zip(&rec.poses).skip(1) {
            pose = pose.compose(&crate::backend::RelPose {
                dx: odom.dx,
                dy: odom.dy,
                dtheta: odom.dtheta,
            });
            assert!((pose.x - truth.x).abs() < 1e-9, "x drift {} vs {}", pose.x, truth.x);
            assert!((pose.y - truth.y).abs() < 1e-9);
            assert!(crate::backend::wrap_angle(pose.theta - truth.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn same_inputs_give_bit_identical_records() {
        let world = test_world();
        let plan = FlightPlan { noise_sigma_xy: 0.02, ..straight_plan() };
        let a = simulate_flight(&world, &plan).unwrap();
        let b = simulate_flight(&world, &plan).unwrap();
        assert_eq!(a.odometry, b.odometry);
        assert_eq!(a.ground_truth, b.ground_truth);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.pixels(), fb.pixels());
        }
    }

    #[test]
    fn pixel_noise_perturbs_frames_but_not_odometry() {
        let world = test_world();
        let quiet = FlightPlan { noise_sigma_xy: 0.02, ..straight_plan() };
        let noisy = FlightPlan { pixel_noise_sigma: 0.1, ..quiet.clone() };
        let a = simulate_flight(&world, &quiet).unwrap();
        let b = simulate_flight(&world, &noisy).unwrap();
        assert_eq!(a.odometry, b.odometry, "pixel noise must not shift odometry draws");
        let delta = mean_abs_delta(&a.frames[0], &b.frames[0]);
        assert!(delta > 0.05, "expected visible sensor noise, got {delta}");
        for f in &b.frames {
            assert!(f.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let b2 = simulate_flight(&world, &noisy).unwrap();
        for (fa, fb) in b.frames.iter().zip(&b2.frames) {
            assert_eq!(fa.pixels(), fb.pixels());
        }
    }

    #[test]
    fn noisy_dead_reckoning_drift_grows_with_path_length() {
        let world = test_world();
        let drift_at = |waypoints: Vec<(f64, f64)>, seed: u64| {
            let world = generate_world(&WorldSpec { seed, ..world.spec.clone() }).unwrap();
            let plan = FlightPlan {
                waypoints,
                noise_sigma_xy: 0.02,
                noise_sigma_theta: 0.002,
                ..Default::default()
            };
            let rec = simulate_flight(&world, &plan).unwrap();
            let mut pose = rec.poses[0];
            for odom in rec.odometry.iter().skip(1) {
                pose = pose.compose(&crate::backend::RelPose {
                    dx: odom.dx,
                    dy: odom.dy,
                    dtheta: odom.dtheta,
                });
            }
            let truth = rec.poses.last().unwrap();
            (pose.x - truth.x).hypot(pose.y - truth.y)
        };
        let short = vec![(6.0, 1.5), (6.0, 4.5)];
        let long = vec![
            (6.0, 1.5),
            (6.0, 12.5),
            (10.0, 12.5),
            (10.0, 1.5),
            (14.0, 1.5),
            (14.0, 12.5),
        ];
        let mut long_wins = 0;
        for seed in 0..20 {
            if drift_at(long.clone(), seed) > drift_at(short.clone(), seed) {
                long_wins += 1;
            }
        }
        assert!(long_wins >= 15, "long path out-drifted short in only {long_wins}/20 seeds");
    }

    #[test]
    fn concat_preserves_counts_and_dead_reckoning() {
        let world = test_world();
        let a = simulate_flight(&world, &straight_plan()).unwrap();
        let plan_b = FlightPlan {
            waypoints: vec![(10.0, 12.5), (10.0, 1.5)],
            noise_sigma_xy: 0.0,
            noise_sigma_theta: 0.0,
            ..Default::default()
        };
        let b = simulate_flight(&world, &plan_b).unwrap();
        let (na, nb) = (a.frames.len(), b.frames.len());
        let joined = concat_records(vec![a, b]).unwrap();
        assert_eq!(joined.frames.len(), na + nb);
        assert_eq!(joined.odometry.len(), na + nb);
        for (i, f) in joined.frames.iter().enumerate() {
            assert_eq!(f.id, i as u64);
            assert!((f.timestamp - i as f64 * 0.1).abs() < 1e-12);
        }
        let mut pose = joined.poses[0];
        for odom in joined.odometry.iter().skip(1) {
            pose = pose.compose(&crate::backend::RelPose {
                dx: odom.dx,
                dy: odom.dy,
                dtheta: odom.dtheta,
            });
        }
        let truth = joined.poses.last().unwrap();
        assert!((pose.x - truth.x).abs() < 1e-9);
        assert!((pose.y - truth.y).abs() < 1e-9);
    }

    #[test]
    fn consecutive_frames_are_redundant() {
        let world = test_world();
        let plan = FlightPlan {
            waypoints: vec![(6.0, 1.5), (6.0, 12.5), (10.0, 12.5), (10.0, 1.5)],
            noise_sigma_xy: 0.0,
            noise_sigma_theta: 0.0,
            ..Default::default()
        };
        let rec = simulate_flight(&world, &plan).unwrap();
        let max = rec
            .frames
            .windows(2)
            .map(|w| mean_abs_delta(&w[0], &w[1]))
            .fold(0.0f64, f64::max);
        assert!(max <= plan.redundancy_bound, "max inter-frame delta {max}");
        assert!(max > 0.0);
        let strict = FlightPlan { redundancy_bound: max / 2.0, ..plan };
        assert!(matches!(
            simulate_flight(&world, &strict),
            Err(SynthError::RedundancyViolated { .. })
        ));
    }
}
