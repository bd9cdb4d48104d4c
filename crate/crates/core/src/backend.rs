//! Experience-map back-end: odometry integration, loop-closure links, and
//! iterative map relaxation.
//!
//! The map is a pose graph. Every matcher sampling tick creates an experience
//! at the dead-reckoned pose and chains it to its predecessor with the
//! measured relative transform; an accepted loop closure adds a second link
//! demanding coincidence with the matched experience. Relaxation distributes
//! the resulting disagreement over the whole graph with damped Jacobi sweeps.

use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown experience id {0}")]
    UnknownExperience(u64),
    #[error("link endpoints must differ (experience {0})")]
    SelfLink(u64),
    #[error("invalid parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
}

/// Normalizes an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar pose; `theta` is always stored wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta: wrap_angle(theta) }
    }

    pub fn origin() -> Self {
        Pose { x: 0.0, y: 0.0, theta: 0.0 }
    }

    /// Applies a body-frame transform: translation rotated by this pose's
    /// heading, then the heading increment.
    pub fn compose(&self, rel: &RelPose) -> Pose {
        let (sin, cos) = self.theta.sin_cos();
        Pose {
            x: self.x + rel.dx * cos - rel.dy * sin,
            y: self.y + rel.dx * sin + rel.dy * cos,
            theta: wrap_angle(self.theta + rel.dtheta),
        }
    }

    /// The body-frame transform carrying `self` onto `target`, i.e. the `rel`
    /// with `self.compose(rel) ~= target`.
    pub fn rel_to(&self, target: &Pose) -> RelPose {
        let (sin, cos) = self.theta.sin_cos();
        let ex = target.x - self.x;
        let ey = target.y - self.y;
        RelPose {
            dx: ex * cos + ey * sin,
            dy: -ex * sin + ey * cos,
            dtheta: wrap_angle(target.theta - self.theta),
        }
    }
}

/// Body-frame relative transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelPose {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl RelPose {
    pub fn identity() -> Self {
        RelPose { dx: 0.0, dy: 0.0, dtheta: 0.0 }
    }

    pub fn inverse(&self) -> RelPose {
        let (sin, cos) = self.dtheta.sin_cos();
        RelPose {
            dx: -(self.dx * cos + self.dy * sin),
            dy: self.dx * sin - self.dy * cos,
            dtheta: wrap_angle(-self.dtheta),
        }
    }
}

/// One odometry reading: a body-frame displacement over a frame tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometrySample {
    pub timestamp: f64,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

/// Dead-reckoning update: the displacement is rotated into the world frame by
/// the current heading, then the heading increment is applied and wrapped.
pub fn integrate_odometry(pose: &Pose, odo: &OdometrySample) -> Pose {
    pose.compose(&RelPose { dx: odo.dx, dy: odo.dy, dtheta: odo.dtheta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Odometric,
    LoopClosure,
}

impl LinkKind {
    pub fn label(self) -> &'static str {
        match self {
            LinkKind::Odometric => "odometric",
            LinkKind::LoopClosure => "loop_closure",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MapLink {
    pub from_id: u64,
    pub to_id: u64,
    pub rel: RelPose,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, Copy)]
pub struct Experience {
    pub experience_id: u64,
    pub pose: Pose,
    pub created_at: f64,
}

/// Damping and sweep count for one relaxation call.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxParams {
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for RelaxParams {
    fn default() -> Self {
        RelaxParams { alpha: 0.5, iterations: 20 }
    }
}

impl RelaxParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(BackendError::InvalidParam { name: "alpha", value: self.alpha });
        }
        Ok(())
    }
}

/// Per-sweep total squared link disagreement, recorded before the first sweep
/// and after each one.
#[derive(Debug, Clone)]
pub struct RelaxReport {
    pub disagreement: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperienceMap {
    experiences: Vec<Experience>,
    links: Vec<MapLink>,
    current_id: Option<u64>,
}

impl ExperienceMap {
    pub fn new() -> Self {
        ExperienceMap::default()
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    pub fn experiences(&self) -> &[Experience] {
        &self.experiences
    }

    pub fn links(&self) -> &[MapLink] {
        &self.links
    }

    pub fn current_id(&self) -> Option<u64> {
        self.current_id
    }

    pub fn experience(&self, id: u64) -> Option<&Experience> {
        self.experiences.get(id as usize)
    }

    /// Adds a free experience without touching the odometric chain.
    pub fn add_experience(&mut self, pose: Pose, created_at: f64) -> u64 {
        let id = self.experiences.len() as u64;
        self.experiences.push(Experience { experience_id: id, pose, created_at });
        id
    }

    pub fn add_link(
        &mut self,
        from_id: u64,
        to_id: u64,
        rel: RelPose,
        kind: LinkKind,
    ) -> Result<(), BackendError> {
        if from_id == to_id {
            return Err(BackendError::SelfLink(from_id));
        }
        for id in [from_id, to_id] {
            if self.experience(id).is_none() {
                return Err(BackendError::UnknownExperience(id));
            }
        }
        self.links.push(MapLink { from_id, to_id, rel, kind });
        Ok(())
    }

    /// One matcher sampling tick: creates an experience at the estimated
    /// pose, chains it to the previous one with their relative transform, and
    /// on a loop closure adds an identity link to the matched experience and
    /// relaxes the map. Returns the new experience id.
    pub fn on_sample(
        &mut self,
        pose: Pose,
        created_at: f64,
        closure_target: Option<u64>,
        relax: &RelaxParams,
    ) -> Result<u64, BackendError> {
        relax.validate()?;
        if let Some(target) = closure_target {
            if self.experience(target).is_none() {
                return Err(BackendError::UnknownExperience(target));
            }
        }
        let prev = self.current_id;
        let id = self.add_experience(pose, created_at);
        if let Some(prev) = prev {
            let rel = self.experiences[prev as usize].pose.rel_to(&pose);
            self.add_link(prev, id, rel, LinkKind::Odometric)?;
        }
        self.current_id = Some(id);
        if let Some(target) = closure_target {
            self.add_link(id, target, RelPose::identity(), LinkKind::LoopClosure)?;
            self.relax(relax);
        }
        Ok(id)
    }

    /// Total squared disagreement: for every link, how far the pose implied
    /// for its endpoint is from the endpoint's current pose, summed over x, y
    /// and wrapped angle.
    pub fn total_disagreement(&self) -> f64 {
        self.links
            .iter()
            .map(|link| {
                let pa = self.experiences[link.from_id as usize].pose;
                let pb = self.experiences[link.to_id as usize].pose;
                let pred = pa.compose(&link.rel);
                let da = pred.x - pb.x;
                let db = pred.y - pb.y;
                let dth = wrap_angle(pred.theta - pb.theta);
                da * da + db * db + dth * dth
            })
            .sum()
    }

    /// Damped Jacobi relaxation: every sweep computes, for each experience,
    /// the mean pose correction implied by its incident links (forward links
    /// pull the target, and their inverses pull the source), then applies
    /// `alpha` of it simultaneously everywhere. Rotations make the system
    /// nonlinear, so a sweep that would increase the total disagreement is
    /// retried with a halved step; if even a vanishing step cannot improve,
    /// the graph has stalled at a fixed point and relaxation stops early.
    /// Disagreement is therefore non-increasing by construction.
    pub fn relax(&mut self, params: &RelaxParams) -> RelaxReport {
        let n = self.experiences.len();
        let mut disagreement = Vec::with_capacity(params.iterations + 1);
        disagreement.push(self.total_disagreement());
        for _ in 0..params.iterations {
            let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0u32); n];
            for link in &self.links {
                let a = link.from_id as usize;
                let b = link.to_id as usize;
                let pa = self.experiences[a].pose;
                let pb = self.experiences[b].pose;
                let pred_b = pa.compose(&link.rel);
                let eb = &mut acc[b];
                eb.0 += pred_b.x - pb.x;
                eb.1 += pred_b.y - pb.y;
                eb.2 += wrap_angle(pred_b.theta - pb.theta);
                eb.3 += 1;
                let pred_a = pb.compose(&link.rel.inverse());
                let ea = &mut acc[a];
                ea.0 += pred_a.x - pa.x;
                ea.1 += pred_a.y - pa.y;
                ea.2 += wrap_angle(pred_a.theta - pa.theta);
                ea.3 += 1;
            }
            let before = *disagreement.last().unwrap();
            let saved: Vec<Pose> = self.experiences.iter().map(|e| e.pose).collect();
            let mut step = params.alpha;
            let mut accepted = None;
            for _ in 0..8 {
                for ((exp, base), &(dx, dy, dth, count)) in
                    self.experiences.iter_mut().zip(&saved).zip(&acc)
                {
                    if count == 0 {
                        continue;
                    }
                    let scale = step / count as f64;
                    exp.pose = Pose::new(
                        base.x + dx * scale,
                        base.y + dy * scale,
                        base.theta + dth * scale,
                    );
                }
                let d = self.total_disagreement();
                if d <= before {
                    accepted = Some(d);
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some(d) => disagreement.push(d),
                None => {
                    for (exp, base) in self.experiences.iter_mut().zip(&saved) {
                        exp.pose = *base;
                    }
                    break;
                }
            }
        }
        RelaxReport { disagreement }
    }

    /// Writes `map.csv`: one row per experience, final relaxed pose.
    pub fn write_map_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "experience_id,x,y,theta")?;
        for e in &self.experiences {
            writeln!(w, "{},{},{},{}", e.experience_id, e.pose.x, e.pose.y, e.pose.theta)?;
        }
        Ok(())
    }

    /// Writes `links.csv`: the graph topology with link kinds.
    pub fn write_links_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "from,to,kind,dx,dy,dtheta")?;
        for l in &self.links {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                l.from_id,
                l.to_id,
                l.kind.label(),
                l.rel.dx,
                l.rel.dy,
                l.rel.dtheta
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn odo(dx: f64, dy: f64, dtheta: f64) -> OdometrySample {
        OdometrySample { timestamp: 0.0, dx, dy, dtheta }
    }

    #[test]
    fn integrate_identity_heading() {
        let p = integrate_odometry(&Pose::origin(), &odo(1.0, 0.0, 0.0));
        assert_eq!(p, Pose { x: 1.0, y: 0.0, theta: 0.0 });
    }

    #[test]
    fn integrate_rotated_heading() {
        let start = Pose::new(0.0, 0.0, FRAC_PI_2);
        let p = integrate_odometry(&start, &odo(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn wrap_angle_range_and_boundaries() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert_abs_diff_eq!(wrap_angle(PI), PI, epsilon = 0.0);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 0.0);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5, epsilon = 0.0);
        for a in [-100.0, -7.7, -3.2, 0.1, 9.9, 1000.0] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI, "wrap({a}) = {w} out of range");
            // Same angle modulo 2 pi.
            assert_abs_diff_eq!((a - w).rem_euclid(2.0 * PI).min((2.0 * PI) - (a - w).rem_euclid(2.0 * PI)), 0.0, epsilon = 1e-9);
        }
    }

    /// Chained integration must agree with composing 2-D rigid transforms as
    /// 3x3 homogeneous matrices.
    #[test]
    fn integration_matches_matrix_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rnd = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut pose = Pose::origin();
        let mut mat = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 0..100 {
            let (dx, dy, dth) = (rnd(), rnd(), rnd() * 0.8);
            pose = integrate_odometry(&pose, &odo(dx, dy, dth));
            let (s, c) = dth.sin_cos();
            let step = [[c, -s, dx], [s, c, dy], [0.0, 0.0, 1.0]];
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for (k, row) in step.iter().enumerate() {
                        out[i][j] += mat[i][k] * row[j];
                    }
                }
            }
            mat = out;
        }
        assert_abs_diff_eq!(pose.x, mat[0][2], epsilon = 1e-9);
        assert_abs_diff_eq!(pose.y, mat[1][2], epsilon = 1e-9);
        let theta_mat = mat[1][0].atan2(mat[0][0]);
        assert_abs_diff_eq!(wrap_angle(pose.theta - theta_mat), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn rel_to_round_trips_through_compose() {
        let a = Pose::new(1.3, -0.4, 2.1);
        let b = Pose::new(-2.0, 0.9, -1.7);
        let rel = a.rel_to(&b);
        let back = a.compose(&rel);
        assert_abs_diff_eq!(back.x, b.x, epsilon = 1e-12);
        assert_abs_diff_eq!(back.y, b.y, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(back.theta - b.theta), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn on_sample_builds_chain_and_links() {
        let relax = RelaxParams::default();
        let mut map = ExperienceMap::new();
        let a = map.on_sample(Pose::origin(), 0.0, None, &relax).unwrap();
        let b = map.on_sample(Pose::new(1.0, 0.0, 0.0), 0.1, None, &relax).unwrap();
        assert_eq!((a, b), (0, 1));
        assert_eq!(map.links().len(), 1);
        assert_eq!(map.links()[0].kind, LinkKind::Odometric);
        assert_eq!(map.current_id(), Some(1));
        let c = map.on_sample(Pose::new(1.0, 1.0, 0.0), 0.2, Some(0), &relax).unwrap();
        assert_eq!(c, 2);
        assert_eq!(map.links().len(), 3);
        assert_eq!(map.links()[2].kind, LinkKind::LoopClosure);
    }

    #[test]
    fn on_sample_rejects_unknown_closure_target() {
        let relax = RelaxParams::default();
        let mut map = ExperienceMap::new();
        map.on_sample(Pose::origin(), 0.0, None, &relax).unwrap();
        let before = map.len();
        let err = map.on_sample(Pose::origin(), 0.1, Some(99), &relax);
        assert!(matches!(err, Err(BackendError::UnknownExperience(99))));
        assert_eq!(map.len(), before, "failed closure must not create a node");
    }

    #[test]
    fn consistent_chain_is_untouched_by_relaxation() {
        let relax = RelaxParams::default();
        let mut map = ExperienceMap::new();
        let mut pose = Pose::origin();
        map.on_sample(pose, 0.0, None, &relax).unwrap();
        for k in 1..10 {
            pose = integrate_odometry(&pose, &odo(0.5, 0.1, 0.2));
            map.on_sample(pose, k as f64 * 0.1, None, &relax).unwrap();
        }
        let before: Vec<Pose> = map.experiences().iter().map(|e| e.pose).collect();
        let report = map.relax(&relax);
        assert!(report.disagreement[0] < 1e-18);
        for (b, e) in before.iter().zip(map.experiences()) {
            assert_abs_diff_eq!(b.x, e.pose.x, epsilon = 1e-12);
            assert_abs_diff_eq!(b.y, e.pose.y, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_node_loop_halves_the_gap() {
        let mut map = ExperienceMap::new();
        let a = map.add_experience(Pose::origin(), 0.0);
        let b = map.add_experience(Pose::new(1.0, 0.0, 0.0), 1.0);
        map.add_link(b, a, RelPose::identity(), LinkKind::LoopClosure).unwrap();
        let report = map.relax(&RelaxParams::default());
        let pa = map.experience(0).unwrap().pose;
        let pb = map.experience(1).unwrap().pose;
        let gap = ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
        assert!(gap < 0.05, "poses should converge, gap = {gap}");
        for w in report.disagreement.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "disagreement rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn relaxation_preserves_topology() {
        let relax = RelaxParams::default();
        let mut map = ExperienceMap::new();
        let mut pose = Pose::origin();
        map.on_sample(pose, 0.0, None, &relax).unwrap();
        for k in 1..20 {
            pose = integrate_odometry(&pose, &odo(0.4, 0.0, 0.3));
            let closure = if k == 19 { Some(0) } else { None };
            map.on_sample(pose, k as f64 * 0.1, closure, &relax).unwrap();
        }
        assert_eq!(map.len(), 20);
        assert_eq!(map.links().len(), 20);
    }

    /// A square loop with accumulated drift: the loop closure plus relaxation
    /// must shrink the end-to-start gap substantially.
    #[test]
    fn drifty_square_improves_after_closure() {
        let relax = RelaxParams { alpha: 0.5, iterations: 60 };
        let mut map = ExperienceMap::new();
        let mut pose = Pose::origin();
        map.on_sample(pose, 0.0, None, &relax).unwrap();
        let mut t = 0.0;
        for leg in 0..4 {
            // Forward drift on the first two legs only, so it cannot cancel
            // around the square.
            let drift = if leg < 2 { 0.03 } else { 0.0 };
            for _ in 0..5 {
                pose = integrate_odometry(&pose, &odo(1.0 + drift, 0.0, 0.0));
                t += 0.1;
                map.on_sample(pose, t, None, &relax).unwrap();
            }
            pose = integrate_odometry(&pose, &odo(0.0, 0.0, FRAC_PI_2));
        }
        let drifted_gap = {
            let last = map.experiences().last().unwrap().pose;
            (last.x.powi(2) + last.y.powi(2)).sqrt()
        };
        let last_id = map.current_id().unwrap();
        map.add_link(last_id, 0, RelPose::identity(), LinkKind::LoopClosure).unwrap();
        map.relax(&relax);
        let closed_gap = {
            let first = map.experience(0).unwrap().pose;
            let last = map.experience(last_id).unwrap().pose;
            ((first.x - last.x).powi(2) + (first.y - last.y).powi(2)).sqrt()
        };
        assert!(
            closed_gap < 0.4 * drifted_gap,
            "closure should shrink the gap: {drifted_gap} -> {closed_gap}"
        );
    }

    #[test]
    fn all_angles_stay_wrapped_through_relaxation() {
        let relax = RelaxParams::default();
        let mut map = ExperienceMap::new();
        let mut pose = Pose::origin();
        map.on_sample(pose, 0.0, None, &relax).unwrap();
        for k in 1..30 {
            pose = integrate_odometry(&pose, &odo(0.3, -0.1, 2.9));
            let closure = if k % 9 == 0 { Some(0) } else { None };
            map.on_sample(pose, k as f64 * 0.1, closure, &relax).unwrap();
        }
        for e in map.experiences() {
            assert!(e.pose.theta > -PI && e.pose.theta <= PI, "unwrapped theta {}", e.pose.theta);
        }
    }
}
