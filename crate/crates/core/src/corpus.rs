//! Synthetic driving scenes with templated captions and risk scores.
//!
//! Layout: the middle half of the y extent is road (two lanes) at `z = 0`,
//! the rest walkable. Agents are solid boxes translated per frame by a
//! template's motion program. Positions are box minimum corners in voxels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{GridError, GridSpec, SemanticGrid, PEDESTRIAN, ROAD, VEHICLE, WALKABLE};
use crate::text::fnv1a;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("agent leaves the grid at frame {frame}: box min ({x}, {y})")]
    AgentOutOfBounds { frame: usize, x: i64, y: i64 },
    #[error("criticality {0} outside [0, 10]")]
    ScoreOutOfRange(f32),
    #[error("grid too small for scene layout: {0}")]
    GridTooSmall(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = core::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Cruise,
    StopAtLine,
    LeadFollow,
    CutIn,
    TurnLeft,
    TurnRight,
    PedestrianCross,
}

impl Template {
    pub const ALL: [Template; 7] = [
        Template::Cruise,
        Template::StopAtLine,
        Template::LeadFollow,
        Template::CutIn,
        Template::TurnLeft,
        Template::TurnRight,
        Template::PedestrianCross,
    ];

    /// Score range `[lo, hi)` the template's criticality is drawn from.
    pub fn band(self) -> (f32, f32) {
        match self {
            Template::Cruise | Template::LeadFollow => (0.5, 2.5),
            Template::TurnLeft | Template::TurnRight | Template::StopAtLine => (2.5, 5.5),
            Template::CutIn | Template::PedestrianCross => (5.5, 9.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskBin {
    Low,
    Medium,
    High,
}

/// Bins: low `[0, 2.5)`, medium `[2.5, 5.5)`, high `[5.5, 10]`.
pub fn criticality_bin(s: f32) -> Result<RiskBin> {
    if !(0.0..=10.0).contains(&s) {
        return Err(CorpusError::ScoreOutOfRange(s));
    }
    Ok(if s < 2.5 {
        RiskBin::Low
    } else if s < 5.5 {
        RiskBin::Medium
    } else {
        RiskBin::High
    })
}

/// Motion-program parameters, all in voxels and frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioParams {
    /// Longitudinal speed of the ego (voxels per frame).
    pub speed: i64,
    pub start_x: i64,
    /// Gap from the ego's front to the second agent's rear.
    pub gap: i64,
    /// Lateral speed of a merging, turning, or crossing agent.
    pub lateral_speed: i64,
    /// Frame at which the template's event begins.
    pub event_frame: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub template: Template,
    pub params: ScenarioParams,
    pub caption: String,
    pub criticality: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub grid: SemanticGrid,
    pub caption: String,
    pub criticality: f32,
    pub split: Split,
}

/// Scene geometry derived from the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub road: (i64, i64),
    pub lane_width: i64,
    pub vehicle: (i64, i64),
    pub height: i64,
}

impl Layout {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        let (sx, sy, sz) = (spec.size_x as i64, spec.size_y as i64, spec.size_z as i64);
        if sx < 8 || sy < 8 || sz < 3 || (spec.num_classes as u8) <= WALKABLE.max(PEDESTRIAN) + 1 {
            return Err(CorpusError::GridTooSmall(format!("{sx}×{sy}×{sz}, K={}", spec.num_classes)));
        }
        let road = (sy / 4, sy - sy / 4);
        let lane_width = (road.1 - road.0) / 2;
        Ok(Self {
            road,
            lane_width,
            vehicle: ((sx / 8).max(2), (lane_width / 2).max(1)),
            height: 2.min(sz - 1),
        })
    }

    /// Box-minimum y that centers a vehicle in lane 0 (lower) or 1.
    pub fn lane_y(&self, lane: i64) -> i64 {
        self.road.0 + lane * self.lane_width + (self.lane_width - self.vehicle.1) / 2
    }

    pub fn lane_center(&self, lane: i64) -> f64 {
        self.road.0 as f64 + (lane as f64 + 0.5) * self.lane_width as f64 - 0.5
    }
}

/// An agent box at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub class: u8,
    pub x: i64,
    pub y: i64,
    pub len: i64,
    pub width: i64,
}

impl Placement {
    pub fn centroid(&self) -> (f64, f64) {
        (self.x as f64 + (self.len - 1) as f64 / 2.0, self.y as f64 + (self.width - 1) as f64 / 2.0)
    }
}

/// Agent boxes of `template` at frame `f`; the ego comes first.
pub fn motion_program(template: Template, p: &ScenarioParams, layout: &Layout, f: i64) -> Vec<Placement> {
    let (vl, vw) = layout.vehicle;
    let car = |x, y| Placement { class: VEHICLE, x, y, len: vl, width: vw };
    let ego_x = p.start_x + p.speed * f;
    let lane0 = layout.lane_y(0);
    let lane1 = layout.lane_y(1);
    let since = (f - p.event_frame).max(0);
    match template {
        Template::Cruise => alloc::vec![car(ego_x, lane0)],
        Template::StopAtLine => alloc::vec![car(p.start_x + p.speed * f.min(p.event_frame), lane0)],
        Template::LeadFollow => alloc::vec![car(ego_x, lane0), car(ego_x + vl + p.gap, lane0)],
        Template::CutIn => {
            let y = (lane1 - p.lateral_speed * since).max(lane0);
            alloc::vec![car(ego_x, lane0), car(ego_x + vl + p.gap, y)]
        }
        Template::TurnLeft | Template::TurnRight => {
            let x = p.start_x + p.speed * f.min(p.event_frame);
            let dy = p.lateral_speed * since;
            let y = if template == Template::TurnLeft { lane0 + dy } else { lane0 - dy };
            alloc::vec![car(x, y)]
        }
        Template::PedestrianCross => {
            let ped_y = layout.road.0 - 1 + p.lateral_speed * f;
            let ped = Placement { class: PEDESTRIAN, x: p.start_x + vl + p.gap, y: ped_y, len: 1, width: 1 };
            alloc::vec![car(p.start_x + p.speed * f.min(p.event_frame), lane0), ped]
        }
    }
}

fn pace(speed: i64) -> &'static str {
    match speed {
        0 => "slowly",
        1 => "steadily",
        _ => "quickly",
    }
}

/// Caption as a pure function of template and parameters.
pub fn caption(template: Template, p: &ScenarioParams) -> String {
    match template {
        Template::Cruise if p.speed == 0 => String::from("the ego vehicle waits in its lane, no other traffic"),
        Template::Cruise => format!("the ego vehicle cruises {} along the road, no other traffic", pace(p.speed)),
        Template::StopAtLine => format!("the ego vehicle drives {} and stops at the line", pace(p.speed)),
        Template::LeadFollow => format!(
            "the ego vehicle follows a lead car {}, no other traffic",
            if p.gap <= 2 { "closely" } else { "at a safe distance" }
        ),
        Template::CutIn => format!(
            "a car from the adjacent lane cuts in {} ahead of the ego vehicle",
            if p.lateral_speed >= 2 { "sharply" } else { "gently" }
        ),
        Template::TurnLeft => format!("the ego vehicle turns left {}", pace(p.speed)),
        Template::TurnRight => format!("the ego vehicle turns right {}", pace(p.speed)),
        Template::PedestrianCross => format!(
            "a pedestrian crosses the road {} the ego vehicle",
            if p.gap <= 2 { "just ahead of" } else { "in front of" }
        ),
    }
}

fn in_bounds(b: &Placement, spec: &GridSpec) -> bool {
    b.x >= 0 && b.y >= 0 && b.x + b.len <= spec.size_x as i64 && b.y + b.width <= spec.size_y as i64
}

fn fits(template: Template, p: &ScenarioParams, layout: &Layout, spec: &GridSpec, frames: usize) -> bool {
    (0..frames as i64).all(|f| motion_program(template, p, layout, f).iter().all(|b| in_bounds(b, spec)))
}

impl ScenarioSpec {
    /// Draws parameters that keep every agent inside the grid for all frames.
    pub fn sample<R: Rng + ?Sized>(template: Template, spec: &GridSpec, frames: usize, rng: &mut R) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let last = frames.max(1) as i64 - 1;
        for _ in 0..256 {
            let speed = rng.random_range(0..=2i64);
            let mut p = ScenarioParams {
                speed,
                start_x: 0,
                gap: rng.random_range(1..=4i64),
                lateral_speed: rng.random_range(1..=2i64),
                event_frame: rng.random_range(0..=last.max(1) / 2 + 1),
            };
            if template == Template::Cruise && rng.random_range(0..4) == 0 {
                p.speed = 0;
            }
            if template == Template::PedestrianCross {
                // the pedestrian must clear the road within the clip
                p.lateral_speed = rng.random_range(1..=3i64);
            }
            let room = spec.size_x as i64 - layout.vehicle.0;
            p.start_x = rng.random_range(0..=room.max(0));
            if fits(template, &p, &layout, spec, frames) {
                let (lo, hi) = template.band();
                let criticality = rng.random_range(lo..hi);
                return Ok(Self {
                    template,
                    caption: caption(template, &p),
                    params: p,
                    criticality,
                });
            }
        }
        Err(CorpusError::GridTooSmall(format!("no {template:?} scene fits {frames} frames")))
    }
}

fn paint_layout(grid: &mut SemanticGrid, layout: &Layout) {
    let spec = grid.spec().clone();
    for f in 0..grid.frames() {
        for x in 0..spec.size_x {
            for y in 0..spec.size_y {
                let yi = y as i64;
                let id = if yi >= layout.road.0 && yi < layout.road.1 { ROAD } else { WALKABLE };
                grid.set(f, x, y, 0, id);
            }
        }
    }
}

fn paint_box(grid: &mut SemanticGrid, f: usize, b: &Placement, height: i64) {
    for x in b.x..b.x + b.len {
        for y in b.y..b.y + b.width {
            for z in 1..=height {
                grid.set(f, x as usize, y as usize, z as usize, b.class);
            }
        }
    }
}

/// Renders boxes over the layout.
pub fn render_scene(
    spec: &GridSpec,
    frames: usize,
    boxes: impl Fn(i64) -> Vec<Placement>,
) -> Result<SemanticGrid> {
    let layout = Layout::new(spec)?;
    let mut grid = SemanticGrid::free(spec.clone(), frames)?;
    paint_layout(&mut grid, &layout);
    for f in 0..frames {
        for b in boxes(f as i64) {
            if !in_bounds(&b, spec) {
                return Err(CorpusError::AgentOutOfBounds { frame: f, x: b.x, y: b.y });
            }
            paint_box(&mut grid, f, &b, layout.height);
        }
    }
    Ok(grid)
}

/// Deterministic scene for `scenario`; the split defaults to train.
pub fn gen_scene(scenario: &ScenarioSpec, spec: &GridSpec, frames: usize) -> Result<CorpusRecord> {
    if !(0.0..=10.0).contains(&scenario.criticality) {
        return Err(CorpusError::ScoreOutOfRange(scenario.criticality));
    }
    let layout = Layout::new(spec)?;
    let grid = render_scene(spec, frames, |f| motion_program(scenario.template, &scenario.params, &layout, f))?;
    Ok(CorpusRecord {
        grid,
        caption: scenario.caption.clone(),
        criticality: scenario.criticality,
        split: Split::Train,
    })
}

/// Seed of record `i` in a corpus drawn with `seed`.
pub fn record_seed(seed: u64, i: usize) -> u64 {
    fnv1a(&(i as u64).to_le_bytes(), seed)
}

/// Exactly `round(n / 10)` validation records, chosen by smallest index hash.
pub fn val_indices(n: usize, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv1a(b"split", record_seed(seed, i)), i));
    let n_val = (n + 5) / 10;
    let mut val = alloc::vec![false; n];
    for &i in &order[..n_val] {
        val[i] = true;
    }
    val
}

/// `n` records cycling through all templates in equal proportion.
pub fn make_dataset(n: usize, spec: &GridSpec, frames: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    let val = val_indices(n, seed);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, i));
            let template = Template::ALL[i % Template::ALL.len()];
            let scenario = ScenarioSpec::sample(template, spec, frames, &mut rng)?;
            let mut rec = gen_scene(&scenario, spec, frames)?;
            rec.split = if val[i] { Split::Val } else { Split::Train };
            Ok(rec)
        })
        .collect()
}

pub const MOVES_POS_X: &str = "a vehicle moves forward along the positive x axis";
pub const MOVES_NEG_X: &str = "a vehicle moves backward along the negative x axis";

/// Box size of the single vehicle in direction scenes.
pub fn direction_box(spec: &GridSpec) -> (i64, i64) {
    ((spec.size_x as i64 / 5).max(2), (spec.size_y as i64 / 8).max(2))
}

/// One vehicle moving along ±x at 1–2 voxels per frame in a random lane.
pub fn direction_scene<R: Rng + ?Sized>(positive: bool, spec: &GridSpec, frames: usize, rng: &mut R) -> Result<CorpusRecord> {
    let layout = Layout::new(spec)?;
    let (len, width) = direction_box(spec);
    let last = frames.max(1) as i64 - 1;
    let mut speed = rng.random_range(1..=2i64);
    while speed > 0 && len + speed * last > spec.size_x as i64 {
        speed -= 1;
    }
    if speed == 0 {
        return Err(CorpusError::GridTooSmall(format!("no room for motion over {frames} frames")));
    }
    let travel = speed * last;
    let x0 = rng.random_range(0..=spec.size_x as i64 - len - travel);
    let y = rng.random_range(layout.road.0..=layout.road.1 - width);
    let grid = render_scene(spec, frames, |f| {
        let x = if positive { x0 + speed * f } else { x0 + travel - speed * f };
        alloc::vec![Placement { class: VEHICLE, x, y, len, width }]
    })?;
    Ok(CorpusRecord {
        grid,
        caption: String::from(if positive { MOVES_POS_X } else { MOVES_NEG_X }),
        criticality: 1.0,
        split: Split::Train,
    })
}

/// Alternating +x / −x scenes.
pub fn direction_corpus(n: usize, spec: &GridSpec, frames: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    let val = val_indices(n, seed);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, i));
            let mut rec = direction_scene(i % 2 == 0, spec, frames, &mut rng)?;
            rec.split = if val[i] { Split::Val } else { Split::Train };
            Ok(rec)
        })
        .collect()
}

/// Mean voxel position `(x, y)` of `class` in frame `f`, or `None` if absent.
pub fn class_centroid(grid: &SemanticGrid, f: usize, class: u8) -> Option<(f64, f64)> {
    let spec = grid.spec();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for x in 0..spec.size_x {
        for y in 0..spec.size_y {
            for z in 0..spec.size_z {
                if grid.get(f, x, y, z) == class {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    PosX,
    NegX,
    Unknown,
}

/// Sign of the least-squares slope of the vehicle x-centroid over frames.
///
/// Frames without vehicle voxels are skipped; fewer than two usable frames
/// or a slope below `min_slope` voxels per frame gives `Unknown`.
pub fn motion_direction(grid: &SemanticGrid, min_slope: f64) -> Direction {
    let pts: Vec<(f64, f64)> = (0..grid.frames())
        .filter_map(|f| class_centroid(grid, f, VEHICLE).map(|(x, _)| (f as f64, x)))
        .collect();
    if pts.len() < 2 {
        return Direction::Unknown;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mx)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let slope = cov / var;
    if slope >= min_slope {
        Direction::PosX
    } else if slope <= -min_slope {
        Direction::NegX
    } else {
        Direction::Unknown
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bins_follow_the_edges() {
        assert_eq!(criticality_bin(1.0).unwrap(), RiskBin::Low);
        assert_eq!(criticality_bin(4.0).unwrap(), RiskBin::Medium);
        assert_eq!(criticality_bin(7.0).unwrap(), RiskBin::High);
        assert_eq!(criticality_bin(2.5).unwrap(), RiskBin::Medium);
        assert_eq!(criticality_bin(10.0).unwrap(), RiskBin::High);
        assert_eq!(criticality_bin(10.5), Err(CorpusError::ScoreOutOfRange(10.5)));
        assert!(criticality_bin(-0.1).is_err());
    }

    #[test]
    fn template_bands_land_in_their_bins() {
        let spec = GridSpec::desk();
        for t in Template::ALL {
            for s in 0..20 {
                let sc = ScenarioSpec::sample(t, &spec, 8, &mut rng(s)).unwrap();
                let want = criticality_bin(t.band().0).unwrap();
                assert_eq!(criticality_bin(sc.criticality).unwrap(), want, "{t:?}");
            }
        }
        assert_eq!(criticality_bin(Template::Cruise.band().0).unwrap(), RiskBin::Low);
        assert_eq!(criticality_bin(Template::PedestrianCross.band().0).unwrap(), RiskBin::High);
    }

    #[test]
    fn static_cruise_is_constant() {
        let spec = GridSpec::desk();
        let sc = ScenarioSpec {
            template: Template::Cruise,
            params: ScenarioParams { speed: 0, start_x: 5, gap: 1, lateral_speed: 1, event_frame: 0 },
            caption: caption(Template::Cruise, &ScenarioParams { speed: 0, start_x: 5, gap: 1, lateral_speed: 1, event_frame: 0 }),
            criticality: 1.0,
        };
        let rec = gen_scene(&sc, &spec, 8).unwrap();
        for f in 1..8 {
            assert_eq!(rec.grid.frame(f), rec.grid.frame(0));
        }
        assert!(rec.grid.classes_present().contains(&VEHICLE));
        assert_eq!(rec.caption, "the ego vehicle waits in its lane, no other traffic");
    }

    #[test]
    fn cut_in_crosses_lane_center_when_predicted() {
        let spec = GridSpec::desk();
        let layout = Layout::new(&spec).unwrap();
        let p = ScenarioParams { speed: 1, start_x: 2, gap: 2, lateral_speed: 2, event_frame: 2 };
        let sc = ScenarioSpec {
            template: Template::CutIn,
            params: p,
            caption: caption(Template::CutIn, &p),
            criticality: 7.0,
        };
        let rec = gen_scene(&sc, &spec, 8).unwrap();
        // agent box min y: lane1 − v·(f − e); its centroid passes lane 0's
        // center once lane1 − v·(f − e) + (w−1)/2 < center
        let (l0, l1) = (layout.lane_y(0), layout.lane_y(1));
        let w = layout.vehicle.1;
        let center = layout.lane_center(0);
        let y_of = |f: i64| ((l1 - p.lateral_speed * (f - p.event_frame).max(0)).max(l0)) as f64 + (w - 1) as f64 / 2.0;
        let cross = (0..8).find(|&f| y_of(f) <= center).unwrap();
        assert!(cross > 0);
        // measured from the grid: agent voxels ahead of the ego
        let ahead = |f: usize| {
            let ego_front = (p.start_x + p.speed * f as i64 + layout.vehicle.0) as usize;
            let (mut s, mut n) = (0.0, 0);
            for x in ego_front..spec.size_x {
                for y in 0..spec.size_y {
                    if rec.grid.get(f, x, y, 1) == VEHICLE {
                        s += y as f64;
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        for f in 0..8usize {
            assert!((ahead(f) - y_of(f as i64)).abs() < 1e-9);
        }
        assert!(ahead(cross as usize - 1) > center && ahead(cross as usize) <= center);
    }

    #[test]
    fn datasets_are_reproducible_and_split() {
        let spec = GridSpec::desk();
        let a = make_dataset(100, &spec, 8, 3).unwrap();
        let b = make_dataset(100, &spec, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|r| r.split == Split::Val).count(), 10);
        for r in &a {
            r.grid.spec().validate().unwrap();
            SemanticGrid::new(r.grid.spec().clone(), r.grid.frames(), r.grid.ids().to_vec()).unwrap();
            assert!(!r.caption.is_empty());
            assert!((0.0..=10.0).contains(&r.criticality));
        }
        let c = make_dataset(100, &spec, 8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn caption_grammar_is_small() {
        let spec = GridSpec::desk();
        let forms: BTreeSet<String> = make_dataset(700, &spec, 8, 0).unwrap().into_iter().map(|r| r.caption).collect();
        assert!(forms.len() <= 64 && forms.len() >= 7);
    }

    #[test]
    fn direction_scenes_have_the_stated_motion() {
        let spec = GridSpec::desk();
        let corpus = direction_corpus(64, &spec, 8, 1).unwrap();
        for (i, r) in corpus.iter().enumerate() {
            let want = if i % 2 == 0 { Direction::PosX } else { Direction::NegX };
            assert_eq!(motion_direction(&r.grid, 0.25), want);
            assert_eq!(r.caption, if i % 2 == 0 { MOVES_POS_X } else { MOVES_NEG_X });
        }
    }

    #[test]
    fn unit_speed_vehicle_has_unit_centroid_velocity() {
        let spec = GridSpec::desk();
        let grid = render_scene(&spec, 6, |f| {
            alloc::vec![Placement { class: VEHICLE, x: 3 + f, y: 10, len: 4, width: 3 }]
        })
        .unwrap();
        for f in 1..6 {
            let (a, b) = (class_centroid(&grid, f - 1, VEHICLE).unwrap(), class_centroid(&grid, f, VEHICLE).unwrap());
            assert_eq!((b.0 - a.0, b.1 - a.1), (1.0, 0.0));
        }
        let empty = SemanticGrid::free(spec, 2).unwrap();
        assert_eq!(motion_direction(&empty, 0.1), Direction::Unknown);
    }

    #[test]
    fn out_of_bounds_agents_are_rejected() {
        let spec = GridSpec::desk();
        let err = render_scene(&spec, 3, |f| alloc::vec![Placement { class: VEHICLE, x: 28 + f, y: 10, len: 4, width: 2 }]);
        assert_eq!(err, Err(CorpusError::AgentOutOfBounds { frame: 1, x: 29, y: 10 }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn captions_are_functions_of_params(seed in 0u64..5000, t in 0usize..7) {
            let spec = GridSpec::desk();
            let sc = ScenarioSpec::sample(Template::ALL[t], &spec, 8, &mut rng(seed)).unwrap();
            prop_assert_eq!(&sc.caption, &caption(sc.template, &sc.params));
            let rec = gen_scene(&sc, &spec, 8).unwrap();
            prop_assert_eq!(rec, gen_scene(&sc, &spec, 8).unwrap());
        }
    }
}
