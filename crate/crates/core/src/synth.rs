//! Synthetic chest radiographs with planted chronic-TB findings, their
//! annotations, templated clinical notes and reference reports.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::config::N_PATHOLOGIES;
use crate::error::{Error, Result};
use crate::vision::ImageGrid;

/// Fraction of a patch's pixels a finding must cover to enter its mask.
pub const COVERAGE_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PathologyLabel {
    Fibrosis = 0,
    CalcifiedGranuloma = 1,
    Bronchiectasis = 2,
    PleuralThickening = 3,
    Cavity = 4,
    CpAngleBlunting = 5,
}

impl PathologyLabel {
    pub const ALL: [PathologyLabel; N_PATHOLOGIES] = [
        PathologyLabel::Fibrosis,
        PathologyLabel::CalcifiedGranuloma,
        PathologyLabel::Bronchiectasis,
        PathologyLabel::PleuralThickening,
        PathologyLabel::Cavity,
        PathologyLabel::CpAngleBlunting,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn key(self) -> &'static str {
        match self {
            PathologyLabel::Fibrosis => "fibrosis",
            PathologyLabel::CalcifiedGranuloma => "calcified_granuloma",
            PathologyLabel::Bronchiectasis => "bronchiectasis",
            PathologyLabel::PleuralThickening => "pleural_thickening",
            PathologyLabel::Cavity => "cavity",
            PathologyLabel::CpAngleBlunting => "cp_angle_blunting",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.key() == key)
    }

    /// Phrase used in reports and questions.
    pub fn phrase(self) -> &'static str {
        match self {
            PathologyLabel::Fibrosis => "fibrosis",
            PathologyLabel::CalcifiedGranuloma => "calcified granuloma",
            PathologyLabel::Bronchiectasis => "bronchiectasis",
            PathologyLabel::PleuralThickening => "pleural thickening",
            PathologyLabel::Cavity => "cavity",
            PathologyLabel::CpAngleBlunting => "cp angle blunting",
        }
    }

    /// Row label in metric tables.
    pub fn title(self) -> &'static str {
        match self {
            PathologyLabel::Fibrosis => "Fibrosis",
            PathologyLabel::CalcifiedGranuloma => "Calcified Granulomas",
            PathologyLabel::Bronchiectasis => "Bronchiectasis",
            PathologyLabel::PleuralThickening => "Pleural Thickening",
            PathologyLabel::Cavity => "Cavity",
            PathologyLabel::CpAngleBlunting => "CP Angle Blunting",
        }
    }
}

impl From<PathologyLabel> for u8 {
    fn from(l: PathologyLabel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for PathologyLabel {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Self::from_code(v as usize).ok_or_else(|| format!("pathology code {v} outside 0..{N_PATHOLOGIES}"))
    }
}

impl fmt::Display for PathologyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Words that name a pathology; notes must never contain them.
pub const PATHOLOGY_LEXICON: &[&str] = &[
    "fibrosis",
    "fibrotic",
    "calcified",
    "granuloma",
    "granulomas",
    "bronchiectasis",
    "pleural",
    "thickening",
    "cavity",
    "cavitary",
    "cp",
    "angle",
    "blunting",
    "costophrenic",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Geometry of one planted primitive, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Bright filled disc.
    Disc { cy: f64, cx: f64, radius: f64 },
    /// Bright wall around a dark core.
    Ring { cy: f64, cx: f64, outer: f64, inner: f64 },
    /// Capsule between two points with bright walls.
    Tube { y0: f64, x0: f64, y1: f64, x1: f64, half_width: f64 },
    /// Rotated rectangle filled with streaks parallel to its long axis.
    Band { cy: f64, cx: f64, half_length: f64, half_width: f64, angle: f64 },
    /// Vertical strip along a lateral image border, rows `y0..y1`.
    Strip { side: Side, y0: f64, y1: f64, width: f64 },
    /// Right triangle filling a bottom corner, legs of length `size`.
    Wedge { side: Side, size: f64 },
}

impl Shape {
    fn kind(&self) -> &'static str {
        match self {
            Shape::Disc { .. } => "disc",
            Shape::Ring { .. } => "ring",
            Shape::Tube { .. } => "tube",
            Shape::Band { .. } => "band",
            Shape::Strip { .. } => "strip",
            Shape::Wedge { .. } => "wedge",
        }
    }

    fn band_corners(cy: f64, cx: f64, hl: f64, hw: f64, angle: f64) -> [(f64, f64); 4] {
        let (s, c) = angle.sin_cos();
        [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].map(|(a, b)| {
            let (u, w) = (a * hl, b * hw);
            (cy + u * s + w * c, cx + u * c - w * s)
        })
    }

    fn check(&self, h: f64, w: f64) -> Result<()> {
        let inside = |y: f64, x: f64| (0.0..=h).contains(&y) && (0.0..=w).contains(&x);
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let ok = match *self {
            Shape::Disc { cy, cx, radius } => {
                positive(radius) && inside(cy - radius, cx - radius) && inside(cy + radius, cx + radius)
            }
            Shape::Ring { cy, cx, outer, inner } => {
                positive(inner) && inner < outer && inside(cy - outer, cx - outer) && inside(cy + outer, cx + outer)
            }
            Shape::Tube { y0, x0, y1, x1, half_width: r } => {
                positive(r) && [(y0, x0), (y1, x1)].iter().all(|&(y, x)| inside(y - r, x - r) && inside(y + r, x + r))
            }
            Shape::Band { cy, cx, half_length, half_width, angle } => {
                positive(half_length)
                    && positive(half_width)
                    && angle.is_finite()
                    && Self::band_corners(cy, cx, half_length, half_width, angle)
                        .iter()
                        .all(|&(y, x)| inside(y, x))
            }
            Shape::Strip { y0, y1, width, .. } => positive(width) && width <= w && 0.0 <= y0 && y0 < y1 && y1 <= h,
            Shape::Wedge { size, .. } => positive(size) && size <= h.min(w),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("{} placement {self:?} outside the {h}x{w} image", self.kind())))
        }
    }

    /// Whether the pixel centre `(y, x)` lies inside the primitive.
    fn covers(&self, y: f64, x: f64, h: f64, w: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, radius } => (y - cy).hypot(x - cx) <= radius,
            Shape::Ring { cy, cx, outer, .. } => (y - cy).hypot(x - cx) <= outer,
            Shape::Tube { y0, x0, y1, x1, half_width } => segment_distance(y, x, y0, x0, y1, x1) <= half_width,
            Shape::Band { cy, cx, half_length, half_width, angle } => {
                let (u, v) = band_coords(y, x, cy, cx, angle);
                u.abs() <= half_length && v.abs() <= half_width
            }
            Shape::Strip { side, y0, y1, width } => {
                let lateral = match side {
                    Side::Left => x < width,
                    Side::Right => x > w - width,
                };
                lateral && y >= y0 && y < y1
            }
            Shape::Wedge { side, size } => {
                let from_side = match side {
                    Side::Left => x,
                    Side::Right => w - x,
                };
                from_side + (h - y) < size
            }
        }
    }

    fn paint(&self, v: f64, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Disc { .. } => v + 0.5,
            Shape::Ring { cy, cx, inner, .. } => {
                if (y - cy).hypot(x - cx) <= inner {
                    v * 0.3
                } else {
                    v + 0.45
                }
            }
            Shape::Tube { y0, x0, y1, x1, half_width } => {
                if segment_distance(y, x, y0, x0, y1, x1) >= 0.5 * half_width {
                    v + 0.4
                } else {
                    v + 0.1
                }
            }
            Shape::Band { cy, cx, angle, .. } => {
                let (_, across) = band_coords(y, x, cy, cx, angle);
                v + 0.3 * (0.5 + 0.5 * (2.0 * PI * across / 3.0).sin())
            }
            Shape::Strip { .. } => v + 0.35,
            Shape::Wedge { .. } => 0.8,
        }
    }
}

fn segment_distance(y: f64, x: f64, y0: f64, x0: f64, y1: f64, x1: f64) -> f64 {
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((y - y0) * dy + (x - x0) * dx) / len2).clamp(0.0, 1.0)
    };
    (y - (y0 + t * dy)).hypot(x - (x0 + t * dx))
}

/// Coordinates along and across a band rotated by `angle`.
fn band_coords(y: f64, x: f64, cy: f64, cx: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (dy, dx) = (y - cy, x - cx);
    (dx * c + dy * s, -dx * s + dy * c)
}

/// One primitive planted for a pathology.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub label: PathologyLabel,
    pub shape: Shape,
}

impl Placement {
    fn shape_matches(&self) -> bool {
        matches!(
            (self.label, self.shape),
            (PathologyLabel::Fibrosis, Shape::Band { .. })
                | (PathologyLabel::CalcifiedGranuloma, Shape::Disc { .. })
                | (PathologyLabel::Bronchiectasis, Shape::Tube { .. })
                | (PathologyLabel::PleuralThickening, Shape::Strip { .. })
                | (PathologyLabel::Cavity, Shape::Ring { .. })
                | (PathologyLabel::CpAngleBlunting, Shape::Wedge { .. })
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeDescriptor {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Focal,
    Multifocal,
    Diffuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Progression {
    New,
    Stable,
    Improving,
    Progressing,
}

impl SizeDescriptor {
    pub fn word(self) -> &'static str {
        match self {
            SizeDescriptor::Small => "small",
            SizeDescriptor::Medium => "medium",
            SizeDescriptor::Large => "large",
        }
    }
}

impl Distribution {
    pub fn word(self) -> &'static str {
        match self {
            Distribution::Focal => "focal",
            Distribution::Multifocal => "multifocal",
            Distribution::Diffuse => "diffuse",
        }
    }
}

/// Descriptors of one present pathology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub label: PathologyLabel,
    pub size: SizeDescriptor,
    pub distribution: Distribution,
    pub progression: Progression,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalHistory {
    pub prior_tb: bool,
    pub comorbidities: Vec<String>,
    /// Empty when there is no treatment record.
    pub treatment: String,
}

impl ClinicalHistory {
    pub fn is_empty(&self) -> bool {
        !self.prior_tb && self.comorbidities.is_empty() && self.treatment.is_empty()
    }
}

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    /// Indexed by pathology code.
    pub presence: [bool; N_PATHOLOGIES],
    /// Sorted patch indices per pathology code.
    pub masks: [Vec<usize>; N_PATHOLOGIES],
    /// One entry per present pathology, in code order.
    pub findings: Vec<Finding>,
    pub history: ClinicalHistory,
}

impl AnnotationRecord {
    pub fn mask(&self, label: PathologyLabel) -> &[usize] {
        &self.masks[label.code()]
    }

    pub fn is_present(&self, label: PathologyLabel) -> bool {
        self.presence[label.code()]
    }

    /// Checks that presence flags and masks agree and masks are sorted and in range.
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        for label in PathologyLabel::ALL {
            let m = self.mask(label);
            if self.is_present(label) == m.is_empty() {
                return Err(Error::Dataset(format!(
                    "record {}: presence of {label} disagrees with its mask",
                    self.id
                )));
            }
            if m.windows(2).any(|w| w[0] >= w[1]) || m.iter().any(|&p| p >= n_patches) {
                return Err(Error::Dataset(format!("record {}: malformed {label} mask", self.id)));
            }
        }
        let listed: Vec<_> = self.findings.iter().map(|f| f.label).collect();
        let present: Vec<_> = PathologyLabel::ALL.into_iter().filter(|&l| self.is_present(l)).collect();
        if listed != present {
            return Err(Error::Dataset(format!("record {}: findings do not match presence flags", self.id)));
        }
        Ok(())
    }
}

/// Rendering parameters shared by every image of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
}

impl Canvas {
    fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

/// Renders `placements` over a lung-field background and derives the
/// annotation (history left empty, progression `New`).
///
/// A patch joins a pathology's mask when at least [`COVERAGE_THRESHOLD`] of
/// its pixel centres fall inside that pathology's primitives. Primitives of
/// the same label merge; a primitive that qualifies no patch on its own is
/// rejected so that every present pathology has a nonempty mask.
pub fn generate_image(placements: &[Placement], canvas: Canvas, seed: u64) -> Result<(ImageGrid, AnnotationRecord)> {
    let Canvas { height, width, patch_size: p, noise } = canvas;
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::contract(format!(
            "image {height}x{width} (HxW) is not divisible into {p}x{p} patches"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::contract(format!("noise level {noise} must be finite and non-negative")));
    }
    let (hf, wf) = (height as f64, width as f64);
    for pl in placements {
        if !pl.shape_matches() {
            return Err(Error::contract(format!(
                "{} is drawn as a different primitive than {}",
                pl.label,
                pl.shape.kind()
            )));
        }
        pl.shape.check(hf, wf)?;
    }

    let mut pixels = Vec::with_capacity(height * width);
    let mut covered = vec![[false; N_PATHOLOGIES]; height * width];
    for y in 0..height {
        for x in 0..width {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = background(cy / hf, cx / wf);
            for pl in placements {
                if pl.shape.covers(cy, cx, hf, wf) {
                    v = pl.shape.paint(v, cy, cx);
                    covered[y * width + x][pl.label.code()] = true;
                }
            }
            pixels.push(v);
        }
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, noise).expect("finite noise");
        for v in &mut pixels {
            *v += dist.sample(&mut rng);
        }
    }
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }

    let (gr, gc) = canvas.grid();
    let patch_area = (p * p) as f64;
    let coverage = |pred: &dyn Fn(usize, usize) -> bool| -> Vec<usize> {
        let mut mask = Vec::new();
        for r in 0..gr {
            for c in 0..gc {
                let mut n = 0usize;
                for y in r * p..(r + 1) * p {
                    for x in c * p..(c + 1) * p {
                        n += pred(y, x) as usize;
                    }
                }
                if n as f64 >= COVERAGE_THRESHOLD * patch_area {
                    mask.push(r * gc + c);
                }
            }
        }
        mask
    };
    for pl in placements {
        let own = coverage(&|y, x| pl.shape.covers(y as f64 + 0.5, x as f64 + 0.5, hf, wf));
        if own.is_empty() {
            return Err(Error::contract(format!(
                "{} placement {:?} covers no patch at the {:.0}% threshold",
                pl.label,
                pl.shape,
                COVERAGE_THRESHOLD * 100.0
            )));
        }
    }

    let mut presence = [false; N_PATHOLOGIES];
    let mut masks: [Vec<usize>; N_PATHOLOGIES] = Default::default();
    let mut findings = Vec::new();
    let n_patches = gr * gc;
    for label in PathologyLabel::ALL {
        let count = placements.iter().filter(|pl| pl.label == label).count();
        if count == 0 {
            continue;
        }
        let k = label.code();
        let mask = coverage(&|y, x| covered[y * width + x][k]);
        let area = covered.iter().filter(|c| c[k]).count() as f64 / patch_area;
        let size = if area < 0.8 {
            SizeDescriptor::Small
        } else if area < 2.0 {
            SizeDescriptor::Medium
        } else {
            SizeDescriptor::Large
        };
        let distribution = if count >= 2 {
            Distribution::Multifocal
        } else if mask.len() * 4 >= n_patches {
            Distribution::Diffuse
        } else {
            Distribution::Focal
        };
        presence[k] = true;
        masks[k] = mask;
        findings.push(Finding {
            label,
            size,
            distribution,
            progression: Progression::New,
        });
    }
    let image = ImageGrid::new(height, width, pixels)?;
    let record = AnnotationRecord {
        id: String::new(),
        presence,
        masks,
        findings,
        history: ClinicalHistory::default(),
    };
    Ok((image, record))
}

/// Darker lung fields on a brighter mediastinum, brightening toward the base.
/// Coordinates are normalized to `[0, 1]`.
fn background(y: f64, x: f64) -> f64 {
    let lung = |cx: f64| {
        let d = ((x - cx) / 0.2).powi(2) + ((y - 0.5) / 0.38).powi(2);
        (1.0 - d).max(0.0)
    };
    0.3 + 0.15 * y - 0.12 * (lung(0.27) + lung(0.73)).min(1.0)
}

/// Samples primitives for `label` that avoid the patches in `occupied`
/// where the primitive is a compact lesion.
pub fn sample_placements(
    label: PathologyLabel,
    canvas: Canvas,
    occupied: &mut BTreeSet<usize>,
    rng: &mut impl Rng,
) -> Vec<Placement> {
    let p = canvas.patch_size as f64;
    let (gr, gc) = canvas.grid();
    let (h, w) = (canvas.height as f64, canvas.width as f64);
    let free_patch = |rng: &mut dyn rand::RngCore, occupied: &mut BTreeSet<usize>| -> Option<(usize, usize)> {
        let free: Vec<usize> = (0..gr * gc).filter(|i| !occupied.contains(i)).collect();
        let &i = free.choose(rng)?;
        occupied.insert(i);
        Some((i / gc, i % gc))
    };
    let centre = |r: usize, c: usize| ((r as f64 + 0.5) * p, (c as f64 + 0.5) * p);
    let jitter = |rng: &mut dyn rand::RngCore, amount: f64| rng.random_range(-amount..=amount);
    let mut out = Vec::new();
    match label {
        PathologyLabel::CalcifiedGranuloma | PathologyLabel::Cavity => {
            let extra = if label == PathologyLabel::Cavity { 0.2 } else { 0.3 };
            let count = if rng.random_bool(extra) { 2 } else { 1 };
            for _ in 0..count {
                let Some((r, c)) = free_patch(rng, occupied) else { break };
                let (y, x) = centre(r, c);
                let radius = if label == PathologyLabel::Cavity {
                    rng.random_range(0.42 * p..=0.5 * p)
                } else {
                    rng.random_range(0.375 * p..=0.5 * p)
                };
                let cy = (y + jitter(rng, 0.18 * p)).clamp(radius, h - radius);
                let cx = (x + jitter(rng, 0.18 * p)).clamp(radius, w - radius);
                let shape = if label == PathologyLabel::Cavity {
                    Shape::Ring { cy, cx, outer: radius, inner: 0.55 * radius }
                } else {
                    Shape::Disc { cy, cx, radius }
                };
                out.push(Placement { label, shape });
            }
        }
        PathologyLabel::Bronchiectasis => {
            for _ in 0..8 {
                let free: Vec<usize> = (0..gr * gc).filter(|i| !occupied.contains(i)).collect();
                let Some(&a) = free.choose(rng) else { break };
                let (r, c) = (a / gc, a % gc);
                let mut nbrs = Vec::new();
                if r + 1 < gr {
                    nbrs.push(a + gc);
                }
                if r > 0 {
                    nbrs.push(a - gc);
                }
                if c + 1 < gc {
                    nbrs.push(a + 1);
                }
                if c > 0 {
                    nbrs.push(a - 1);
                }
                nbrs.retain(|n| !occupied.contains(n));
                let Some(&b) = nbrs.choose(rng) else { continue };
                occupied.insert(a);
                occupied.insert(b);
                let (y0, x0) = centre(r, c);
                let (y1, x1) = centre(b / gc, b % gc);
                let half_width = rng.random_range(0.28 * p..=0.34 * p);
                let j = 0.1 * p;
                out.push(Placement {
                    label,
                    shape: Shape::Tube {
                        y0: y0 + jitter(rng, j),
                        x0: x0 + jitter(rng, j),
                        y1: y1 + jitter(rng, j),
                        x1: x1 + jitter(rng, j),
                        half_width,
                    },
                });
                break;
            }
        }
        PathologyLabel::Fibrosis => {
            let half_length = rng.random_range(0.8 * p..=1.3 * p);
            let half_width = rng.random_range(0.4 * p..=0.55 * p);
            let angle = rng.random_range(-0.5..=0.5);
            let reach = half_length + half_width;
            let cy = rng.random_range(reach.min(h / 2.0)..=(h - reach).max(h / 2.0));
            let cx = rng.random_range(reach.min(w / 2.0)..=(w - reach).max(w / 2.0));
            out.push(Placement {
                label,
                shape: Shape::Band { cy, cx, half_length, half_width, angle },
            });
        }
        PathologyLabel::PleuralThickening => {
            let sides: &[Side] = if rng.random_bool(0.2) { &[Side::Left, Side::Right] } else { &[Side::Left] };
            let flip = rng.random_bool(0.5);
            for &side in sides {
                let side = match (side, flip) {
                    (Side::Left, true) => Side::Right,
                    (Side::Right, true) => Side::Left,
                    (s, false) => s,
                };
                let span = if gr >= 3 { rng.random_range(2..=3.min(gr)) } else { gr };
                let start = rng.random_range(0..=gr - span);
                out.push(Placement {
                    label,
                    shape: Shape::Strip {
                        side,
                        y0: start as f64 * p,
                        y1: (start + span) as f64 * p,
                        width: rng.random_range(0.4 * p..=0.6 * p),
                    },
                });
            }
        }
        PathologyLabel::CpAngleBlunting => {
            let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            out.push(Placement {
                label,
                shape: Shape::Wedge {
                    side,
                    size: rng.random_range(1.0 * p..=1.5 * p).min(h.min(w)),
                },
            });
        }
    }
    out
}

const COMORBIDITIES: &[&str] = &["diabetes", "hiv", "copd", "hypertension", "smoking", "malnutrition"];
const TREATMENTS: &[&str] = &[
    "completed six-month regimen",
    "defaulted on treatment",
    "currently on second-line therapy",
    "completed retreatment regimen",
];

/// Random history, about a quarter of them empty.
pub fn sample_history(rng: &mut impl Rng) -> ClinicalHistory {
    if rng.random_bool(0.25) {
        return ClinicalHistory::default();
    }
    let prior_tb = rng.random_bool(0.6);
    let mut comorbidities: Vec<String> = COMORBIDITIES
        .iter()
        .filter(|_| rng.random_bool(0.2))
        .map(|s| s.to_string())
        .collect();
    comorbidities.truncate(2);
    let treatment = if prior_tb {
        TREATMENTS.choose(rng).expect("nonempty").to_string()
    } else {
        String::new()
    };
    ClinicalHistory {
        prior_tb,
        comorbidities,
        treatment,
    }
}

/// The clinical note for a record. Never mentions any pathology.
pub fn generate_note(ann: &AnnotationRecord, seed: u64) -> String {
    let h = &ann.history;
    if h.is_empty() {
        return "No prior TB history.".to_string();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clauses = Vec::new();
    clauses.push(if h.prior_tb {
        ["History: prior TB", "Prior TB: yes"][rng.random_range(0..2)].to_string()
    } else {
        ["History: no prior TB", "Prior TB: no"][rng.random_range(0..2)].to_string()
    });
    if h.comorbidities.is_empty() {
        clauses.push("Comorbidities: none".to_string());
    } else {
        clauses.push(format!("Comorbidities: {}", h.comorbidities.join(", ")));
    }
    if !h.treatment.is_empty() {
        clauses.push(format!("Treatment: {}", h.treatment));
    }
    clauses.join(" [SEP] ")
}

/// Closing sentence of a report with at least one finding.
pub const IMPRESSION: &str = "Impression: chronic TB sequelae.";
/// The entire report when nothing is present.
pub const NORMAL_REPORT: &str = "No chronic TB findings.";

/// Reference report: one sentence per present pathology in code order,
/// then the impression.
pub fn generate_report(ann: &AnnotationRecord) -> String {
    if ann.findings.is_empty() {
        return NORMAL_REPORT.to_string();
    }
    let mut sentences: Vec<String> = ann
        .findings
        .iter()
        .map(|f| {
            let size = f.size.word();
            let mut s = format!("{} {} {}.", size, f.distribution.word(), f.label.phrase());
            s[..1].make_ascii_uppercase();
            s
        })
        .collect();
    sentences.push(IMPRESSION.to_string());
    sentences.join(" ")
}

/// Every token a reference report can contain.
pub fn report_lexicon() -> BTreeSet<String> {
    let mut text = vec![NORMAL_REPORT.to_string(), IMPRESSION.to_string()];
    for s in ["small", "medium", "large", "focal", "multifocal", "diffuse"] {
        text.push(s.to_string());
    }
    for l in PathologyLabel::ALL {
        text.push(l.phrase().to_string());
    }
    text.iter().flat_map(|t| crate::text::split_tokens(t)).collect()
}

/// Question kinds the VQA templates cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    Presence,
    Location,
}

pub fn question(kind: QuestionKind, label: PathologyLabel) -> String {
    match kind {
        QuestionKind::Presence => format!("is {} present ?", label.phrase()),
        QuestionKind::Location => format!("where is {} ?", label.phrase()),
    }
}

/// Ground-truth answer to a templated question.
pub fn answer(kind: QuestionKind, label: PathologyLabel, ann: &AnnotationRecord, grid_rows: usize, grid_cols: usize) -> String {
    let present = ann.is_present(label);
    match kind {
        QuestionKind::Presence => if present { "yes" } else { "no" }.to_string(),
        QuestionKind::Location if !present => "not present".to_string(),
        QuestionKind::Location => location_phrase(ann.mask(label), grid_rows, grid_cols),
    }
}

/// `"<side> <zone> zone"` from a patch mask; side is `bilateral` when the mask
/// reaches both image halves.
pub fn location_phrase(mask: &[usize], grid_rows: usize, grid_cols: usize) -> String {
    let mut left = false;
    let mut right = false;
    let mut row_sum = 0.0;
    for &i in mask {
        let (r, c) = (i / grid_cols, i % grid_cols);
        row_sum += r as f64 + 0.5;
        if ((c as f64 + 0.5) / grid_cols as f64) < 0.5 {
            left = true;
        } else {
            right = true;
        }
    }
    let centroid = row_sum / mask.len().max(1) as f64 / grid_rows as f64;
    let zone = if centroid < 1.0 / 3.0 {
        "upper"
    } else if centroid < 2.0 / 3.0 {
        "middle"
    } else {
        "lower"
    };
    let side = match (left, right) {
        (true, true) => "bilateral",
        (true, false) => "left",
        _ => "right",
    };
    format!("{side} {zone} zone")
}

/// Every question and answer string the templates can produce.
pub fn vqa_lexicon_text() -> Vec<String> {
    let mut out = Vec::new();
    for l in PathologyLabel::ALL {
        out.push(question(QuestionKind::Presence, l));
        out.push(question(QuestionKind::Location, l));
    }
    out.push("yes no not present bilateral left right upper middle lower zone".to_string());
    out
}

/// Chooses exactly `round(prevalence · n)` records to carry each pathology.
pub fn stratified_presence(n: usize, prevalence: f64, rng: &mut impl Rng) -> Vec<[bool; N_PATHOLOGIES]> {
    let mut out = vec![[false; N_PATHOLOGIES]; n];
    let k = ((prevalence * n as f64).round() as usize).min(n);
    for label in PathologyLabel::ALL {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(rng);
        for &i in &ids[..k] {
            out[i][label.code()] = true;
        }
    }
    out
}

/// Samples and renders one record with the given presence flags. The
/// record's own stream drives placements, noise, history and note wording.
pub fn sample_record(
    id: &str,
    presence: &[bool; N_PATHOLOGIES],
    canvas: Canvas,
    rng: &mut impl Rng,
) -> Result<(ImageGrid, AnnotationRecord, String, String)> {
    let mut occupied = BTreeSet::new();
    let mut placements = Vec::new();
    // Compact lesions first so tubes and discs do not collide.
    let order = [
        PathologyLabel::Bronchiectasis,
        PathologyLabel::Cavity,
        PathologyLabel::CalcifiedGranuloma,
        PathologyLabel::Fibrosis,
        PathologyLabel::PleuralThickening,
        PathologyLabel::CpAngleBlunting,
    ];
    for label in order {
        if !presence[label.code()] {
            continue;
        }
        let mut attempt = 0;
        loop {
            let mut trial_occupied = occupied.clone();
            let cand = sample_placements(label, canvas, &mut trial_occupied, rng);
            let single_ok = !cand.is_empty()
                && cand.iter().all(|pl| generate_image(&[*pl], Canvas { noise: 0.0, ..canvas }, 0).is_ok());
            if single_ok {
                occupied = trial_occupied;
                placements.extend(cand);
                break;
            }
            attempt += 1;
            if attempt >= 64 {
                return Err(Error::Dataset(format!("could not place {label} in record {id}")));
            }
        }
    }
    let noise_seed = rng.random();
    let (image, mut ann) = generate_image(&placements, canvas, noise_seed)?;
    ann.id = id.to_string();
    ann.history = sample_history(rng);
    for f in &mut ann.findings {
        f.progression = [Progression::New, Progression::Stable, Progression::Improving, Progression::Progressing]
            [rng.random_range(0..4)];
    }
    let note = generate_note(&ann, rng.random());
    let report = generate_report(&ann);
    Ok((image, ann, note, report))
}
