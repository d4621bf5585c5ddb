//! Synthetic instruction world: colored shapes on a cell grid, rendered in an
//! optical, SAR-like or natural style, with templated instruction pairs.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma};

use crate::error::{Result, VitpError};
use crate::image::Image;
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Segmentation class id; 0 is background.
    pub fn class(self) -> u8 {
        self as u8 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.9, 0.1],
            Color::Blue => [0.1, 0.1, 0.9],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::Cyan => [0.1, 0.9, 0.9],
            Color::Magenta => [0.9, 0.1, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RenderMode {
    Optical,
    /// Inverted luminance with multiplicative speckle, grayscale.
    Sar,
    /// Textured gradient background standing in for general-domain photos.
    Natural,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Optical => "optical",
            RenderMode::Sar => "sar",
            RenderMode::Natural => "natural",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Caption,
    Vqa,
    Grounding,
    Classification,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Caption, Task::Vqa, Task::Grounding, Task::Classification];

    pub fn name(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Vqa => "vqa",
            Task::Grounding => "grounding",
            Task::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: Color,
    pub cell: (usize, usize),
    pub x0: usize,
    pub y0: usize,
    pub extent: usize,
}

impl PlacedShape {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let s = self.extent;
        if x < self.x0 || y < self.y0 || x >= self.x0 + s || y >= self.y0 + s {
            return false;
        }
        let (dx, dy) = ((x - self.x0) as f64 + 0.5, (y - self.y0) as f64 + 0.5);
        let half = s as f64 / 2.0;
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Disk => (dx - half).powi(2) + (dy - half).powi(2) <= half * half,
            ShapeKind::Triangle => {
                let row = (y - self.y0) as f64 + 1.0;
                (dx - half).abs() <= half * row / s as f64
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub cell: usize,
    pub mode: RenderMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            cell: 16,
            mode: RenderMode::Optical,
        }
    }
}

impl SynthConfig {
    pub fn with_mode(mut self, mode: RenderMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub cfg: SynthConfig,
    pub shapes: Vec<PlacedShape>,
    pub noise_seed: u64,
}

impl SyntheticWorld {
    pub fn random(cfg: SynthConfig, rng: &mut dyn RngCore) -> Self {
        let grid = cfg.image_size / cfg.cell;
        let cells = grid * grid;
        let count = rng.random_range(0..=cells);
        let mut chosen = rand::seq::index::sample(rng, cells, count).into_vec();
        chosen.sort_unstable();
        // Random shapes fill their cell; smaller ones only come from `with_shapes`.
        let shapes = chosen
            .into_iter()
            .map(|c| {
                let (cy, cx) = (c / grid, c % grid);
                PlacedShape {
                    kind: ShapeKind::ALL[rng.random_range(0..3)],
                    color: Color::ALL[rng.random_range(0..6)],
                    cell: (cy, cx),
                    x0: cx * cfg.cell,
                    y0: cy * cfg.cell,
                    extent: cfg.cell,
                }
            })
            .collect();
        SyntheticWorld {
            cfg,
            shapes,
            noise_seed: rng.next_u64(),
        }
    }

    /// Builds a world from explicit shapes, checking that each lies inside its own cell.
    pub fn with_shapes(cfg: SynthConfig, shapes: Vec<PlacedShape>, noise_seed: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &shapes {
            let (cy, cx) = s.cell;
            let inside = s.extent >= 1
                && s.x0 >= cx * cfg.cell
                && s.y0 >= cy * cfg.cell
                && s.x0 + s.extent <= (cx + 1) * cfg.cell
                && s.y0 + s.extent <= (cy + 1) * cfg.cell
                && (cx + 1) * cfg.cell <= cfg.image_size
                && (cy + 1) * cfg.cell <= cfg.image_size;
            if !inside || !seen.insert(s.cell) {
                return Err(VitpError::Image(format!("shape {s:?} leaves its cell or shares it")));
            }
        }
        let mut shapes = shapes;
        shapes.sort_by_key(|s| s.cell);
        Ok(SyntheticWorld {
            cfg,
            shapes,
            noise_seed,
        })
    }

    /// Per-pixel index of the owning shape.
    pub fn owner_mask(&self) -> Vec<Option<usize>> {
        let n = self.cfg.image_size;
        let mut m = vec![None; n * n];
        for (i, s) in self.shapes.iter().enumerate() {
            for y in s.y0..s.y0 + s.extent {
                for x in s.x0..s.x0 + s.extent {
                    if s.covers(x, y) {
                        m[y * n + x] = Some(i);
                    }
                }
            }
        }
        m
    }

    /// Per-pixel class: 0 background, else shape class.
    pub fn class_mask(&self) -> Vec<u8> {
        self.owner_mask()
            .into_iter()
            .map(|o| o.map_or(0, |i| self.shapes[i].kind.class()))
            .collect()
    }

    pub fn render(&self) -> Image {
        let n = self.cfg.image_size;
        let owner = self.owner_mask();
        let mut r = rng::stream(self.noise_seed, Purpose::World, 1, 0);
        let mut data = Vec::with_capacity(n * n * 3);
        let (c0, c1) = match self.cfg.mode {
            RenderMode::Natural => (
                [0.1 + 0.4 * r.random::<f32>(), 0.1 + 0.4 * r.random::<f32>(), 0.1 + 0.4 * r.random::<f32>()],
                [0.1 + 0.4 * r.random::<f32>(), 0.1 + 0.4 * r.random::<f32>(), 0.1 + 0.4 * r.random::<f32>()],
            ),
            _ => ([0.1, 0.1, 0.12], [0.1, 0.1, 0.12]),
        };
        let noise = if self.cfg.mode == RenderMode::Natural { 0.08 } else { 0.04 };
        for y in 0..n {
            for x in 0..n {
                let base = match owner[y * n + x] {
                    Some(i) => self.shapes[i].color.rgb(),
                    None => {
                        let t = (x + y) as f32 / (2 * n) as f32;
                        [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
                    }
                };
                for v in base {
                    data.push(v + noise * (2.0 * r.random::<f32>() - 1.0));
                }
            }
        }
        if self.cfg.mode == RenderMode::Sar {
            let speckle = Gamma::new(8.0f32, 1.0 / 8.0).expect("valid gamma");
            for px in data.chunks_mut(3) {
                let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                let v = (0.1 + 0.8 * (1.0 - l)) * speckle.sample(&mut r);
                px.fill(v);
            }
        }
        Image::new(n, n, data).expect("rendered image is valid")
    }

    /// Inclusive pixel bounding box `(x1, y1, x2, y2)` of the rendered shape.
    pub fn pixel_box(&self, i: usize) -> (usize, usize, usize, usize) {
        let s = &self.shapes[i];
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for y in s.y0..s.y0 + s.extent {
            for x in s.x0..s.x0 + s.extent {
                if s.covers(x, y) {
                    b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
                }
            }
        }
        b
    }

    /// Box in hundredths of the image side.
    pub fn grounding_box(&self, i: usize) -> [usize; 4] {
        let (x1, y1, x2, y2) = self.pixel_box(i);
        let h = |p: usize| to_hundredths(p, self.cfg.image_size);
        [h(x1), h(y1), h(x2), h(y2)]
    }

    fn pixel_count_by_color(&self) -> Vec<(Color, usize)> {
        let owner = self.owner_mask();
        Color::ALL
            .iter()
            .map(|&c| {
                let n = owner
                    .iter()
                    .filter(|o| o.is_some_and(|i| self.shapes[i].color == c))
                    .count();
                (c, n)
            })
            .collect()
    }

    pub fn dominant_color(&self) -> Option<Color> {
        let counts = self.pixel_count_by_color();
        let max = counts.iter().map(|c| c.1).max().unwrap_or(0);
        let top: Vec<_> = counts.iter().filter(|c| c.1 == max).collect();
        (max > 0 && top.len() == 1).then(|| top[0].0)
    }

    /// One item per grid cell in row-major order; vacant cells read `empty`.
    pub fn caption(&self) -> String {
        let grid = self.cfg.image_size / self.cfg.cell;
        (0..grid * grid)
            .map(|c| {
                self.shapes
                    .iter()
                    .find(|s| s.cell == (c / grid, c % grid))
                    .map_or_else(|| "empty".to_string(), |s| format!("{} {}", s.color.name(), s.kind.name()))
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Pixel index to hundredths: `floor(p * 100 / size)`.
pub fn to_hundredths(p: usize, size: usize) -> usize {
    p * 100 / size
}

pub fn format_box(b: [usize; 4]) -> String {
    format!("[{},{},{},{}]", b[0], b[1], b[2], b[3])
}

/// Parses `[x1,y1,x2,y2]` with `0 <= x1 <= x2 <= 99` and likewise for y.
pub fn parse_box(s: &str) -> Option<[usize; 4]> {
    let inner = s.strip_prefix('[')?.strip_suffix(']')?;
    let v: Vec<usize> = inner.split(',').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    let b: [usize; 4] = v.try_into().ok()?;
    (b[0] <= b[2] && b[1] <= b[3] && b[2] <= 99 && b[3] <= 99).then_some(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawExample {
    pub image: Image,
    pub query: String,
    pub response: String,
    pub source: String,
    pub task: Task,
}

pub const CAPTION_QUERY: &str = "describe.";
pub const DOMINANT_QUERY: &str = "dominant color?";

pub fn count_query(kind: ShapeKind) -> String {
    format!("how many {}s?", kind.name())
}

pub fn color_query(kind: ShapeKind) -> String {
    format!("what color is the {}?", kind.name())
}

pub fn grounding_query(color: Color, kind: ShapeKind) -> String {
    format!("where is the {} {}?", color.name(), kind.name())
}

/// Every symbol the templates can emit.
pub fn corpus() -> String {
    let mut s = String::from("empty,0123456789[]");
    s.push_str(CAPTION_QUERY);
    s.push_str(DOMINANT_QUERY);
    for k in ShapeKind::ALL {
        s.push_str(&count_query(k));
        s.push_str(&color_query(k));
        for c in Color::ALL {
            s.push_str(&grounding_query(c, k));
        }
    }
    s
}

/// The `(query, response)` pair for `task` on `world`, or `None` when the world
/// cannot support the question.
pub fn instruction(world: &SyntheticWorld, task: Task, rng: &mut dyn RngCore) -> Option<(String, String)> {
    match task {
        Task::Caption => Some((CAPTION_QUERY.into(), world.caption())),
        Task::Vqa => {
            let singles: Vec<ShapeKind> = ShapeKind::ALL
                .into_iter()
                .filter(|&k| world.shapes.iter().filter(|s| s.kind == k).count() == 1)
                .collect();
            if !singles.is_empty() && rng.random_bool(0.5) {
                let k = singles[rng.random_range(0..singles.len())];
                let c = world.shapes.iter().find(|s| s.kind == k)?.color;
                Some((color_query(k), c.name().into()))
            } else {
                let k = ShapeKind::ALL[rng.random_range(0..3)];
                let n = world.shapes.iter().filter(|s| s.kind == k).count();
                Some((count_query(k), n.to_string()))
            }
        }
        Task::Grounding => {
            let unique: Vec<usize> = (0..world.shapes.len())
                .filter(|&i| {
                    let s = world.shapes[i];
                    world.shapes.iter().filter(|t| t.kind == s.kind && t.color == s.color).count() == 1
                })
                .collect();
            if unique.is_empty() {
                return None;
            }
            let i = unique[rng.random_range(0..unique.len())];
            let s = world.shapes[i];
            Some((grounding_query(s.color, s.kind), format_box(world.grounding_box(i))))
        }
        Task::Classification => world
            .dominant_color()
            .map(|c| (DOMINANT_QUERY.into(), c.name().into())),
    }
}

/// Renders a world from `world_seed` and emits a `task` instruction pair.
/// Worlds that cannot support the question are redrawn from derived seeds.
pub fn synth_generate(world_seed: u64, task: Task, cfg: &SynthConfig) -> Result<RawExample> {
    for attempt in 0..1000u64 {
        let mut r = rng::stream(world_seed, Purpose::World, 0, attempt);
        let world = SyntheticWorld::random(*cfg, &mut r);
        if let Some((query, response)) = instruction(&world, task, &mut r) {
            return Ok(RawExample {
                image: world.render(),
                query,
                response,
                source: String::new(),
                task,
            });
        }
    }
    Err(VitpError::Degenerate(format!("no world supports {}", task.name())))
}
