//! Gridded synthetic "satellite" scenes and their scalar rasters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::BBox;

pub const SHAPES: [&str; 8] = [
    "tank", "plane", "ship", "building", "tree", "field", "road", "pond",
];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "gray"];

/// Scene category named after its dominant object shape (same index order as
/// [`SHAPES`]).
pub const SCENE_CLASSES: [&str; 8] = [
    "industrial",
    "airport",
    "harbor",
    "residential",
    "forest",
    "farmland",
    "highway",
    "lake",
];

const TREE: usize = 4;
const FIELD: usize = 5;
const BUILDING: usize = 3;
const ROAD: usize = 6;

/// 2×2 intensity glyph per shape (top-left, top-right, bottom-left, bottom-right).
const GLYPHS: [[f64; 4]; 8] = [
    [1.0, 0.2, 0.2, 1.0],
    [0.2, 1.0, 1.0, 0.2],
    [1.0, 1.0, 0.2, 0.2],
    [0.2, 0.2, 1.0, 1.0],
    [1.0, 0.2, 1.0, 0.2],
    [0.2, 1.0, 0.2, 1.0],
    [1.0, 1.0, 1.0, 0.2],
    [0.2, 0.2, 0.2, 1.0],
];
const COLOR_GAIN: [f64; 4] = [1.0, 0.8, 0.6, 0.45];

/// A cell value: 0 is empty, otherwise `1 + shape * 4 + color`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell(pub u8);

impl Cell {
    pub const EMPTY: Cell = Cell(0);

    pub fn object(shape: usize, color: usize) -> Cell {
        Cell(1 + (shape * COLORS.len() + color) as u8)
    }

    pub fn shape(self) -> Option<usize> {
        (self.0 != 0).then(|| (self.0 as usize - 1) / COLORS.len())
    }

    pub fn color(self) -> Option<usize> {
        (self.0 != 0).then(|| (self.0 as usize - 1) % COLORS.len())
    }

    pub fn is_valid(self) -> bool {
        (self.0 as usize) <= SHAPES.len() * COLORS.len()
    }
}

/// Size of generated scenes and their rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub px_per_cell: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            px_per_cell: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.px_per_cell == 0 {
            return Err(Error::config("scene grid must be at least 8x8"));
        }
        Ok(())
    }

    pub fn raster_dims(&self) -> (usize, usize) {
        (self.height * self.px_per_cell, self.width * self.px_per_cell)
    }
}

/// Connected block of identical non-empty cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    height: usize,
    width: usize,
    cells: Vec<Cell>,
}

/// Row-major scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Scene {
    pub fn from_cells(height: usize, width: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::contract(format!(
                "grid {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|c| !c.is_valid()) {
            return Err(Error::contract(format!("invalid cell code {}", bad.0)));
        }
        Ok(Scene {
            height,
            width,
            cells,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Scene {
            height,
            width,
            cells: vec![Cell::EMPTY; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.width + c]
    }

    fn set(&mut self, r: usize, c: usize, v: Cell) {
        self.cells[r * self.width + c] = v;
    }

    pub fn shape_cells(&self) -> [usize; 8] {
        let mut counts = [0; 8];
        for c in &self.cells {
            if let Some(s) = c.shape() {
                counts[s] += 1;
            }
        }
        counts
    }

    /// Index into [`SCENE_CLASSES`]: the shape with the most cells, ties to
    /// the lower index. An empty scene counts as class 0.
    pub fn scene_class(&self) -> usize {
        let counts = self.shape_cells();
        let mut best = 0;
        for s in 1..counts.len() {
            if counts[s] > counts[best] {
                best = s;
            }
        }
        best
    }

    pub fn scene_class_name(&self) -> &'static str {
        SCENE_CLASSES[self.scene_class()]
    }

    pub fn is_urban(&self) -> bool {
        let c = self.shape_cells();
        c[BUILDING] + c[ROAD] > c[FIELD] + c[TREE]
    }

    /// 4-connected components of identical cells, in row-major discovery order.
    pub fn objects(&self) -> Vec<SceneObject> {
        let mut seen = vec![false; self.cells.len()];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.cells.len() {
            let cell = self.cells[start];
            if seen[start] || cell == Cell::EMPTY {
                continue;
            }
            let mut obj = SceneObject {
                shape: cell.shape().unwrap(),
                color: cell.color().unwrap(),
                rows: (usize::MAX, 0),
                cols: (usize::MAX, 0),
                cells: 0,
            };
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (r, c) = (i / self.width, i % self.width);
                obj.rows = (obj.rows.0.min(r), obj.rows.1.max(r));
                obj.cols = (obj.cols.0.min(c), obj.cols.1.max(c));
                obj.cells += 1;
                let mut visit = |j: usize| {
                    if !seen[j] && self.cells[j] == cell {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    visit(i - self.width);
                }
                if r + 1 < self.height {
                    visit(i + self.width);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < self.width {
                    visit(i + 1);
                }
            }
            out.push(obj);
        }
        out
    }

    pub fn count_objects(&self, shape: usize) -> usize {
        self.objects().iter().filter(|o| o.shape == shape).count()
    }

    /// Tight pixel bounds of every cell with the given shape and colour,
    /// scaled to 0–1000 and rounded.
    pub fn tight_box(&self, shape: usize, color: usize) -> Option<BBox> {
        let target = Cell::object(shape, color);
        let mut rows = (usize::MAX, 0);
        let mut cols = (usize::MAX, 0);
        let mut any = false;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) == target {
                    any = true;
                    rows = (rows.0.min(r), rows.1.max(r));
                    cols = (cols.0.min(c), cols.1.max(c));
                }
            }
        }
        if !any {
            return None;
        }
        let sx = |c: usize| ((c as f64) * 1000.0 / self.width as f64).round() as u32;
        let sy = |r: usize| ((r as f64) * 1000.0 / self.height as f64).round() as u32;
        BBox::new(sx(cols.0), sy(rows.0), sx(cols.1 + 1), sy(rows.1 + 1)).ok()
    }

    pub fn render(&self, px_per_cell: usize) -> Raster {
        let k = px_per_cell.max(1);
        let (h, w) = (self.height * k, self.width * k);
        let mut data = vec![0.0; h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = self.get(r, c);
                let (Some(s), Some(col)) = (cell.shape(), cell.color()) else {
                    continue;
                };
                for i in 0..k {
                    for j in 0..k {
                        let v = if k == 1 {
                            GLYPHS[s].iter().sum::<f64>() / 4.0
                        } else {
                            GLYPHS[s][(2 * i / k) * 2 + 2 * j / k]
                        };
                        data[(r * k + i) * w + c * k + j] = v * COLOR_GAIN[col];
                    }
                }
            }
        }
        Raster {
            height: h,
            width: w,
            data,
        }
    }

    /// Run-length encoding: space-separated `count*code` runs.
    pub fn to_rle(&self) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < self.cells.len() {
            let v = self.cells[i];
            let mut j = i;
            while j < self.cells.len() && self.cells[j] == v {
                j += 1;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&format!("{}*{}", j - i, v.0));
            i = j;
        }
        out
    }

    pub fn from_rle(height: usize, width: usize, rle: &str) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        for run in rle.split_whitespace() {
            let (n, v) = run
                .split_once('*')
                .ok_or_else(|| Error::contract(format!("bad run {run:?}")))?;
            let n: usize = n
                .parse()
                .map_err(|_| Error::contract(format!("bad run length {n:?}")))?;
            let v: u8 = v
                .parse()
                .map_err(|_| Error::contract(format!("bad cell code {v:?}")))?;
            if n == 0 || cells.len() + n > height * width {
                return Err(Error::contract("run lengths do not match grid size"));
            }
            cells.extend(std::iter::repeat(Cell(v)).take(n));
        }
        Scene::from_cells(height, width, cells)
    }

    fn region_free(&self, r0: usize, c0: usize, h: usize, w: usize) -> bool {
        let rs = r0.saturating_sub(1)..(r0 + h + 1).min(self.height);
        for r in rs {
            for c in c0.saturating_sub(1)..(c0 + w + 1).min(self.width) {
                if self.get(r, c) != Cell::EMPTY {
                    return false;
                }
            }
        }
        true
    }

    fn try_place<R: Rng>(&mut self, rng: &mut R, cell: Cell, h: usize, w: usize) -> bool {
        if h > self.height || w > self.width {
            return false;
        }
        for _ in 0..60 {
            let r0 = rng.gen_range(0..=self.height - h);
            let c0 = rng.gen_range(0..=self.width - w);
            if self.region_free(r0, c0, h, w) {
                for r in r0..r0 + h {
                    for c in c0..c0 + w {
                        self.set(r, c, cell);
                    }
                }
                return true;
            }
        }
        false
    }

    /// Draws a scene whose class is `class`: a few large objects of the
    /// dominant shape plus smaller distractors, every object a distinct
    /// shape/colour pair separated by at least one empty cell.
    pub fn generate<R: Rng>(rng: &mut R, cfg: &SceneConfig, class: usize) -> Scene {
        let (h, w) = (cfg.height, cfg.width);
        let side = h.min(w);
        let dom = ((side * 5 / 32).max(2), (side * 9 / 32).max(3));
        let dis = ((side * 2 / 32).max(1), (side * 5 / 32).max(2));
        loop {
            let mut scene = Scene::empty(h, w);
            let mut colors: Vec<usize> = (0..COLORS.len()).collect();
            shuffle(rng, &mut colors);
            let n_dom = rng.gen_range(1..=3);
            let mut used = Vec::new();
            for &color in colors.iter().take(n_dom) {
                let (oh, ow) = (rng.gen_range(dom.0..=dom.1), rng.gen_range(dom.0..=dom.1));
                if scene.try_place(rng, Cell::object(class, color), oh, ow) {
                    used.push((class, color));
                }
            }
            let n_dis = rng.gen_range(2..=5);
            for _ in 0..n_dis {
                let shape = (class + rng.gen_range(1..SHAPES.len())) % SHAPES.len();
                let color = rng.gen_range(0..COLORS.len());
                if used.contains(&(shape, color)) {
                    continue;
                }
                let (oh, ow) = (rng.gen_range(dis.0..=dis.1), rng.gen_range(dis.0..=dis.1));
                if scene.try_place(rng, Cell::object(shape, color), oh, ow) {
                    used.push((shape, color));
                }
            }
            let counts = scene.shape_cells();
            let dominant = counts
                .iter()
                .enumerate()
                .all(|(s, &n)| s == class || n < counts[class]);
            if used.len() >= 3 && dominant {
                return scene;
            }
        }
    }
}

pub(crate) fn shuffle<R: Rng, T>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_scene_has_requested_class() {
        let cfg = SceneConfig::default();
        for class in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
            let s = Scene::generate(&mut rng, &cfg, class);
            assert_eq!(s.scene_class(), class);
            // every object is a unique shape/colour pair
            let objs = s.objects();
            let mut pairs: Vec<_> = objs.iter().map(|o| (o.shape, o.color)).collect();
            pairs.sort();
            pairs.dedup();
            assert_eq!(pairs.len(), objs.len());
        }
    }

    #[test]
    fn rle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Scene::generate(&mut rng, &SceneConfig::default(), 3);
        let back = Scene::from_rle(32, 32, &s.to_rle()).unwrap();
        assert_eq!(back, s);
        assert!(Scene::from_rle(32, 32, "5*0").is_err());
        assert!(Scene::from_rle(2, 2, "4*99").is_err());
        assert!(Scene::from_rle(2, 2, "4x0").is_err());
    }

    #[test]
    fn render_is_deterministic_and_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Scene::generate(&mut rng, &SceneConfig::default(), 1);
        assert_eq!(s.render(2), s.render(2));
        let r = s.render(2);
        assert_eq!((r.height, r.width), (64, 64));
        assert!(Scene::empty(8, 8).render(2).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tight_box_scales_pixel_bounds() {
        let mut s = Scene::empty(10, 10);
        for r in 2..4 {
            for c in 5..9 {
                s.set(r, c, Cell::object(2, 0));
            }
        }
        let b = s.tight_box(2, 0).unwrap();
        assert_eq!(b.coords(), [500, 200, 900, 400]);
        assert_eq!(s.tight_box(2, 1), None);
    }
}
