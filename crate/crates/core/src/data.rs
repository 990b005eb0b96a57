//! Procedural multi-domain shape dataset.
//!
//! Every example is one shape draw (class, position, scale, rotation and a
//! few style coefficients) rendered in one of four styles. The class is
//! carried only by the shape, so the same draw rendered in another style
//! keeps its label.
//!
//! On disk a dataset is a directory with `manifest.json`, `labels.json` and
//! one `cell_c{c}_d{d}.rct` tensor container of shape `[n, H, W]` per
//! (class, domain) cell.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "triangle", "cross"];
pub const DOMAIN_NAMES: [&str; 4] = ["photo", "art", "cartoon", "sketch"];

pub const DEFAULT_SMALL_FRAC: f64 = 0.2;
const FORMAT_TAG: &str = "rcerm-dataset-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    /// Signed distance in shape units; negative inside.
    fn sdf(self, u: f64, v: f64) -> f64 {
        match self {
            ShapeKind::Disk => (u * u + v * v).sqrt() - 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) - 0.85,
            ShapeKind::Triangle => {
                // equilateral, apex up, inradius 0.55
                let normals = [(0.0, -1.0), (0.866_025_403_784_438_6, 0.5), (-0.866_025_403_784_438_6, 0.5)];
                normals
                    .iter()
                    .map(|(nx, ny)| nx * u + ny * v)
                    .fold(f64::NEG_INFINITY, f64::max)
                    - 0.55
            }
            ShapeKind::Cross => {
                let (au, av) = (u.abs(), v.abs());
                let horizontal = (au - 1.0).max(av - 0.33);
                let vertical = (au - 0.33).max(av - 1.0);
                horizontal.min(vertical)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Filled shape with smooth shading on a graded background.
    Photo,
    /// Filled shape with a sinusoidal texture on a textured background.
    Art,
    /// Flat fill with a thick dark outline on white.
    Cartoon,
    /// Thin dark outline only, on white.
    Sketch,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Photo, Style::Art, Style::Cartoon, Style::Sketch];
}

/// Ranges for the geometric jitter applied per draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Max center offset from the image center, in pixels.
    pub position: f64,
    /// Shape radius range, as a fraction of the image side.
    pub scale: (f64, f64),
    /// Max absolute rotation, radians.
    pub rotation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            position: 0.5,
            scale: (0.26, 0.34),
            rotation: 0.15,
        }
    }
}

/// One random shape draw; rendering it is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDraw {
    pub shape: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
    /// Style coefficients in [0, 1): light direction, texture phase and
    /// frequency, fill tone.
    pub tone: [f64; 4],
}

impl ShapeDraw {
    pub fn sample(shape: ShapeKind, height: usize, width: usize, jitter: &Jitter, rng: &mut impl Rng) -> Self {
        let side = height.min(width) as f64;
        let pos = |rng: &mut dyn rand::RngCore| {
            if jitter.position > 0.0 {
                rng.gen_range(-jitter.position..=jitter.position)
            } else {
                0.0
            }
        };
        let cx = width as f64 / 2.0 + pos(rng);
        let cy = height as f64 / 2.0 + pos(rng);
        let radius = side * rng.gen_range(jitter.scale.0..=jitter.scale.1);
        let rotation = if jitter.rotation > 0.0 {
            rng.gen_range(-jitter.rotation..=jitter.rotation)
        } else {
            0.0
        };
        let tone = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        Self {
            shape,
            cx,
            cy,
            radius,
            rotation,
            tone,
        }
    }

    /// Signed distance in pixels from pixel-space point `(x, y)`.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        self.shape.sdf(u, v) * self.radius
    }
}

const SUPERSAMPLE: usize = 3;

/// Renders `draw` in `style` to `height * width` intensities in `[0, 1]`
/// (1 is white), row-major.
pub fn render(draw: &ShapeDraw, style: Style, height: usize, width: usize) -> Vec<f64> {
    let [t0, t1, t2, t3] = draw.tone;
    let angle = t0 * std::f64::consts::TAU;
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(height * width);
    for py in 0..height {
        for px in 0..width {
            let (mut fill, mut line_thick, mut line_thin) = (0.0, 0.0, 0.0);
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let d = draw.distance(x, y);
                    if d <= 0.0 {
                        fill += 1.0 / n;
                    }
                    if d.abs() <= 1.0 {
                        line_thick += 1.0 / n;
                    }
                    if d.abs() <= 0.5 {
                        line_thin += 1.0 / n;
                    }
                }
            }
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let along = ((x - draw.cx) * dir_x + (y - draw.cy) * dir_y) / width.max(1) as f64;
            let value = match style {
                Style::Photo => {
                    let bg = 0.72 + 0.18 * along;
                    let r2 = ((x - draw.cx - 0.4 * draw.radius * dir_x).powi(2)
                        + (y - draw.cy - 0.4 * draw.radius * dir_y).powi(2))
                        / (draw.radius * draw.radius);
                    let shade = 0.12 + 0.3 * (1.0 - (-r2).exp()) + 0.1 * t3;
                    fill * shade + (1.0 - fill) * bg
                }
                Style::Art => {
                    let freq = 0.9 + 0.8 * t2;
                    let phase = t1 * std::f64::consts::TAU;
                    let wave = (freq * (x * dir_y - y * dir_x) + phase).sin();
                    let bg = 0.68 + 0.12 * wave;
                    let inner = 0.3 + 0.15 * (freq * (x * dir_x + y * dir_y) - phase).sin();
                    fill * inner + (1.0 - fill) * bg
                }
                Style::Cartoon => {
                    let tone = 0.85 + 0.1 * t3;
                    let base = fill * tone + (1.0 - fill) * 0.96;
                    base * (1.0 - line_thick) + 0.05 * line_thick
                }
                Style::Sketch => 1.0 - 0.9 * line_thin,
            };
            out.push(value.clamp(0.0, 1.0));
        }
    }
    out
}

/// A single labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[H, W]`
    pub pixels: Tensor,
    pub class: usize,
    pub domain: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExampleRef {
    pub class: usize,
    pub domain: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    height: usize,
    width: usize,
    classes: usize,
    domains: usize,
    n_per_cell: usize,
    seed: u64,
    small_frac: f64,
    // c * domains + d -> [n, H, W]
    cells: Vec<Tensor>,
    // per domain, sorted indices (c * n_per_cell + i) of the small split
    small_split: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n_per_cell: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub domains: usize,
    pub jitter: Jitter,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_cell: 100,
            height: 16,
            width: 16,
            classes: 4,
            domains: 4,
            jitter: Jitter::default(),
        }
    }
}

/// Generates the default 16x16, 4-class, 4-domain dataset.
pub fn generate(seed: u64, n_per_cell: usize) -> Result<DomainDataset> {
    generate_with(&GenerateConfig {
        seed,
        n_per_cell,
        ..GenerateConfig::default()
    })
}

pub fn generate_with(cfg: &GenerateConfig) -> Result<DomainDataset> {
    if cfg.n_per_cell < 2 {
        return Err(Error::Config(format!(
            "n_per_cell must be >= 2 so both splits are non-empty, got {}",
            cfg.n_per_cell
        )));
    }
    if cfg.classes == 0 || cfg.classes > ShapeKind::ALL.len() {
        return Err(Error::Config(format!(
            "classes must be in 1..={}, got {}",
            ShapeKind::ALL.len(),
            cfg.classes
        )));
    }
    if cfg.domains == 0 || cfg.domains > Style::ALL.len() {
        return Err(Error::Config(format!(
            "domains must be in 1..={}, got {}",
            Style::ALL.len(),
            cfg.domains
        )));
    }
    if cfg.height < 4 || cfg.width < 4 {
        return Err(Error::Config(format!(
            "image must be at least 4x4, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    let mut cells = Vec::with_capacity(cfg.classes * cfg.domains);
    for c in 0..cfg.classes {
        for d in 0..cfg.domains {
            // one RNG stream per cell, offset from the master seed
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((c * cfg.domains + d) as u64 + 1);
            let mut data = Vec::with_capacity(cfg.n_per_cell * cfg.height * cfg.width);
            for _ in 0..cfg.n_per_cell {
                let draw = ShapeDraw::sample(ShapeKind::ALL[c], cfg.height, cfg.width, &cfg.jitter, &mut rng);
                data.extend(render(&draw, Style::ALL[d], cfg.height, cfg.width));
            }
            cells.push(Tensor::new(vec![cfg.n_per_cell, cfg.height, cfg.width], data)?);
        }
    }
    let small_split = compute_small_split(
        cfg.classes,
        cfg.domains,
        cfg.n_per_cell,
        DEFAULT_SMALL_FRAC,
        cfg.seed,
    )?;
    Ok(DomainDataset {
        height: cfg.height,
        width: cfg.width,
        classes: cfg.classes,
        domains: cfg.domains,
        n_per_cell: cfg.n_per_cell,
        seed: cfg.seed,
        small_frac: DEFAULT_SMALL_FRAC,
        cells,
        small_split,
    })
}

fn small_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n - 1)
}

fn compute_small_split(
    classes: usize,
    domains: usize,
    n: usize,
    frac: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("small_frac must lie in (0, 1), got {frac}")));
    }
    let k = small_count(n, frac);
    let mut out = vec![Vec::new(); domains];
    for (d, small) in out.iter_mut().enumerate() {
        for c in 0..classes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b17_5eed);
            rng.set_stream((c * domains + d) as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            small.extend(idx[..k].iter().map(|i| c * n + i));
        }
        small.sort_unstable();
    }
    Ok(out)
}

/// Example lists for one training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub train_domains: Vec<usize>,
    pub test_domain: Option<usize>,
    /// Big splits of the training domains; the only data trained on.
    pub train_big: Vec<ExampleRef>,
    /// Union of the training domains' small splits (validation).
    pub train_small: Vec<ExampleRef>,
    /// Every example of the test domain.
    pub test: Vec<ExampleRef>,
    /// The test domain's small split.
    pub test_small: Vec<ExampleRef>,
}

impl DomainDataset {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn n_per_cell(&self) -> usize {
        self.n_per_cell
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cell(&self, c: usize, d: usize) -> &Tensor {
        &self.cells[c * self.domains + d]
    }

    /// Flattened pixels of one example.
    pub fn pixels(&self, r: ExampleRef) -> &[f64] {
        let len = self.height * self.width;
        &self.cell(r.class, r.domain).data()[r.index * len..(r.index + 1) * len]
    }

    pub fn example(&self, r: ExampleRef) -> Example {
        Example {
            pixels: Tensor::new(vec![self.height, self.width], self.pixels(r).to_vec()).unwrap(),
            class: r.class,
            domain: r.domain,
        }
    }

    /// Stored small-split indices (`c * n_per_cell + i`) of domain `d`.
    pub fn small_split(&self, d: usize) -> &[usize] {
        &self.small_split[d]
    }

    /// `[B, H*W]` pixels and labels for `refs`.
    pub fn batch(&self, refs: &[ExampleRef]) -> (Tensor, Vec<usize>) {
        let len = self.input_dim();
        let mut data = Vec::with_capacity(refs.len() * len);
        for r in refs {
            data.extend_from_slice(self.pixels(*r));
        }
        (
            Tensor::new(vec![refs.len(), len], data).unwrap(),
            refs.iter().map(|r| r.class).collect(),
        )
    }

    fn check_domain(&self, d: usize) -> Result<()> {
        if d >= self.domains {
            return Err(Error::Config(format!(
                "domain {d} out of range (dataset has {})",
                self.domains
            )));
        }
        Ok(())
    }

    /// Builds a partition from the stored splits.
    pub fn partition(&self, train_domains: &[usize], test_domain: Option<usize>) -> Result<Partition> {
        self.partition_with(&self.small_split, train_domains, test_domain)
    }

    /// Train on every domain except `holdout`, test on `holdout`.
    pub fn holdout_partition(&self, holdout: usize) -> Result<Partition> {
        self.check_domain(holdout)?;
        let train: Vec<usize> = (0..self.domains).filter(|&d| d != holdout).collect();
        self.partition(&train, Some(holdout))
    }

    fn partition_with(
        &self,
        small: &[Vec<usize>],
        train_domains: &[usize],
        test_domain: Option<usize>,
    ) -> Result<Partition> {
        for &d in train_domains.iter().chain(test_domain.iter()) {
            self.check_domain(d)?;
        }
        if train_domains.is_empty() {
            return Err(Error::Config("no training domains".into()));
        }
        if let Some(t) = test_domain {
            if train_domains.contains(&t) {
                return Err(Error::Config(format!("domain {t} is both train and test")));
            }
        }
        let n = self.n_per_cell;
        let to_ref = |d: usize, flat: usize| ExampleRef {
            class: flat / n,
            domain: d,
            index: flat % n,
        };
        let mut p = Partition {
            train_domains: train_domains.to_vec(),
            test_domain,
            train_big: Vec::new(),
            train_small: Vec::new(),
            test: Vec::new(),
            test_small: Vec::new(),
        };
        for &d in train_domains {
            let s = &small[d];
            for flat in 0..self.classes * n {
                if s.binary_search(&flat).is_ok() {
                    p.train_small.push(to_ref(d, flat));
                } else {
                    p.train_big.push(to_ref(d, flat));
                }
            }
        }
        if let Some(t) = test_domain {
            p.test = (0..self.classes * n).map(|f| to_ref(t, f)).collect();
            p.test_small = small[t].iter().map(|&f| to_ref(t, f)).collect();
        }
        Ok(p)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in 0..self.classes {
            for d in 0..self.domains {
                self.cell(c, d).save(&dir.join(cell_file(c, d)))?;
            }
        }
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            height: self.height,
            width: self.width,
            classes: self.classes,
            domains: self.domains,
            n_per_cell: self.n_per_cell,
            seed: self.seed,
            small_frac: self.small_frac,
            small_split: self.small_split.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        let labels = Labels {
            classes: CLASS_NAMES[..self.classes].iter().map(|s| s.to_string()).collect(),
            domains: DOMAIN_NAMES[..self.domains].iter().map(|s| s.to_string()).collect(),
            cells: (0..self.classes)
                .flat_map(|c| (0..self.domains).map(move |d| (c, d)))
                .map(|(c, d)| CellLabel {
                    file: cell_file(c, d),
                    class: c,
                    domain: d,
                })
                .collect(),
        };
        write_json(&dir.join("labels.json"), &labels)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: Manifest = read_json(&mpath)?;
        if m.format != FORMAT_TAG {
            return Err(Error::format(&mpath, format!("unknown format tag {:?}", m.format)));
        }
        if m.n_per_cell < 2 || m.small_split.len() != m.domains {
            return Err(Error::format(&mpath, "inconsistent split lists"));
        }
        for s in &m.small_split {
            if s.windows(2).any(|w| w[0] >= w[1]) || s.iter().any(|&i| i >= m.classes * m.n_per_cell) {
                return Err(Error::format(&mpath, "split indices must be sorted and in range"));
            }
        }
        let want = [m.n_per_cell, m.height, m.width];
        let mut cells = Vec::with_capacity(m.classes * m.domains);
        for c in 0..m.classes {
            for d in 0..m.domains {
                let path = dir.join(cell_file(c, d));
                if !path.exists() {
                    return Err(Error::format(&path, format!("missing cell file for (c={c}, d={d})")));
                }
                let t = Tensor::load(&path)?;
                if t.shape() != want {
                    return Err(Error::format(
                        &path,
                        format!("cell (c={c}, d={d}) has shape {:?}, manifest says {want:?}", t.shape()),
                    ));
                }
                cells.push(t);
            }
        }
        Ok(Self {
            height: m.height,
            width: m.width,
            classes: m.classes,
            domains: m.domains,
            n_per_cell: m.n_per_cell,
            seed: m.seed,
            small_frac: m.small_frac,
            cells,
            small_split: m.small_split,
        })
    }
}

/// Re-splits every domain with `small_frac` and `seed`, then partitions with
/// `holdout` as the test domain.
pub fn split(dataset: &DomainDataset, holdout: usize, small_frac: f64, seed: u64) -> Result<Partition> {
    dataset.check_domain(holdout)?;
    let small = compute_small_split(
        dataset.classes,
        dataset.domains,
        dataset.n_per_cell,
        small_frac,
        seed,
    )?;
    let train: Vec<usize> = (0..dataset.domains).filter(|&d| d != holdout).collect();
    dataset.partition_with(&small, &train, Some(holdout))
}

pub fn cell_file(c: usize, d: usize) -> String {
    format!("cell_c{c}_d{d}.rct")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    height: usize,
    width: usize,
    classes: usize,
    domains: usize,
    n_per_cell: usize,
    seed: u64,
    small_frac: f64,
    small_split: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Labels {
    classes: Vec<String>,
    domains: Vec<String>,
    cells: Vec<CellLabel>,
}

#[derive(Serialize, Deserialize)]
struct CellLabel {
    file: String,
    class: usize,
    domain: usize,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(3, 4).unwrap();
        let b = generate(3, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(4, 4).unwrap());
    }

    #[test]
    fn cells_are_full_and_in_range() {
        let ds = generate(1, 5).unwrap();
        for c in 0..4 {
            for d in 0..4 {
                let cell = ds.cell(c, d);
                assert_eq!(cell.shape(), &[5, 16, 16]);
                assert!(cell.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn sketches_are_sparse() {
        let ds = generate(0, 50).unwrap();
        let sketch = 3;
        for c in 0..4 {
            for i in 0..50 {
                let px = ds.pixels(ExampleRef { class: c, domain: sketch, index: i });
                let bright = px.iter().filter(|&&v| v >= 0.9).count();
                assert!(
                    bright as f64 >= 0.7 * px.len() as f64,
                    "class {c} example {i}: only {bright} background pixels"
                );
            }
        }
    }

    #[test]
    fn style_changes_pixels_not_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draw = ShapeDraw::sample(ShapeKind::Triangle, 16, 16, &Jitter::default(), &mut rng);
        let renders: Vec<Vec<f64>> = Style::ALL.iter().map(|&s| render(&draw, s, 16, 16)).collect();
        for i in 0..renders.len() {
            for j in i + 1..renders.len() {
                assert_ne!(renders[i], renders[j]);
            }
        }
        assert_eq!(draw.shape, ShapeKind::Triangle);
    }

    #[test]
    fn too_few_examples_is_rejected() {
        assert!(matches!(generate(0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn small_split_sizes() {
        let ds = generate(0, 10).unwrap();
        for d in 0..4 {
            assert_eq!(ds.small_split(d).len(), 2 * 4);
        }
        let p = split(&ds, 3, 0.2, 9).unwrap();
        for d in 0..3 {
            assert_eq!(p.train_small.iter().filter(|r| r.domain == d).count(), 8);
            assert_eq!(p.train_big.iter().filter(|r| r.domain == d).count(), 32);
        }
        assert_eq!(p.test.len(), 40);
        assert_eq!(p.test_small.len(), 8);
    }

    #[test]
    fn splits_partition_each_domain() {
        let ds = generate(5, 7).unwrap();
        let p = ds.holdout_partition(0).unwrap();
        let mut all: Vec<ExampleRef> = p.train_big.iter().chain(&p.train_small).copied().collect();
        let before = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), before);
        assert_eq!(all.len(), 3 * 4 * 7);
        assert!(p.test_small.iter().all(|r| p.test.contains(r)));
    }

    #[test]
    fn split_is_deterministic_and_validated() {
        let ds = generate(5, 10).unwrap();
        assert_eq!(split(&ds, 1, 0.3, 4).unwrap(), split(&ds, 1, 0.3, 4).unwrap());
        assert!(matches!(split(&ds, 4, 0.2, 0), Err(Error::Config(_))));
        assert!(matches!(split(&ds, 0, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&ds, 0, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = generate(8, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert!(dir.path().join("labels.json").exists());
        assert!(dir.path().join("cell_c3_d2.rct").exists());
        assert_eq!(DomainDataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_cell_names_the_cell() {
        let ds = generate(8, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("cell_c1_d2.rct")).unwrap();
        let err = DomainDataset::load(dir.path()).unwrap_err();
        assert!(err.is_io_or_format());
        assert!(err.to_string().contains("c=1, d=2"), "{err}");
    }

    #[test]
    fn foreign_magic_is_rejected() {
        let ds = generate(8, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let path = dir.path().join("cell_c0_d0.rct");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].reverse();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(DomainDataset::load(dir.path()), Err(Error::Format { .. })));
    }
}
