//! Ground-truth conductivities, current families, synthetic data on a fine
//! mesh transferred to a coarse one, and relative Gaussian noise.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::PhantomError;
use crate::fem::{ElementField, NodalField, SolverOptions};
use crate::mesh::TriMesh;
use crate::operator::{norm_y, Current, CurrentSet, ForwardModel};

/// An inclusion with a constant conductivity inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        /// Rotation of the first axis, radians.
        #[serde(default)]
        angle: f64,
        value: f64,
    },
    Disk {
        center: [f64; 2],
        radius: f64,
        value: f64,
    },
    /// Simple polygon, vertices in order.
    Polygon {
        vertices: Vec<[f64; 2]>,
        value: f64,
    },
}

impl Shape {
    pub fn value(&self) -> f64 {
        match self {
            Shape::Ellipse { value, .. } | Shape::Disk { value, .. } | Shape::Polygon { value, .. } => *value,
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Shape::Ellipse { center, semi_axes, angle, .. } => {
                let (s, c) = angle.sin_cos();
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / semi_axes[0]).powi(2) + (v / semi_axes[1]).powi(2) <= 1.0
            }
            Shape::Disk { center, radius, .. } => (p[0] - center[0]).hypot(p[1] - center[1]) <= *radius,
            Shape::Polygon { vertices, .. } => {
                let mut inside = false;
                let n = vertices.len();
                for k in 0..n {
                    let a = vertices[k];
                    let b = vertices[(k + 1) % n];
                    if (a[1] > p[1]) != (b[1] > p[1]) {
                        let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                        if p[0] < x {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    /// Largest distance from the origin of any point of the shape.
    fn reach(&self) -> f64 {
        match self {
            Shape::Ellipse { center, semi_axes, .. } => center[0].hypot(center[1]) + semi_axes[0].max(semi_axes[1]),
            Shape::Disk { center, radius, .. } => center[0].hypot(center[1]) + radius,
            Shape::Polygon { vertices, .. } => vertices.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max),
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::Invalid(m.to_string()));
        if !(self.value() > 0.0) || !self.value().is_finite() {
            return bad("shape values must be positive");
        }
        match self {
            Shape::Ellipse { semi_axes, .. } if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) => {
                bad("ellipse semi-axes must be positive")
            }
            Shape::Disk { radius, .. } if !(*radius > 0.0) => bad("disk radius must be positive"),
            Shape::Polygon { vertices, .. } if vertices.len() < 3 => bad("polygon needs at least 3 vertices"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSpec {
    /// Piecewise constant: `background` outside all shapes, later shapes win where they overlap.
    Geometry { background: f64, shapes: Vec<Shape> },
    /// Grayscale P2 raster mapped affinely from `[0, maxval]` onto `range`.
    Image { path: String, range: [f64; 2] },
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::Geometry { background: 1.0, shapes: default_shapes() }
    }
}

/// An ellipse, a disk and an L-shaped hexagon with plateau values 1.8, 3 and 2.5.
pub fn default_shapes() -> Vec<Shape> {
    vec![
        Shape::Ellipse { center: [-0.15, 0.12], semi_axes: [0.12, 0.07], angle: 0.0, value: 1.8 },
        Shape::Disk { center: [0.15, 0.12], radius: 0.09, value: 3.0 },
        Shape::Polygon {
            vertices: vec![
                [-0.10, -0.28],
                [0.14, -0.28],
                [0.14, -0.20],
                [-0.02, -0.20],
                [-0.02, -0.08],
                [-0.10, -0.08],
            ],
            value: 2.5,
        },
    ]
}

fn check_geometry(radius: f64, background: f64, shapes: &[Shape]) -> Result<(), PhantomError> {
    if !(background > 0.0) || !background.is_finite() {
        return Err(PhantomError::Invalid(format!("background must be positive, got {background}")));
    }
    for (k, s) in shapes.iter().enumerate() {
        s.validate()?;
        if s.reach() > radius {
            return Err(PhantomError::Invalid(format!("shape {k} extends outside the disk of radius {radius}")));
        }
    }
    Ok(())
}

fn check_range([lo, hi]: [f64; 2]) -> Result<(), PhantomError> {
    if !(lo > 0.0 && hi >= lo) || !hi.is_finite() {
        return Err(PhantomError::Invalid(format!("value range [{lo}, {hi}] must be positive and ordered")));
    }
    Ok(())
}

impl PhantomSpec {
    /// Checks parameters against a disk of the given radius. Image files are not read.
    pub fn validate(&self, radius: f64) -> Result<(), PhantomError> {
        match self {
            PhantomSpec::Geometry { background, shapes } => check_geometry(radius, *background, shapes),
            PhantomSpec::Image { range, .. } => check_range(*range),
        }
    }
}

pub fn geometric_phantom(mesh: &TriMesh, background: f64, shapes: &[Shape]) -> Result<NodalField, PhantomError> {
    check_geometry(mesh.radius(), background, shapes)?;
    Ok(NodalField::from_fn(mesh, |n| {
        let p = mesh.nodes()[n];
        shapes.iter().rev().find(|s| s.contains(p)).map_or(background, Shape::value)
    }))
}

/// Builds the conductivity described by `spec`; image paths are resolved against `base`.
pub fn build_phantom(mesh: &TriMesh, spec: &PhantomSpec, base: Option<&Path>) -> Result<NodalField, PhantomError> {
    match spec {
        PhantomSpec::Geometry { background, shapes } => geometric_phantom(mesh, *background, shapes),
        PhantomSpec::Image { path, range } => {
            let p = match base {
                Some(b) => b.join(path),
                None => Path::new(path).to_path_buf(),
            };
            let img = GrayImage::load(&p)?;
            image_phantom(&img, mesh, *range)
        }
    }
}

/// 8-bit or 16-bit grayscale raster, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self, PhantomError> {
        if width == 0 || height == 0 {
            return Err(PhantomError::Image("image is empty".into()));
        }
        if maxval == 0 {
            return Err(PhantomError::Image("maxval must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(PhantomError::Image(format!("expected {} pixels, found {}", width * height, pixels.len())));
        }
        if let Some(p) = pixels.iter().find(|&&p| p > maxval) {
            return Err(PhantomError::Image(format!("pixel value {p} exceeds maxval {maxval}")));
        }
        Ok(Self { width, height, maxval, pixels })
    }

    pub fn pixel(&self, row: usize, col: usize) -> u16 {
        self.pixels[row * self.width + col]
    }

    /// Parses an ASCII `P2` image; `#` starts a comment running to end of line.
    pub fn parse_pgm(text: &str) -> Result<Self, PhantomError> {
        let mut tokens = text.lines().flat_map(|l| l.split('#').next().unwrap_or("").split_whitespace());
        match tokens.next() {
            Some("P2") => {}
            Some(m) => return Err(PhantomError::Image(format!("unsupported magic `{m}`, expected P2"))),
            None => return Err(PhantomError::Image("empty file".into())),
        }
        let mut header = [0usize; 3];
        for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
            let t = tokens.next().ok_or_else(|| PhantomError::Image(format!("missing {name}")))?;
            *slot = t.parse().map_err(|_| PhantomError::Image(format!("bad {name} `{t}`")))?;
        }
        let [width, height, maxval] = header;
        let maxval = u16::try_from(maxval).map_err(|_| PhantomError::Image(format!("maxval {maxval} too large")))?;
        let pixels = tokens
            .map(|t| t.parse::<u16>().map_err(|_| PhantomError::Image(format!("bad pixel `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(width, height, maxval, pixels)
    }

    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n{}\n", self.width, self.height, self.maxval);
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, PhantomError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PhantomError::Image(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_pgm(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), PhantomError> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    /// Bilinear interpolation with pixel centres at half-integer coordinates,
    /// clamped at the border. Returns a gray level in `[0, maxval]`.
    pub fn sample(&self, col: f64, row: f64) -> f64 {
        let x = (col - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (row - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (c0, r0) = (x.floor() as usize, y.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (fx, fy) = (x - c0 as f64, y - r0 as f64);
        let g = |r, c| f64::from(self.pixel(r, c));
        (1.0 - fy) * ((1.0 - fx) * g(r0, c0) + fx * g(r0, c1)) + fy * ((1.0 - fx) * g(r1, c0) + fx * g(r1, c1))
    }
}

/// Samples `img` stretched over the square `[-R, R]²` at every node and maps
/// gray level `g` to `lo + (hi - lo) g / maxval`.
pub fn image_phantom(img: &GrayImage, mesh: &TriMesh, range: [f64; 2]) -> Result<NodalField, PhantomError> {
    check_range(range)?;
    let [lo, hi] = range;
    let r = mesh.radius();
    let scale = f64::from(img.maxval);
    Ok(NodalField::from_fn(mesh, |n| {
        let p = mesh.nodes()[n];
        let col = (p[0] + r) / (2.0 * r) * img.width as f64;
        let row = (r - p[1]) / (2.0 * r) * img.height as f64;
        lo + (hi - lo) * img.sample(col, row) / scale
    }))
}

/// Rasterizes a nodal field to a `size × size` image over `[-R, R]²`. Pixels
/// outside the mesh take the value of the nearest triangle.
pub fn field_to_image(
    mesh: &TriMesh,
    field: &NodalField,
    size: usize,
    range: [f64; 2],
) -> Result<GrayImage, PhantomError> {
    if size == 0 {
        return Err(PhantomError::Image("image is empty".into()));
    }
    let [lo, hi] = range;
    if !(hi > lo) {
        return Err(PhantomError::Invalid(format!("value range [{lo}, {hi}] must be increasing")));
    }
    let loc = PointLocator::new(mesh);
    let r = mesh.radius();
    let px = 2.0 * r / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let p = [-r + (col as f64 + 0.5) * px, r - (row as f64 + 0.5) * px];
            let v = loc.interpolate(field, p);
            pixels.push(((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u16);
        }
    }
    GrayImage::new(size, size, 255, pixels)
}

/// The four linear currents `x1, x2, (x1 + x2)/√2, (x1 - x2)/√2`.
pub fn currents_full() -> CurrentSet {
    CurrentSet {
        currents: vec![
            Current::Linear { a1: 1.0, a2: 0.0 },
            Current::Linear { a1: 0.0, a2: 1.0 },
            Current::Linear { a1: FRAC_1_SQRT_2, a2: FRAC_1_SQRT_2 },
            Current::Linear { a1: FRAC_1_SQRT_2, a2: -FRAC_1_SQRT_2 },
        ],
    }
}

/// `f_i = sin(2iπθ/α)` on `θ ∈ [0, α]`, zero elsewhere, for `i = 1..=count`.
pub fn currents_limited(alpha: f64, count: usize) -> Result<CurrentSet, PhantomError> {
    if !(alpha > 0.0 && alpha <= TAU) {
        return Err(PhantomError::Currents(format!("opening angle must lie in (0, 2π], got {alpha}")));
    }
    if count == 0 {
        return Err(PhantomError::Currents("at least one current is required".into()));
    }
    let currents = (1..=count as u32).map(|k| Current::Sinusoid { k, alpha }).collect();
    Ok(CurrentSet { currents })
}

/// Bucket grid over triangle bounding boxes for point location.
pub struct PointLocator<'m> {
    mesh: &'m TriMesh,
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl<'m> PointLocator<'m> {
    pub fn new(mesh: &'m TriMesh) -> Self {
        let r = mesh.radius();
        let cell = mesh.max_edge_length().max(1e-12);
        let origin = [-r - cell, -r - cell];
        let n = ((2.0 * r + 2.0 * cell) / cell).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); n * n];
        let nodes = mesh.nodes();
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let xs = tri.map(|v| nodes[v][0]);
            let ys = tri.map(|v| nodes[v][1]);
            let lo =
                [xs.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::INFINITY, f64::min)];
            let hi = [
                xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ];
            let c0 = Self::index(origin, cell, n, lo);
            let c1 = Self::index(origin, cell, n, hi);
            for i in c0[0]..=c1[0] {
                for j in c0[1]..=c1[1] {
                    buckets[j * n + i].push(t);
                }
            }
        }
        Self { mesh, origin, cell, dims: [n, n], buckets }
    }

    fn index(origin: [f64; 2], cell: f64, n: usize, p: [f64; 2]) -> [usize; 2] {
        let f = |k: usize| (((p[k] - origin[k]) / cell).floor().max(0.0) as usize).min(n - 1);
        [f(0), f(1)]
    }

    fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let nodes = self.mesh.nodes();
        let [a, b, c] = self.mesh.triangles()[t].map(|v| nodes[v]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Triangle containing `p` with its barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let [i, j] = Self::index(self.origin, self.cell, self.dims[0], p);
        self.buckets[j * self.dims[0] + i].iter().find_map(|&t| {
            let l = self.barycentric(t, p);
            l.iter().all(|&x| x >= -1e-12).then_some((t, l))
        })
    }

    /// Triangle whose centroid is closest to `p`.
    pub fn nearest(&self, p: [f64; 2]) -> usize {
        (0..self.mesh.triangle_count())
            .min_by(|&a, &b| {
                let d = |t| {
                    let c = self.mesh.centroid(t);
                    (c[0] - p[0]).hypot(c[1] - p[1])
                };
                d(a).total_cmp(&d(b))
            })
            .expect("mesh has triangles")
    }

    /// Linear interpolation of a nodal field; points outside use the nearest
    /// triangle's linear extension clamped to its vertex values.
    pub fn interpolate(&self, field: &NodalField, p: [f64; 2]) -> f64 {
        let (t, l) = match self.locate(p) {
            Some(hit) => hit,
            None => {
                let t = self.nearest(p);
                let l = self.barycentric(t, p).map(|x| x.max(0.0));
                let s: f64 = l.iter().sum();
                (t, l.map(|x| x / s))
            }
        };
        let tri = self.mesh.triangles()[t];
        (0..3).map(|k| l[k] * field.values[tri[k]]).sum()
    }
}

/// Exact power densities transferred to the reconstruction mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedData {
    pub fields: Vec<ElementField>,
    /// Coarse centroids not contained in any fine triangle.
    pub fallbacks: usize,
}

/// Solves on the fine mesh and point-samples each power density at the
/// centroids of the coarse mesh.
pub fn synthesize_data(
    fine: &TriMesh,
    sigma_true: &NodalField,
    currents: &CurrentSet,
    coarse: &TriMesh,
    options: SolverOptions,
) -> Result<SynthesizedData, PhantomError> {
    let model = ForwardModel::new(fine, currents, options)?;
    let (h, _) = model.forward(sigma_true)?;
    let loc = PointLocator::new(fine);
    let mut fallbacks = 0;
    let owners: Vec<usize> = (0..coarse.triangle_count())
        .map(|t| {
            let c = coarse.centroid(t);
            loc.locate(c).map(|(ft, _)| ft).unwrap_or_else(|| {
                fallbacks += 1;
                loc.nearest(c)
            })
        })
        .collect();
    if fallbacks > 0 {
        log::warn!("{fallbacks} coarse centroids fell outside the fine mesh");
    }
    let fields = h.iter().map(|hf| ElementField::from_fn(coarse, |t| hf.values[owners[t]])).collect();
    Ok(SynthesizedData { fields, fallbacks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub delta_e: f64,
    pub seed: u64,
}

/// `y^δ = y + δ_e (‖y‖/‖e‖) e` with `e` i.i.d. standard normal per element and
/// `‖·‖` the `L^{q/2}` norm. Returns `y^δ` and `δ = δ_e ‖y‖`. The stream index
/// decorrelates several fields drawn from one seed.
pub fn add_noise(
    mesh: &TriMesh,
    y: &ElementField,
    spec: NoiseSpec,
    q: f64,
    stream: u64,
) -> Result<(ElementField, f64), PhantomError> {
    if !(spec.delta_e >= 0.0) || !spec.delta_e.is_finite() {
        return Err(PhantomError::Invalid(format!("noise level must be non-negative, got {}", spec.delta_e)));
    }
    let y_norm = norm_y(mesh, y, q)?;
    if spec.delta_e == 0.0 || y_norm == 0.0 {
        return Ok((y.clone(), 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let e = ElementField::from_fn(mesh, |_| StandardNormal.sample(&mut rng));
    let e_norm = norm_y(mesh, &e, q)?;
    let delta = spec.delta_e * y_norm;
    Ok((y.axpy(delta / e_norm, &e), delta))
}

/// Noise for every current, stream `i` for current `i`.
pub fn add_noise_all(
    mesh: &TriMesh,
    ys: &[ElementField],
    spec: NoiseSpec,
    q: f64,
) -> Result<(Vec<ElementField>, Vec<f64>), PhantomError> {
    ys.iter()
        .enumerate()
        .map(|(i, y)| add_noise(mesh, y, spec, q, i as u64))
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().unzip())
}
