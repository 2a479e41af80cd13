//! Synthetic sparse-to-dense benchmark: a dimpled channel, boundary inputs
//! and dense multi-channel fields from a sparse linear reference solve.
//!
//! Field channels, in order:
//! 0. temperature: graph-Laplacian diffusion with the inlet held at `a`, the
//!    outlet at 0 and the flux profile injected along the bottom wall;
//! 1-2. velocity: minus the least-squares nodal gradient of a potential held
//!    at `b` on the inlet and 0 on the outlet;
//! 3. pressure: that potential.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, Graph, PointCloud};
use crate::linalg::{norm2, CsrMatrix, Mat, SparseCholesky};
use crate::spectral::combinatorial_laplacian;

pub const FORMAT_VERSION: u32 = 1;
pub const CHANNEL_NAMES: [&str; 4] = ["temperature", "velocity_x", "velocity_y", "pressure"];
pub const META_FILE: &str = "meta.json";
pub const MESH_FILE: &str = "mesh.json";
pub const SAMPLES_FILE: &str = "samples.bin";

const SOLVE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub length: f64,
    pub height: f64,
    /// Depth of the wall dimples.
    pub amplitude: f64,
    /// Dimples per wall.
    pub wavenumber: u32,
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            length: 2.0,
            height: 1.0,
            amplitude: 0.15,
            wavenumber: 3,
        }
    }
}

impl DomainParams {
    fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.height > 0.0 && self.amplitude >= 0.0) {
            return Err(Error::Config("domain length and height must be positive".into()));
        }
        if 2.0 * self.amplitude >= 0.8 * self.height {
            return Err(Error::Config("dimple amplitude closes the channel".into()));
        }
        Ok(())
    }

    fn dimple(&self, x: f64, phase: f64) -> f64 {
        let w = std::f64::consts::TAU * self.wavenumber as f64 * x / self.length;
        0.5 * self.amplitude * (1.0 - (w + phase).cos())
    }

    pub fn bottom(&self, x: f64) -> f64 {
        self.dimple(x, 0.0)
    }

    pub fn top(&self, x: f64) -> f64 {
        self.height - self.dimple(x, std::f64::consts::PI)
    }
}

/// Node sets of a generated channel. Boundary lists index into `points`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomain {
    pub params: DomainParams,
    pub points: PointCloud,
    pub boundary: Vec<usize>,
    /// Bottom wall without its corners, ordered by `x`.
    pub flux_segment: Vec<usize>,
    pub inlet: Vec<usize>,
    pub outlet: Vec<usize>,
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Channel geometry with about `n_target` nodes: walls sampled at a uniform
/// spacing, interior filled with a randomly shifted Halton sequence.
pub fn generate_domain(n_target: usize, seed: u64, params: &DomainParams) -> Result<SyntheticDomain> {
    if n_target < 50 {
        return Err(Error::Config(format!("n_target {n_target} is below 50")));
    }
    params.validate()?;
    let (lx, ly) = (params.length, params.height);
    let area = lx * (ly - params.amplitude);
    let h = (area / n_target as f64).sqrt();
    let nx = (lx / h).round().max(2.0) as usize;
    let mut coords: Vec<[f64; 2]> = Vec::new();
    let (mut boundary, mut flux, mut inlet, mut outlet) = (vec![], vec![], vec![], vec![]);
    for j in 0..=nx {
        let x = lx * j as f64 / nx as f64;
        let id = coords.len();
        coords.push([x, params.bottom(x)]);
        boundary.push(id);
        match j {
            0 => inlet.push(id),
            j if j == nx => outlet.push(id),
            _ => flux.push(id),
        }
    }
    for j in 0..=nx {
        let x = lx * j as f64 / nx as f64;
        let id = coords.len();
        coords.push([x, params.top(x)]);
        boundary.push(id);
        match j {
            0 => inlet.push(id),
            j if j == nx => outlet.push(id),
            _ => {}
        }
    }
    let ny = ((params.top(0.0) - params.bottom(0.0)) / h).round().max(2.0) as usize;
    for (x, set) in [(0.0, &mut inlet), (lx, &mut outlet)] {
        let (y0, y1) = (params.bottom(x), params.top(x));
        for j in 1..ny {
            let id = coords.len();
            coords.push([x, y0 + (y1 - y0) * j as f64 / ny as f64]);
            boundary.push(id);
            set.push(id);
        }
    }
    let n_interior = n_target.saturating_sub(coords.len());
    if n_interior == 0 {
        return Err(Error::Config(format!("n_target {n_target} leaves no interior nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 2] = [rng.gen(), rng.gen()];
    let margin = 0.5 * h;
    let mut i = 1u64;
    let mut accepted = 0;
    while accepted < n_interior {
        let u = (radical_inverse(i, 2) + shift[0]).fract();
        let v = (radical_inverse(i, 3) + shift[1]).fract();
        i += 1;
        let (x, y) = (u * lx, v * ly);
        if x > margin && x < lx - margin && y > params.bottom(x) + margin && y < params.top(x) - margin {
            coords.push([x, y]);
            accepted += 1;
        }
        if i > 1_000_000 {
            return Err(Error::DegenerateGeometry("interior sampling did not fill the domain".into()));
        }
    }
    Ok(SyntheticDomain {
        params: params.clone(),
        points: PointCloud::from_points_2d(&coords)?,
        boundary,
        flux_segment: flux,
        inlet,
        outlet,
    })
}

/// Prefactored graph-Laplacian solve with fixed Dirichlet nodes.
#[derive(Clone, Debug)]
pub struct DirichletSolver {
    laplacian: CsrMatrix,
    fixed: Vec<usize>,
    free: Vec<usize>,
    /// position of each node in `free`, or `usize::MAX` when fixed
    free_pos: Vec<usize>,
    chol: SparseCholesky,
    reduced: CsrMatrix,
}

impl DirichletSolver {
    pub fn new(graph: &Graph, fixed: &[usize]) -> Result<Self> {
        if fixed.is_empty() {
            return Err(Error::SingularSystem("no Dirichlet nodes".into()));
        }
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        let n = graph.n();
        let mut is_fixed = vec![false; n];
        for &i in fixed {
            if i >= n {
                return Err(Error::ShapeMismatch(format!("Dirichlet node {i} outside 0..{n}")));
            }
            is_fixed[i] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !is_fixed[i]).collect();
        let mut free_pos = vec![usize::MAX; n];
        for (p, &i) in free.iter().enumerate() {
            free_pos[i] = p;
        }
        let laplacian = combinatorial_laplacian(graph);
        let reduced = laplacian.principal_submatrix(&free)?;
        let chol = SparseCholesky::factor(&reduced)?;
        let mut fixed: Vec<usize> = fixed.to_vec();
        fixed.sort_unstable();
        fixed.dedup();
        Ok(DirichletSolver {
            laplacian,
            fixed,
            free,
            free_pos,
            chol,
            reduced,
        })
    }

    /// `values[j]` is the Dirichlet value of the `j`-th fixed node in
    /// ascending node order; `source` is the nodal right-hand side.
    pub fn solve(&self, values: &[f64], source: &[f64]) -> Result<Vec<f64>> {
        let n = self.laplacian.n_rows();
        if values.len() != self.fixed.len() || source.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} Dirichlet values and {} sources for {} fixed of {n} nodes",
                values.len(),
                source.len(),
                self.fixed.len()
            )));
        }
        let mut x = vec![0.0; n];
        for (&i, &v) in self.fixed.iter().zip(values) {
            x[i] = v;
        }
        let mut rhs: Vec<f64> = self.free.iter().map(|&i| source[i]).collect();
        for (p, &i) in self.free.iter().enumerate() {
            let (cols, vals) = self.laplacian.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                if self.free_pos[j] == usize::MAX {
                    rhs[p] -= w * x[j];
                }
            }
        }
        if self.free.is_empty() {
            return Ok(x);
        }
        let xf = self.chol.solve(&rhs)?;
        let mut r = vec![0.0; xf.len()];
        self.reduced.mul_vec(&xf, &mut r);
        r.iter_mut().zip(&rhs).for_each(|(a, b)| *a -= b);
        let (res, scale) = (norm2(&r), norm2(&rhs));
        if res > SOLVE_TOL * scale {
            return Err(Error::SingularSystem(format!(
                "residual {res:.3e} exceeds tolerance for right-hand side norm {scale:.3e}"
            )));
        }
        for (&i, v) in self.free.iter().zip(xf) {
            x[i] = v;
        }
        Ok(x)
    }

    pub fn fixed(&self) -> &[usize] {
        &self.fixed
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }
}

/// One-off Dirichlet solve of `L x = source` with `x[i] = v` for each
/// `(i, v)` in `dirichlet`.
pub fn solve_dirichlet(graph: &Graph, dirichlet: &[(usize, f64)], source: &[f64]) -> Result<Vec<f64>> {
    let mut pairs = dirichlet.to_vec();
    pairs.sort_by_key(|p| p.0);
    pairs.dedup_by_key(|p| p.0);
    let nodes: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let values: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    DirichletSolver::new(graph, &nodes)?.solve(&values, source)
}

/// Weighted least-squares gradient of a nodal field over graph neighbours.
pub fn nodal_gradient(graph: &Graph, field: &[f64]) -> Result<Vec<[f64; 2]>> {
    let pts = graph.points();
    if pts.dim() != 2 || field.len() != graph.n() {
        return Err(Error::ShapeMismatch("gradient needs a 2-D graph and one value per node".into()));
    }
    let adj = graph.adjacency();
    let mut out = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let p = pts.point(i);
        let (mut a, mut b, mut c, mut rx, mut ry) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &j in adj.row(i).0 {
            let q = pts.point(j);
            let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
            let w = 1.0 / (dx * dx + dy * dy);
            let df = field[j] - field[i];
            a += w * dx * dx;
            b += w * dx * dy;
            c += w * dy * dy;
            rx += w * dx * df;
            ry += w * dy * df;
        }
        let det = a * c - b * b;
        if det.abs() <= 1e-12 * (a * c).abs().max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateGeometry(format!("collinear neighbourhood at node {i}")));
        }
        out.push([(c * rx - b * ry) / det, (a * ry - b * rx) / det]);
    }
    Ok(out)
}

/// Reference operator for one domain and graph, with both systems factored.
#[derive(Clone, Debug)]
pub struct ReferenceSolver {
    domain: SyntheticDomain,
    graph: Graph,
    solver: DirichletSolver,
    inlet_mask: Vec<bool>,
    q_flux: usize,
}

impl ReferenceSolver {
    pub fn new(domain: &SyntheticDomain, graph: &Graph, q_flux: usize) -> Result<Self> {
        if q_flux < 2 {
            return Err(Error::Config("q_flux must be at least 2".into()));
        }
        if graph.n() != domain.points.len() {
            return Err(Error::ShapeMismatch("graph and domain node counts differ".into()));
        }
        let mut fixed: Vec<usize> = domain.inlet.iter().chain(&domain.outlet).copied().collect();
        fixed.sort_unstable();
        let solver = DirichletSolver::new(graph, &fixed)?;
        let mut inlet_mask = vec![false; graph.n()];
        domain.inlet.iter().for_each(|&i| inlet_mask[i] = true);
        Ok(ReferenceSolver {
            domain: domain.clone(),
            graph: graph.clone(),
            solver,
            inlet_mask,
            q_flux,
        })
    }

    pub fn input_dim(&self) -> usize {
        2 + self.q_flux
    }

    fn boundary_values(&self, v: f64) -> Vec<f64> {
        self.solver
            .fixed()
            .iter()
            .map(|&i| if self.inlet_mask[i] { v } else { 0.0 })
            .collect()
    }

    /// Flux profile interpolated linearly onto the flux-segment nodes.
    fn flux_source(&self, profile: &[f64]) -> Vec<f64> {
        let mut src = vec![0.0; self.graph.n()];
        let lx = self.domain.params.length;
        let last = (self.q_flux - 1) as f64;
        for &i in &self.domain.flux_segment {
            let s = (self.domain.points.point(i)[0] / lx).clamp(0.0, 1.0) * last;
            let j = (s.floor() as usize).min(self.q_flux - 2);
            let t = s - j as f64;
            src[i] = (1.0 - t) * profile[j] + t * profile[j + 1];
        }
        src
    }

    /// `n x 4` field for the input `[a, b, flux_0 .. flux_{q_flux-1}]`.
    pub fn solve(&self, input: &[f64]) -> Result<Mat> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {}, expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        let temp = self.solver.solve(&self.boundary_values(input[0]), &self.flux_source(&input[2..]))?;
        let zero = vec![0.0; self.graph.n()];
        let pot = self.solver.solve(&self.boundary_values(input[1]), &zero)?;
        let grad = nodal_gradient(&self.graph, &pot)?;
        let mut out = Mat::zeros(self.graph.n(), CHANNEL_NAMES.len());
        for i in 0..self.graph.n() {
            out.set(i, 0, temp[i]);
            out.set(i, 1, -grad[i][0]);
            out.set(i, 2, -grad[i][1]);
            out.set(i, 3, pot[i]);
        }
        Ok(out)
    }
}

pub fn solve_reference(domain: &SyntheticDomain, graph: &Graph, input: &[f64]) -> Result<Mat> {
    let q_flux = input
        .len()
        .checked_sub(2)
        .ok_or_else(|| Error::ShapeMismatch("input shorter than two scalars".into()))?;
    ReferenceSolver::new(domain, graph, q_flux)?.solve(input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    /// `n x k`
    pub output: Mat,
}

/// Per-feature z-score statistics, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Normalization {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (q, k) = (first.input.len(), first.output.cols());
        let mut norm = Normalization {
            input_mean: vec![],
            input_std: vec![],
            output_mean: vec![],
            output_std: vec![],
        };
        for j in 0..q {
            let (m, s) = mean_std(samples.iter().map(move |x| x.input[j]));
            norm.input_mean.push(m);
            // a constant input carries no information; leave it centred only
            norm.input_std.push(if s > 0.0 { s } else { 1.0 });
        }
        for c in 0..k {
            let it = samples
                .iter()
                .flat_map(move |x| (0..x.output.rows()).map(move |r| x.output.get(r, c)));
            let (m, s) = mean_std(it);
            if !(s > 0.0) {
                return Err(Error::Config(format!("output channel {c} has zero variance")));
            }
            norm.output_mean.push(m);
            norm.output_std.push(s);
        }
        Ok(norm)
    }

    pub fn identity(q: usize, k: usize) -> Self {
        Normalization {
            input_mean: vec![0.0; q],
            input_std: vec![1.0; q],
            output_mean: vec![0.0; k],
            output_std: vec![1.0; k],
        }
    }

    fn check(&self, what: &str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::ShapeMismatch(format!("{what}: {got} features, statistics for {want}")));
        }
        Ok(())
    }

    pub fn normalize_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("input", x.len(), self.input_mean.len())?;
        Ok(x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("input", x.len(), self.input_mean.len())?;
        Ok(x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    fn map_output(&self, y: &Mat, f: impl Fn(f64, f64, f64) -> f64) -> Result<Mat> {
        self.check("output", y.cols(), self.output_mean.len())?;
        let mut out = y.clone();
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                out.set(r, c, f(y.get(r, c), self.output_mean[c], self.output_std[c]));
            }
        }
        Ok(out)
    }

    pub fn normalize_output(&self, y: &Mat) -> Result<Mat> {
        self.map_output(y, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_output(&self, y: &Mat) -> Result<Mat> {
        self.map_output(y, |v, m, s| v * s + m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn from_fractions(count: usize, fracs: [f64; 3]) -> Result<Self> {
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fracs:?} must be in [0, 1] and sum to 1")));
        }
        let train = (count as f64 * fracs[0]).round() as usize;
        let val = ((count as f64 * fracs[1]).round() as usize).min(count - train.min(count));
        let train = train.min(count);
        Ok(SplitSizes {
            train,
            val,
            test: count - train - val,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_target: usize,
    pub count: usize,
    pub split_fractions: [f64; 3],
    pub seed: u64,
    pub knn_k: usize,
    pub q_flux: usize,
    pub domain: DomainParams,
    pub a_range: [f64; 2],
    pub b_range: [f64; 2],
    /// Fourier modes of the random flux profile.
    pub flux_modes: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_target: 400,
            count: 300,
            split_fractions: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            seed: 0,
            knn_k: 6,
            q_flux: 20,
            domain: DomainParams::default(),
            a_range: [0.5, 1.5],
            b_range: [0.5, 1.5],
            flux_modes: 3,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<SplitSizes> {
        self.domain.validate()?;
        for (name, r) in [("a_range", self.a_range), ("b_range", self.b_range)] {
            if !(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::Config(format!("{name} {r:?} is not an interval")));
            }
        }
        if self.q_flux < 2 {
            return Err(Error::Config("q_flux must be at least 2".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        let sizes = SplitSizes::from_fractions(self.count, self.split_fractions)?;
        if sizes.train == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub q_flux: usize,
    pub count: usize,
    pub sample_stride: usize,
    pub channel_names: Vec<String>,
    pub normalization: Normalization,
    pub splits: SplitSizes,
    pub seed: u64,
    pub knn_k: usize,
    pub domain: DomainParams,
    /// Output values per input value, `n k / q`.
    pub reconstruction_ratio: f64,
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mesh {
    pub coords: Vec<[f64; 2]>,
    pub boundary: Vec<usize>,
    pub flux_segment: Vec<usize>,
    pub inlet: Vec<usize>,
    pub outlet: Vec<usize>,
    pub knn_k: usize,
}

impl Mesh {
    pub fn points(&self) -> Result<PointCloud> {
        PointCloud::from_points_2d(&self.coords)
    }

    pub fn graph(&self) -> Result<Graph> {
        build_knn_graph(&self.points()?, self.knn_k)
    }

    pub fn domain(&self, params: &DomainParams) -> Result<SyntheticDomain> {
        Ok(SyntheticDomain {
            params: params.clone(),
            points: self.points()?,
            boundary: self.boundary.clone(),
            flux_segment: self.flux_segment.clone(),
            inlet: self.inlet.clone(),
            outlet: self.outlet.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub mesh: Mesh,
    samples: Vec<Sample>,
    normalized: bool,
}

impl Dataset {
    /// Dataset of physical samples; statistics are fitted on the first
    /// `splits.train` samples.
    pub fn new(meta: DatasetMeta, mesh: Mesh, samples: Vec<Sample>) -> Result<Self> {
        if samples.len() != meta.count || meta.splits.total() != meta.count {
            return Err(Error::Config(format!(
                "{} samples for count {} and splits {:?}",
                samples.len(),
                meta.count,
                meta.splits
            )));
        }
        Ok(Dataset {
            meta,
            mesh,
            samples,
            normalized: false,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalization(&self) -> &Normalization {
        &self.meta.normalization
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        let s = self.meta.splits;
        match split {
            Split::Train => &self.samples[..s.train],
            Split::Val => &self.samples[s.train..s.train + s.val],
            Split::Test => &self.samples[s.train + s.val..],
        }
    }

    /// Applies the stored statistics in place.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalized {
            return Ok(());
        }
        let norm = self.meta.normalization.clone();
        for s in &mut self.samples {
            s.input = norm.normalize_input(&s.input)?;
            s.output = norm.normalize_output(&s.output)?;
        }
        self.normalized = true;
        Ok(())
    }

    /// Keeps the leading samples of every split; used for small runs.
    pub fn truncated(&self, sizes: SplitSizes) -> Result<Self> {
        let s = self.meta.splits;
        if sizes.train > s.train || sizes.val > s.val || sizes.test > s.test {
            return Err(Error::Config(format!("cannot take {sizes:?} from {s:?}")));
        }
        let mut samples = Vec::with_capacity(sizes.total());
        samples.extend_from_slice(&self.split(Split::Train)[..sizes.train]);
        samples.extend_from_slice(&self.split(Split::Val)[..sizes.val]);
        samples.extend_from_slice(&self.split(Split::Test)[..sizes.test]);
        let mut meta = self.meta.clone();
        meta.splits = sizes;
        meta.count = sizes.total();
        Ok(Dataset {
            meta,
            mesh: self.mesh.clone(),
            samples,
            normalized: self.normalized,
        })
    }
}

fn random_input(rng: &mut ChaCha8Rng, cfg: &GenerateConfig) -> Vec<f64> {
    let mut input = Vec::with_capacity(2 + cfg.q_flux);
    input.push(rng.gen_range(cfg.a_range[0]..=cfg.a_range[1]));
    input.push(rng.gen_range(cfg.b_range[0]..=cfg.b_range[1]));
    let c0: f64 = rng.gen_range(0.5..1.5);
    let coeffs: Vec<(f64, f64)> = (0..cfg.flux_modes)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    for i in 0..cfg.q_flux {
        let s = i as f64 / (cfg.q_flux - 1) as f64;
        let mut f = c0;
        for (j, (a, b)) in coeffs.iter().enumerate() {
            let w = std::f64::consts::TAU * (j + 1) as f64 * s;
            f += (a * w.cos() + b * w.sin()) / (j + 1) as f64;
        }
        input.push(f);
    }
    input
}

/// Builds the whole dataset in memory (physical units).
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    let splits = cfg.validate()?;
    let domain = generate_domain(cfg.n_target, cfg.seed, &cfg.domain)?;
    let graph = build_knn_graph(&domain.points, cfg.knn_k)?;
    let solver = ReferenceSolver::new(&domain, &graph, cfg.q_flux)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut samples = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let input = random_input(&mut rng, cfg);
        let output = solver.solve(&input)?;
        samples.push(Sample { input, output });
    }
    let normalization = Normalization::fit(&samples[..splits.train])?;
    let (n, k, q) = (graph.n(), CHANNEL_NAMES.len(), 2 + cfg.q_flux);
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        n,
        k,
        q,
        q_flux: cfg.q_flux,
        count: cfg.count,
        sample_stride: q + n * k,
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        normalization,
        splits,
        seed: cfg.seed,
        knn_k: cfg.knn_k,
        domain: cfg.domain.clone(),
        reconstruction_ratio: (n * k) as f64 / q as f64,
        checksums: BTreeMap::new(),
    };
    let coords = (0..n)
        .map(|i| {
            let p = domain.points.point(i);
            [p[0], p[1]]
        })
        .collect();
    let mesh = Mesh {
        coords,
        boundary: domain.boundary,
        flux_segment: domain.flux_segment,
        inlet: domain.inlet,
        outlet: domain.outlet,
        knn_k: cfg.knn_k,
    };
    Dataset::new(meta, mesh, samples)
}

/// 64-bit FNV-1a of `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn samples_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * ds.meta.count * ds.meta.sample_stride);
    for s in &ds.samples {
        for v in s.input.iter().chain(s.output.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn to_json<T: Serialize>(v: &T, file: &str) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::format(file, e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `meta.json`, `mesh.json` and `samples.bin` into `dir`, which is
/// created if needed. Samples must be in physical units.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    if ds.normalized {
        return Err(Error::Config("only physical-unit datasets can be written".into()));
    }
    fs::create_dir_all(dir)?;
    let mesh = to_json(&ds.mesh, MESH_FILE)?;
    let samples = samples_bytes(ds);
    let mut meta = ds.meta.clone();
    meta.checksums = BTreeMap::from([
        (MESH_FILE.to_string(), hex(fnv1a64(&mesh))),
        (SAMPLES_FILE.to_string(), hex(fnv1a64(&samples))),
    ]);
    fs::write(dir.join(MESH_FILE), &mesh)?;
    fs::write(dir.join(SAMPLES_FILE), &samples)?;
    fs::write(dir.join(META_FILE), to_json(&meta, META_FILE)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReadMode {
    /// Inputs and outputs z-scored with the stored statistics.
    #[default]
    Normalized,
    Raw,
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], file: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| {
        Error::format(file, format!("line {}, column {}: {e}", e.line(), e.column()))
    })
}

fn verify(meta: &DatasetMeta, file: &str, bytes: &[u8]) -> Result<()> {
    let expected = meta
        .checksums
        .get(file)
        .ok_or_else(|| Error::format(META_FILE, format!("no checksum for {file}")))?;
    let found = hex(fnv1a64(bytes));
    if *expected != found {
        return Err(Error::ChecksumMismatch {
            file: file.to_string(),
            expected: expected.clone(),
            found,
        });
    }
    Ok(())
}

pub fn read_dataset(dir: &Path, mode: ReadMode) -> Result<Dataset> {
    let meta: DatasetMeta = parse_json(&fs::read(dir.join(META_FILE))?, META_FILE)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            META_FILE,
            format!("format_version {} is not supported", meta.format_version),
        ));
    }
    let mesh_bytes = fs::read(dir.join(MESH_FILE))?;
    let mesh: Mesh = parse_json(&mesh_bytes, MESH_FILE)?;
    if mesh.coords.len() != meta.n {
        return Err(Error::format(
            MESH_FILE,
            format!("{} nodes, but {META_FILE} declares n = {}", mesh.coords.len(), meta.n),
        ));
    }
    let n = meta.n;
    for (name, list) in [
        ("boundary", &mesh.boundary),
        ("flux_segment", &mesh.flux_segment),
        ("inlet", &mesh.inlet),
        ("outlet", &mesh.outlet),
    ] {
        if let Some(&bad) = list.iter().find(|&&i| i >= n) {
            return Err(Error::format(MESH_FILE, format!("{name} index {bad} outside 0..{n}")));
        }
    }
    let stride = meta.q + meta.n * meta.k;
    if meta.sample_stride != stride || meta.channel_names.len() != meta.k {
        return Err(Error::format(
            META_FILE,
            format!("sample_stride {} or channel names inconsistent with n, k, q", meta.sample_stride),
        ));
    }
    if meta.splits.total() != meta.count {
        return Err(Error::format(META_FILE, "split sizes do not sum to count"));
    }
    let norm = &meta.normalization;
    if norm.input_mean.len() != meta.q
        || norm.input_std.len() != meta.q
        || norm.output_mean.len() != meta.k
        || norm.output_std.len() != meta.k
        || norm.input_std.iter().chain(&norm.output_std).any(|s| !(*s > 0.0))
    {
        return Err(Error::format(META_FILE, "normalization statistics malformed"));
    }
    let bytes = fs::read(dir.join(SAMPLES_FILE))?;
    let sample_bytes = 8 * stride;
    let expected = meta.count * sample_bytes;
    if bytes.len() != expected {
        let bad = bytes.len() / sample_bytes;
        let detail = if bytes.len() < expected {
            format!("truncated in sample {bad}: {} of {expected} bytes", bytes.len())
        } else {
            format!("{} bytes after the last sample", bytes.len() - expected)
        };
        return Err(Error::format(SAMPLES_FILE, detail));
    }
    verify(&meta, MESH_FILE, &mesh_bytes)?;
    verify(&meta, SAMPLES_FILE, &bytes)?;
    let mut samples = Vec::with_capacity(meta.count);
    for (idx, chunk) in bytes.chunks_exact(sample_bytes).enumerate() {
        let vals: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(p) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(SAMPLES_FILE, format!("sample {idx}, value {p} is not finite")));
        }
        let output = Mat::from_vec(meta.n, meta.k, vals[meta.q..].to_vec())?;
        samples.push(Sample {
            input: vals[..meta.q].to_vec(),
            output,
        });
    }
    let mut ds = Dataset::new(meta, mesh, samples)?;
    if mode == ReadMode::Normalized {
        ds.normalize()?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> Graph {
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, 0.0]).collect();
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Graph::from_weighted_edges(PointCloud::from_points_2d(&pts).unwrap(), &edges).unwrap()
    }

    #[test]
    fn five_node_path_dirichlet() {
        let x = solve_dirichlet(&path_graph(5), &[(0, 0.0), (4, 1.0)], &[0.0; 5]).unwrap();
        for (v, e) in x.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_errors() {
        let g = path_graph(4);
        assert!(matches!(solve_dirichlet(&g, &[], &[0.0; 4]), Err(Error::SingularSystem(_))));
        let pts = PointCloud::from_points_2d(&[[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [6.0, 0.0]]).unwrap();
        let split = Graph::from_weighted_edges(pts, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert!(matches!(solve_dirichlet(&split, &[(0, 1.0)], &[0.0; 4]), Err(Error::Disconnected)));
    }

    #[test]
    fn domain_is_deterministic_and_sized() {
        let p = DomainParams::default();
        let a = generate_domain(400, 7, &p).unwrap();
        let b = generate_domain(400, 7, &p).unwrap();
        assert_eq!(a, b);
        assert!((380..=420).contains(&a.points.len()));
        assert!(generate_domain(49, 7, &p).is_err());
    }

    #[test]
    fn flat_domain_has_rectangular_boundary() {
        let p = DomainParams {
            amplitude: 0.0,
            ..DomainParams::default()
        };
        let d = generate_domain(200, 1, &p).unwrap();
        for &i in &d.boundary {
            let q = d.points.point(i);
            let on_edge = q[0] == 0.0 || q[0] == p.length || q[1] == 0.0 || q[1] == p.height;
            assert!(on_edge, "{q:?}");
        }
    }

    #[test]
    fn node_sets_are_disjoint_and_interior_is_inside() {
        let p = DomainParams::default();
        let d = generate_domain(300, 3, &p).unwrap();
        let mut seen = vec![0; d.points.len()];
        for &i in d.flux_segment.iter().chain(&d.inlet).chain(&d.outlet) {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c <= 1));
        let bset: std::collections::HashSet<_> = d.boundary.iter().copied().collect();
        assert!(d.flux_segment.iter().all(|i| bset.contains(i)));
        for i in (0..d.points.len()).filter(|i| !bset.contains(i)) {
            let q = d.points.point(i);
            assert!(q[0] > 0.0 && q[0] < p.length);
            assert!(q[1] > p.bottom(q[0]) && q[1] < p.top(q[0]));
        }
        let xs: Vec<f64> = d.flux_segment.iter().map(|&i| d.points.point(i)[0]).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_boundary_gives_constant_temperature() {
        let d = generate_domain(150, 2, &DomainParams::default()).unwrap();
        let g = build_knn_graph(&d.points, 6).unwrap();
        let pairs: Vec<(usize, f64)> = d.boundary.iter().map(|&i| (i, 0.7)).collect();
        let x = solve_dirichlet(&g, &pairs, &vec![0.0; g.n()]).unwrap();
        assert!(x.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn reference_solution_shape() {
        let d = generate_domain(120, 2, &DomainParams::default()).unwrap();
        let g = build_knn_graph(&d.points, 6).unwrap();
        let mut input = vec![1.0, 0.8];
        input.extend(vec![0.5; 20]);
        let out = solve_reference(&d, &g, &input).unwrap();
        assert_eq!((out.rows(), out.cols()), (g.n(), 4));
        for &i in &d.inlet {
            assert_eq!(out.get(i, 0), 1.0);
            assert_eq!(out.get(i, 3), 0.8);
        }
        for &i in &d.outlet {
            assert_eq!(out.get(i, 0), 0.0);
        }
        assert!(solve_reference(&d, &g, &input[..2]).is_err());
        assert!(ReferenceSolver::new(&d, &g, 20).unwrap().solve(&input[..5]).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(
            SplitSizes::from_fractions(10, [0.6, 0.2, 0.2]).unwrap(),
            SplitSizes { train: 6, val: 2, test: 2 }
        );
        assert_eq!(
            SplitSizes::from_fractions(300, [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]).unwrap(),
            SplitSizes { train: 200, val: 50, test: 50 }
        );
        let c = 1546.0;
        assert_eq!(
            SplitSizes::from_fractions(1546, [988.0 / c, 248.0 / c, 310.0 / c]).unwrap(),
            SplitSizes { train: 988, val: 248, test: 310 }
        );
        assert!(SplitSizes::from_fractions(10, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    fn small_cfg() -> GenerateConfig {
        GenerateConfig {
            n_target: 80,
            count: 10,
            split_fractions: [0.6, 0.2, 0.2],
            ..GenerateConfig::default()
        }
    }

    #[test]
    fn dataset_meta_and_ratio() {
        let ds = generate_dataset(&GenerateConfig {
            count: 6,
            split_fractions: [0.5, 0.25, 0.25],
            ..GenerateConfig::default()
        })
        .unwrap();
        assert_eq!(ds.meta.q, 22);
        assert!((ds.meta.reconstruction_ratio - (ds.meta.n * 4) as f64 / 22.0).abs() < 1e-12);
        assert!((380..=420).contains(&ds.meta.n));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(ds.meta.splits, SplitSizes { train: 6, val: 2, test: 2 });
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path(), ReadMode::Raw).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.mesh, ds.mesh);
        let normed = read_dataset(dir.path(), ReadMode::Normalized).unwrap();
        assert!(normed.is_normalized());
        let round = normed.normalization().denormalize_output(&normed.samples()[0].output).unwrap();
        assert!(round.max_abs_diff(&ds.samples()[0].output) < 1e-12);
    }

    #[test]
    fn corrupted_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_cfg()).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let bytes = fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(read_dataset(dir.path(), ReadMode::Raw), Err(Error::ChecksumMismatch { .. })));

        let stride = 8 * ds.meta.sample_stride;
        fs::write(&path, &bytes[..3 * stride + 17]).unwrap();
        match read_dataset(dir.path(), ReadMode::Raw) {
            Err(Error::Format { file, detail }) => {
                assert_eq!(file, SAMPLES_FILE);
                assert!(detail.contains("sample 3"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, &bytes).unwrap();

        let meta_path = dir.path().join(META_FILE);
        let meta = fs::read_to_string(&meta_path).unwrap();
        let bumped = meta.replacen(&format!("\"n\": {}", ds.meta.n), &format!("\"n\": {}", ds.meta.n + 1), 1);
        fs::write(&meta_path, bumped).unwrap();
        match read_dataset(dir.path(), ReadMode::Raw) {
            Err(Error::Format { file, .. }) => assert_eq!(file, MESH_FILE),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &generate_dataset(&small_cfg()).unwrap()).unwrap();
        write_dataset(b.path(), &generate_dataset(&small_cfg()).unwrap()).unwrap();
        for f in [META_FILE, MESH_FILE, SAMPLES_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
