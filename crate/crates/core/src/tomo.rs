//! Discrete 2-D parallel-beam ray-integral operator, stored per angle.
//!
//! Pixels have unit side length. The image occupies `[-w/2, w/2] × [-h/2, h/2]`
//! with `y` pointing up, so pixel `(row, col)` has its centre at
//! `(col + 0.5 - w/2, h/2 - row - 0.5)` and flat index `row * w + col`.
//! At angle `β` the detector axis is `u = (cos β, sin β)` and rays travel along
//! `r = (-sin β, cos β)`; detector element `p` sits at offset
//! `(p - (d_p - 1)/2) · span / d_p` along `u`. At 0° rays are vertical.
//!
//! Matrix entries are exact ray/pixel intersection lengths. Pixels are treated
//! as half-open cells, so a ray running exactly along a grid line is assigned
//! to the pixel on its positive side.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2};

use crate::error::{check_len, Error, Result};

/// Candidate angle grid and detector layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub height: usize,
    pub width: usize,
    pub detector_count: usize,
    pub angles_deg: Vec<f64>,
    pub detector_span: f64,
}

/// Smallest odd detector count strictly above `ceil(√2 · max(h, w))`.
///
/// Gives 183 for 128×128 and 93 for 64×64.
pub fn default_detector_count(height: usize, width: usize) -> usize {
    let base = (std::f64::consts::SQRT_2 * height.max(width) as f64).ceil() as usize;
    if base % 2 == 0 {
        base + 1
    } else {
        base + 2
    }
}

/// Equispaced candidate angles `k · 180 / n` and a detector row wide enough to
/// cover the image diagonal.
pub fn build_geometry(
    height: usize,
    width: usize,
    n_candidates: usize,
    detector_count: usize,
) -> Result<ScanGeometry> {
    if height == 0 || width == 0 || n_candidates == 0 || detector_count == 0 {
        return Err(Error::Argument(format!(
            "geometry dimensions must be positive (h={height}, w={width}, angles={n_candidates}, d_p={detector_count})"
        )));
    }
    let angles_deg = (0..n_candidates)
        .map(|k| k as f64 * 180.0 / n_candidates as f64)
        .collect();
    let diagonal = ((height * height + width * width) as f64).sqrt().ceil();
    let detector_span = diagonal.max(detector_count as f64);
    Ok(ScanGeometry {
        height,
        width,
        detector_count,
        angles_deg,
        detector_span,
    })
}

impl ScanGeometry {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn n_candidates(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn detector_pitch(&self) -> f64 {
        self.detector_span / self.detector_count as f64
    }

    pub fn detector_offset(&self, detector: usize) -> f64 {
        (detector as f64 - (self.detector_count as f64 - 1.0) / 2.0) * self.detector_pitch()
    }

    /// Number of measurements produced by `n_angles` angles.
    pub fn measurement_len(&self, n_angles: usize) -> usize {
        n_angles * self.detector_count
    }

    /// `(u, r)`: unit detector axis and ray direction at a candidate angle.
    pub fn directions(&self, angle_index: usize) -> ([f64; 2], [f64; 2]) {
        let (s, c) = snapped_sin_cos(self.angles_deg[angle_index]);
        ([c, s], [-s, c])
    }
}

fn snapped_sin_cos(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Ordered set of chosen angle indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AngleSubset(Vec<usize>);

impl AngleSubset {
    /// Validates uniqueness and range against `n_candidates`.
    pub fn new(indices: Vec<usize>, n_candidates: usize) -> Result<Self> {
        let mut seen = vec![false; n_candidates];
        for &i in &indices {
            if i >= n_candidates {
                return Err(Error::Argument(format!(
                    "angle index {i} out of range ({n_candidates} candidates)"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Argument(format!("duplicate angle index {i}")));
            }
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Unused candidates in increasing index order.
    pub fn complement(&self, n_candidates: usize) -> AngleSubset {
        let mut used = vec![false; n_candidates];
        for &i in &self.0 {
            used[i] = true;
        }
        AngleSubset((0..n_candidates).filter(|&i| !used[i]).collect())
    }

    pub(crate) fn push(&mut self, index: usize) -> Result<()> {
        if self.contains(index) {
            return Err(Error::Argument(format!("angle {index} already chosen")));
        }
        self.0.push(index);
        Ok(())
    }
}

/// Sparse `d_p × d_x` block of the system matrix for one angle (CSR).
#[derive(Debug, Clone, PartialEq)]
pub struct AngleBlock {
    pub angle_index: usize,
    pub n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl AngleBlock {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of detector row `p`.
    pub fn row(&self, p: usize) -> (&[u32], &[f64]) {
        let range = self.row_ptr[p]..self.row_ptr[p + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    /// `out = block · x`
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (p, o) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(p);
            *o = cols.iter().zip(vals).map(|(&c, v)| v * x[c as usize]).sum();
        }
    }

    /// `out += blockᵀ · y`
    pub fn apply_transpose_add(&self, y: &[f64], out: &mut [f64]) {
        for (p, &yp) in y.iter().enumerate() {
            if yp == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(p);
            for (&c, v) in cols.iter().zip(vals) {
                out[c as usize] += v * yp;
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n_rows(), self.n_cols));
        for p in 0..self.n_rows() {
            let (cols, vals) = self.row(p);
            for (&c, &v) in cols.iter().zip(vals) {
                dense[[p, c as usize]] = v;
            }
        }
        dense
    }
}

/// Intersection lengths of a single ray with the pixel grid, sorted by pixel.
///
/// A ray running exactly along a grid line borders two pixel rows (or
/// columns); its length is split evenly between them.
pub fn trace_ray(geometry: &ScanGeometry, angle_index: usize, detector: usize) -> Vec<(usize, f64)> {
    let (u, r) = geometry.directions(angle_index);
    let s = geometry.detector_offset(detector);
    let origin = [s * u[0], s * u[1]];
    let half = [geometry.width as f64 / 2.0, geometry.height as f64 / 2.0];
    for axis in 0..2 {
        if r[axis] == 0.0 && (origin[axis] + half[axis]).fract() == 0.0 {
            let mut entries = Vec::new();
            for side in [-0.5, 0.5] {
                let mut shifted = origin;
                shifted[axis] += side;
                let cells = trace_from(geometry, shifted, r, half);
                entries.extend(cells.into_iter().map(|(q, len)| (q, 0.5 * len)));
            }
            return merge_entries(entries);
        }
    }
    trace_from(geometry, origin, r, half)
}

/// Ray `origin + t r` through the grid; `origin` must not lie on a grid line
/// parallel to `r`.
fn trace_from(geometry: &ScanGeometry, origin: [f64; 2], r: [f64; 2], half: [f64; 2]) -> Vec<(usize, f64)> {
    // Slab clipping against the image box.
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for axis in 0..2 {
        if r[axis] == 0.0 {
            if origin[axis] < -half[axis] || origin[axis] >= half[axis] {
                return Vec::new();
            }
        } else {
            let a = (-half[axis] - origin[axis]) / r[axis];
            let b = (half[axis] - origin[axis]) / r[axis];
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if !(t_hi > t_lo) {
        return Vec::new();
    }

    let mut crossings = vec![t_lo, t_hi];
    let lines = [geometry.width, geometry.height];
    for axis in 0..2 {
        if r[axis] == 0.0 {
            continue;
        }
        for k in 1..lines[axis] {
            let t = (k as f64 - half[axis] - origin[axis]) / r[axis];
            if t > t_lo && t < t_hi {
                crossings.push(t);
            }
        }
    }
    crossings.sort_by(|a, b| a.total_cmp(b));

    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(crossings.len());
    for pair in crossings.windows(2) {
        let len = pair[1] - pair[0];
        if len <= 1e-12 {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let x = origin[0] + tm * r[0];
        let y = origin[1] + tm * r[1];
        let col = (x + half[0]).floor();
        let row = (half[1] - y).floor();
        if col < 0.0 || row < 0.0 || col >= geometry.width as f64 || row >= geometry.height as f64 {
            continue;
        }
        let q = row as usize * geometry.width + col as usize;
        match entries.last_mut() {
            Some((last, acc)) if *last == q => *acc += len,
            _ => entries.push((q, len)),
        }
    }
    merge_entries(entries)
}

fn merge_entries(mut entries: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    entries.sort_by_key(|e| e.0);
    entries.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    entries
}

/// Builds the sparse block for one candidate angle.
pub fn angle_block(geometry: &ScanGeometry, angle_index: usize) -> Result<AngleBlock> {
    if angle_index >= geometry.n_candidates() {
        return Err(Error::Argument(format!(
            "angle index {angle_index} out of range ({} candidates)",
            geometry.n_candidates()
        )));
    }
    let mut row_ptr = Vec::with_capacity(geometry.detector_count + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for p in 0..geometry.detector_count {
        for (q, len) in trace_ray(geometry, angle_index, p) {
            cols.push(q as u32);
            vals.push(len);
        }
        row_ptr.push(vals.len());
    }
    Ok(AngleBlock {
        angle_index,
        n_cols: geometry.pixel_count(),
        row_ptr,
        cols,
        vals,
    })
}

/// Stacked forward operator with lazily built, cached angle blocks.
///
/// Blocks are immutable once built; the per-angle `OnceLock` serialises
/// construction so the operator can be shared across threads.
#[derive(Debug)]
pub struct TomoOperator {
    geometry: ScanGeometry,
    blocks: Vec<OnceLock<AngleBlock>>,
}

impl TomoOperator {
    pub fn new(geometry: ScanGeometry) -> Self {
        let blocks = (0..geometry.n_candidates()).map(|_| OnceLock::new()).collect();
        Self { geometry, blocks }
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn block(&self, angle_index: usize) -> Result<&AngleBlock> {
        let cell = self.blocks.get(angle_index).ok_or_else(|| {
            Error::Argument(format!(
                "angle index {angle_index} out of range ({} candidates)",
                self.geometry.n_candidates()
            ))
        })?;
        Ok(cell.get_or_init(|| angle_block(&self.geometry, angle_index).expect("index checked")))
    }

    fn check_subset(&self, subset: &AngleSubset) -> Result<()> {
        for &i in subset.indices() {
            self.block(i)?;
        }
        Ok(())
    }

    /// `A_subset · x`, angles concatenated in subset order.
    pub fn forward(&self, subset: &AngleSubset, x: &[f64]) -> Result<Vec<f64>> {
        check_len("forward image", self.geometry.pixel_count(), x.len())?;
        self.check_subset(subset)?;
        let dp = self.geometry.detector_count;
        let mut out = vec![0.0; dp * subset.len()];
        for (chunk, &a) in out.chunks_mut(dp).zip(subset.indices()) {
            self.block(a)?.apply(x, chunk);
        }
        Ok(out)
    }

    /// `A_subsetᵀ · y`.
    pub fn adjoint(&self, subset: &AngleSubset, y: &[f64]) -> Result<Vec<f64>> {
        let dp = self.geometry.detector_count;
        check_len("adjoint measurements", dp * subset.len(), y.len())?;
        self.check_subset(subset)?;
        let mut out = vec![0.0; self.geometry.pixel_count()];
        for (chunk, &a) in y.chunks(dp).zip(subset.indices()) {
            self.block(a)?.apply_transpose_add(chunk, &mut out);
        }
        Ok(out)
    }

    /// Row-wise forward projection of a batch (`k × d_x` → `k × d_y`).
    pub fn forward_rows(&self, subset: &AngleSubset, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("forward batch", self.geometry.pixel_count(), xs.ncols())?;
        self.check_subset(subset)?;
        let dp = self.geometry.detector_count;
        let mut out = Array2::zeros((xs.nrows(), dp * subset.len()));
        for (x, mut o) in xs.outer_iter().zip(out.outer_iter_mut()) {
            let x = x.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| x.to_vec());
            let o = o.as_slice_mut().expect("owned rows are contiguous");
            for (chunk, &a) in o.chunks_mut(dp).zip(subset.indices()) {
                self.block(a)?.apply(&x, chunk);
            }
        }
        Ok(out)
    }

    /// Row-wise adjoint of a batch (`k × d_y` → `k × d_x`).
    pub fn adjoint_rows(&self, subset: &AngleSubset, ys: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let dp = self.geometry.detector_count;
        check_len("adjoint batch", dp * subset.len(), ys.ncols())?;
        self.check_subset(subset)?;
        let mut out = Array2::zeros((ys.nrows(), self.geometry.pixel_count()));
        for (y, mut o) in ys.outer_iter().zip(out.outer_iter_mut()) {
            let y = y.to_vec();
            let o = o.as_slice_mut().expect("owned rows are contiguous");
            for (chunk, &a) in y.chunks(dp).zip(subset.indices()) {
                self.block(a)?.apply_transpose_add(chunk, o);
            }
        }
        Ok(out)
    }

    /// Rows of the stacked matrix as dense images (`d_y × d_x`), i.e. `Aᵀ e_i`.
    pub fn rows_dense(&self, subset: &AngleSubset) -> Result<Array2<f64>> {
        self.check_subset(subset)?;
        let dp = self.geometry.detector_count;
        let mut out = Array2::zeros((dp * subset.len(), self.geometry.pixel_count()));
        for (k, &a) in subset.indices().iter().enumerate() {
            let block = self.block(a)?;
            for p in 0..dp {
                let (cols, vals) = block.row(p);
                let mut row = out.row_mut(k * dp + p);
                for (&c, &v) in cols.iter().zip(vals) {
                    row[c as usize] = v;
                }
            }
        }
        Ok(out)
    }

    /// Writes the stacked operator as `row col value` triplets, one per line.
    pub fn write_triplets(&self, subset: &AngleSubset, path: &Path) -> Result<()> {
        self.check_subset(subset)?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let dp = self.geometry.detector_count;
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "# rows={} cols={}", dp * subset.len(), self.geometry.pixel_count())?;
            for (k, &a) in subset.indices().iter().enumerate() {
                let block = self.block(a).expect("subset checked");
                for p in 0..dp {
                    let (cols, vals) = block.row(p);
                    for (&c, &v) in cols.iter().zip(vals) {
                        writeln!(out, "{} {} {:.17e}", k * dp + p, c, v)?;
                    }
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}
