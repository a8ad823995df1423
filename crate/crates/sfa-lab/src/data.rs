//! Datasets, task streams, and rehearsal buffers.
//!
//! Streams are sequences of (train, eval) dataset pairs over a *shared*
//! global label space; per-task evaluation masks predictions to the task's
//! own classes further up the stack. All constructors are deterministic
//! under fixed seeds.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::rng::Rng;
use crate::{Error, Result};

/// Seed for the deterministic eval holdout taken by [`split_by_labels`].
/// Fixed so that the split never depends on run seeds.
const HOLDOUT_SEED: u64 = 0x1D5E_ED00;

/// Labelled examples over a global class space.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        check_same_rows(inputs.nrows(), labels.len())?;
        if class_count == 0 {
            return Err(Error::Domain("class_count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!(
                "label {bad} outside class space of size {class_count}"
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset holding the given rows, in the given order.
    /// Indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Array2::zeros((indices.len(), self.feature_dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            inputs.row_mut(row).assign(&self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            labels,
            class_count: self.class_count,
        }
    }

    /// Row-wise concatenation. Parts must agree on feature dim and class space.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat of zero datasets".into()))?;
        let mut labels = Vec::new();
        let mut total = 0;
        for p in parts {
            check_same_rows(p.feature_dim(), first.feature_dim())?;
            if p.class_count != first.class_count {
                return Err(Error::Dimension {
                    context: "concat class spaces",
                    left: p.class_count,
                    right: first.class_count,
                });
            }
            total += p.len();
        }
        let mut inputs = Array2::zeros((total, first.feature_dim()));
        let mut row = 0;
        for p in parts {
            for i in 0..p.len() {
                inputs.row_mut(row).assign(&p.inputs.row(i));
                labels.push(p.labels[i]);
                row += 1;
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count: first.class_count,
        })
    }
}

fn check_same_rows(left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: "dataset rows",
            left,
            right,
        })
    }
}

/// One task of a stream: train/eval splits plus the task's own classes.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub train: Dataset,
    pub eval: Dataset,
    /// Global class indices belonging to this task, ascending.
    pub classes: Vec<usize>,
}

/// Ordered sequence of tasks over one global class space.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Task>,
    class_count: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, class_count: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Domain("a task stream needs at least one task".into()));
        }
        for t in &tasks {
            if t.train.class_count != class_count || t.eval.class_count != class_count {
                return Err(Error::Domain(format!(
                    "task {} does not share the global class space",
                    t.name
                )));
            }
            if t.train.is_empty() || t.eval.is_empty() {
                return Err(Error::Domain(format!(
                    "task {} has an empty train or eval split",
                    t.name
                )));
            }
        }
        Ok(TaskStream { tasks, class_count })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.tasks[0].train.feature_dim()
    }
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(Error::io(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(Error::io(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated: need {end} bytes for a u32 at offset {offset}"),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an IDX image/label file pair (the MNIST container format).
///
/// Both files are big-endian; a `.gz` suffix on either path selects gzip
/// decompression. Pixels are scaled to [0, 1]; the class space is
/// `max label + 1`. Offsets in errors refer to the decompressed stream.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_file_maybe_gz(images)?;
    let magic = read_be_u32(images, &img, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            images,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_be_u32(images, &img, 4)? as usize;
    let rows = read_be_u32(images, &img, 8)? as usize;
    let cols = read_be_u32(images, &img, 12)? as usize;
    let pixels = n * rows * cols;
    if img.len() != 16 + pixels {
        return Err(Error::format(
            images,
            img.len().min(16 + pixels) as u64,
            format!(
                "expected {} data bytes for {n} images of {rows}x{cols}, file holds {}",
                pixels,
                img.len().saturating_sub(16)
            ),
        ));
    }

    let lab = read_file_maybe_gz(labels)?;
    let magic = read_be_u32(labels, &lab, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            labels,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
        ));
    }
    let n_labels = read_be_u32(labels, &lab, 4)? as usize;
    if lab.len() != 8 + n_labels {
        return Err(Error::format(
            labels,
            lab.len().min(8 + n_labels) as u64,
            format!(
                "expected {n_labels} label bytes, file holds {}",
                lab.len().saturating_sub(8)
            ),
        ));
    }
    if n != n_labels {
        return Err(Error::Dimension {
            context: "idx image/label counts",
            left: n,
            right: n_labels,
        });
    }
    if n == 0 {
        return Err(Error::Domain("idx files contain no examples".into()));
    }

    let dim = rows * cols;
    let mut inputs = Array2::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            inputs[[i, j]] = img[16 + i * dim + j] as f64 / 255.0;
        }
    }
    let label_vec: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let class_count = label_vec.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(inputs, label_vec, class_count)
}

// ---------------------------------------------------------------------------
// Stream constructors
// ---------------------------------------------------------------------------

/// Split one dataset into tasks by label groups.
///
/// Groups must be disjoint and must jointly cover every label present in
/// `data`. Each task keeps the shared global class space; a deterministic
/// 1/6 holdout (seeded shuffle, independent of run seeds) becomes the eval
/// split.
pub fn split_by_labels(data: &Dataset, groups: &[Vec<usize>]) -> Result<TaskStream> {
    if groups.is_empty() {
        return Err(Error::Domain("no label groups given".into()));
    }
    let mut owner: Vec<Option<usize>> = vec![None; data.class_count()];
    for (k, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Domain(format!("label group {k} is empty")));
        }
        for &label in group {
            if label >= data.class_count() {
                return Err(Error::Domain(format!(
                    "group {k} names label {label}, outside class space of size {}",
                    data.class_count()
                )));
            }
            if let Some(prev) = owner[label] {
                return Err(Error::Domain(format!(
                    "label {label} appears in groups {prev} and {k}"
                )));
            }
            owner[label] = Some(k);
        }
    }
    if let Some(&missing) = data.labels().iter().find(|&&l| owner[l].is_none()) {
        return Err(Error::Domain(format!(
            "data label {missing} missing from all groups"
        )));
    }

    let mut tasks = Vec::with_capacity(groups.len());
    for (k, group) in groups.iter().enumerate() {
        let mut indices: Vec<usize> = data
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| owner[l] == Some(k))
            .map(|(i, _)| i)
            .collect();
        if indices.len() < 2 {
            return Err(Error::Domain(format!(
                "label group {k} matches {} examples; need at least 2 for a train/eval split",
                indices.len()
            )));
        }
        let mut rng = Rng::derive(HOLDOUT_SEED, k as u64);
        rng.shuffle(&mut indices);
        let n_eval = (indices.len() / 6).max(1);
        let eval = data.select(&indices[..n_eval]);
        let train = data.select(&indices[n_eval..]);
        let mut classes = group.clone();
        classes.sort_unstable();
        let name = format!(
            "labels-{}",
            classes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("-")
        );
        tasks.push(Task {
            name,
            train,
            eval,
            classes,
        });
    }
    TaskStream::new(tasks, data.class_count())
}

/// Synthetic stream of Gaussian-blob classification tasks.
///
/// Each class is an isotropic unit-variance Gaussian whose mean is drawn
/// uniformly from a hypercube of side `separation` centered at the origin.
/// The global class space is `num_tasks * classes_per_task`; task k owns the
/// contiguous class block starting at `k * classes_per_task`. Eval sets are
/// fresh draws of `max(1, n_per_class / 6)` examples per class.
pub fn synthetic_gaussian_tasks(
    seed: u64,
    num_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
) -> Result<TaskStream> {
    if num_tasks == 0 || classes_per_task == 0 || dim == 0 || n_per_class == 0 {
        return Err(Error::Domain(
            "num_tasks, classes_per_task, dim, and n_per_class must be positive".into(),
        ));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Domain(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let class_count = num_tasks * classes_per_task;
    let mut rng = Rng::new(seed);
    let half = separation / 2.0;
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| rng.uniform(-half, half)).collect())
        .collect();

    let mut draw = |classes: &[usize], per_class: usize| -> Dataset {
        let n = classes.len() * per_class;
        let mut inputs = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for &c in classes {
            for _ in 0..per_class {
                for j in 0..dim {
                    inputs[[row, j]] = means[c][j] + rng.standard_normal();
                }
                labels.push(c);
                row += 1;
            }
        }
        Dataset {
            inputs,
            labels,
            class_count,
        }
    };

    let n_eval = (n_per_class / 6).max(1);
    let mut tasks = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let classes: Vec<usize> = (k * classes_per_task..(k + 1) * classes_per_task).collect();
        let train = draw(&classes, n_per_class);
        let eval = draw(&classes, n_eval);
        tasks.push(Task {
            name: format!("task-{k}"),
            train,
            eval,
            classes,
        });
    }
    TaskStream::new(tasks, class_count)
}

// ---------------------------------------------------------------------------
// Digit glyphs: a self-contained 10-class 28x28 image source
// ---------------------------------------------------------------------------

/// 5x7 digit bitmaps, one row per glyph line, LSB = rightmost column.
// Seven-segment (calculator-style) digit glyphs, rendered on a 5x7 grid.
// As on a real LCD, lookalike digits differ by only one or two segments
// (0/8, 6/8, 5/6, 9/8, 2/3), the seven uses the serifed ABCF form, and
// the one is drawn flush-left.
const GLYPHS_5X7: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10001, 0b00000, 0b10001, 0b10001, 0b01110], // 0
    [0b00000, 0b10000, 0b10000, 0b00000, 0b10000, 0b10000, 0b00000], // 1
    [0b01110, 0b00001, 0b00001, 0b01110, 0b10000, 0b10000, 0b01110], // 2
    [0b01110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b01110], // 3
    [0b00000, 0b10001, 0b10001, 0b01110, 0b00001, 0b00001, 0b00000], // 4
    [0b01110, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b01110], // 5
    [0b01110, 0b10000, 0b10000, 0b01110, 0b10001, 0b10001, 0b01110], // 6
    [0b01110, 0b10001, 0b00001, 0b00000, 0b00001, 0b00001, 0b00000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01110, 0b00001, 0b00001, 0b01110], // 9
];

pub const DIGIT_IMAGE_SIDE: usize = 28;

/// Deterministic 10-class dataset of 28x28 grayscale digit images.
///
/// Each example renders a 5x7 digit glyph onto the canvas under a random
/// affine map (independent width/height scaling, rotation, slant, and
/// position) with per-segment stroke intensity and Gaussian pixel noise —
/// an in-repo stand-in with the exact shape of MNIST (784 features, 10
/// classes, pixel values in [0, 1]). Rows are class-major: all `0`s, then
/// all `1`s, and so on.
pub fn digit_glyphs(seed: u64, n_per_class: usize) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Domain("n_per_class must be positive".into()));
    }
    let side = DIGIT_IMAGE_SIDE;
    let n = 10 * n_per_class;
    let mut rng = Rng::new(seed);
    let mut inputs = Array2::zeros((n, side * side));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for digit in 0..10 {
        for _ in 0..n_per_class {
            // Per-example handwriting-like variability.
            let sx = rng.uniform(1.7, 3.4);
            let sy = rng.uniform(1.7, 3.4);
            let theta = rng.uniform(-0.21, 0.21);
            let shear = rng.uniform(-0.25, 0.25);
            // Each of the seven segments lights with its own brightness,
            // like a worn display: per-segment reliability floors, from the
            // sturdy bottom bar and right/left uprights (B, D, F) down to
            // the flaky top, middle, and lower verticals (A, G, E, and
            // especially C).
            const SEG_FLOOR: [f64; 7] = [0.06, 0.55, 0.05, 0.65, 0.06, 0.70, 0.06];
            let mut seg_ink = [0.0f64; 7];
            for (s, ink) in seg_ink.iter_mut().enumerate() {
                *ink = rng.uniform(SEG_FLOOR[s], 1.0);
            }
            // Glyph cell value: the owning segment's ink where a bit is
            // set, else 0. Bars sit on rows 0/3/6; the verticals split
            // left/right on the rows between.
            let cell = |gx: i64, gy: i64| -> f64 {
                if !(0..5).contains(&gx) || !(0..7).contains(&gy) {
                    return 0.0;
                }
                if GLYPHS_5X7[digit][gy as usize] & (1 << (4 - gx)) == 0 {
                    return 0.0;
                }
                seg_ink[match (gy, gx) {
                    (0, _) => 0,
                    (3, _) => 6,
                    (6, _) => 3,
                    (1 | 2, 0) => 5,
                    (1 | 2, _) => 1,
                    (_, 0) => 4,
                    _ => 2,
                }]
            };
            // Forward map: canvas = R(theta) · Shear · Diag(sx, sy) applied
            // to glyph coordinates centered on the glyph, shrunk if needed
            // so the glyph stays inside the canvas.
            let (sin, cos) = theta.sin_cos();
            let (mut m00, mut m01) = (cos * sx, (cos * shear - sin) * sy);
            let (mut m10, mut m11) = (sin * sx, (sin * shear + cos) * sy);
            let mut hw: f64 = 0.0;
            let mut hh: f64 = 0.0;
            for (cu, cv) in [(2.5, 3.5), (2.5, -3.5), (-2.5, 3.5), (-2.5, -3.5)] {
                hw = hw.max((m00 * cu + m01 * cv).abs());
                hh = hh.max((m10 * cu + m11 * cv).abs());
            }
            let limit = (side as f64 - 2.0) / 2.0;
            let squeeze = (limit / hw).min(limit / hh).min(1.0);
            for m in [&mut m00, &mut m01, &mut m10, &mut m11] {
                *m *= squeeze;
            }
            hw *= squeeze;
            hh *= squeeze;
            let cx = rng.uniform(hw, (side - 1) as f64 - hw);
            let cy = rng.uniform(hh, (side - 1) as f64 - hh);
            // Inverse-map each canvas pixel into glyph space and sample the
            // four surrounding cells bilinearly, which also softens the
            // blocky strokes; then add pixel noise.
            let det = m00 * m11 - m01 * m10;
            let (i00, i01, i10, i11) = (m11 / det, -m01 / det, -m10 / det, m00 / det);
            for y in 0..side {
                for x in 0..side {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let u = i00 * dx + i01 * dy + 2.0;
                    let v = i10 * dx + i11 * dy + 3.0;
                    let (u0, v0) = (u.floor(), v.floor());
                    let (wu, wv) = (u - u0, v - v0);
                    let (gu, gv) = (u0 as i64, v0 as i64);
                    let val = cell(gu, gv) * (1.0 - wu) * (1.0 - wv)
                        + cell(gu + 1, gv) * wu * (1.0 - wv)
                        + cell(gu, gv + 1) * (1.0 - wu) * wv
                        + cell(gu + 1, gv + 1) * wu * wv;
                    let noisy = val + 0.06 * rng.standard_normal();
                    inputs[[row, y * side + x]] = noisy.clamp(0.0, 1.0);
                }
            }
            labels.push(digit);
            row += 1;
        }
    }
    Dataset::new(inputs, labels, 10)
}

// ---------------------------------------------------------------------------
// Rehearsal
// ---------------------------------------------------------------------------

/// Per-task reservoir of past training examples.
#[derive(Debug, Clone)]
pub struct RehearsalBuffer {
    per_task: Vec<Dataset>,
    seed: u64,
}

impl RehearsalBuffer {
    pub fn new(seed: u64) -> Self {
        RehearsalBuffer {
            per_task: Vec::new(),
            seed,
        }
    }

    pub fn tasks_stored(&self) -> usize {
        self.per_task.len()
    }

    pub fn len(&self) -> usize {
        self.per_task.iter().map(|d| d.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Store a uniform sample of a finished task's training set.
///
/// Keeps `min(per_task_cap, |finished_task|)` examples, drawn without
/// replacement with a seed derived from the buffer seed and the task slot.
/// Earlier tasks' stores are untouched.
pub fn buffer_update(
    buffer: &RehearsalBuffer,
    finished_task: &Dataset,
    per_task_cap: usize,
) -> Result<RehearsalBuffer> {
    if per_task_cap == 0 {
        return Err(Error::Domain("per_task_cap must be positive".into()));
    }
    if finished_task.is_empty() {
        return Err(Error::Domain("cannot buffer an empty task".into()));
    }
    if let Some(first) = buffer.per_task.first() {
        check_same_rows(first.feature_dim(), finished_task.feature_dim())?;
        if first.class_count() != finished_task.class_count() {
            return Err(Error::Dimension {
                context: "buffer class spaces",
                left: first.class_count(),
                right: finished_task.class_count(),
            });
        }
    }
    let slot = buffer.per_task.len() as u64;
    let mut rng = Rng::derive(buffer.seed, slot);
    let keep = per_task_cap.min(finished_task.len());
    let indices = rng.sample_indices(finished_task.len(), keep);
    let mut next = buffer.clone();
    next.per_task.push(finished_task.select(&indices));
    Ok(next)
}

/// Blend a current task's training set with buffered past examples.
///
/// The output has `round(|current| / (1 - past_fraction))` rows, of which
/// the extra rows are drawn uniformly from the buffered pool (without
/// replacement when it is large enough, with replacement otherwise). The
/// combined rows are shuffled deterministically. `past_fraction = 0`
/// returns the current set reshuffled.
pub fn mix_with_buffer(
    current: &Dataset,
    buffer: &RehearsalBuffer,
    past_fraction: f64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&past_fraction) {
        return Err(Error::Domain(format!(
            "past_fraction must lie in [0, 1), got {past_fraction}"
        )));
    }
    if current.is_empty() {
        return Err(Error::Domain("current task is empty".into()));
    }
    let mut rng = Rng::derive(buffer.seed ^ 0x4D49_5800, buffer.per_task.len() as u64);
    if past_fraction == 0.0 {
        let mut order: Vec<usize> = (0..current.len()).collect();
        rng.shuffle(&mut order);
        return Ok(current.select(&order));
    }
    if buffer.is_empty() {
        return Err(Error::Domain(
            "past_fraction > 0 with an empty rehearsal buffer".into(),
        ));
    }
    let parts: Vec<&Dataset> = buffer.per_task.iter().collect();
    let pool = Dataset::concat(&parts)?;
    check_same_rows(pool.feature_dim(), current.feature_dim())?;
    if pool.class_count() != current.class_count() {
        return Err(Error::Dimension {
            context: "mix class spaces",
            left: pool.class_count(),
            right: current.class_count(),
        });
    }

    let total = (current.len() as f64 / (1.0 - past_fraction)).round() as usize;
    let n_past = total.saturating_sub(current.len());
    let past_indices = if n_past <= pool.len() {
        rng.sample_indices(pool.len(), n_past)
    } else {
        (0..n_past).map(|_| rng.below(pool.len())).collect()
    };
    let past = pool.select(&past_indices);
    let combined = Dataset::concat(&[current, &past])?;
    let mut order: Vec<usize> = (0..combined.len()).collect();
    rng.shuffle(&mut order);
    Ok(combined.select(&order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny_dataset(n: usize, class_count: usize) -> Dataset {
        // feature 0 encodes the row index so selections are traceable
        let mut inputs = Array2::zeros((n, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            inputs[[i, 0]] = i as f64;
            inputs[[i, 1] ] = 1.0;
            labels.push(i % class_count);
        }
        Dataset::new(inputs, labels, class_count).unwrap()
    }

    // -- IDX --

    fn write_idx_pair(dir: &Path, pixels: &[u8], rows: u32, cols: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len() as u32;
        let img_path = dir.join("imgs-idx3-ubyte");
        let lab_path = dir.join("labs-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&rows.to_be_bytes());
        img.extend_from_slice(&cols.to_be_bytes());
        img.extend_from_slice(pixels);
        std::fs::write(&img_path, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(labels);
        std::fs::write(&lab_path, lab).unwrap();
        (img_path, lab_path)
    }

    #[test]
    fn idx_round_trip_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        // two 2x2 images
        let (img, lab) = write_idx_pair(dir.path(), &[0, 51, 102, 255, 255, 0, 0, 51], 2, 2, &[3, 1]);
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.class_count(), 4);
        assert!((ds.inputs()[[0, 1]] - 51.0 / 255.0).abs() < 1e-15);
        assert_eq!(ds.inputs()[[0, 3]], 1.0);
        assert_eq!(ds.inputs()[[1, 1]], 0.0);
    }

    #[test]
    fn idx_gzip_by_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx_pair(dir.path(), &[10, 20, 30, 40], 2, 2, &[1]);
        for src in [&img, &lab] {
            let gz_path = src.with_extension("gz");
            let bytes = std::fs::read(src).unwrap();
            let f = std::fs::File::create(&gz_path).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(&bytes).unwrap();
            enc.finish().unwrap();
        }
        let ds = load_idx(&img.with_extension("gz"), &lab.with_extension("gz")).unwrap();
        assert_eq!(ds.len(), 1);
        assert!((ds.inputs()[[0, 0]] - 10.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_bad_magic_names_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx_pair(dir.path(), &[0, 0, 0, 0], 2, 2, &[0]);
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, bytes).unwrap();
        match load_idx(&img, &lab) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncation_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx_pair(dir.path(), &[0, 0, 0, 0], 2, 2, &[0]);
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        match load_idx(&img, &lab) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 19, "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx_pair(dir.path(), &[0, 0, 0, 0, 1, 1, 1, 1], 2, 2, &[0, 1]);
        // shrink the label file to one entry while the images keep two
        let mut lab_bytes = Vec::new();
        lab_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lab_bytes.extend_from_slice(&1u32.to_be_bytes());
        lab_bytes.push(0);
        std::fs::write(&lab, lab_bytes).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Dimension { .. })));
    }

    // -- split_by_labels --

    #[test]
    fn split_covers_every_row_exactly_once() {
        let ds = tiny_dataset(60, 6);
        let stream = split_by_labels(&ds, &[vec![0, 2, 4], vec![1, 3, 5]]).unwrap();
        assert_eq!(stream.num_tasks(), 2);
        let mut seen: Vec<usize> = Vec::new();
        for t in stream.tasks() {
            for part in [&t.train, &t.eval] {
                for i in 0..part.len() {
                    seen.push(part.inputs()[[i, 0]] as usize);
                }
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..60).collect::<Vec<_>>());
        // eval is ~1/6 of the 30 rows per task
        assert_eq!(stream.tasks()[0].eval.len(), 5);
        assert_eq!(stream.tasks()[0].train.len(), 25);
        // labels stay in the global space, restricted per task
        assert!(stream.tasks()[0].train.labels().iter().all(|l| [0, 2, 4].contains(l)));
        assert!(stream.tasks()[1].eval.labels().iter().all(|l| [1, 3, 5].contains(l)));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = tiny_dataset(36, 4);
        let a = split_by_labels(&ds, &[vec![0, 1], vec![2, 3]]).unwrap();
        let b = split_by_labels(&ds, &[vec![0, 1], vec![2, 3]]).unwrap();
        for (ta, tb) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(ta.train.labels(), tb.train.labels());
            assert_eq!(ta.train.inputs(), tb.train.inputs());
            assert_eq!(ta.eval.inputs(), tb.eval.inputs());
        }
    }

    #[test]
    fn split_rejects_overlap_and_uncovered_labels() {
        let ds = tiny_dataset(30, 3);
        assert!(split_by_labels(&ds, &[vec![0, 1], vec![1, 2]]).is_err());
        match split_by_labels(&ds, &[vec![0], vec![2]]) {
            Err(Error::Domain(msg)) => assert!(msg.contains("label 1"), "{msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    // -- synthetic gaussians --

    #[test]
    fn synthetic_shapes_and_determinism() {
        let a = synthetic_gaussian_tasks(9, 3, 2, 5, 30, 8.0).unwrap();
        let b = synthetic_gaussian_tasks(9, 3, 2, 5, 30, 8.0).unwrap();
        assert_eq!(a.num_tasks(), 3);
        assert_eq!(a.class_count(), 6);
        assert_eq!(a.tasks()[1].classes, vec![2, 3]);
        assert_eq!(a.tasks()[0].train.len(), 60);
        assert_eq!(a.tasks()[0].eval.len(), 10);
        for (ta, tb) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(ta.train.inputs(), tb.train.inputs());
        }
        let c = synthetic_gaussian_tasks(10, 3, 2, 5, 30, 8.0).unwrap();
        assert_ne!(a.tasks()[0].train.inputs(), c.tasks()[0].train.inputs());
    }

    #[test]
    fn zero_separation_puts_all_means_at_origin() {
        let s = synthetic_gaussian_tasks(4, 2, 2, 3, 200, 0.0).unwrap();
        // class-conditional means of the data itself should all be near 0
        for t in s.tasks() {
            let m: f64 = t.train.inputs().iter().sum::<f64>() / (t.train.len() * 3) as f64;
            assert!(m.abs() < 0.15, "mean {m}");
        }
    }

    // -- digit glyphs --

    #[test]
    fn digit_glyphs_shape_and_range() {
        let ds = digit_glyphs(5, 12).unwrap();
        assert_eq!(ds.len(), 120);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.class_count(), 10);
        assert!(ds.inputs().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for digit in 0..10 {
            assert_eq!(ds.labels()[digit * 12], digit);
        }
        let again = digit_glyphs(5, 12).unwrap();
        assert_eq!(ds.inputs(), again.inputs());
    }

    // -- rehearsal --

    #[test]
    fn buffer_respects_cap_exactly() {
        let task = tiny_dataset(100, 5);
        let buf = RehearsalBuffer::new(17);
        let one = buffer_update(&buf, &task, 10).unwrap();
        assert_eq!(one.len(), 10);
        let small = tiny_dataset(4, 5);
        let two = buffer_update(&one, &small, 10).unwrap();
        assert_eq!(two.len(), 14); // min(cap, task size) from each task
        assert_eq!(two.tasks_stored(), 2);
        // earlier store untouched
        assert_eq!(one.per_task[0].inputs(), two.per_task[0].inputs());
    }

    #[test]
    fn buffer_selection_golden_indices() {
        // cap=10 over 100 rows with a fixed seed must select the same rows forever
        let task = tiny_dataset(100, 5);
        let buf = RehearsalBuffer::new(17);
        let one = buffer_update(&buf, &task, 10).unwrap();
        let picked: Vec<usize> = (0..10).map(|i| one.per_task[0].inputs()[[i, 0]] as usize).collect();
        assert_eq!(picked, vec![2, 5, 13, 17, 18, 29, 46, 55, 68, 91]);
    }

    #[test]
    fn mix_sizes_match_worked_examples() {
        let buf = buffer_update(&RehearsalBuffer::new(3), &tiny_dataset(600, 5), 600).unwrap();
        let current = tiny_dataset(900, 5);
        let mixed = mix_with_buffer(&current, &buf, 0.10).unwrap();
        assert_eq!(mixed.len(), 1000);
        let current = tiny_dataset(950, 5);
        let mixed = mix_with_buffer(&current, &buf, 0.05).unwrap();
        assert_eq!(mixed.len(), 1000);
    }

    #[test]
    fn mix_zero_fraction_reshuffles_only() {
        let buf = RehearsalBuffer::new(3);
        let current = tiny_dataset(50, 5);
        let mixed = mix_with_buffer(&current, &buf, 0.0).unwrap();
        assert_eq!(mixed.len(), 50);
        let mut rows: Vec<usize> = (0..50).map(|i| mixed.inputs()[[i, 0]] as usize).collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn mix_errors_on_empty_buffer_with_positive_fraction() {
        let buf = RehearsalBuffer::new(3);
        let current = tiny_dataset(50, 5);
        assert!(mix_with_buffer(&current, &buf, 0.1).is_err());
    }

    #[test]
    fn mix_label_histogram_tracks_past_fraction() {
        // current rows are class 9 only; buffered rows classes 0..5
        let mut inputs = Array2::zeros((9000, 2));
        let labels = vec![9usize; 9000];
        for i in 0..9000 {
            inputs[[i, 0]] = i as f64;
        }
        let current = Dataset::new(inputs, labels, 10).unwrap();
        let past = tiny_dataset(5000, 5); // labels 0..5
        let past = Dataset::new(past.inputs().clone(), past.labels().to_vec(), 10).unwrap();
        let buf = buffer_update(&RehearsalBuffer::new(8), &past, 5000).unwrap();
        let mixed = mix_with_buffer(&current, &buf, 0.10).unwrap();
        let past_rows = mixed.labels().iter().filter(|&&l| l != 9).count();
        let frac = past_rows as f64 / mixed.len() as f64;
        assert!((frac - 0.10).abs() < 0.02, "past fraction {frac}");
    }

    #[test]
    fn mix_is_deterministic() {
        let buf = buffer_update(&RehearsalBuffer::new(3), &tiny_dataset(200, 5), 100).unwrap();
        let current = tiny_dataset(300, 5);
        let a = mix_with_buffer(&current, &buf, 0.25).unwrap();
        let b = mix_with_buffer(&current, &buf, 0.25).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_eq!(a.labels(), b.labels());
    }
}
