//! Analytic benchmark cases, normalization and k-means support.
//!
//! Two built-in two-task cases ship with the crate:
//!
//! * the *noisy* case: two tasks driven by four shared latent functions of a
//!   single input; task one carries an extra virtual input that only feeds
//!   its i.i.d. noise, making the input domains heterogeneous;
//! * the *park* case: a four-dimensional high-fidelity simulator paired with
//!   a two-dimensional low-fidelity variant that ignores the two least
//!   important inputs.
//!
//! Tasks are ordered by nonincreasing input dimension and the last task's
//! domain is the common domain (identity mapping).

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::{apply_prior_mapping, PriorMapping};
use crate::error::{Error, Result};

/// One task's raw training and test data plus its prior domain mapping.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub mapping: PriorMapping,
}

impl TaskData {
    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// A multi-task dataset in raw (unnormalized) units.
#[derive(Debug, Clone)]
pub struct MultiTaskData {
    pub tasks: Vec<TaskData>,
    /// Dimensionality of the common domain (the last task's domain).
    pub common_dim: usize,
}

impl MultiTaskData {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::contract("dataset has no tasks"));
        }
        let mut prev = usize::MAX;
        for t in &self.tasks {
            if t.input_dim() > prev {
                return Err(Error::contract(
                    "tasks must be ordered by nonincreasing input dimension",
                ));
            }
            prev = t.input_dim();
        }
        let last = self.tasks.last().unwrap();
        if !matches!(last.mapping, PriorMapping::Identity) {
            return Err(Error::contract("last task's mapping must be identity"));
        }
        Ok(())
    }
}

// Fixed stream ids so each random component can be varied independently.
const STREAM_T1_X1: u64 = 0;
const STREAM_T1_X2: u64 = 1;
const STREAM_T1_EPS: u64 = 2;
const STREAM_T2_X: u64 = 3;
const STREAM_T1_X1_TEST: u64 = 4;
const STREAM_T1_X2_TEST: u64 = 5;
const STREAM_T1_EPS_TEST: u64 = 6;
const STREAM_T2_X_TEST: u64 = 7;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn noisy_latents(x: f64) -> [f64; 4] {
    [
        0.5 * (3.0 * x).sin() + x,
        3.0 * x.cos() - x,
        2.5 * (5.0 * x - 1.0).cos(),
        (1.5 * x).sin(),
    ]
}

fn noisy_y1_clean(x1: f64) -> f64 {
    let f = noisy_latents(x1);
    0.5 * f[0] - 0.4 * f[1] + 0.6 * f[2] + 0.6 * f[3]
}

fn noisy_y2(x1: f64) -> f64 {
    let f = noisy_latents(x1);
    -0.3 * f[0] + 0.43 * f[1] - 0.5 * f[2] + 0.1 * f[3]
}

const NOISY_NOISE_STD: f64 = 0.2; // variance 0.04

fn gen_noisy_with_streams(
    seed: u64,
    n1: usize,
    n2: usize,
    n_test: usize,
    x2_streams: (u64, u64),
) -> MultiTaskData {
    let sample_x = |stream: u64, n: usize| -> Vec<f64> {
        let mut rng = stream_rng(seed, stream);
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    };
    let sample_eps = |stream: u64, n: usize| -> Vec<f64> {
        let mut rng = stream_rng(seed, stream);
        (0..n)
            .map(|_| NOISY_NOISE_STD * { let e: f64 = StandardNormal.sample(&mut rng); e })
            .collect()
    };

    let build_task1 = |x1s: Vec<f64>, x2s: Vec<f64>, eps: Vec<f64>| {
        let n = x1s.len();
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            x[(i, 0)] = x1s[i];
            x[(i, 1)] = x2s[i];
            y[i] = noisy_y1_clean(x1s[i]) + eps[i];
        }
        (x, y)
    };
    let build_task2 = |x1s: Vec<f64>| {
        let n = x1s.len();
        let mut x = DMatrix::zeros(n, 1);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            x[(i, 0)] = x1s[i];
            y[i] = noisy_y2(x1s[i]);
        }
        (x, y)
    };

    let (x1_tr, y1_tr) = build_task1(
        sample_x(STREAM_T1_X1, n1),
        sample_x(x2_streams.0, n1),
        sample_eps(STREAM_T1_EPS, n1),
    );
    let (x1_te, y1_te) = build_task1(
        sample_x(STREAM_T1_X1_TEST, n_test),
        sample_x(x2_streams.1, n_test),
        sample_eps(STREAM_T1_EPS_TEST, n_test),
    );
    let (x2_tr, y2_tr) = build_task2(sample_x(STREAM_T2_X, n2));
    let (x2_te, y2_te) = build_task2(sample_x(STREAM_T2_X_TEST, n_test));

    MultiTaskData {
        tasks: vec![
            TaskData {
                x: x1_tr,
                y: y1_tr,
                x_test: x1_te,
                y_test: y1_te,
                mapping: PriorMapping::SelectDims(vec![0]),
            },
            TaskData {
                x: x2_tr,
                y: y2_tr,
                x_test: x2_te,
                y_test: y2_te,
                mapping: PriorMapping::Identity,
            },
        ],
        common_dim: 1,
    }
}

/// Generates the noisy two-task case. Task one is two-dimensional with an
/// uninformative second input, task two is one-dimensional (the common
/// domain). Inputs are uniform on `[-5, 5]`.
pub fn gen_noisy_case(seed: u64, n1: usize, n2: usize, n_test: usize) -> Result<MultiTaskData> {
    if n1 == 0 || n2 == 0 || n_test == 0 {
        return Err(Error::contract("sizes must be at least 1"));
    }
    let data = gen_noisy_with_streams(seed, n1, n2, n_test, (STREAM_T1_X2, STREAM_T1_X2_TEST));
    data.validate()?;
    Ok(data)
}

/// High-fidelity park function on the unit hypercube.
pub fn park_high(x: &[f64; 4]) -> f64 {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    x1 / 2.0 * ((1.0 + (x2 + x3 * x3) * x4 / (x1 * x1)).sqrt() - 1.0)
        + (x1 + 3.0 * x4) * (1.0 + x3.sin()).exp()
}

/// Low-fidelity park function over the two dominant inputs.
pub fn park_low(x3: f64, x4: f64) -> f64 {
    (1.0 + x3.sin() / 10.0) * park_high(&[0.5, 0.5, x3, x4]) - 2.0 * x3 + x4 * x4 + 0.75
}

// The high-fidelity formula divides by x1^2, so inputs are kept away from 0.
const PARK_LOW_BOUND: f64 = 1e-6;

/// Generates the park multi-fidelity case: a four-dimensional high-fidelity
/// task and a two-dimensional low-fidelity task over inputs `(x3, x4)`.
pub fn gen_park_case(seed: u64, n1: usize, n2: usize, n_test: usize) -> Result<MultiTaskData> {
    if n1 == 0 || n2 == 0 || n_test == 0 {
        return Err(Error::contract("sizes must be at least 1"));
    }
    let sample = |stream: u64, n: usize, d: usize| -> DMatrix<f64> {
        let mut rng = stream_rng(seed, stream);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(PARK_LOW_BOUND..=1.0))
    };
    let eval_high = |x: &DMatrix<f64>| {
        DVector::from_fn(x.nrows(), |i, _| {
            park_high(&[x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]])
        })
    };
    let eval_low = |x: &DMatrix<f64>| {
        DVector::from_fn(x.nrows(), |i, _| park_low(x[(i, 0)], x[(i, 1)]))
    };

    let x1_tr = sample(STREAM_T1_X1, n1, 4);
    let x1_te = sample(STREAM_T1_X1_TEST, n_test, 4);
    let x2_tr = sample(STREAM_T2_X, n2, 2);
    let x2_te = sample(STREAM_T2_X_TEST, n_test, 2);

    let data = MultiTaskData {
        tasks: vec![
            TaskData {
                y: eval_high(&x1_tr),
                y_test: eval_high(&x1_te),
                x: x1_tr,
                x_test: x1_te,
                mapping: PriorMapping::SelectDims(vec![2, 3]),
            },
            TaskData {
                y: eval_low(&x2_tr),
                y_test: eval_low(&x2_te),
                x: x2_tr,
                x_test: x2_te,
                mapping: PriorMapping::Identity,
            },
        ],
        common_dim: 2,
    };
    data.validate()?;
    Ok(data)
}

/// Per-dimension normalization statistics of one task.
#[derive(Debug, Clone)]
pub struct TaskStats {
    pub x_mean: DVector<f64>,
    pub x_std: DVector<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

/// A prior mapping compiled to act between normalized spaces: task-domain
/// normalized coordinates in, common-domain normalized coordinates out.
#[derive(Debug, Clone)]
pub struct CompiledMapping {
    mapping: PriorMapping,
    task_x_mean: DVector<f64>,
    task_x_std: DVector<f64>,
    common_x_mean: DVector<f64>,
    common_x_std: DVector<f64>,
}

impl CompiledMapping {
    pub fn apply(&self, x_normalized: &DVector<f64>) -> Result<DVector<f64>> {
        // denormalize in the task domain, map, normalize in the common domain
        let raw = DVector::from_fn(x_normalized.len(), |i, _| {
            x_normalized[i] * self.task_x_std[i] + self.task_x_mean[i]
        });
        let mapped = apply_prior_mapping(&self.mapping, &raw)?;
        Ok(DVector::from_fn(mapped.len(), |d, _| {
            (mapped[d] - self.common_x_mean[d]) / self.common_x_std[d]
        }))
    }

    pub fn apply_rows(&self, x_normalized: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x_normalized.nrows(), self.common_x_mean.len());
        for i in 0..x_normalized.nrows() {
            let row = self.apply(&x_normalized.row(i).transpose())?;
            out.set_row(i, &row.transpose());
        }
        Ok(out)
    }

    pub fn raw_mapping(&self) -> &PriorMapping {
        &self.mapping
    }

    pub fn output_dim(&self) -> usize {
        self.common_x_mean.len()
    }
}

/// One task after normalization: inputs and outputs are standardized per
/// dimension with the task's own training statistics; test data reuses the
/// training statistics.
#[derive(Debug, Clone)]
pub struct NormalizedTask {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_test: DMatrix<f64>,
    /// Raw (unnormalized) test outputs, kept for scoring in original units.
    pub y_test_raw: DVector<f64>,
    /// Raw training outputs, kept for the metric standardization constants.
    pub y_train_raw: DVector<f64>,
    pub stats: TaskStats,
    pub mapping: CompiledMapping,
}

impl NormalizedTask {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Normalizes a raw task-domain input with the training statistics.
    pub fn normalize_input(&self, x_raw: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x_raw.len(), |i, _| {
            (x_raw[i] - self.stats.x_mean[i]) / self.stats.x_std[i]
        })
    }

    /// Maps a normalized predictive distribution back to raw output units.
    pub fn denormalize_prediction(&self, mean: f64, var: f64) -> (f64, f64) {
        (
            mean * self.stats.y_std + self.stats.y_mean,
            var * self.stats.y_std * self.stats.y_std,
        )
    }
}

/// A normalized multi-task dataset.
#[derive(Debug, Clone)]
pub struct NormalizedData {
    pub tasks: Vec<NormalizedTask>,
    pub common_dim: usize,
    /// Dimensions whose training variance was zero (left centered, scale 1).
    pub warnings: Vec<String>,
}

impl NormalizedData {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// All training inputs mapped into the normalized common domain and
    /// stacked, in task order.
    pub fn aligned_training_inputs(&self) -> Result<DMatrix<f64>> {
        let total: usize = self.tasks.iter().map(|t| t.len()).sum();
        let mut out = DMatrix::zeros(total, self.common_dim);
        let mut row = 0;
        for task in &self.tasks {
            let aligned = task.mapping.apply_rows(&task.x)?;
            for i in 0..aligned.nrows() {
                out.set_row(row, &aligned.row(i));
                row += 1;
            }
        }
        Ok(out)
    }
}

fn column_stats(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Standardizes every input dimension and the outputs of each task with the
/// task's training statistics. Zero-variance dimensions are centered and
/// left at scale one, with a warning recorded.
pub fn normalize(data: &MultiTaskData) -> Result<NormalizedData> {
    data.validate()?;
    let mut warnings = Vec::new();

    // Common-domain statistics come from the last task (identity mapping).
    let mut tasks = Vec::with_capacity(data.tasks.len());
    let mut stats_all = Vec::with_capacity(data.tasks.len());
    for (t, task) in data.tasks.iter().enumerate() {
        if task.is_empty() {
            return Err(Error::contract("task has no training data"));
        }
        let n = task.len();
        let d = task.input_dim();
        let mut x_mean = DVector::zeros(d);
        let mut x_std = DVector::zeros(d);
        for j in 0..d {
            let (mean, std) = column_stats(task.x.column(j).iter().copied(), n);
            x_mean[j] = mean;
            x_std[j] = if std > 0.0 {
                std
            } else {
                warnings.push(format!("task {t} input dimension {j} has zero variance"));
                1.0
            };
        }
        let (y_mean, y_std_raw) = column_stats(task.y.iter().copied(), n);
        let y_std = if y_std_raw > 0.0 {
            y_std_raw
        } else {
            warnings.push(format!("task {t} output has zero variance"));
            1.0
        };
        stats_all.push(TaskStats {
            x_mean,
            x_std,
            y_mean,
            y_std,
        });
    }
    let common_stats = stats_all.last().unwrap().clone();

    for (task, stats) in data.tasks.iter().zip(stats_all) {
        let norm_x = |x: &DMatrix<f64>| {
            DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
                (x[(i, j)] - stats.x_mean[j]) / stats.x_std[j]
            })
        };
        let norm_y = |y: &DVector<f64>| {
            DVector::from_fn(y.len(), |i, _| (y[i] - stats.y_mean) / stats.y_std)
        };
        tasks.push(NormalizedTask {
            x: norm_x(&task.x),
            y: norm_y(&task.y),
            x_test: norm_x(&task.x_test),
            y_test_raw: task.y_test.clone(),
            y_train_raw: task.y.clone(),
            mapping: CompiledMapping {
                mapping: task.mapping.clone(),
                task_x_mean: stats.x_mean.clone(),
                task_x_std: stats.x_std.clone(),
                common_x_mean: common_stats.x_mean.clone(),
                common_x_std: common_stats.x_std.clone(),
            },
            stats,
        });
    }
    Ok(NormalizedData {
        tasks,
        common_dim: data.common_dim,
        warnings,
    })
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed.
/// Returns the `k x D` matrix of cluster centers.
pub fn kmeans_init(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "kmeans requires 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let d = points.ncols();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let dist_sq = |a: usize, center: &DVector<f64>| -> f64 {
        let mut s = 0.0;
        for j in 0..d {
            let r = points[(a, j)] - center[j];
            s += r * r;
        }
        s
    };

    // k-means++ seeding
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(points.row(rng.random_range(0..n)).transpose());
    let mut min_d: Vec<f64> = (0..n).map(|i| dist_sq(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = min_d.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center; pick uniformly
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = points.row(next).transpose();
        for i in 0..n {
            min_d[i] = min_d[i].min(dist_sq(i, &c));
        }
        centers.push(c);
    }

    // Lloyd iterations; the sentinel forces one center update even when the
    // seeded assignment is already stable
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = dist_sq(i, center);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![DVector::<f64>::zeros(d); k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums[assignment[i]] += points.row(i).transpose();
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
            // empty clusters keep their previous center
        }
    }

    let mut out = DMatrix::zeros(k, d);
    for (c, center) in centers.iter().enumerate() {
        out.set_row(c, &center.transpose());
    }
    Ok(out)
}

/// Writes one CSV file per task (`task<i>.csv` for training data and
/// `task<i>_test.csv` for test data): input columns then the output column,
/// with a header row.
pub fn export_csv(data: &MultiTaskData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, task) in data.tasks.iter().enumerate() {
        let write_split = |name: String, x: &DMatrix<f64>, y: &DVector<f64>| -> Result<()> {
            let mut file = std::fs::File::create(dir.join(name))?;
            let header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
            writeln!(file, "{},y", header.join(","))?;
            for i in 0..x.nrows() {
                let row: Vec<String> = (0..x.ncols()).map(|j| format!("{}", x[(i, j)])).collect();
                writeln!(file, "{},{}", row.join(","), y[i])?;
            }
            Ok(())
        };
        write_split(format!("task{}.csv", t + 1), &task.x, &task.y)?;
        write_split(format!("task{}_test.csv", t + 1), &task.x_test, &task.y_test)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noisy_case_shapes_and_mappings() {
        let data = gen_noisy_case(0, 5, 100, 100).unwrap();
        assert_eq!(data.tasks[0].x.shape(), (5, 2));
        assert_eq!(data.tasks[1].x.shape(), (100, 1));
        assert_eq!(data.tasks[0].x_test.nrows(), 100);
        assert!(matches!(data.tasks[0].mapping, PriorMapping::SelectDims(_)));
        assert!(matches!(data.tasks[1].mapping, PriorMapping::Identity));
        assert!(data.tasks[0].x.iter().all(|&v| (-5.0..5.0).contains(&v)));
    }

    #[test]
    fn noisy_task2_formula_value() {
        // y2(0) = 0.43*3 - 0.5*2.5*cos(1)
        let expected = 0.43 * 3.0 - 0.5 * 2.5 * 1.0f64.cos();
        assert_relative_eq!(noisy_y2(0.0), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.6147, epsilon = 1e-4);
    }

    #[test]
    fn generators_are_deterministic_in_seed() {
        let a = gen_noisy_case(7, 5, 20, 10).unwrap();
        let b = gen_noisy_case(7, 5, 20, 10).unwrap();
        assert_eq!(a.tasks[0].x, b.tasks[0].x);
        assert_eq!(a.tasks[0].y, b.tasks[0].y);
        assert_eq!(a.tasks[1].y, b.tasks[1].y);
        let c = gen_noisy_case(8, 5, 20, 10).unwrap();
        assert_ne!(a.tasks[0].y, c.tasks[0].y);

        let p = gen_park_case(3, 6, 30, 10).unwrap();
        let q = gen_park_case(3, 6, 30, 10).unwrap();
        assert_eq!(p.tasks[0].y, q.tasks[0].y);
    }

    #[test]
    fn virtual_input_does_not_enter_first_task_output() {
        // switching the x2 stream while keeping the noise stream leaves y1
        // (and x1) unchanged
        let a = gen_noisy_with_streams(11, 5, 20, 10, (STREAM_T1_X2, STREAM_T1_X2_TEST));
        let b = gen_noisy_with_streams(11, 5, 20, 10, (40, 41));
        assert_ne!(a.tasks[0].x.column(1), b.tasks[0].x.column(1));
        assert_eq!(a.tasks[0].x.column(0), b.tasks[0].x.column(0));
        assert_eq!(a.tasks[0].y, b.tasks[0].y);
    }

    #[test]
    fn first_task_noise_has_the_stated_variance() {
        let data = gen_noisy_case(31, 20_000, 1, 1).unwrap();
        let residuals: Vec<f64> = (0..data.tasks[0].len())
            .map(|i| data.tasks[0].y[i] - noisy_y1_clean(data.tasks[0].x[(i, 0)]))
            .collect();
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        assert!((mean).abs() < 0.01);
        assert!((var - 0.04).abs() < 0.003, "noise variance {var}");
    }

    #[test]
    fn normalize_is_idempotent_on_standardized_data() {
        let data = gen_noisy_case(19, 6, 30, 5).unwrap();
        let once = normalize(&data).unwrap();
        // feed the standardized tensors back in as a raw dataset
        let restd = MultiTaskData {
            tasks: once
                .tasks
                .iter()
                .zip(&data.tasks)
                .map(|(n, raw)| TaskData {
                    x: n.x.clone(),
                    y: n.y.clone(),
                    x_test: n.x_test.clone(),
                    y_test: raw.y_test.clone(),
                    mapping: raw.mapping.clone(),
                })
                .collect(),
            common_dim: data.common_dim,
        };
        let twice = normalize(&restd).unwrap();
        for (a, b) in once.tasks.iter().zip(&twice.tasks) {
            for (u, v) in a.x.iter().zip(b.x.iter()) {
                assert_relative_eq!(u, v, epsilon = 1e-12);
            }
            for (u, v) in a.y.iter().zip(b.y.iter()) {
                assert_relative_eq!(u, v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn second_task_depends_only_on_first_input() {
        let data = gen_noisy_case(5, 5, 30, 10).unwrap();
        for i in 0..30 {
            assert_relative_eq!(
                data.tasks[1].y[i],
                noisy_y2(data.tasks[1].x[(i, 0)]),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn park_formulas_match_independent_evaluation() {
        // hand-evaluated point
        let direct = 0.25 * ((1.0f64 + 0.75 * 0.5 / 0.25).sqrt() - 1.0)
            + 2.0 * (1.0 + 0.5f64.sin()).exp();
        assert_relative_eq!(park_high(&[0.5, 0.5, 0.5, 0.5]), direct, epsilon = 1e-12);
        let low = (1.0 + 0.5f64.sin() / 10.0) * direct - 1.0 + 0.25 + 0.75;
        assert_relative_eq!(park_low(0.5, 0.5), low, epsilon = 1e-12);

        // independently coded oracle at random points
        let mut rng = stream_rng(99, 0);
        for _ in 0..1000 {
            let x: [f64; 4] = [
                rng.random_range(1e-6..1.0),
                rng.random_range(1e-6..1.0),
                rng.random_range(1e-6..1.0),
                rng.random_range(1e-6..1.0),
            ];
            let oracle_high = {
                let s = (1.0 + (x[1] + x[2].powi(2)) * x[3] / x[0].powi(2)).sqrt();
                x[0] / 2.0 * (s - 1.0) + (x[0] + 3.0 * x[3]) * (1.0 + x[2].sin()).exp()
            };
            assert_relative_eq!(park_high(&x), oracle_high, max_relative = 1e-12);
            let oracle_low = (1.0 + x[2].sin() / 10.0)
                * {
                    let s = (1.0 + (0.5 + x[2].powi(2)) * x[3] / 0.25).sqrt();
                    0.25 * (s - 1.0) + (0.5 + 3.0 * x[3]) * (1.0 + x[2].sin()).exp()
                }
                - 2.0 * x[2]
                + x[3].powi(2)
                + 0.75;
            assert_relative_eq!(park_low(x[2], x[3]), oracle_low, max_relative = 1e-12);
        }
    }

    #[test]
    fn park_shapes_and_domain() {
        let data = gen_park_case(0, 6, 100, 100).unwrap();
        assert_eq!(data.tasks[0].x.shape(), (6, 4));
        assert_eq!(data.tasks[1].x.shape(), (100, 2));
        assert!(data.tasks[0].x.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn normalization_roundtrip_and_idempotence() {
        let data = gen_noisy_case(13, 8, 40, 10).unwrap();
        let norm = normalize(&data).unwrap();
        for (t, task) in norm.tasks.iter().enumerate() {
            // training columns standardized
            for j in 0..task.input_dim() {
                let (mean, std) = column_stats(task.x.column(j).iter().copied(), task.len());
                assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
                assert_relative_eq!(std, 1.0, epsilon = 1e-10);
            }
            // roundtrip
            for i in 0..task.len() {
                for j in 0..task.input_dim() {
                    let back = task.x[(i, j)] * task.stats.x_std[j] + task.stats.x_mean[j];
                    assert_relative_eq!(back, data.tasks[t].x[(i, j)], epsilon = 1e-12);
                }
                let y_back = task.y[i] * task.stats.y_std + task.stats.y_mean;
                assert_relative_eq!(y_back, data.tasks[t].y[i], epsilon = 1e-12);
            }
        }
        assert!(norm.warnings.is_empty());
    }

    #[test]
    fn zero_variance_column_is_centered_with_unit_scale() {
        let mut data = gen_noisy_case(1, 5, 10, 5).unwrap();
        for i in 0..5 {
            data.tasks[0].x[(i, 1)] = 2.5;
        }
        let norm = normalize(&data).unwrap();
        assert!(!norm.warnings.is_empty());
        for i in 0..5 {
            assert_relative_eq!(norm.tasks[0].x[(i, 1)], 0.0, epsilon = 1e-12);
        }
        assert_relative_eq!(norm.tasks[0].stats.x_std[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_task_compiled_mapping_is_exact_identity() {
        let data = gen_park_case(2, 6, 25, 5).unwrap();
        let norm = normalize(&data).unwrap();
        let task = &norm.tasks[1];
        for i in 0..task.len() {
            let x = task.x.row(i).transpose();
            let mapped = task.mapping.apply(&x).unwrap();
            assert_eq!(mapped, x);
        }
    }

    #[test]
    fn cross_task_mapping_lands_in_common_normalized_space() {
        let data = gen_park_case(2, 6, 200, 5).unwrap();
        let norm = normalize(&data).unwrap();
        let task1 = &norm.tasks[0];
        // mapped raw coordinates match selecting raw x3, x4 then normalizing
        // with the common-domain statistics
        let common = &norm.tasks[1].stats;
        for i in 0..task1.len() {
            let x_norm = task1.x.row(i).transpose();
            let mapped = task1.mapping.apply(&x_norm).unwrap();
            for (d, raw_idx) in [2usize, 3].iter().enumerate() {
                let raw = data.tasks[0].x[(i, *raw_idx)];
                let expected = (raw - common.x_mean[d]) / common.x_std[d];
                assert_relative_eq!(mapped[d], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn aligned_training_inputs_stack_all_tasks() {
        let data = gen_noisy_case(3, 5, 20, 5).unwrap();
        let norm = normalize(&data).unwrap();
        let aligned = norm.aligned_training_inputs().unwrap();
        assert_eq!(aligned.shape(), (25, 1));
    }

    #[test]
    fn kmeans_each_point_its_own_cluster_when_k_equals_n() {
        let points = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 5.0, -3.0]);
        let centers = kmeans_init(&points, 4, 0).unwrap();
        let mut found: Vec<f64> = centers.column(0).iter().copied().collect();
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(found, vec![-3.0, 0.0, 1.0, 5.0]);
    }

    #[test]
    fn kmeans_single_cluster_is_centroid() {
        let points = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0]);
        let centers = kmeans_init(&points, 1, 0).unwrap();
        assert_relative_eq!(centers[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(centers[(0, 1)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = stream_rng(17, 0);
        let mut rows = Vec::new();
        for _ in 0..30 {
            rows.push([5.0 + rng.random_range(-0.05..0.05), 5.0 + rng.random_range(-0.05..0.05)]);
        }
        for _ in 0..30 {
            rows.push([-5.0 + rng.random_range(-0.05..0.05), -5.0 + rng.random_range(-0.05..0.05)]);
        }
        let points = DMatrix::from_fn(60, 2, |i, j| rows[i][j]);
        let centers = kmeans_init(&points, 2, 1).unwrap();
        let mut cs: Vec<(f64, f64)> = (0..2).map(|c| (centers[(c, 0)], centers[(c, 1)])).collect();
        cs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((cs[0].0 + 5.0).abs() < 0.1 && (cs[0].1 + 5.0).abs() < 0.1);
        assert!((cs[1].0 - 5.0).abs() < 0.1 && (cs[1].1 - 5.0).abs() < 0.1);
    }

    #[test]
    fn kmeans_rejects_k_larger_than_n() {
        let points = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(kmeans_init(&points, 3, 0).is_err());
        assert!(kmeans_init(&points, 0, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = stream_rng(23, 0);
        let points = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let a = kmeans_init(&points, 7, 5).unwrap();
        let b = kmeans_init(&points, 7, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_export_writes_one_file_per_task_split() {
        let data = gen_noisy_case(1, 3, 4, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("hetgp_csv_{}", std::process::id()));
        export_csv(&data, &dir).unwrap();
        let t1 = std::fs::read_to_string(dir.join("task1.csv")).unwrap();
        let mut lines = t1.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,y");
        assert_eq!(lines.count(), 3);
        let t2 = std::fs::read_to_string(dir.join("task2.csv")).unwrap();
        assert!(t2.starts_with("x1,y"));
        assert!(dir.join("task2_test.csv").exists());
        // parsed numbers round-trip
        let line = t1.lines().nth(1).unwrap();
        let first: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, data.tasks[0].x[(0, 0)]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
