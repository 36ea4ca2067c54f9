//! Datasets, the IDX file format, and task-stream construction.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples, one per row, with inputs scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Consistency("inputs must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// The first `n` examples (all of them if fewer).
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn format_err(&self, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message,
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            self.format_err(format!(
                "truncated header at byte offset {} (file is {} bytes)",
                self.pos,
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(self.format_err(format!(
                "truncated payload: expected {len} bytes from offset {}, file ends at byte offset {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32()?;
        if magic != expected {
            return Err(self.format_err(format!(
                "bad magic number 0x{magic:08x}, expected 0x{expected:08x}"
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file (`count x rows x cols` bytes) into a row-major
/// matrix with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut r = IdxReader { path, bytes, pos: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dim = rows * cols;
    let pixels = r.payload(count * dim)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::from_vec(count, dim, data)
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = IdxReader { path, bytes, pos: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.payload(count)?.iter().map(|&l| usize::from(l)).collect())
}

/// Loads an image/label IDX pair. `n_classes` is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let inputs = parse_idx_images(ip, &read_file(ip)?)?;
    let labels = parse_idx_labels(lp, &read_file(lp)?)?;
    if inputs.rows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} has {} images but {} has {} labels",
            ip.display(),
            inputs.rows(),
            lp.display(),
            labels.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, n_classes)
}

/// Encodes images (pixels rounded from `[0, 1]` to bytes) and labels as IDX.
pub fn encode_idx(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.input_dim() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} images do not match input dimension {}",
            data.input_dim()
        )));
    }
    if data.labels.iter().any(|&l| l > 255) {
        return Err(Error::Argument("IDX labels must fit in a byte".into()));
    }
    let mut images = Vec::with_capacity(16 + data.inputs.data().len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(data.inputs.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(data.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = encode_idx(data, rows, cols)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    pub head: usize,
}

/// An ordered sequence of tasks sharing one input space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub single_head: bool,
    pub head_dim: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, single_head: bool, head_dim: usize) -> Result<Self> {
        let stream = TaskStream {
            tasks,
            single_head,
            head_dim,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .tasks
            .first()
            .ok_or_else(|| Error::Argument("task stream is empty".into()))?;
        let dim = first.train.input_dim();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.train.input_dim() != dim || task.test.input_dim() != dim {
                return Err(Error::Consistency(format!(
                    "task {} has input dimension {} / {}, expected {dim}",
                    t + 1,
                    task.train.input_dim(),
                    task.test.input_dim()
                )));
            }
            if task.train.n_classes != self.head_dim || task.test.n_classes != self.head_dim {
                return Err(Error::Consistency(format!(
                    "task {} has {} classes, heads have {}",
                    t + 1,
                    task.train.n_classes,
                    self.head_dim
                )));
            }
            let expected_head = if self.single_head { 0 } else { t };
            if task.head != expected_head {
                return Err(Error::Consistency(format!(
                    "task {} routed to head {}, expected {expected_head}",
                    t + 1,
                    task.head
                )));
            }
            if task.train.is_empty() {
                return Err(Error::Consistency(format!("task {} has no training data", t + 1)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.input_dim()
    }

    /// Keeps the first `n` tasks.
    pub fn take_tasks(mut self, n: usize) -> Self {
        self.tasks.truncate(n);
        self
    }

    /// Caps every task's training (and optionally test) set.
    pub fn limit(mut self, max_train: Option<usize>, max_test: Option<usize>) -> Self {
        for task in &mut self.tasks {
            if let Some(n) = max_train {
                task.train = task.train.truncate(n);
            }
            if let Some(n) = max_test {
                task.test = task.test.truncate(n);
            }
        }
        self
    }
}

fn permute_columns(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let src = m.row(r);
        for (dst, &p) in out.row_mut(r).iter_mut().zip(perm) {
            *dst = src[p];
        }
    }
    out
}

/// Domain-incremental stream: task 1 is the data as given, every later task
/// applies its own fixed random pixel permutation to train and test inputs.
pub fn make_permuted_tasks(
    train: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    seed: u64,
) -> Result<(TaskStream, Vec<Vec<usize>>)> {
    if n_tasks == 0 {
        return Err(Error::Argument("n_tasks must be at least 1".into()));
    }
    let d = train.input_dim();
    let mut rng = SeededRng::new(seed);
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut perms = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let perm: Vec<usize> = if t == 0 {
            (0..d).collect()
        } else {
            rng.permutation(d)
        };
        let apply = |ds: &Dataset| Dataset {
            inputs: permute_columns(&ds.inputs, &perm),
            labels: ds.labels.clone(),
            n_classes: ds.n_classes,
        };
        tasks.push(Task {
            train: apply(train),
            test: apply(test),
            head: 0,
        });
        perms.push(perm);
    }
    let head_dim = train.n_classes.max(test.n_classes);
    for task in &mut tasks {
        task.train.n_classes = head_dim;
        task.test.n_classes = head_dim;
    }
    Ok((TaskStream::new(tasks, true, head_dim)?, perms))
}

fn split_one(ds: &Dataset, pair: (usize, usize)) -> Dataset {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels[i] == pair.0 || ds.labels[i] == pair.1)
        .collect();
    let mut out = ds.subset(&idx);
    for l in &mut out.labels {
        *l = usize::from(*l == pair.1);
    }
    out.n_classes = 2;
    out
}

/// Task-incremental stream of binary problems, one head per class pair.
/// Within task `i`, `pairs[i].0` becomes label 0 and `pairs[i].1` label 1.
pub fn make_split_tasks(train: &Dataset, test: &Dataset, pairs: &[(usize, usize)]) -> Result<TaskStream> {
    let n_classes = train.n_classes.max(test.n_classes);
    let mut seen = vec![false; n_classes];
    for &(a, b) in pairs {
        for c in [a, b] {
            if c >= n_classes {
                return Err(Error::Argument(format!(
                    "class {c} out of range for {n_classes} classes"
                )));
            }
            if seen[c] {
                return Err(Error::Argument(format!("class {c} appears in more than one pair")));
            }
            seen[c] = true;
        }
    }
    let tasks = pairs
        .iter()
        .enumerate()
        .map(|(i, &pair)| Task {
            train: split_one(train, pair),
            test: split_one(test, pair),
            head: i,
        })
        .collect();
    TaskStream::new(tasks, false, 2)
}

pub const STANDARD_SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

/// Specification of a synthetic two-blob task family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub seed: u64,
}

/// Half-width, in raw units, of the coordinate range mapped onto `[0, 1]`:
/// four noise standard deviations either side of the origin.
const RESCALE_HALF_RANGE: f64 = 4.0;

fn rescale(v: f64) -> f64 {
    (0.5 + v / (2.0 * RESCALE_HALF_RANGE)).clamp(0.0, 1.0)
}

/// Random unit direction for each task of a synthetic stream, in task order.
pub fn synthetic_directions(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(spec.seed);
    (0..spec.n_tasks).map(|_| unit_direction(&mut rng, spec.input_dim)).collect()
}

fn unit_direction(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        let v = rng.sample_standard_normal(dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Each task: two unit-variance Gaussian blobs centred at `-/+ separation / 2`
/// along a task-specific random unit direction (class 0 negative, class 1
/// positive), rescaled into `[0, 1]` and clipped, then shuffled and split
/// 80/20 into disjoint train and test sets. Multi-head.
pub fn make_synthetic_tasks(spec: &SyntheticSpec) -> Result<TaskStream> {
    if spec.n_tasks == 0 || spec.n_per_class == 0 || spec.input_dim == 0 {
        return Err(Error::Argument("synthetic task counts must be positive".into()));
    }
    if !(spec.class_separation >= 0.0) {
        return Err(Error::Argument("class separation must be nonnegative".into()));
    }
    let directions = synthetic_directions(spec);
    let mut rng = SeededRng::new(spec.seed ^ 0x5eed_0f_da7a);
    let d = spec.input_dim;
    let total = 2 * spec.n_per_class;
    let n_train = total * 4 / 5;
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for (t, u) in directions.iter().enumerate() {
        let mut data = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        for class in 0..2usize {
            let sign = if class == 0 { -1.0 } else { 1.0 };
            for _ in 0..spec.n_per_class {
                let offset = sign * 0.5 * spec.class_separation;
                for &ui in u {
                    data.push(rescale(offset * ui + rng.normal()));
                }
                labels.push(class);
            }
        }
        let all = Dataset::new(Matrix::from_vec(total, d, data)?, labels, 2)?;
        let order = rng.permutation(total);
        tasks.push(Task {
            train: all.subset(&order[..n_train]),
            test: all.subset(&order[n_train..]),
            head: t,
        });
    }
    TaskStream::new(tasks, false, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 1, 2, 3, 255, 0, 128, 64, 32, 16, 8, 4, 2];
        let inputs = Matrix::from_vec(2, 9, pixels.iter().map(|&p| f64::from(p) / 255.0).collect()).unwrap();
        Dataset::new(inputs, vec![3, 7], 8).unwrap()
    }

    fn raw_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3];
        images.extend([0, 51, 102, 153, 204, 255, 1, 2, 3, 255, 0, 128, 64, 32, 16, 8, 4, 2]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
        (images, labels)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = raw_fixture();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs.rows(), 2);
        assert_eq!(ds.inputs.cols(), 9);
        assert_eq!(ds.inputs.get(0, 5), 1.0);
        assert_eq!(ds.inputs.get(0, 1), 0.2);
        assert_eq!(ds.inputs.get(1, 2), 128.0 / 255.0);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds, fixture());
    }

    #[test]
    fn rejects_wrong_magic() {
        let (mut images, _) = raw_fixture();
        images[3] = 0x02;
        let err = parse_idx_images(Path::new("x"), &images).unwrap_err();
        assert!(err.to_string().contains("0x00000802"), "{err}");
    }

    #[test]
    fn rejects_truncation_with_offset() {
        let (images, labels) = raw_fixture();
        let err = parse_idx_images(Path::new("x"), &images[..20]).unwrap_err();
        assert!(err.to_string().contains("offset 16"), "{err}");
        let err = parse_idx_labels(Path::new("y"), &labels[..6]).unwrap_err();
        assert!(err.to_string().contains("offset 4"), "{err}");
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = raw_fixture();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, images).unwrap();
        fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&ds, 3, 3, &ip, &lp).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), raw_fixture().0);
        assert_eq!(load_idx(&ip, &lp).unwrap(), ds);
    }

    fn toy_pair(n: usize, d: usize, classes: usize, seed: u64) -> (Dataset, Dataset) {
        let mut rng = SeededRng::new(seed);
        let mk = |rng: &mut SeededRng| {
            let inputs = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform()).collect()).unwrap();
            let labels = (0..n).map(|i| i % classes).collect();
            Dataset::new(inputs, labels, classes).unwrap()
        };
        (mk(&mut rng), mk(&mut rng))
    }

    #[test]
    fn permuted_tasks_structure() {
        let (train, test) = toy_pair(12, 16, 10, 1);
        let (stream, perms) = make_permuted_tasks(&train, &test, 3, 5).unwrap();
        assert_eq!(stream.len(), 3);
        assert!(stream.single_head);
        assert_eq!(stream.tasks[0].train.inputs, train.inputs);
        for (t, perm) in perms.iter().enumerate() {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..16).collect::<Vec<_>>());
            for r in 0..train.len() {
                let mut a = train.inputs.row(r).to_vec();
                let mut b = stream.tasks[t].train.inputs.row(r).to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
            assert_eq!(stream.tasks[t].train.labels, train.labels);
        }
        assert_ne!(perms[1], perms[2]);
        assert!(make_permuted_tasks(&train, &test, 0, 5).is_err());
    }

    #[test]
    fn split_tasks_partition_and_relabel() {
        let (train, test) = toy_pair(50, 4, 10, 2);
        let stream = make_split_tasks(&train, &test, &STANDARD_SPLIT_PAIRS).unwrap();
        assert_eq!(stream.len(), 5);
        let total: usize = stream.tasks.iter().map(|t| t.train.len()).sum();
        assert_eq!(total, train.len());
        for (i, t) in stream.tasks.iter().enumerate() {
            assert_eq!(t.head, i);
            assert!(t.train.labels.iter().all(|&l| l < 2));
        }
        let partial = make_split_tasks(&train, &test, &[(0, 1), (4, 5)]).unwrap();
        let expected = train.labels.iter().filter(|&&l| [0, 1, 4, 5].contains(&l)).count();
        assert_eq!(partial.tasks.iter().map(|t| t.train.len()).sum::<usize>(), expected);
        assert!(make_split_tasks(&train, &test, &[(0, 1), (1, 2)]).is_err());
        assert!(make_split_tasks(&train, &test, &[(0, 10)]).is_err());
    }

    fn direction_accuracy(stream: &TaskStream, dirs: &[Vec<f64>]) -> f64 {
        let (mut correct, mut total) = (0usize, 0usize);
        for (task, u) in stream.tasks.iter().zip(dirs) {
            for r in 0..task.test.len() {
                let proj: f64 = task.test.inputs.row(r).iter().zip(u).map(|(x, d)| (x - 0.5) * d).sum();
                correct += usize::from(usize::from(proj > 0.0) == task.test.labels[r]);
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn synthetic_tasks_are_linearly_separable_at_large_separation() {
        let spec = SyntheticSpec {
            n_tasks: 3,
            n_per_class: 500,
            input_dim: 10,
            class_separation: 8.0,
            seed: 4,
        };
        let stream = make_synthetic_tasks(&spec).unwrap();
        assert_eq!(stream.tasks[0].train.len(), 800);
        assert_eq!(stream.tasks[0].test.len(), 200);
        assert!(direction_accuracy(&stream, &synthetic_directions(&spec)) > 0.99);
        assert_eq!(stream, make_synthetic_tasks(&spec).unwrap());
    }

    #[test]
    fn synthetic_tasks_without_separation_are_chance() {
        let spec = SyntheticSpec {
            n_tasks: 2,
            n_per_class: 1000,
            input_dim: 10,
            class_separation: 0.0,
            seed: 6,
        };
        let stream = make_synthetic_tasks(&spec).unwrap();
        let acc = direction_accuracy(&stream, &synthetic_directions(&spec));
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn synthetic_train_and_test_are_disjoint() {
        let spec = SyntheticSpec {
            n_tasks: 1,
            n_per_class: 40,
            input_dim: 5,
            class_separation: 3.0,
            seed: 9,
        };
        let stream = make_synthetic_tasks(&spec).unwrap();
        let t = &stream.tasks[0];
        for i in 0..t.train.len() {
            for j in 0..t.test.len() {
                assert_ne!(t.train.inputs.row(i), t.test.inputs.row(j));
            }
        }
    }
}
