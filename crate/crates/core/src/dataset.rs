//! Dataset loading, generation, and filtering.
//!
//! All datasets in this crate are collections of `f64` feature vectors with
//! coordinates in `[0, 1]` and dense `0`-based integer labels. Supported
//! sources are the IDX image/label format, a plain CSV format
//! (`f0,f1,...,fd-1,label` per line), and two synthetic generators
//! (Gaussian blobs and two-moons). Every loader and generator is
//! deterministic: the same inputs or the same seed always produce the same
//! dataset, byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// IDX magic number for unsigned-byte rank-3 tensors (image files).
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic number for unsigned-byte rank-1 tensors (label files).
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One sample: a feature vector `x` and its class label `y`.
///
/// Invariant: every coordinate of `x` lies in `[0, 1]`, and `y` is a dense
/// `0`-based class id valid for the owning [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    /// Feature vector, all coordinates in `[0, 1]`.
    pub x: Vec<f64>,
    /// Dense 0-based class label.
    pub y: usize,
}

/// An in-memory dataset with uniform dimensionality and a fixed class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<LabeledPoint>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    /// Builds a dataset from points, validating the representation
    /// invariants: at least one point, uniform dimension, coordinates in
    /// `[0, 1]`, and labels in `0..num_classes`.
    pub fn new(points: Vec<LabeledPoint>, num_classes: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("empty dataset".into()));
        }
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        let dim = points[0].x.len();
        if dim == 0 {
            return Err(Error::Validation(
                "points must have at least one feature".into(),
            ));
        }
        for (i, p) in points.iter().enumerate() {
            if p.x.len() != dim {
                return Err(Error::Validation(format!(
                    "point {} has dimension {} but point 0 has dimension {}",
                    i,
                    p.x.len(),
                    dim
                )));
            }
            if let Some(v) =
                p.x.iter()
                    .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
            {
                return Err(Error::Validation(format!(
                    "point {} has feature value {} outside [0, 1]",
                    i, v
                )));
            }
            if p.y >= num_classes {
                return Err(Error::Validation(format!(
                    "point {} has label {} but num_classes is {}",
                    i, p.y, num_classes
                )));
            }
        }
        Ok(Dataset {
            points,
            dim,
            num_classes,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the dataset holds no samples (never true for a
    /// successfully constructed dataset; kept for API completeness).
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Feature dimension shared by all samples.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of classes; labels range over `0..num_classes`.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// All samples in storage order.
    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    /// Feature vector of sample `i`.
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.points[i].x
    }

    /// Label of sample `i`.
    pub fn label(&self, i: usize) -> usize {
        self.points[i].y
    }

    /// Number of samples carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for p in &self.points {
            counts[p.y] += 1;
        }
        counts
    }
}

/// Remaps arbitrary integer labels to a dense 0-based range, preserving
/// the numeric order of the original labels. Returns the dense label per
/// input and the number of distinct classes.
fn densify_labels(raw: &[i64]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<i64> = raw.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let dense = raw
        .iter()
        .map(|v| distinct.binary_search(v).expect("label present"))
        .collect();
    (dense, distinct.len())
}

fn read_exact_or(path: &Path, reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!(
                "{}: truncated while reading {}",
                path.display(),
                what
            ))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32_be(path: &Path, reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or(path, reader, &mut buf, what)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an image/label pair of IDX files into a dataset.
///
/// The image file must carry magic `0x00000803` (unsigned bytes, rank 3)
/// and the label file magic `0x00000801` (unsigned bytes, rank 1), both
/// big-endian. Images are flattened row-major to vectors of length
/// `rows * cols`. With `scale` set, pixel bytes are divided by 255; without
/// it the raw byte values are used and must already lie in `[0, 1]`
/// (i.e. only values 0 and 1), otherwise validation fails. Labels are
/// remapped to a dense 0-based range in increasing numeric order.
pub fn load_idx(images: &Path, labels: &Path, scale: bool) -> Result<Dataset> {
    // --- image file ---
    let file = File::open(images).map_err(|e| Error::io(images, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(images, &mut reader, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic 0x{:08x} (expected 0x{:08x})",
            images.display(),
            magic,
            IDX_IMAGES_MAGIC
        )));
    }
    let count = read_u32_be(images, &mut reader, "image count")? as usize;
    let rows = read_u32_be(images, &mut reader, "image rows")? as usize;
    let cols = read_u32_be(images, &mut reader, "image cols")? as usize;
    let dim = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{}: image size overflows", images.display())))?;
    if dim == 0 {
        return Err(Error::Format(format!(
            "{}: zero-sized images ({} x {})",
            images.display(),
            rows,
            cols
        )));
    }
    let mut pixels = vec![0u8; count * dim];
    read_exact_or(images, &mut reader, &mut pixels, "image data")?;
    let mut trailing = [0u8; 1];
    if reader
        .read(&mut trailing)
        .map_err(|e| Error::io(images, e))?
        != 0
    {
        return Err(Error::Format(format!(
            "{}: trailing bytes after image data",
            images.display()
        )));
    }

    // --- label file ---
    let file = File::open(labels).map_err(|e| Error::io(labels, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(labels, &mut reader, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic 0x{:08x} (expected 0x{:08x})",
            labels.display(),
            magic,
            IDX_LABELS_MAGIC
        )));
    }
    let label_count = read_u32_be(labels, &mut reader, "label count")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{} has {} labels but {} has {} images",
            labels.display(),
            label_count,
            images.display(),
            count
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    read_exact_or(labels, &mut reader, &mut raw_labels, "label data")?;

    let raw: Vec<i64> = raw_labels.iter().map(|b| *b as i64).collect();
    let (dense, num_classes) = densify_labels(&raw);

    let denom = if scale { 255.0 } else { 1.0 };
    let points = pixels
        .chunks_exact(dim)
        .zip(dense)
        .map(|(chunk, y)| LabeledPoint {
            x: chunk.iter().map(|b| *b as f64 / denom).collect(),
            y,
        })
        .collect();
    Dataset::new(points, num_classes)
}

/// Loads a CSV dataset: one sample per line, features first, integer label
/// last. Blank lines are rejected, rows must all have the same width, and
/// features must parse as finite numbers in `[0, 1]`. Labels are remapped
/// to a dense 0-based range in increasing numeric order.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Err(Error::Parse(format!(
                "{}:{}: blank line",
                path.display(),
                lineno + 1
            )));
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(Error::Parse(format!(
                "{}:{}: need at least one feature and a label",
                path.display(),
                lineno + 1
            )));
        }
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse(format!(
                    "{}:{}: row has {} cells but first row has {}",
                    path.display(),
                    lineno + 1,
                    cells.len(),
                    w
                )));
            }
            _ => {}
        }
        let (label_cell, feature_cells) = cells.split_last().expect("len >= 2");
        let label: i64 = label_cell.parse().map_err(|_| {
            Error::Parse(format!(
                "{}:{}: label {:?} is not an integer",
                path.display(),
                lineno + 1,
                label_cell
            ))
        })?;
        let mut x = Vec::with_capacity(feature_cells.len());
        for cell in feature_cells {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!(
                    "{}:{}: feature {:?} is not a number",
                    path.display(),
                    lineno + 1,
                    cell
                ))
            })?;
            x.push(v);
        }
        features.push(x);
        raw_labels.push(label);
    }
    if features.is_empty() {
        return Err(Error::Validation(format!(
            "{}: empty dataset",
            path.display()
        )));
    }
    let (dense, num_classes) = densify_labels(&raw_labels);
    let points = features
        .into_iter()
        .zip(dense)
        .map(|(x, y)| LabeledPoint { x, y })
        .collect();
    Dataset::new(points, num_classes)
}

/// Writes a dataset in the CSV format accepted by [`load_csv`]. Feature
/// values are printed with Rust's shortest round-trip float formatting, so
/// `load_csv(write_csv(ds))` reproduces `ds` exactly.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for p in ds.points() {
        let mut line = String::new();
        for v in &p.x {
            line.push_str(&format!("{}", v));
            line.push(',');
        }
        line.push_str(&format!("{}\n", p.y));
        writer
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Restricts a dataset to two of its classes and relabels them `0` and `1`.
///
/// Keeps the first `per_class` samples of `class_a` (relabeled `0`) and of
/// `class_b` (relabeled `1`), preserving the original sample order. Fails
/// if either class has fewer than `per_class` samples, naming the deficient
/// class.
pub fn filter_binary(
    ds: &Dataset,
    class_a: usize,
    class_b: usize,
    per_class: usize,
) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::Argument(format!(
            "classes must differ (both are {})",
            class_a
        )));
    }
    if class_a >= ds.num_classes() || class_b >= ds.num_classes() {
        return Err(Error::Argument(format!(
            "classes {} and {} must be < num_classes ({})",
            class_a,
            class_b,
            ds.num_classes()
        )));
    }
    if per_class == 0 {
        return Err(Error::Argument("per_class must be positive".into()));
    }
    let mut taken_a = 0usize;
    let mut taken_b = 0usize;
    let mut points = Vec::with_capacity(2 * per_class);
    for p in ds.points() {
        if p.y == class_a && taken_a < per_class {
            taken_a += 1;
            points.push(LabeledPoint {
                x: p.x.clone(),
                y: 0,
            });
        } else if p.y == class_b && taken_b < per_class {
            taken_b += 1;
            points.push(LabeledPoint {
                x: p.x.clone(),
                y: 1,
            });
        }
        if taken_a == per_class && taken_b == per_class {
            break;
        }
    }
    if taken_a < per_class {
        return Err(Error::Validation(format!(
            "class {} has only {} samples, need {}",
            class_a, taken_a, per_class
        )));
    }
    if taken_b < per_class {
        return Err(Error::Validation(format!(
            "class {} has only {} samples, need {}",
            class_b, taken_b, per_class
        )));
    }
    Dataset::new(points, 2)
}

/// Generates isotropic Gaussian blobs, one class per center.
///
/// Samples are drawn center by center in round-robin order (class 0, 1,
/// ..., C-1, class 0, ...) so that any prefix of the dataset is roughly
/// class-balanced. Coordinates are clipped to `[0, 1]`. With `std == 0`
/// every sample equals its center. Deterministic in `seed`.
pub fn gen_gaussian_blobs(
    seed: u64,
    centers: &[Vec<f64>],
    std: f64,
    per_class: usize,
) -> Result<Dataset> {
    if centers.is_empty() {
        return Err(Error::Argument("need at least one center".into()));
    }
    let dim = centers[0].len();
    if dim == 0 {
        return Err(Error::Argument(
            "centers must have at least one coordinate".into(),
        ));
    }
    for (c, center) in centers.iter().enumerate() {
        if center.len() != dim {
            return Err(Error::Argument(format!(
                "center {} has dimension {} but center 0 has dimension {}",
                c,
                center.len(),
                dim
            )));
        }
        if center
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Argument(format!(
                "center {} has a coordinate outside [0, 1]",
                c
            )));
        }
    }
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::Argument(format!(
            "std must be finite and non-negative, got {}",
            std
        )));
    }
    if per_class == 0 {
        return Err(Error::Argument("per_class must be positive".into()));
    }
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Argument(format!("bad normal parameters: {}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(centers.len() * per_class);
    for _ in 0..per_class {
        for (y, center) in centers.iter().enumerate() {
            let x = center
                .iter()
                .map(|c| (c + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            points.push(LabeledPoint { x, y });
        }
    }
    Dataset::new(points, centers.len())
}

/// Generates the classic two-moons dataset, mapped into `[0, 1]^2`.
///
/// Class 0 traces the upper half circle and class 1 the lower, interleaved
/// facing each other. Angles are evenly spaced, Gaussian noise with the
/// given standard deviation (in box units) is added per coordinate, and
/// results are clipped to the box. Deterministic in `seed`.
pub fn gen_moons(seed: u64, noise_std: f64, per_class: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Argument("per_class must be positive".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Argument(format!(
            "noise_std must be finite and non-negative, got {}",
            noise_std
        )));
    }
    let normal = Normal::new(0.0, noise_std)
        .map_err(|e| Error::Argument(format!("bad normal parameters: {}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Raw moons live in [-1, 2] x [-0.5, 1]; the affine map below sends that
    // bounding box into the unit square with a little headroom for noise.
    let to_box = |x: f64, y: f64| ((x + 1.0) / 3.0, (y + 0.5) / 1.5);
    let mut points = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        let t = if per_class == 1 {
            std::f64::consts::FRAC_PI_2
        } else {
            std::f64::consts::PI * i as f64 / (per_class - 1) as f64
        };
        let moons = [(t.cos(), t.sin()), (1.0 - t.cos(), 0.5 - t.sin())];
        for (y, &(mx, my)) in moons.iter().enumerate() {
            let (bx, by) = to_box(mx, my);
            let x = vec![
                (bx + normal.sample(&mut rng)).clamp(0.0, 1.0),
                (by + normal.sample(&mut rng)).clamp(0.0, 1.0),
            ];
            points.push(LabeledPoint { x, y });
        }
    }
    Dataset::new(points, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_pair(
        dir: &Path,
        images: &[Vec<u8>],
        labels: &[u8],
        rows: u32,
        cols: u32,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        let mut f = File::create(&img_path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_roundtrip_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![vec![0u8, 255, 51, 102], vec![255u8, 0, 0, 255]];
        let labels = vec![7u8, 2u8];
        let (ip, lp) = write_idx_pair(dir.path(), &images, &labels, 2, 2);
        let ds = load_idx(&ip, &lp, true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.feature(0)[1], 1.0);
        assert_eq!(ds.feature(0)[2], 51.0 / 255.0);
        // labels remapped in increasing order: 2 -> 0, 7 -> 1
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.label(1), 0);
    }

    #[test]
    fn idx_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("bad.idx");
        let mut f = File::create(&img_path).unwrap();
        f.write_all(&0x0000_0804u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 12]).unwrap();
        let lbl_path = dir.path().join("labels.idx");
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&0u32.to_be_bytes()).unwrap();
        let err = load_idx(&img_path, &lbl_path, true).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {:?}", err);
    }

    #[test]
    fn idx_truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[vec![1u8, 2, 3, 4]], &[0u8], 2, 2);
        // Chop two bytes off the image file.
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_idx(&ip, &lp, true).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {:?}", err);
    }

    #[test]
    fn idx_count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[vec![0u8; 4]], &[0u8, 1u8], 2, 2);
        let err = load_idx(&ip, &lp, true).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {:?}", err);
    }

    #[test]
    fn idx_unscaled_bytes_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[vec![0u8, 1, 1, 0]], &[0u8], 2, 2);
        let ds = load_idx(&ip, &lp, false).unwrap();
        assert_eq!(ds.feature(0), &[0.0, 1.0, 1.0, 0.0]);

        let (ip, lp) = write_idx_pair(dir.path(), &[vec![0u8, 2, 0, 0]], &[0u8], 2, 2);
        let err = load_idx(&ip, &lp, false).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "got {:?}", err);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_gaussian_blobs(3, &[vec![0.3, 0.3], vec![0.7, 0.6]], 0.07, 17).unwrap();
        let path = dir.path().join("blobs.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "0.1,0.2,0\n0.3,1\n").unwrap();
        assert!(matches!(load_csv(&path).unwrap_err(), Error::Parse(_)));

        std::fs::write(&path, "0.1,abc,0\n").unwrap();
        assert!(matches!(load_csv(&path).unwrap_err(), Error::Parse(_)));

        std::fs::write(&path, "0.5,1.5,0\n").unwrap();
        assert!(matches!(load_csv(&path).unwrap_err(), Error::Validation(_)));

        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn csv_labels_are_densified() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse.csv");
        std::fs::write(&path, "0.1,0.1,5\n0.2,0.2,3\n0.3,0.3,5\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(
            ds.points().iter().map(|p| p.y).collect::<Vec<_>>(),
            vec![1, 0, 1]
        );
    }

    #[test]
    fn filter_binary_takes_prefix_per_class_in_order() {
        // Labels: 0 1 2 0 1 2 0 1 2 ...
        let points = (0..12)
            .map(|i| LabeledPoint {
                x: vec![i as f64 / 12.0],
                y: i % 3,
            })
            .collect();
        let ds = Dataset::new(points, 3).unwrap();
        let filtered = filter_binary(&ds, 2, 0, 2).unwrap();
        assert_eq!(filtered.len(), 4);
        assert_eq!(filtered.num_classes(), 2);
        // Original order preserved: indices 0 (y=0), 2 (y=2), 3 (y=0), 5 (y=2).
        let expect: Vec<(f64, usize)> = vec![
            (0.0 / 12.0, 1),
            (2.0 / 12.0, 0),
            (3.0 / 12.0, 1),
            (5.0 / 12.0, 0),
        ];
        let got: Vec<(f64, usize)> = filtered.points().iter().map(|p| (p.x[0], p.y)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn filter_binary_reports_deficient_class() {
        let points = (0..5)
            .map(|i| LabeledPoint {
                x: vec![0.5],
                y: if i < 4 { 0 } else { 1 },
            })
            .collect();
        let ds = Dataset::new(points, 2).unwrap();
        let err = filter_binary(&ds, 0, 1, 2).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("class 1"), "msg: {}", msg),
            other => panic!("expected validation error, got {:?}", other),
        }
    }

    #[test]
    fn blobs_are_deterministic_and_clipped() {
        let centers = vec![vec![0.02, 0.5], vec![0.98, 0.5]];
        let a = gen_gaussian_blobs(9, &centers, 0.1, 50).unwrap();
        let b = gen_gaussian_blobs(9, &centers, 0.1, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_counts(), vec![50, 50]);
        assert!(a
            .points()
            .iter()
            .all(|p| p.x.iter().all(|v| (0.0..=1.0).contains(v))));
        let c = gen_gaussian_blobs(10, &centers, 0.1, 50).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_with_zero_std_sit_on_centers() {
        let centers = vec![vec![0.25, 0.75], vec![0.5, 0.5]];
        let ds = gen_gaussian_blobs(0, &centers, 0.0, 3).unwrap();
        for p in ds.points() {
            assert_eq!(p.x, centers[p.y]);
        }
        // Round-robin order: class 0, 1, 0, 1, ...
        let order: Vec<usize> = ds.points().iter().map(|p| p.y).collect();
        assert_eq!(order, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn moons_fill_the_box_with_two_classes() {
        let ds = gen_moons(4, 0.03, 40).unwrap();
        assert_eq!(ds.len(), 80);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.class_counts(), vec![40, 40]);
        assert!(ds
            .points()
            .iter()
            .all(|p| p.x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(ds, gen_moons(4, 0.03, 40).unwrap());
    }

    #[test]
    fn dataset_rejects_out_of_range_features() {
        let err = Dataset::new(
            vec![LabeledPoint {
                x: vec![0.5, 1.2],
                y: 0,
            }],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
