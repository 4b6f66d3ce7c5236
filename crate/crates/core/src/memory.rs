//! The memory layer: per-(class, filter) eigen-images of first-layer feature
//! maps, plus one stock set of feature maps per class.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::cnn::{CnnError, CnnModel, FeatureMapSet};
use crate::dataset::GrayImage;
use crate::numerics::{center_columns, gram, sym_eig, DenseMatrix, NumericsError};
use crate::NUM_CLASSES;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("empty class {0}")]
    EmptyClass(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("memory file format error: {0}")]
    Format(String),
    #[error("unsupported memory file version {0}")]
    Version(u32),
    #[error("unexpected EOF")]
    UnexpectedEof,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for MemoryError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            MemoryError::UnexpectedEof
        } else {
            MemoryError::Io(e)
        }
    }
}

/// Design matrices `P_jk`, indexed `[class][filter]`. Row `r` of `P_jk` is
/// filter `k`'s map for the `r`-th class-`j` image in training-set order.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub matrices: Vec<Vec<DenseMatrix>>,
    /// Training-set indices behind the rows, per class.
    pub sources: Vec<Vec<usize>>,
}

fn class_indices(train_set: &[GrayImage]) -> Result<Vec<Vec<usize>>, MemoryError> {
    let mut by_class = vec![Vec::new(); NUM_CLASSES];
    for (i, img) in train_set.iter().enumerate() {
        by_class[img.label() as usize].push(i);
    }
    if let Some(j) = by_class.iter().position(Vec::is_empty) {
        return Err(MemoryError::EmptyClass(j));
    }
    Ok(by_class)
}

/// One matrix per filter for the images at `indices`.
pub fn class_design_matrices(
    train_set: &[GrayImage],
    indices: &[usize],
    model: &CnnModel,
) -> Result<Vec<DenseMatrix>, MemoryError> {
    let filters = model.architecture().conv1_filters;
    let d = model.architecture().feature_dim();
    let mut data = vec![Vec::with_capacity(indices.len() * d); filters];
    for &i in indices {
        let maps = model.forward_conv1(&train_set[i])?;
        for (k, buf) in data.iter_mut().enumerate() {
            buf.extend_from_slice(maps.map(k));
        }
    }
    data.into_iter()
        .map(|buf| DenseMatrix::new(indices.len(), d, buf).map_err(MemoryError::from))
        .collect()
}

/// Materializes every `P_jk`. For the full MNIST training set this is over
/// a gigabyte; [`build_memory_bank`] streams one class at a time instead.
pub fn build_design_matrices(
    train_set: &[GrayImage],
    model: &CnnModel,
) -> Result<DesignMatrices, MemoryError> {
    let sources = class_indices(train_set)?;
    let matrices = sources
        .iter()
        .map(|idx| class_design_matrices(train_set, idx, model))
        .collect::<Result<_, _>>()?;
    Ok(DesignMatrices { matrices, sources })
}

/// Retained eigen-images for every (class, filter) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBank {
    classes: usize,
    filters: usize,
    delta: usize,
    dim: usize,
    /// `[(j * filters + k) * delta + q]`
    values: Vec<f64>,
    /// `[((j * filters + k) * delta + q) * dim ..][..dim]`
    vectors: Vec<f64>,
}

impl EigenBank {
    /// Assembles a bank from flat arrays laid out as `eigen_image` reads them.
    pub fn from_parts(
        classes: usize,
        filters: usize,
        delta: usize,
        dim: usize,
        values: Vec<f64>,
        vectors: Vec<f64>,
    ) -> Result<Self, MemoryError> {
        let slots = classes * filters * delta;
        if slots == 0 || dim == 0 {
            return Err(MemoryError::Shape("empty eigen bank".into()));
        }
        if values.len() != slots || vectors.len() != slots * dim {
            return Err(MemoryError::Shape(format!(
                "{} eigenvalues and {} vector entries for {classes}x{filters}x{delta} slots of dim {dim}",
                values.len(),
                vectors.len()
            )));
        }
        Ok(Self {
            classes,
            filters,
            delta,
            dim,
            values,
            vectors,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot(&self, class: usize, filter: usize, q: usize) -> usize {
        (class * self.filters + filter) * self.delta + q
    }

    /// Eigen-image `q` (0 = largest eigenvalue) of class `class`, filter `filter`.
    pub fn eigen_image(&self, class: usize, filter: usize, q: usize) -> &[f64] {
        let s = self.slot(class, filter, q);
        &self.vectors[s * self.dim..(s + 1) * self.dim]
    }

    pub fn eigenvalue(&self, class: usize, filter: usize, q: usize) -> f64 {
        self.values[self.slot(class, filter, q)]
    }

    pub fn eigenvalues(&self, class: usize, filter: usize) -> &[f64] {
        let s = self.slot(class, filter, 0);
        &self.values[s..s + self.delta]
    }
}

/// Top-`delta` eigenpairs of the unnormalized covariance of a design matrix.
pub fn top_eigen_images(p: &DenseMatrix, delta: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), MemoryError> {
    if delta == 0 || delta > p.cols() {
        return Err(MemoryError::Shape(format!(
            "delta {delta} outside 1..={}",
            p.cols()
        )));
    }
    let centered = center_columns(p)?;
    let eig = sym_eig(&gram(&centered))?;
    let positive = eig.values.iter().take(delta).filter(|&&l| l > 0.0).count();
    if positive < delta {
        log::warn!("only {positive} of {delta} retained eigenvalues are positive");
    }
    let values = eig.values[..delta].iter().map(|&l| l.max(0.0)).collect();
    let vectors = (0..delta).map(|q| eig.vector(q)).collect();
    Ok((values, vectors))
}

struct BankBuilder {
    filters: usize,
    delta: usize,
    dim: usize,
    values: Vec<f64>,
    vectors: Vec<f64>,
}

impl BankBuilder {
    fn push_class(&mut self, mats: &[DenseMatrix]) -> Result<(), MemoryError> {
        if mats.len() != self.filters {
            return Err(MemoryError::Shape(format!("{} filters, expected {}", mats.len(), self.filters)));
        }
        for p in mats {
            if p.cols() != self.dim {
                return Err(MemoryError::Shape(format!("feature dim {}, expected {}", p.cols(), self.dim)));
            }
            let (vals, vecs) = top_eigen_images(p, self.delta)?;
            self.values.extend(vals);
            for v in vecs {
                self.vectors.extend(v);
            }
        }
        Ok(())
    }

    fn finish(self, classes: usize) -> EigenBank {
        EigenBank {
            classes,
            filters: self.filters,
            delta: self.delta,
            dim: self.dim,
            values: self.values,
            vectors: self.vectors,
        }
    }
}

/// Centers each `P_jk`, forms `PᵀP`, decomposes it and keeps the `delta`
/// leading eigenvectors.
pub fn build_eigen_bank(design: &DesignMatrices, delta: usize) -> Result<EigenBank, MemoryError> {
    let first = design
        .matrices
        .first()
        .and_then(|c| c.first())
        .ok_or_else(|| MemoryError::Shape("no design matrices".into()))?;
    let mut b = BankBuilder {
        filters: design.matrices[0].len(),
        delta,
        dim: first.cols(),
        values: Vec::new(),
        vectors: Vec::new(),
    };
    for mats in &design.matrices {
        b.push_class(mats)?;
    }
    Ok(b.finish(design.matrices.len()))
}

/// Same result as `build_eigen_bank(&build_design_matrices(..)?, delta)`
/// while holding only one class of feature maps in memory.
pub fn build_memory_bank(
    train_set: &[GrayImage],
    model: &CnnModel,
    delta: usize,
) -> Result<EigenBank, MemoryError> {
    let by_class = class_indices(train_set)?;
    let mut b = BankBuilder {
        filters: model.architecture().conv1_filters,
        delta,
        dim: model.architecture().feature_dim(),
        values: Vec::new(),
        vectors: Vec::new(),
    };
    for (j, idx) in by_class.iter().enumerate() {
        log::info!("memory bank: class {j} ({} images)", idx.len());
        b.push_class(&class_design_matrices(train_set, idx, model)?)?;
    }
    Ok(b.finish(by_class.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StockEntry {
    pub class: usize,
    /// Index of the donor image in the training set.
    pub source_index: usize,
    pub maps: FeatureMapSet,
}

/// One donor image's first-layer maps per class.
#[derive(Debug, Clone, PartialEq)]
pub struct StockSet {
    entries: Vec<StockEntry>,
}

impl StockSet {
    pub fn new(entries: Vec<StockEntry>) -> Result<Self, MemoryError> {
        for (j, e) in entries.iter().enumerate() {
            if e.class != j {
                return Err(MemoryError::Shape(format!("stock entry {j} holds class {}", e.class)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[StockEntry] {
        &self.entries
    }

    pub fn maps(&self, class: usize) -> &FeatureMapSet {
        &self.entries[class].maps
    }
}

/// Picks one training image per class uniformly at random.
pub fn select_stock<R: Rng + ?Sized>(
    train_set: &[GrayImage],
    model: &CnnModel,
    rng: &mut R,
) -> Result<StockSet, MemoryError> {
    let by_class = class_indices(train_set)?;
    let entries = by_class
        .iter()
        .enumerate()
        .map(|(class, idx)| {
            let source_index = idx[rng.gen_range(0..idx.len())];
            Ok(StockEntry {
                class,
                source_index,
                maps: model.forward_conv1(&train_set[source_index])?,
            })
        })
        .collect::<Result<_, MemoryError>>()?;
    Ok(StockSet { entries })
}

/// Eigen bank and stock set together with the hash of the model they were
/// built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayer {
    pub bank: EigenBank,
    pub stock: StockSet,
    pub model_hash: String,
}

const MAGIC: &[u8; 4] = b"IMEM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, MemoryError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, MemoryError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

impl MemoryLayer {
    /// `IMEM` layout: magic, version, C, M, δ, d, model hash (length-prefixed
    /// ASCII), then per (class, filter) a vector count followed by δ
    /// eigenvalues and δ·d eigenvector entries, then per class the stock
    /// source index (u64) and M·d map entries. Integers and reals are
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let b = &self.bank;
        let mut out = Vec::with_capacity(16 + 8 * (b.vectors.len() + b.classes * b.filters * b.dim));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        for v in [b.classes, b.filters, b.delta, b.dim] {
            put_u32(&mut out, v);
        }
        put_u32(&mut out, self.model_hash.len());
        out.extend_from_slice(self.model_hash.as_bytes());
        for j in 0..b.classes {
            for k in 0..b.filters {
                put_u32(&mut out, b.delta);
                put_f64s(&mut out, b.eigenvalues(j, k));
                for q in 0..b.delta {
                    put_f64s(&mut out, b.eigen_image(j, k, q));
                }
            }
        }
        for e in &self.stock.entries {
            out.extend_from_slice(&(e.source_index as u64).to_le_bytes());
            for m in e.maps.maps() {
                put_f64s(&mut out, m);
            }
        }
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, MemoryError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MemoryError::Format("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(MemoryError::Version(version));
        }
        let classes = get_u32(&mut r)? as usize;
        let filters = get_u32(&mut r)? as usize;
        let delta = get_u32(&mut r)? as usize;
        let dim = get_u32(&mut r)? as usize;
        let side = (dim as f64).sqrt().round() as usize;
        if classes != NUM_CLASSES || filters == 0 || delta == 0 || delta > dim || side * side != dim {
            return Err(MemoryError::Format(format!(
                "implausible header C={classes} M={filters} delta={delta} d={dim}"
            )));
        }
        let hash_len = get_u32(&mut r)? as usize;
        if hash_len > 256 {
            return Err(MemoryError::Format("model hash too long".into()));
        }
        let mut hash = vec![0u8; hash_len];
        r.read_exact(&mut hash)?;
        let model_hash =
            String::from_utf8(hash).map_err(|_| MemoryError::Format("model hash is not UTF-8".into()))?;

        let mut values = Vec::with_capacity(classes * filters * delta);
        let mut vectors = Vec::with_capacity(classes * filters * delta * dim);
        for j in 0..classes {
            for k in 0..filters {
                let stored = get_u32(&mut r)? as usize;
                if stored != delta {
                    return Err(MemoryError::Shape(format!(
                        "class {j} filter {k} stores {stored} eigen-images, header says {delta}"
                    )));
                }
                values.extend(get_f64s(&mut r, delta)?);
                vectors.extend(get_f64s(&mut r, delta * dim)?);
            }
        }
        let mut entries = Vec::with_capacity(classes);
        for class in 0..classes {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let source_index = u64::from_le_bytes(b) as usize;
            let maps = (0..filters)
                .map(|_| get_f64s(&mut r, dim))
                .collect::<Result<Vec<_>, _>>()?;
            entries.push(StockEntry {
                class,
                source_index,
                maps: FeatureMapSet::new(side, maps)?,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(MemoryError::Format("trailing bytes".into()));
        }
        if values.iter().chain(&vectors).any(|v| !v.is_finite()) {
            return Err(MemoryError::Format("non-finite value".into()));
        }
        Ok(Self {
            bank: EigenBank {
                classes,
                filters,
                delta,
                dim,
                values,
                vectors,
            },
            stock: StockSet { entries },
            model_hash,
        })
    }
}

pub fn save_memory(path: &Path, memory: &MemoryLayer) -> Result<(), MemoryError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&memory.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_memory(path: &Path) -> Result<MemoryLayer, MemoryError> {
    MemoryLayer::read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;
    use crate::numerics::DenseMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> CnnModel {
        CnnModel::init(Architecture::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    // every (class, filter) pair costs a 576x576 eigendecomposition
    fn narrow_model(filters: usize, seed: u64) -> CnnModel {
        let arch = Architecture {
            conv1_filters: filters,
            ..Architecture::default()
        };
        CnnModel::init(arch, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn tiny_train_set(per_class: usize, seed: u64) -> Vec<GrayImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..per_class * NUM_CLASSES)
            .map(|i| {
                let px = (0..784).map(|_| if rng.gen_bool(0.3) { rng.gen() } else { 0 }).collect();
                GrayImage::new(28, 28, px, (i % NUM_CLASSES) as u8).unwrap()
            })
            .collect()
    }

    #[test]
    fn design_matrix_shapes_and_rows() {
        let set = tiny_train_set(2, 1);
        let m = model(2);
        let design = build_design_matrices(&set, &m).unwrap();
        assert_eq!(design.matrices.len(), 10);
        for (j, mats) in design.matrices.iter().enumerate() {
            assert_eq!(mats.len(), 6);
            for (k, p) in mats.iter().enumerate() {
                assert_eq!((p.rows(), p.cols()), (2, 576));
                for (r, &src) in design.sources[j].iter().enumerate() {
                    assert_eq!(set[src].label() as usize, j);
                    assert_eq!(p.row(r), m.forward_conv1(&set[src]).unwrap().map(k));
                }
            }
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        let set: Vec<GrayImage> = tiny_train_set(1, 3).into_iter().filter(|i| i.label() != 7).collect();
        let m = model(4);
        assert!(matches!(build_design_matrices(&set, &m), Err(MemoryError::EmptyClass(7))));
        assert!(matches!(
            select_stock(&set, &m, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(MemoryError::EmptyClass(7))
        ));
    }

    #[test]
    fn identical_maps_give_zero_eigenvalues() {
        let row = vec![0.5; 16];
        let p = DenseMatrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (vals, vecs) = top_eigen_images(&p, 3).unwrap();
        assert_eq!(vals, vec![0.0; 3]);
        for a in 0..3 {
            let n: f64 = vecs[a].iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for b in a + 1..3 {
                let dot: f64 = vecs[a].iter().zip(&vecs[b]).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_class_recovers_direction() {
        // rows = mean ± c_i v, so the centered covariance is rank one along v
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let mean: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..2.0)).collect();
        let rows: Vec<Vec<f64>> = [1.0, -1.0, 2.5, -2.5, 0.3, -0.3]
            .iter()
            .map(|c| mean.iter().zip(&v).map(|(m, x)| m + c * x).collect())
            .collect();
        let (vals, vecs) = top_eigen_images(&DenseMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        let expected = 2.0 * (1.0 + 6.25 + 0.09);
        assert!((vals[0] - expected).abs() < 1e-9);
        assert!(vals[1].abs() < 1e-9);
        let dot: f64 = vecs[0].iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bank_invariants_and_streamed_build_agree() {
        let set = tiny_train_set(4, 6);
        let m = narrow_model(2, 7);
        let design = build_design_matrices(&set, &m).unwrap();
        let bank = build_eigen_bank(&design, 3).unwrap();
        assert_eq!((bank.classes(), bank.filters(), bank.delta(), bank.dim()), (10, 2, 3, 576));
        for j in 0..10 {
            for k in 0..2 {
                let vals = bank.eigenvalues(j, k);
                assert!(vals.windows(2).all(|w| w[0] >= w[1]));
                assert!(vals.iter().all(|&l| l >= 0.0));
                for q in 0..3 {
                    let v = bank.eigen_image(j, k, q);
                    let n: f64 = v.iter().map(|x| x * x).sum();
                    assert!((n.sqrt() - 1.0).abs() < 1e-10);
                }
            }
        }
        assert_eq!(build_memory_bank(&set, &m, 3).unwrap(), bank);
    }

    #[test]
    fn stock_selection() {
        let set = tiny_train_set(1, 8);
        let m = model(9);
        let stock = select_stock(&set, &m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (j, e) in stock.entries().iter().enumerate() {
            // exactly one candidate per class
            assert_eq!(e.source_index, j);
            assert_eq!(e.maps, m.forward_conv1(&set[j]).unwrap());
        }
        let more = tiny_train_set(5, 10);
        let a = select_stock(&more, &m, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = select_stock(&more, &m, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for e in a.entries() {
            assert_eq!(more[e.source_index].label() as usize, e.class);
        }
    }

    fn small_memory() -> MemoryLayer {
        let set = tiny_train_set(3, 11);
        let m = narrow_model(1, 12);
        MemoryLayer {
            bank: build_memory_bank(&set, &m, 2).unwrap(),
            stock: select_stock(&set, &m, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
            model_hash: m.content_hash(),
        }
    }

    #[test]
    fn memory_file_round_trip() {
        let mem = small_memory();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.imem");
        save_memory(&path, &mem).unwrap();
        let back = load_memory(&path).unwrap();
        assert_eq!(back, mem);
        assert_eq!(back.to_bytes(), mem.to_bytes());
    }

    #[test]
    fn memory_file_errors() {
        let mem = small_memory();
        let bytes = mem.to_bytes();
        assert!(matches!(
            MemoryLayer::read_from(&bytes[..bytes.len() - 10]),
            Err(MemoryError::UnexpectedEof)
        ));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(MemoryLayer::read_from(&v[..]), Err(MemoryError::Version(2))));

        // header claims delta = 3 while only 2 vectors follow each count
        let mut shape = bytes.clone();
        shape[16..20].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(MemoryLayer::read_from(&shape[..]), Err(MemoryError::Shape(_))));

        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(MemoryLayer::read_from(&trailing[..]), Err(MemoryError::Format(_))));
    }
}
