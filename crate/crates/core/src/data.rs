//! Procedural desk-scale datasets and the raw image-grid format.
//!
//! Three deterministic generators stand in for the big corpora: `shapes-A`
//! (anti-aliased circles vs squares) plays the pretraining role, `shapes-B`
//! (crosses vs triangles) is the distribution-shifted downstream task, and
//! `gauss-mix` renders blurred two-Gaussian heatmaps. Everything regenerates
//! bit-exactly from `(name, n, seed)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::rng::DeskRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    ShapesA,
    ShapesB,
    GaussMix,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shapes-a" => Ok(DatasetName::ShapesA),
            "shapes-b" => Ok(DatasetName::ShapesB),
            "gauss-mix" => Ok(DatasetName::GaussMix),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?}; expected shapes-A, shapes-B, or gauss-mix"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::ShapesA => "shapes-A",
            DatasetName::ShapesB => "shapes-B",
            DatasetName::GaussMix => "gauss-mix",
        }
    }
}

/// Fully regenerable image/label block with pixels in [-1, 1].
#[derive(Clone, Debug)]
pub struct DeskDataset<S> {
    pub name: String,
    pub n: usize,
    pub channels: usize,
    pub image_size: usize,
    /// `[n, c, h, h]`.
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl<S: Scalar> DeskDataset<S> {
    pub fn image(&self, i: usize) -> Tensor<S> {
        let sz = self.channels * self.image_size * self.image_size;
        Tensor::new(
            vec![self.channels, self.image_size, self.image_size],
            self.images.data[i * sz..(i + 1) * sz].to_vec(),
        )
        .expect("image slice")
    }

    /// Class id for conditioning; `None` when the dataset is unlabeled.
    pub fn class_of(&self, i: usize) -> Option<usize> {
        if self.num_classes > 0 {
            Some(self.labels[i])
        } else {
            None
        }
    }

    /// First `k` indices as a held-out-style slice (images are i.i.d. by
    /// construction, so any fixed slice works).
    pub fn subset(&self, indices: &[usize]) -> DeskDataset<S> {
        let sz = self.channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * sz);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * sz..(i + 1) * sz]);
            labels.push(self.labels[i]);
        }
        DeskDataset {
            name: self.name.clone(),
            n: indices.len(),
            channels: self.channels,
            image_size: self.image_size,
            images: Tensor::new(
                vec![indices.len(), self.channels, self.image_size, self.image_size],
                data,
            )
            .expect("subset shape"),
            labels,
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Coverage of pixel `[x, x+1) x [y, y+1)` by an axis-aligned box.
fn box_coverage(x: f64, y: f64, cx: f64, cy: f64, hx: f64, hy: f64) -> f64 {
    let ox = clamp01((cx + hx).min(x + 1.0) - (cx - hx).max(x));
    let oy = clamp01((cy + hy).min(y + 1.0) - (cy - hy).max(y));
    ox * oy
}

fn render_sample(name: DatasetName, label: usize, h: usize, rng: &mut DeskRng, out: &mut [f64]) {
    let hf = h as f64;
    let (cx, cy) = (rng.next_range_f64(0.32 * hf, 0.68 * hf), rng.next_range_f64(0.32 * hf, 0.68 * hf));
    match (name, label) {
        (DatasetName::ShapesA, 0) => {
            // Anti-aliased disk.
            let r = rng.next_range_f64(0.2 * hf, 0.3 * hf);
            for y in 0..h {
                for x in 0..h {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    out[y * h + x] = clamp01(r - d + 0.5);
                }
            }
        }
        (DatasetName::ShapesA, _) => {
            // Axis-aligned square.
            let a = rng.next_range_f64(0.18 * hf, 0.28 * hf);
            for y in 0..h {
                for x in 0..h {
                    out[y * h + x] = box_coverage(x as f64, y as f64, cx, cy, a, a);
                }
            }
        }
        (DatasetName::ShapesB, 0) => {
            // Plus-shaped cross of two thin bars.
            let arm = rng.next_range_f64(0.28 * hf, 0.42 * hf);
            let w = rng.next_range_f64(0.06 * hf, 0.12 * hf);
            for y in 0..h {
                for x in 0..h {
                    let horiz = box_coverage(x as f64, y as f64, cx, cy, arm, w);
                    let vert = box_coverage(x as f64, y as f64, cx, cy, w, arm);
                    out[y * h + x] = horiz.max(vert);
                }
            }
        }
        (DatasetName::ShapesB, _) => {
            // Up-pointing isoceles triangle, 4x4 supersampled.
            let half_base = rng.next_range_f64(0.22 * hf, 0.32 * hf);
            let height = rng.next_range_f64(0.4 * hf, 0.55 * hf);
            let apex_y = cy - height / 2.0;
            let base_y = cy + height / 2.0;
            for y in 0..h {
                for x in 0..h {
                    let mut hits = 0;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                            let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                            if py >= apex_y && py <= base_y {
                                let frac = (py - apex_y) / height;
                                if (px - cx).abs() <= half_base * frac {
                                    hits += 1;
                                }
                            }
                        }
                    }
                    out[y * h + x] = hits as f64 / 16.0;
                }
            }
        }
        (DatasetName::GaussMix, label) => {
            // Two blurred Gaussian blobs, arranged horizontally (class 0) or
            // vertically (class 1).
            let spread = rng.next_range_f64(0.16 * hf, 0.22 * hf);
            let sigma = rng.next_range_f64(0.1 * hf, 0.16 * hf);
            let (a1, a2) = (rng.next_range_f64(0.7, 1.0), rng.next_range_f64(0.7, 1.0));
            let (c1, c2) = if label == 0 {
                ((cx - spread, cy), (cx + spread, cy))
            } else {
                ((cx, cy - spread), (cx, cy + spread))
            };
            for y in 0..h {
                for x in 0..h {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let d1 = (px - c1.0).powi(2) + (py - c1.1).powi(2);
                    let d2 = (px - c2.0).powi(2) + (py - c2.1).powi(2);
                    let v = a1 * (-d1 / (2.0 * sigma * sigma)).exp() + a2 * (-d2 / (2.0 * sigma * sigma)).exp();
                    out[y * h + x] = clamp01(v);
                }
            }
        }
    }
}

/// Deterministically render `n` images of side `h` (8 or 16).
pub fn make_dataset<S: Scalar>(name: DatasetName, n: usize, h: usize, seed: u64) -> Result<DeskDataset<S>> {
    if h != 8 && h != 16 {
        return Err(Error::Config(format!("image side {h} unsupported; expected 8 or 16")));
    }
    if n < 256 {
        return Err(Error::Config(format!("dataset size {n} too small; need at least 256")));
    }
    let base = DeskRng::seed_from(seed).derive_str(name.as_str());
    let mut data = vec![S::zero(); n * h * h];
    let mut labels = Vec::with_capacity(n);
    let mut pix = vec![0.0f64; h * h];
    for i in 0..n {
        let label = i % 2;
        labels.push(label);
        let mut rng = base.derive(i as u64);
        render_sample(name, label, h, &mut rng, &mut pix);
        for (o, &v) in data[i * h * h..(i + 1) * h * h].iter_mut().zip(&pix) {
            *o = S::from_f64_lossy(2.0 * v - 1.0);
        }
    }
    Ok(DeskDataset {
        name: name.as_str().to_string(),
        n,
        channels: 1,
        image_size: h,
        images: Tensor::new(vec![n, 1, h, h], data).expect("dataset shape"),
        labels,
        num_classes: 2,
        seed,
    })
}

/// Infinite stream of seeded epoch-wise shuffled batches.
pub struct BatchStream<'a, S> {
    ds: &'a DeskDataset<S>,
    batch: usize,
    base: DeskRng,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

/// Same `(dataset, batch, seed)` always yields the same sequence.
pub fn batch_stream<S: Scalar>(ds: &DeskDataset<S>, batch: usize, seed: u64) -> BatchStream<'_, S> {
    assert!(batch >= 1 && batch <= ds.n, "batch {batch} out of range for {} samples", ds.n);
    let base = DeskRng::seed_from(seed).derive_str("batch-stream");
    let mut perm: Vec<usize> = (0..ds.n).collect();
    base.derive(0).shuffle(&mut perm);
    BatchStream { ds, batch, base, epoch: 0, perm, pos: 0 }
}

impl<S: Scalar> BatchStream<'_, S> {
    /// Next batch of `(images [b, c, h, h], labels)`; the final batch of an
    /// epoch may be short so every index is visited exactly once per epoch.
    pub fn next_batch(&mut self) -> (Tensor<S>, Vec<usize>) {
        if self.pos >= self.perm.len() {
            self.epoch += 1;
            self.base.derive(self.epoch).shuffle(&mut self.perm);
            self.pos = 0;
        }
        let take = self.batch.min(self.perm.len() - self.pos);
        let idx = &self.perm[self.pos..self.pos + take];
        self.pos += take;
        let sz = self.ds.channels * self.ds.image_size * self.ds.image_size;
        let mut data = Vec::with_capacity(take * sz);
        let mut labels = Vec::with_capacity(take);
        for &i in idx {
            data.extend_from_slice(&self.ds.images.data[i * sz..(i + 1) * sz]);
            labels.push(self.ds.labels[i]);
        }
        (
            Tensor::new(vec![take, self.ds.channels, self.ds.image_size, self.ds.image_size], data)
                .expect("batch shape"),
            labels,
        )
    }

    /// Indices of the current epoch's permutation (for tests).
    pub fn current_perm(&self) -> &[usize] {
        &self.perm
    }
}

// ---- raw image-grid format (IMGR) ------------------------------------------

const IMGR_MAGIC: &[u8; 4] = b"IMGR";

/// Write images `[n, c, h, h]` with pixels in [-1, 1] as 8-bit raw grid.
pub fn write_imgr<S: Scalar>(path: &Path, images: &Tensor<S>) -> Result<()> {
    let [n, c, h, w] = images.shape[..] else {
        return Err(Error::Config(format!("write_imgr expects [n, c, h, h], got {:?}", images.shape)));
    };
    if h != w {
        return Err(Error::Config("write_imgr expects square images".into()));
    }
    let mut bytes = Vec::with_capacity(16 + images.numel());
    bytes.extend_from_slice(IMGR_MAGIC);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(c as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for &v in &images.data {
        let q = ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        bytes.push(q);
    }
    crate::io::atomic_write(path, &bytes)
}

/// Read an IMGR file back as `[n, c, h, h]` in [-1, 1].
pub fn read_imgr<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != IMGR_MAGIC {
        return Err(Error::Format(crate::io::FormatError::BadMagic {
            path: path.display().to_string(),
            expected: "IMGR",
        }));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expect = n * c * h * h;
    if bytes.len() != 16 + expect {
        return Err(Error::Format(crate::io::FormatError::Truncated {
            path: path.display().to_string(),
            expected: 16 + expect,
            found: bytes.len(),
        }));
    }
    let data: Vec<S> = bytes[16..].iter().map(|&b| S::from_f64_lossy(b as f64 / 127.5 - 1.0)).collect();
    Ok(Tensor::new(vec![n, c, h, h], data).expect("imgr shape"))
}

/// Load a directory of IMGR files (sorted by name) as one unlabeled dataset.
pub fn load_imgr_dir<S: Scalar>(dir: &Path) -> Result<DeskDataset<S>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "imgr").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .imgr files in {}", dir.display())));
    }
    let mut all: Option<(usize, usize, Vec<S>)> = None;
    let mut total = 0usize;
    for p in &paths {
        let t = read_imgr::<S>(p)?;
        let [n, c, h, _] = t.shape[..] else { unreachable!() };
        match &mut all {
            None => {
                total = n;
                all = Some((c, h, t.data));
            }
            Some((c0, h0, data)) => {
                if *c0 != c || *h0 != h {
                    return Err(Error::Config(format!(
                        "image sizes disagree across {}: {}x{} vs {}x{}",
                        dir.display(),
                        c0,
                        h0,
                        c,
                        h
                    )));
                }
                total += n;
                data.extend_from_slice(&t.data);
            }
        }
    }
    let (c, h, data) = all.unwrap();
    Ok(DeskDataset {
        name: format!("dir:{}", dir.display()),
        n: total,
        channels: c,
        image_size: h,
        images: Tensor::new(vec![total, c, h, h], data).expect("dir shape"),
        labels: vec![0; total],
        num_classes: 0,
        seed: 0,
    })
}

/// Streaming writer used by samplers that emit grids incrementally.
pub fn write_imgr_to<W: Write, S: Scalar>(w: &mut W, images: &Tensor<S>) -> std::io::Result<()> {
    let [n, c, h, _] = images.shape[..] else {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "bad shape"));
    };
    w.write_all(IMGR_MAGIC)?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(c as u32).to_le_bytes())?;
    w.write_all(&(h as u32).to_le_bytes())?;
    for &v in &images.data {
        let q = ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        w.write_all(&[q])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let a = make_dataset::<f64>(DatasetName::ShapesA, 256, 8, 7).unwrap();
        let b = make_dataset::<f64>(DatasetName::ShapesA, 256, 8, 7).unwrap();
        assert_eq!(a.images.data, b.images.data);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_balanced_and_pixels_in_range() {
        for name in [DatasetName::ShapesA, DatasetName::ShapesB, DatasetName::GaussMix] {
            let ds = make_dataset::<f64>(name, 512, 8, 3).unwrap();
            let ones = ds.labels.iter().filter(|&&l| l == 1).count();
            assert!((ones as f64 - 256.0).abs() <= 256.0 * 0.05);
            assert!(ds.images.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn gauss_mix_is_mostly_dark() {
        let ds = make_dataset::<f64>(DatasetName::GaussMix, 512, 8, 11).unwrap();
        let mean: f64 = ds.images.data.iter().sum::<f64>() / ds.images.data.len() as f64;
        assert!(mean > -1.0 && mean < 0.0, "mean pixel {mean}");
    }

    #[test]
    fn rejects_unsupported_shapes() {
        assert!(make_dataset::<f64>(DatasetName::ShapesA, 256, 12, 0).is_err());
        assert!(make_dataset::<f64>(DatasetName::ShapesA, 100, 8, 0).is_err());
        assert!(DatasetName::parse("shapes-A").is_ok());
        assert!(DatasetName::parse("mnist").is_err());
    }

    #[test]
    fn first_epoch_visits_every_index_once() {
        let ds = make_dataset::<f64>(DatasetName::ShapesA, 256, 8, 1).unwrap();
        let mut stream = batch_stream(&ds, 10, 5);
        let mut seen = vec![false; 256];
        let mut count = 0;
        while count < 256 {
            let (imgs, _) = stream.next_batch();
            let b = imgs.shape[0];
            // Recover which indices were taken from the permutation.
            for &i in &stream.current_perm()[count..count + b] {
                assert!(!seen[i]);
                seen[i] = true;
            }
            count += b;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn streams_replay_and_differ_by_seed() {
        let ds = make_dataset::<f64>(DatasetName::ShapesB, 256, 8, 1).unwrap();
        let mut a = batch_stream(&ds, 16, 9);
        let mut b = batch_stream(&ds, 16, 9);
        for _ in 0..40 {
            let (ia, la) = a.next_batch();
            let (ib, lb) = b.next_batch();
            assert_eq!(ia.data, ib.data);
            assert_eq!(la, lb);
        }
        let c = batch_stream(&ds, 16, 10);
        assert_ne!(a.current_perm(), c.current_perm());
    }

    #[test]
    fn task_gap_between_shapes_a_and_b() {
        // The cross-dataset Frechet surrogate dwarfs the within-dataset
        // split distance, guaranteeing a real distribution shift.
        use crate::metrics::{feature_stats, frechet_distance, Projection, PROJECTION_DIM};
        let a = make_dataset::<f64>(DatasetName::ShapesA, 2048, 8, 3).unwrap();
        let b = make_dataset::<f64>(DatasetName::ShapesB, 2048, 8, 4).unwrap();
        let proj = Projection::seeded(64, PROJECTION_DIM, 17).unwrap();
        let half = |ds: &DeskDataset<f64>, lo: usize| {
            ds.subset(&(lo..lo + 1024).collect::<Vec<_>>())
        };
        let stats = |ds: &DeskDataset<f64>| feature_stats(&ds.images, Some(&proj)).unwrap();
        let a1 = stats(&half(&a, 0));
        let a2 = stats(&half(&a, 1024));
        let within = frechet_distance(&a1, &a2).unwrap();
        let across = frechet_distance(&stats(&a), &stats(&b)).unwrap();
        assert!(
            across > 10.0 * within,
            "across {across} vs within {within} (need > 10x)"
        );
    }

    #[test]
    fn imgr_roundtrip() {
        let dir = std::env::temp_dir().join(format!("fine-imgr-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.imgr");
        let mut rng = DeskRng::seed_from(2);
        let imgs = Tensor::<f64>::gaussian(&[3, 1, 8, 8], 0.5, &mut rng);
        write_imgr(&path, &imgs).unwrap();
        let back = read_imgr::<f64>(&path).unwrap();
        assert_eq!(back.shape, vec![3, 1, 8, 8]);
        // Quantized to 8 bits: within one step.
        for (a, b) in imgs.data.iter().zip(&back.data) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() <= 1.0 / 127.5 + 1e-12);
        }
        let ds = load_imgr_dir::<f64>(&dir).unwrap();
        assert_eq!(ds.n, 3);
        assert_eq!(ds.num_classes, 0);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
