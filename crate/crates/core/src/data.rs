//! Image datasets: IDX files, permuted task streams, Gaussian corruption
//! and FGSM adversarial examples.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::{LayerGate, Network};
use crate::tensor::{Graph, Tensor};
use crate::training::softmax_xent_var;

pub const IDX_LABELS: u32 = 0x0000_0801;
pub const IDX_IMAGES: u32 = 0x0000_0803;

/// Flattened images `[N, D]` with one class index per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    images: Tensor,
    labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 2 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the given rows out as a `[len, D]` batch.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Self {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&rows);
        Self {
            name: self.name.clone(),
            images,
            labels,
        }
    }

    pub fn with_images(&self, name: impl Into<String>, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::dim(
                "with_images",
                format!("{:?} vs {:?}", images.shape(), self.images.shape()),
            ));
        }
        Self::new(name, images, self.labels.clone())
    }

    /// Writes the dataset as a pair of IDX files, pixels rescaled to bytes.
    /// `rows * cols` must equal the feature count.
    pub fn write_idx(&self, images_path: &Path, labels_path: &Path, rows: u32, cols: u32) -> Result<()> {
        if (rows * cols) as usize != self.features() {
            return Err(Error::Data(format!(
                "{rows}x{cols} images do not hold {} features",
                self.features()
            )));
        }
        let pixels: Vec<u8> = self
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let labels = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte"))))
            .collect::<Result<Vec<u8>>>()?;
        write_idx_file(images_path, IDX_IMAGES, &[self.len() as u32, rows, cols], &pixels)?;
        write_idx_file(labels_path, IDX_LABELS, &[self.len() as u32], &labels)
    }
}

/// Raw IDX container: header dims followed by a `u8` payload.
pub fn write_idx_file(path: &Path, magic: u32, dims: &[u32], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Idx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, magic: u32) -> Result<Idx> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |offset: usize, detail: String| Error::Format {
        path: PathBuf::from(path),
        offset: offset as u64,
        detail,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| err(at, "file ends inside the header".into()))
    };
    let got = word(0)?;
    if got != magic {
        return Err(err(0, format!("magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|i| word(4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have != want {
        return Err(err(
            start + have.min(want),
            format!("payload has {have} bytes, header promises {want}"),
        ));
    }
    Ok(Idx {
        dims,
        payload: bytes[start..].to_vec(),
    })
}

/// Loads an image/label IDX pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let img = read_idx(images_path, IDX_IMAGES)?;
    let lbl = read_idx(labels_path, IDX_LABELS)?;
    if img.dims[0] != lbl.dims[0] {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {} images", lbl.dims[0], img.dims[0]),
        });
    }
    let n = img.dims[0];
    let d = img.dims[1] * img.dims[2];
    let images = Tensor::new(&[n, d], img.payload.iter().map(|&p| f32::from(p) / 255.0).collect())?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageDataset::new(name, images, lbl.payload.iter().map(|&l| usize::from(l)).collect())
}

/// The pixel permutation of task seed `seed`: output pixel `i` reads input
/// pixel `perm[i]`.
pub fn task_permutation(features: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..features).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

pub fn permute_task(ds: &ImageDataset, seed: u64) -> ImageDataset {
    let d = ds.features();
    let perm = task_permutation(d, seed);
    let mut images = ds.images.clone();
    for (dst, src) in images
        .data_mut()
        .chunks_exact_mut(d)
        .zip(ds.images.data().chunks_exact(d))
    {
        for (o, &p) in dst.iter_mut().zip(&perm) {
            *o = src[p];
        }
    }
    ImageDataset {
        name: format!("{}/perm{seed}", ds.name),
        images,
        labels: ds.labels.clone(),
    }
}

/// `(task index, permutation seed)` rows: task `q` uses `master + q`.
pub fn task_seeds(master: u64, tasks: usize) -> Vec<(usize, u64)> {
    (0..tasks).map(|q| (q, master + q as u64)).collect()
}

pub fn write_task_manifest(path: &Path, seeds: &[(usize, u64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "seed"])?;
    for (q, s) in seeds {
        w.write_record([q.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `x += level * n` with `n ~ N(0, 1)` per entry; no clamping.
pub fn add_noise(images: &mut Tensor, level: f32, rng: &mut impl Rng) {
    for v in images.data_mut() {
        let n: f32 = rng.sample(StandardNormal);
        *v += level * n;
    }
}

pub fn corrupt(ds: &ImageDataset, level: f32, seed: u64) -> ImageDataset {
    let mut images = ds.images.clone();
    if level != 0.0 {
        add_noise(&mut images, level, &mut ChaCha8Rng::seed_from_u64(seed));
    }
    ImageDataset {
        name: format!("{}/noise{level}", ds.name),
        images,
        labels: ds.labels.clone(),
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FGSM on one batch: `clamp(x + eps * sign(dL/dx), 0, 1)`.
pub fn fgsm(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    eps: f32,
    gates: Option<&[Option<LayerGate>]>,
) -> Result<Tensor> {
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let mut g = Graph::new();
    let x = g.param(images.clone());
    let fwd = net.forward_frozen(&mut g, x, gates)?;
    let loss = softmax_xent_var(&mut g, fwd.logits, labels)?;
    g.backward(loss)?;
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(images.shape()));
    images.zip_map(&grad, |v, d| perturb(v, eps, sign(d)))
}

/// `clamp(v + eps·s, 0, 1)`, pulled back by an ulp where f32 rounding would
/// leave `|result - v|` above `eps`.
fn perturb(v: f32, eps: f32, s: f32) -> f32 {
    let mut a = (v + eps * s).clamp(0.0, 1.0);
    while (a - v).abs() > eps {
        a = if a > v { a.next_down() } else { a.next_up() };
    }
    a
}

/// Adversarial copy of a whole dataset, attacked batch by batch.
pub fn fgsm_dataset(
    net: &Network,
    ds: &ImageDataset,
    eps: f32,
    batch_size: usize,
    gates: Option<&[Option<LayerGate>]>,
) -> Result<ImageDataset> {
    let mut out = Vec::with_capacity(ds.images.len());
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let (images, labels) = ds.batch(chunk);
        out.extend_from_slice(fgsm(net, &images, &labels, eps, gates)?.data());
    }
    ds.with_images(format!("{}/fgsm{eps}", ds.name), Tensor::new(ds.images.shape(), out)?)
}
