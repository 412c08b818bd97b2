//! Dataset ingestion (IDX format + synthetic shape generator), disjoint
//! labelled/unlabelled splits, augmentation, rotation-pretext transforms and
//! batching.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ndcore::Tensor;
use crate::{Error, Result};

/// Images with ground-truth labels. For the unlabelled split the labels are
/// retained as evaluation ground truth only; training code goes through
/// [`ImageSet`], which carries no labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor, // [N, C, H, W]
    labels: Vec<usize>,
    /// Set on the unlabelled split: labels are evaluation-only ground truth.
    hidden_labels: bool,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            hidden_labels: false,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (channels, height, width) of one sample.
    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.sample_dims();
        let n = c * h * w;
        Tensor::from_vec(&[c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }

    /// Training labels. Panics on the unlabelled split, whose labels are
    /// evaluation ground truth and must be read via `ground_truth`.
    pub fn labels(&self) -> &[usize] {
        assert!(
            !self.hidden_labels,
            "labels of the unlabelled split are firewalled from training"
        );
        &self.labels
    }

    /// Evaluation-only access to ground truth (works for either split).
    pub fn ground_truth(&self) -> &[usize] {
        &self.labels
    }

    /// Label-free view for training code.
    pub fn image_set(&self) -> ImageSet {
        ImageSet {
            images: self.images.clone(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// A bag of images with no label accessor: the firewalled view handed to
/// training code for unlabelled (and pretext) data.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Tensor, // [N, C, H, W]
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.sample_dims();
        let n = c * h * w;
        Tensor::from_vec(&[c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }

    /// Concatenate several sets (used to pool labelled + unlabelled images
    /// for the pretext stage).
    pub fn union(sets: &[&ImageSet]) -> Result<ImageSet> {
        let dims = sets
            .first()
            .ok_or_else(|| Error::Argument("union of zero image sets".into()))?
            .sample_dims();
        let mut data = Vec::new();
        let mut n = 0;
        for s in sets {
            if s.sample_dims() != dims {
                return Err(Error::Dimension(format!(
                    "union: sample dims {:?} vs {:?}",
                    s.sample_dims(),
                    dims
                )));
            }
            data.extend_from_slice(s.images.data());
            n += s.len();
        }
        Ok(ImageSet {
            images: Tensor::from_vec(&[n, dims.0, dims.1, dims.2], data).unwrap(),
        })
    }
}

/// Disjoint class partition: which original classes are labelled vs unlabelled.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub labelled_classes: Vec<usize>,
    pub unlabelled_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labelled_classes.is_empty() || self.unlabelled_classes.is_empty() {
            return Err(Error::Argument(
                "split: both class lists must be nonempty".into(),
            ));
        }
        for c in &self.labelled_classes {
            if self.unlabelled_classes.contains(c) {
                return Err(Error::Argument(format!(
                    "split: class {c} appears in both labelled and unlabelled lists"
                )));
            }
        }
        Ok(())
    }

    pub fn n_labelled(&self) -> usize {
        self.labelled_classes.len()
    }

    pub fn n_unlabelled(&self) -> usize {
        self.unlabelled_classes.len()
    }
}

/// Augmentation parameters. Pretext rotations are separate and always the
/// four exact right angles.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentSpec {
    pub flip_p: f64,
    pub crop_pad: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_p: 0.5,
            crop_pad: 2,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        AugmentSpec {
            flip_p: 0.0,
            crop_pad: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_p == 0.0 && self.crop_pad == 0
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn u8(&mut self) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or(Error::Parse {
            offset: self.pos,
            msg: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..4 {
            v = (v << 8) | self.u8()? as u32;
        }
        Ok(v)
    }
}

/// Read an IDX image file + IDX label file into a dataset, pixels scaled to
/// [0, 1]. Grayscale (3-dimensional image header) only.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let mut r = IdxReader {
        bytes: &img_bytes,
        pos: 0,
    };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    let expected = n * h * w;
    let payload = &img_bytes[r.pos..];
    if payload.len() != expected {
        return Err(Error::Parse {
            offset: r.pos,
            msg: format!(
                "image payload is {} bytes, header declares {} ({n}x{h}x{w})",
                payload.len(),
                expected
            ),
        });
    }
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::from_vec(&[n, 1, h, w], data).unwrap();

    let lbl_bytes = fs::read(labels_path)?;
    let mut r = IdxReader {
        bytes: &lbl_bytes,
        pos: 0,
    };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = r.u32_be()? as usize;
    let lbl_payload = &lbl_bytes[r.pos..];
    if lbl_payload.len() != ln {
        return Err(Error::Parse {
            offset: r.pos,
            msg: format!(
                "label payload is {} bytes, header declares {ln}",
                lbl_payload.len()
            ),
        });
    }
    if ln != n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{n} images but {ln} labels"),
        });
    }
    let labels = lbl_payload.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels)
}

/// Write a dataset back out as an IDX image/label pair (round-trip helper;
/// pixels quantized to u8).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = ds.sample_dims();
    if c != 1 {
        return Err(Error::Argument("write_idx supports grayscale only".into()));
    }
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for &y in ds.ground_truth() {
        lbl.push(y as u8);
    }
    fs::write(labels_path, lbl)?;
    Ok(())
}

pub const SYNTH_SIDE: usize = 16;
pub const SYNTH_MAX_CLASSES: usize = 8;

/// Render a deterministic 16x16 grayscale shape dataset: one parameterized
/// shape family per class, with per-sample position/intensity jitter and
/// additive pixel noise.
pub fn synth_shapes(n_per_class: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Argument(
            "synth_shapes: n_per_class must be >= 1".into(),
        ));
    }
    if n_classes == 0 || n_classes > SYNTH_MAX_CLASSES {
        return Err(Error::Argument(format!(
            "synth_shapes: n_classes must be in 1..={SYNTH_MAX_CLASSES}"
        )));
    }
    let mut rng = crate::rng::component_rng(seed, "synth_shapes");
    let side = SYNTH_SIDE;
    let n = n_per_class * n_classes;
    let mut data = vec![0.0f64; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for sample in 0..n_per_class {
            let i = class * n_per_class + sample;
            let img = &mut data[i * side * side..(i + 1) * side * side];
            render_shape(img, side, class, &mut rng);
            labels.push(class);
        }
    }
    let images = Tensor::from_vec(&[n, 1, side, side], data).unwrap();
    Dataset::new(images, labels)
}

fn render_shape(img: &mut [f64], side: usize, class: usize, rng: &mut ChaCha8Rng) {
    let s = side as i64;
    let dx = rng.gen_range(-1..=1i64);
    let dy = rng.gen_range(-1..=1i64);
    let intensity = rng.gen_range(0.85..1.0);
    let cx = s / 2 + dx;
    let cy = s / 2 + dy;
    let mut put = |r: i64, c: i64, v: f64| {
        if r >= 0 && r < s && c >= 0 && c < s {
            let cell = &mut img[(r * s + c) as usize];
            *cell = (*cell + v).min(1.0);
        }
    };
    // every family carries a deliberate asymmetry (knob, notch, or one-sided
    // arm) so no shape is invariant under quarter turns or flips: the rotation
    // pretext stays well-posed and flips/rotations never alias two classes
    match class {
        // horizontal bar, thick knob on the left end
        0 => {
            for c in (cx - 5)..=(cx + 5) {
                for r in (cy - 1)..=(cy + 1) {
                    put(r, c, intensity);
                }
            }
            for r in (cy - 3)..=(cy + 3) {
                for c in (cx - 5)..=(cx - 3) {
                    put(r, c, intensity);
                }
            }
        }
        // vertical bar, thick knob on the top end
        1 => {
            for r in (cy - 5)..=(cy + 5) {
                for c in (cx - 1)..=(cx + 1) {
                    put(r, c, intensity);
                }
            }
            for r in (cy - 5)..=(cy - 3) {
                for c in (cx - 3)..=(cx + 3) {
                    put(r, c, intensity);
                }
            }
        }
        // filled disc with a notch carved out of the top-right
        2 => {
            let rad = rng.gen_range(3.2..4.2);
            for r in 0..s {
                for c in 0..s {
                    let d2 = ((r - cy) * (r - cy) + (c - cx) * (c - cx)) as f64;
                    if d2 <= rad * rad && !(r < cy - 1 && c > cx + 1) {
                        put(r, c, intensity);
                    }
                }
            }
        }
        // vertical stroke with a single right-pointing arm
        3 => {
            for o in -5..=5i64 {
                put(cy + o, cx, intensity);
                put(cy + o, cx - 1, intensity);
            }
            for c in cx..=(cx + 5) {
                put(cy, c, intensity);
                put(cy + 1, c, intensity);
            }
        }
        // main diagonal stroke, blob at the bottom-right end
        4 => {
            for o in -5..=5i64 {
                put(cy + o, cx + o, intensity);
                put(cy + o, cx + o + 1, intensity);
            }
            for r in (cy + 4)..=(cy + 5) {
                for c in (cx + 4)..=(cx + 5) {
                    put(r, c, intensity);
                }
            }
        }
        // anti-diagonal stroke, blob at the bottom-left end
        5 => {
            for o in -5..=5i64 {
                put(cy + o, cx - o, intensity);
                put(cy + o, cx - o - 1, intensity);
            }
            for r in (cy + 4)..=(cy + 5) {
                for c in (cx - 5)..=(cx - 4) {
                    put(r, c, intensity);
                }
            }
        }
        // hollow square ring with a gap in the top edge
        6 => {
            for o in -4..=4i64 {
                if !(-1..=1).contains(&o) {
                    put(cy - 4, cx + o, intensity);
                }
                put(cy + 4, cx + o, intensity);
                put(cy + o, cx - 4, intensity);
                put(cy + o, cx + 4, intensity);
            }
        }
        // checkerboard patch with a solid block in the top-left corner
        7 => {
            for r in -4..4i64 {
                for c in -4..4i64 {
                    if ((r.div_euclid(2) + c.div_euclid(2)) % 2 + 2) % 2 == 0 {
                        put(cy + r, cx + c, intensity);
                    }
                }
            }
            for r in -6..=-4i64 {
                for c in -6..=-4i64 {
                    put(cy + r, cx + c, intensity);
                }
            }
        }
        _ => unreachable!("class bounded by SYNTH_MAX_CLASSES"),
    }
    // background pixel noise
    for cell in img.iter_mut() {
        *cell = (*cell + rng.gen_range(0.0..0.10)).min(1.0);
    }
}

/// Partition a dataset by class per the split spec. Labelled-class labels are
/// remapped to [0, C^l); unlabelled-class ground truth to [0, C^u) and
/// firewalled from training.
pub fn apply_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let universe = ds.n_classes();
    for &c in spec.labelled_classes.iter().chain(&spec.unlabelled_classes) {
        if c >= universe {
            return Err(Error::Argument(format!(
                "split: class {c} not present in dataset with {universe} classes"
            )));
        }
    }
    let pick = |classes: &[usize], hidden: bool| -> Dataset {
        let (ch, h, w) = ds.sample_dims();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..ds.len() {
            let y = ds.ground_truth()[i];
            if let Some(new) = classes.iter().position(|&c| c == y) {
                data.extend_from_slice(ds.image(i).data());
                labels.push(new);
            }
        }
        let n = labels.len();
        let mut out =
            Dataset::new(Tensor::from_vec(&[n, ch, h, w], data).unwrap(), labels).unwrap();
        out.hidden_labels = hidden;
        out
    };
    Ok((
        pick(&spec.labelled_classes, false),
        pick(&spec.unlabelled_classes, true),
    ))
}

/// Rotate a square image by 90-degree steps counterclockwise. Exact pixel
/// permutation, no interpolation.
pub fn rotate_right_angle(img: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Argument(format!(
            "rotate_right_angle requires a square [C,H,W] image, got {s:?}"
        )));
    }
    let (c, n) = (s[0], s[1]);
    let q = quarter_turns % 4;
    if q == 0 {
        return Ok(img.clone());
    }
    let mut out = Tensor::zeros(s);
    for ch in 0..c {
        for r in 0..n {
            for col in 0..n {
                // one CCW turn: new(r, c) = old(c, n-1-r)
                let (sr, sc) = match q {
                    1 => (col, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - col),
                    3 => (n - 1 - col, r),
                    _ => unreachable!(),
                };
                out.data_mut()[ch * n * n + r * n + col] = img.data()[ch * n * n + sr * n + sc];
            }
        }
    }
    Ok(out)
}

/// Random horizontal flip + crop-pad translation jitter. Shape preserving;
/// with everything disabled this is the identity (the MSE term is then
/// exactly zero).
pub fn augment(img: &Tensor, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = img.clone();
    if spec.flip_p > 0.0 && rng.gen_bool(spec.flip_p) {
        out = hflip(&out);
    }
    if spec.crop_pad > 0 {
        let p = spec.crop_pad as i64;
        let dr = rng.gen_range(-p..=p);
        let dc = rng.gen_range(-p..=p);
        out = shift(&out, dr, dc);
    }
    out
}

/// Mirror an image left-right.
pub fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out.data_mut()[ch * h * w + r * w + col] =
                    img.data()[ch * h * w + r * w + (w - 1 - col)];
            }
        }
    }
    out
}

fn shift(img: &Tensor, dr: i64, dc: i64) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    for ch in 0..c {
        for r in 0..h as i64 {
            for col in 0..w as i64 {
                let (sr, sc) = (r - dr, col - dc);
                if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                    out.data_mut()[ch * h * w + (r as usize) * w + col as usize] =
                        img.data()[ch * h * w + (sr as usize) * w + sc as usize];
                }
            }
        }
    }
    out
}

/// Seeded shuffle of 0..n chunked into batches; the final short batch is kept.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Gather images at `indices` into a flattened [B, C*H*W] batch tensor.
pub fn gather_flat(set: &ImageSet, indices: &[usize]) -> Tensor {
    let (c, h, w) = set.sample_dims();
    let n = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend_from_slice(&set.images.data()[i * n..(i + 1) * n]);
    }
    Tensor::from_vec(&[indices.len(), n], data).unwrap()
}

/// Flatten a list of [C,H,W] images into one [B, C*H*W] batch tensor.
pub fn stack_flat(images: &[Tensor]) -> Tensor {
    let n = images[0].len();
    let mut data = Vec::with_capacity(images.len() * n);
    for img in images {
        assert_eq!(img.len(), n, "stack_flat: inhomogeneous images");
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), n], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use tempfile::tempdir;

    #[test]
    fn idx_round_trip() {
        let ds = synth_shapes(3, 1, 9).unwrap();
        let dir = tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = read_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.ground_truth(), ds.ground_truth());
        assert!(back.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_wrong_magic() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("bad.idx");
        std::fs::write(&ip, [0, 0, 9, 9, 0, 0, 0, 0]).unwrap();
        let err = read_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let ds = synth_shapes(3, 1, 9).unwrap();
        let dir = tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        // truncate the image payload
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&ip, &bytes).unwrap();
        let err = read_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn synth_deterministic_and_counts() {
        let a = synth_shapes(10, 2, 123).unwrap();
        let b = synth_shapes(10, 2, 123).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.len(), 20);
        assert_eq!(a.ground_truth().iter().filter(|&&y| y == 0).count(), 10);
        assert_eq!(a.ground_truth().iter().filter(|&&y| y == 1).count(), 10);
    }

    #[test]
    fn synth_classes_separable_by_nearest_centroid() {
        let train = synth_shapes(40, 6, 1).unwrap();
        let test = synth_shapes(40, 6, 2).unwrap();
        let (c, h, w) = train.sample_dims();
        let dim = c * h * w;
        let mut centroids = vec![vec![0.0f64; dim]; 6];
        let mut counts = [0usize; 6];
        for i in 0..train.len() {
            let y = train.ground_truth()[i];
            for (acc, &v) in centroids[y].iter_mut().zip(train.image(i).data()) {
                *acc += v;
            }
            counts[y] += 1;
        }
        for (cent, n) in centroids.iter_mut().zip(counts) {
            for v in cent.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let img = test.image(i);
            let pred = (0..6)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(img.data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(img.data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if pred == test.ground_truth()[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn split_partitions_and_remaps() {
        let ds = synth_shapes(5, 6, 3).unwrap();
        let spec = SplitSpec {
            labelled_classes: vec![0, 1, 2],
            unlabelled_classes: vec![3, 4, 5],
        };
        let (dl, du) = apply_split(&ds, &spec).unwrap();
        assert_eq!(dl.len() + du.len(), ds.len());
        assert!(dl.labels().iter().all(|&y| y < 3));
        assert!(du.ground_truth().iter().all(|&y| y < 3));
        // remapping round-trips through the ordered lists
        assert_eq!(spec.unlabelled_classes[du.ground_truth()[0]], 3);
    }

    #[test]
    fn split_overlap_rejected() {
        let ds = synth_shapes(2, 4, 3).unwrap();
        let spec = SplitSpec {
            labelled_classes: vec![0, 1],
            unlabelled_classes: vec![1, 2],
        };
        assert!(apply_split(&ds, &spec).is_err());
    }

    #[test]
    fn unlabelled_labels_are_firewalled() {
        let ds = synth_shapes(2, 4, 3).unwrap();
        let spec = SplitSpec {
            labelled_classes: vec![0, 1],
            unlabelled_classes: vec![2, 3],
        };
        let (_, du) = apply_split(&ds, &spec).unwrap();
        let result = std::panic::catch_unwind(|| du.labels().len());
        assert!(result.is_err(), "training-side label access must panic");
    }

    #[test]
    fn rotation_group_of_order_four() {
        let mut rng = component_rng(5, "rot");
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(&[1, 8, 8], data).unwrap();
        // composition table: q1 then q2 == (q1+q2) mod 4
        for q1 in 0..4 {
            for q2 in 0..4 {
                let a = rotate_right_angle(&rotate_right_angle(&img, q1).unwrap(), q2).unwrap();
                let b = rotate_right_angle(&img, (q1 + q2) % 4).unwrap();
                assert_eq!(a, b, "q1={q1} q2={q2}");
            }
        }
    }

    #[test]
    fn rotation_matches_coordinate_oracle() {
        let mut rng = component_rng(6, "rot2");
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(&[1, 8, 8], data).unwrap();
        let rot = rotate_right_angle(&img, 1).unwrap();
        // CCW: source pixel (r, c) lands at (n-1-c, r)
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(rot.data()[(8 - 1 - c) * 8 + r], img.data()[r * 8 + c]);
            }
        }
    }

    #[test]
    fn rotation_rejects_non_square() {
        let img = Tensor::zeros(&[1, 4, 6]);
        assert!(rotate_right_angle(&img, 1).is_err());
    }

    #[test]
    fn augment_disabled_is_identity() {
        let mut rng = component_rng(7, "aug");
        let img = synth_shapes(1, 1, 4).unwrap().image(0);
        let out = augment(&img, &AugmentSpec::disabled(), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity_and_preserves_mass() {
        let img = synth_shapes(1, 3, 4).unwrap().image(0);
        let flipped = hflip(&img);
        assert_eq!(hflip(&flipped), img);
        let m1: f64 = img.data().iter().sum();
        let m2: f64 = flipped.data().iter().sum();
        assert!((m1 - m2).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = component_rng(8, "batch");
        let batches = make_batches(10, 3, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_deterministic_per_seed() {
        let a = make_batches(20, 7, &mut component_rng(9, "b"));
        let b = make_batches(20, 7, &mut component_rng(9, "b"));
        assert_eq!(a, b);
    }
}
