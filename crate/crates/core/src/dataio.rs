//! Byte-level readers and writers.
//!
//! * CIFAR-10 binary: records of `label u8` + 3072 pixel bytes.
//! * CIFAR-100 binary: records of `coarse u8` + `fine u8` + 3072 pixel bytes.
//! * Raw image container (`RIC1`), produced by the image-folder converter:
//!   `class_count u32`, then per class `class_id u32`, `image_count u32` and the
//!   images.
//! * Noisy dataset container (`NCIF`): `version u32 = 1`, `n_classes u32`,
//!   `record_count u32`, then records of `noisy_label u16` + 3072 pixel bytes.
//! * JSONL manifest carrying the ground-truth provenance of every record.
//!
//! Pixels are 32x32 RGB, planar (all red, then green, then blue), row-major.
//! All multi-byte integers are little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noisegen::{NoiseTag, NoisyDataset, SourceDataset};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;

pub const RIC_MAGIC: &[u8; 4] = b"RIC1";
pub const NCIF_MAGIC: &[u8; 4] = b"NCIF";
pub const NCIF_VERSION: u32 = 1;
const NCIF_HEADER: usize = 16;
const NCIF_RECORD: usize = 2 + IMAGE_BYTES;

/// One 32x32 planar RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RawImage(Box<[u8]>);

impl std::fmt::Debug for RawImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RawImage({} bytes)", self.0.len())
    }
}

impl RawImage {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != IMAGE_BYTES {
            return Err(Error::invalid(format!(
                "image has {} bytes, expected {IMAGE_BYTES}",
                pixels.len()
            )));
        }
        Ok(RawImage(pixels.into_boxed_slice()))
    }

    fn from_slice(pixels: &[u8]) -> Self {
        debug_assert_eq!(pixels.len(), IMAGE_BYTES);
        RawImage(pixels.into())
    }

    /// Uniformly colored image.
    pub fn solid(r: u8, g: u8, b: u8) -> Self {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut px = vec![r; IMAGE_BYTES];
        px[plane..2 * plane].fill(g);
        px[2 * plane..].fill(b);
        RawImage(px.into_boxed_slice())
    }

    pub fn pixels(&self) -> &[u8] {
        &self.0
    }
}

/// Images grouped by class index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImagePools {
    pub classes: Vec<Vec<RawImage>>,
}

impl ImagePools {
    pub fn with_classes(n: usize) -> Self {
        ImagePools {
            classes: vec![Vec::new(); n],
        }
    }

    pub fn capacities(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn get(&self, class: usize, index: usize) -> Option<&RawImage> {
        self.classes.get(class)?.get(index)
    }

    /// Keeps at most `k` images per class, in file order.
    pub fn truncate_classes(&mut self, k: usize) {
        for c in &mut self.classes {
            c.truncate(k);
        }
    }
}

fn read_labeled_records(bytes: &[u8], label_bytes: usize, classes: usize, what: &str) -> Result<ImagePools> {
    let record = label_bytes + IMAGE_BYTES;
    if !bytes.len().is_multiple_of(record) {
        let offset = bytes.len() - bytes.len() % record;
        return Err(Error::format(
            offset,
            format!("truncated {what} record ({} trailing bytes)", bytes.len() % record),
        ));
    }
    let mut pools = ImagePools::with_classes(classes);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let offset = i * record;
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::format(
                offset + label_bytes - 1,
                format!("{what} label {label} out of range (< {classes})"),
            ));
        }
        pools.classes[label].push(RawImage::from_slice(&rec[label_bytes..]));
    }
    Ok(pools)
}

/// Reads a CIFAR-10 binary batch, grouping images by label in file order.
pub fn read_cifar10(bytes: &[u8]) -> Result<ImagePools> {
    read_labeled_records(bytes, 1, 10, "CIFAR-10")
}

/// Reads a CIFAR-100 binary file grouped by fine label. The coarse byte is
/// ignored.
pub fn read_cifar100(bytes: &[u8]) -> Result<ImagePools> {
    if bytes.is_empty() {
        log::warn!("empty CIFAR-100 file");
    }
    read_labeled_records(bytes, 2, 100, "CIFAR-100")
}

/// Concatenates pools class by class; used when a dataset spans several
/// batch files.
pub fn merge_pools(parts: Vec<ImagePools>) -> ImagePools {
    let classes = parts.iter().map(|p| p.classes.len()).max().unwrap_or(0);
    let mut out = ImagePools::with_classes(classes);
    for part in parts {
        for (c, imgs) in part.classes.into_iter().enumerate() {
            out.classes[c].extend(imgs);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RicClass {
    pub class_id: u32,
    pub images: Vec<RawImage>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Parses a raw image container.
pub fn read_ric(bytes: &[u8]) -> Result<Vec<RicClass>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != RIC_MAGIC {
        return Err(Error::format(0, "bad magic, expected RIC1"));
    }
    let class_count = cur.u32("class count")?;
    let mut out = Vec::with_capacity(class_count as usize);
    for _ in 0..class_count {
        let class_id = cur.u32("class id")?;
        let count_at = cur.pos;
        let count = cur.u32("image count")? as usize;
        let payload = count
            .checked_mul(IMAGE_BYTES)
            .ok_or_else(|| Error::format(count_at, "image count overflow"))?;
        if bytes.len() - cur.pos < payload {
            return Err(Error::format(
                count_at,
                format!(
                    "class {class_id} declares {count} images but only {} bytes remain",
                    bytes.len() - cur.pos
                ),
            ));
        }
        let images = cur
            .take(payload, "images")?
            .chunks_exact(IMAGE_BYTES)
            .map(RawImage::from_slice)
            .collect();
        out.push(RicClass { class_id, images });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos,
            format!("{} trailing bytes after declared classes", bytes.len() - cur.pos),
        ));
    }
    Ok(out)
}

pub fn write_ric(classes: &[RicClass]) -> Vec<u8> {
    let total: usize = classes.iter().map(|c| c.images.len()).sum();
    let mut out = Vec::with_capacity(8 + classes.len() * 8 + total * IMAGE_BYTES);
    out.extend_from_slice(RIC_MAGIC);
    out.extend_from_slice(&(classes.len() as u32).to_le_bytes());
    for c in classes {
        out.extend_from_slice(&c.class_id.to_le_bytes());
        out.extend_from_slice(&(c.images.len() as u32).to_le_bytes());
        for img in &c.images {
            out.extend_from_slice(img.pixels());
        }
    }
    out
}

/// Pools indexed by position in the container; class ids are informational.
pub fn ric_to_pools(classes: Vec<RicClass>) -> ImagePools {
    ImagePools {
        classes: classes.into_iter().map(|c| c.images).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NcifarRecord {
    pub noisy_label: u16,
    pub image: RawImage,
}

/// Training container: noisy labels and pixels only, no ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NcifarContainer {
    pub n_classes: u32,
    pub records: Vec<NcifarRecord>,
}

impl NcifarContainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(NCIF_HEADER + self.records.len() * NCIF_RECORD);
        out.extend_from_slice(NCIF_MAGIC);
        out.extend_from_slice(&NCIF_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n_classes.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (i, r) in self.records.iter().enumerate() {
            if u32::from(r.noisy_label) >= self.n_classes {
                return Err(Error::invalid(format!(
                    "record {i}: label {} >= n_classes {}",
                    r.noisy_label, self.n_classes
                )));
            }
            out.extend_from_slice(&r.noisy_label.to_le_bytes());
            out.extend_from_slice(r.image.pixels());
        }
        Ok(out)
    }
}

pub fn read_ncifar(bytes: &[u8]) -> Result<NcifarContainer> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != NCIF_MAGIC {
        return Err(Error::format(0, "bad magic, expected NCIF"));
    }
    let version = cur.u32("version")?;
    if version != NCIF_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_classes = cur.u32("class count")?;
    let record_count = cur.u32("record count")? as usize;
    let expected = NCIF_HEADER + record_count * NCIF_RECORD;
    if bytes.len() != expected {
        return Err(Error::format(
            12,
            format!(
                "record count {record_count} implies {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        let at = cur.pos;
        let noisy_label = cur.u16("label")?;
        if u32::from(noisy_label) >= n_classes {
            return Err(Error::format(
                at,
                format!("label {noisy_label} >= n_classes {n_classes}"),
            ));
        }
        let image = RawImage::from_slice(cur.take(IMAGE_BYTES, "pixels")?);
        records.push(NcifarRecord { noisy_label, image });
    }
    Ok(NcifarContainer { n_classes, records })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub index: usize,
    pub noisy_label: usize,
    pub provenance_tag: NoiseTag,
    pub true_class: usize,
    pub source_dataset: SourceDataset,
    pub source_class: usize,
    pub source_index: usize,
    pub seed: u64,
    pub tau_closed: f64,
}

/// Serializes a generated dataset into the training container plus one JSON
/// manifest line per record, both in dataset order.
pub fn write_ncifar(
    dataset: &NoisyDataset,
    base: &ImagePools,
    open: Option<&ImagePools>,
) -> Result<(Vec<u8>, Vec<String>)> {
    let n_classes = dataset.spec.n;
    if n_classes > u16::MAX as usize + 1 {
        return Err(Error::invalid(format!("{n_classes} classes do not fit a u16 label")));
    }
    let mut records = Vec::with_capacity(dataset.examples.len());
    let mut manifest = Vec::with_capacity(dataset.examples.len());
    for (index, e) in dataset.examples.iter().enumerate() {
        let pools = match e.image.dataset {
            SourceDataset::Base => Some(base),
            SourceDataset::Open => open,
        };
        let image = pools
            .and_then(|p| p.get(e.image.class, e.image.index))
            .ok_or_else(|| Error::invalid(format!("example {index}: missing source image {:?}", e.image)))?;
        if e.noisy_label >= n_classes {
            return Err(Error::invalid(format!("example {index}: label out of range")));
        }
        records.push(NcifarRecord {
            noisy_label: e.noisy_label as u16,
            image: image.clone(),
        });
        let line = ManifestRecord {
            index,
            noisy_label: e.noisy_label,
            provenance_tag: e.provenance.tag,
            true_class: e.provenance.true_class,
            source_dataset: e.image.dataset,
            source_class: e.image.class,
            source_index: e.image.index,
            seed: dataset.spec.seed,
            tau_closed: dataset.tau_closed,
        };
        manifest.push(serde_json::to_string(&line)?);
    }
    let container = NcifarContainer {
        n_classes: n_classes as u32,
        records,
    };
    Ok((container.to_bytes()?, manifest))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.index != out.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected index {}, found {}", out.len(), rec.index),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{MatrixKind, SimilarityMatrix};
    use crate::noisegen::{generate, NoisySpec};

    fn image(seed: u8) -> RawImage {
        RawImage::new(
            (0..IMAGE_BYTES)
                .map(|i| (i as u8).wrapping_mul(seed).wrapping_add(seed))
                .collect(),
        )
        .unwrap()
    }

    fn cifar10_record(label: u8, img: &RawImage) -> Vec<u8> {
        let mut v = vec![label];
        v.extend_from_slice(img.pixels());
        v
    }

    #[test]
    fn cifar10_groups_in_file_order() {
        let (a, b) = (image(1), image(2));
        let mut bytes = cifar10_record(3, &a);
        bytes.extend(cifar10_record(3, &b));
        let pools = read_cifar10(&bytes).unwrap();
        assert_eq!(pools.classes.len(), 10);
        assert_eq!(pools.classes[3], vec![a, b]);
        assert_eq!(pools.total(), 2);
    }

    #[test]
    fn cifar10_errors() {
        assert!(matches!(
            read_cifar10(&[0u8; 3072]),
            Err(Error::Format { offset: 0, .. })
        ));
        let bytes = cifar10_record(11, &image(1));
        assert!(matches!(read_cifar10(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = cifar10_record(1, &image(1));
        bytes.extend(cifar10_record(10, &image(1)));
        assert!(matches!(read_cifar10(&bytes), Err(Error::Format { offset: 3073, .. })));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let img = image(5);
        let mut bytes = vec![5u8, 42];
        bytes.extend_from_slice(img.pixels());
        let pools = read_cifar100(&bytes).unwrap();
        assert_eq!(pools.classes[42], vec![img]);
        assert_eq!(pools.total(), 1);

        bytes[1] = 200;
        assert!(matches!(read_cifar100(&bytes), Err(Error::Format { offset: 1, .. })));

        let empty = read_cifar100(&[]).unwrap();
        assert_eq!(empty.classes.len(), 100);
        assert_eq!(empty.total(), 0);
    }

    #[test]
    fn ric_round_trip_and_errors() {
        let classes = vec![
            RicClass {
                class_id: 0,
                images: vec![image(1), image(2)],
            },
            RicClass {
                class_id: 7,
                images: vec![image(3)],
            },
        ];
        let bytes = write_ric(&classes);
        assert_eq!(read_ric(&bytes).unwrap(), classes);

        // Declared count larger than the payload.
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 10);
        assert!(matches!(read_ric(&bad), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_ric(&extra), Err(Error::Format { .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(read_ric(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn ncifar_count_mismatch() {
        let c = NcifarContainer {
            n_classes: 3,
            records: vec![NcifarRecord {
                noisy_label: 2,
                image: image(9),
            }],
        };
        let mut bytes = c.to_bytes().unwrap();
        assert_eq!(read_ncifar(&bytes).unwrap(), c);
        bytes[12] = 2;
        assert!(matches!(read_ncifar(&bytes), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn ncifar_label_range() {
        let c = NcifarContainer {
            n_classes: 3,
            records: vec![NcifarRecord {
                noisy_label: 3,
                image: image(9),
            }],
        };
        assert!(c.to_bytes().is_err());
    }

    fn micro_dataset() -> (NoisyDataset, ImagePools, ImagePools) {
        let base_vecs: Vec<Vec<f64>> = vec![vec![1.0, 0.1], vec![0.7, 0.7], vec![0.1, 1.0], vec![-0.6, 0.8]];
        let open_vecs: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]];
        let closed = SimilarityMatrix::from_vectors(&base_vecs, &base_vecs, MatrixKind::Closed).unwrap();
        let open = SimilarityMatrix::from_vectors(&open_vecs, &base_vecs, MatrixKind::Open).unwrap();
        let spec = NoisySpec {
            x: 0.3,
            y: 0.3,
            n: 4,
            m: 3,
            k: 10,
            tau_open: 0.1,
            seed: 17,
        };
        let base = ImagePools {
            classes: (0..4)
                .map(|c| (0..10).map(|i| image((c * 10 + i) as u8)).collect())
                .collect(),
        };
        let open_pools = ImagePools {
            classes: (0..3)
                .map(|c| (0..10).map(|i| image((100 + c * 10 + i) as u8)).collect())
                .collect(),
        };
        let d = generate(
            &spec,
            &closed,
            Some(&open),
            &base.capacities(),
            &open_pools.capacities(),
        )
        .unwrap();
        (d, base, open_pools)
    }

    #[test]
    fn write_ncifar_round_trips() {
        let (d, base, open) = micro_dataset();
        let (bytes, manifest) = write_ncifar(&d, &base, Some(&open)).unwrap();
        assert_eq!(manifest.len(), 40);
        let c = read_ncifar(&bytes).unwrap();
        assert_eq!(c.records.len(), 40);
        let parsed = parse_manifest(&manifest.join("\n")).unwrap();
        for ((rec, ex), line) in c.records.iter().zip(&d.examples).zip(&parsed) {
            assert_eq!(rec.noisy_label as usize, ex.noisy_label);
            let pool = if ex.image.dataset == SourceDataset::Base {
                &base
            } else {
                &open
            };
            assert_eq!(&rec.image, pool.get(ex.image.class, ex.image.index).unwrap());
            assert_eq!(line.provenance_tag, ex.provenance.tag);
            assert_eq!(line.true_class, ex.provenance.true_class);
            assert_eq!(line.seed, 17);
        }
        // Ground truth never enters the container: a relabeled manifest does
        // not change the container bytes.
        let again = write_ncifar(&d, &base, Some(&open)).unwrap().0;
        assert_eq!(bytes, again);
    }

    #[test]
    fn manifest_line_shape() {
        let (d, base, open) = micro_dataset();
        let (_, manifest) = write_ncifar(&d, &base, Some(&open)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&manifest[0]).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "index",
            "noisy_label",
            "provenance_tag",
            "true_class",
            "source_dataset",
            "source_class",
            "source_index",
            "seed",
            "tau_closed",
        ] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert!(manifest[0].contains("\"provenance_tag\":\"open_noise\""));
        assert!(parse_manifest("{\"index\":0}").is_err());
    }
}
