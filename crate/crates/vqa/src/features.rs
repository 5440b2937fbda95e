//! Precomputed image feature maps: binary load/save, depth-wise l2
//! normalization, positional augmentation, and spatial pooling.
//!
//! Binary layout (`<image_id>.saaf`): magic `SAAF`, u16 LE version (=1),
//! u32 LE height/width/depth, then `H·W·depth` little-endian f32 values,
//! row-major with depth fastest.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::graph::l2_normalize_slices;
use crate::tensor::sum::canonical_sum;
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"SAAF";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_EXTENSION: &str = "saaf";

/// Epsilon guarding l2 normalization of all-zero locations.
pub const NORM_EPSILON: f64 = 1e-12;

/// Feature maps keyed by image id, as trainer and evaluator consume them.
pub type FeatureSet<T> = std::collections::HashMap<u64, FeatureMap<T>>;

/// A grid of feature vectors for one image: `height × width` locations, each
/// a `depth`-vector. Values are immutable after construction.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Real> {
    image_id: u64,
    values: Tensor<T>,
    normalized: bool,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(image_id: u64, values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::InvalidShape(format!(
                "feature map must be rank 3 (H, W, depth); got {:?}",
                values.shape()
            )));
        }
        Ok(Self {
            image_id,
            values,
            normalized: false,
        })
    }

    pub fn image_id(&self) -> u64 {
        self.image_id
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }

    /// Number of spatial locations L = H·W.
    pub fn locations(&self) -> usize {
        self.height() * self.width()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// The same data viewed as an `[L, depth]` matrix (location-major, which
    /// is exactly the stored layout).
    pub fn location_matrix(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.locations(), self.depth()],
            self.values.data().to_vec(),
        )
        .expect("reshape preserves numel")
    }
}

fn read_u16(data: &[u8], offset: usize) -> Result<u16> {
    let bytes: [u8; 2] = data
        .get(offset..offset + 2)
        .ok_or(Error::Format {
            offset: offset as u64,
            message: "file truncated".into(),
        })?
        .try_into()
        .expect("slice length 2");
    Ok(u16::from_le_bytes(bytes))
}

fn read_u32(data: &[u8], offset: usize) -> Result<u32> {
    let bytes: [u8; 4] = data
        .get(offset..offset + 4)
        .ok_or(Error::Format {
            offset: offset as u64,
            message: "file truncated".into(),
        })?
        .try_into()
        .expect("slice length 4");
    Ok(u32::from_le_bytes(bytes))
}

/// Parse `<image_id>.saaf` into a feature map; the id comes from the
/// filename. Rejects bad magic, truncation, trailing bytes, and non-finite
/// values, naming the byte offset.
pub fn load_feature_map<T: Real>(path: &Path) -> Result<FeatureMap<T>> {
    let image_id = image_id_from_path(path)?;
    let data = std::fs::read(path)?;
    if data.len() < 4 || &data[0..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic; expected SAAF".into(),
        });
    }
    let version = read_u16(&data, 4)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}; expected {FEATURE_VERSION}"),
        });
    }
    let h = read_u32(&data, 6)? as usize;
    let w = read_u32(&data, 10)? as usize;
    let depth = read_u32(&data, 14)? as usize;
    if h == 0 || w == 0 || depth == 0 {
        return Err(Error::Format {
            offset: 6,
            message: format!("dimensions must be positive; got {h}x{w}x{depth}"),
        });
    }
    let numel = h * w * depth;
    let data_start = 18usize;
    let expected = data_start + numel * 4;
    if data.len() < expected {
        return Err(Error::Format {
            offset: data.len() as u64,
            message: format!("file truncated: {} bytes, expected {expected}", data.len()),
        });
    }
    if data.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!(
                "{} trailing bytes after feature data",
                data.len() - expected
            ),
        });
    }
    let mut values = Vec::with_capacity(numel);
    for i in 0..numel {
        let offset = data_start + i * 4;
        let bytes: [u8; 4] = data[offset..offset + 4].try_into().expect("bounds checked");
        let v = f32::from_le_bytes(bytes);
        if !v.is_finite() {
            return Err(Error::Format {
                offset: offset as u64,
                message: format!("non-finite value {v}"),
            });
        }
        values.push(T::from_f64(v as f64));
    }
    FeatureMap::new(image_id, Tensor::from_vec(vec![h, w, depth], values)?)
}

/// Write the map in the binary format (values stored as f32).
pub fn save_feature_map<T: Real>(fm: &FeatureMap<T>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(18 + fm.values.numel() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(fm.height() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.width() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.depth() as u32).to_le_bytes());
    for &v in fm.values.data() {
        out.extend_from_slice(&(v.to_f64s() as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Conventional on-disk location of an image's features.
pub fn feature_path(dir: &Path, image_id: u64) -> PathBuf {
    dir.join(format!("{image_id}.{FEATURE_EXTENSION}"))
}

fn image_id_from_path(path: &Path) -> Result<u64> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad feature path {}", path.display())))?;
    stem.parse().map_err(|_| {
        Error::InvalidArgument(format!(
            "feature filename {stem:?} is not an integer image id"
        ))
    })
}

/// l2-normalize each location's depth vector. Normalizing twice is an error.
pub fn normalize_depth<T: Real>(fm: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if fm.normalized {
        return Err(Error::InvalidState(
            "feature map is already depth-normalized".into(),
        ));
    }
    let shape = fm.values.shape().to_vec();
    let values = l2_normalize_slices(fm.values.data(), &shape, 2, NORM_EPSILON);
    Ok(FeatureMap {
        image_id: fm.image_id,
        values: Tensor::from_vec(shape, values)?,
        normalized: true,
    })
}

/// Append two channels per location: the x (column) and y (row) cell
/// coordinates scaled to [0,1]. Existing channels are copied bitwise.
pub fn augment_positions<T: Real>(fm: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w, depth) = (fm.height(), fm.width(), fm.depth());
    let src = fm.values.data();
    let mut values = Vec::with_capacity(h * w * (depth + 2));
    for r in 0..h {
        for c in 0..w {
            let base = (r * w + c) * depth;
            values.extend_from_slice(&src[base..base + depth]);
            let x = if w > 1 {
                c as f64 / (w - 1) as f64
            } else {
                0.0
            };
            let y = if h > 1 {
                r as f64 / (h - 1) as f64
            } else {
                0.0
            };
            values.push(T::from_f64(x));
            values.push(T::from_f64(y));
        }
    }
    FeatureMap {
        image_id: fm.image_id,
        values: Tensor::from_vec(vec![h, w, depth + 2], values).expect("numel consistent"),
        normalized: fm.normalized,
    }
}

/// Mean feature vector over all locations, summed in canonical order so any
/// spatial permutation of the map produces bit-identical output.
pub fn spatial_mean<T: Real>(fm: &FeatureMap<T>) -> Tensor<T> {
    let (l, depth) = (fm.locations(), fm.depth());
    let src = fm.values.data();
    let inv = T::from_f64(1.0 / l as f64);
    let mut out = Vec::with_capacity(depth);
    let mut terms = Vec::with_capacity(l);
    for ch in 0..depth {
        terms.clear();
        for loc in 0..l {
            terms.push(src[loc * depth + ch]);
        }
        out.push(canonical_sum(&mut terms) * inv);
    }
    Tensor::from_vec(vec![depth], out).expect("depth matches")
}

/// Depth shared by every map in the set. Errors when the set is empty or the
/// maps disagree, since one model cannot consume mixed depths.
pub fn feature_depth<T: Real>(set: &FeatureSet<T>) -> Result<usize> {
    let mut ids: Vec<u64> = set.keys().copied().collect();
    ids.sort_unstable();
    let first = *ids
        .first()
        .ok_or_else(|| Error::InvalidArgument("feature set is empty".into()))?;
    let depth = set[&first].depth();
    for id in &ids {
        if set[id].depth() != depth {
            return Err(Error::InvalidArgument(format!(
                "feature depth mismatch: image {first} has {depth}, image {id} has {}",
                set[id].depth()
            )));
        }
    }
    Ok(depth)
}

/// Deterministic pseudo-random features for tests and toy runs: values are
/// uniform in [-1, 1), fixed by (seed, image_id).
pub fn synthetic_feature_map<T: Real>(
    image_id: u64,
    height: usize,
    width: usize,
    depth: usize,
    seed: u64,
) -> Result<FeatureMap<T>> {
    use rand::Rng;
    if height == 0 || width == 0 || depth == 0 {
        return Err(Error::InvalidArgument(
            "feature dimensions must be positive".into(),
        ));
    }
    let mut rng = rng::seeded_rng(rng::derive_seed(seed, &[tag::SYNTH, image_id]));
    let values: Vec<T> = (0..height * width * depth)
        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    FeatureMap::new(
        image_id,
        Tensor::from_vec(vec![height, width, depth], values)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(h: usize, w: usize, depth: usize, data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(7, Tensor::from_vec(vec![h, w, depth], data).unwrap()).unwrap()
    }

    #[test]
    fn default_geometry_loads_expected_numel() {
        let dir = tempfile::tempdir().unwrap();
        let fm = synthetic_feature_map::<f32>(3, 14, 14, 2048, 1).unwrap();
        let path = feature_path(dir.path(), 3);
        save_feature_map(&fm, &path).unwrap();
        let back = load_feature_map::<f32>(&path).unwrap();
        assert_eq!(back.values().numel(), 401_408);
        assert_eq!(back.image_id(), 3);
    }

    #[test]
    fn round_trip_is_bitwise_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let fm = synthetic_feature_map::<f32>(9, 3, 5, 4, 2).unwrap();
        let path = feature_path(dir.path(), 9);
        save_feature_map(&fm, &path).unwrap();
        let back = load_feature_map::<f32>(&path).unwrap();
        assert_eq!(back.values().data(), fm.values().data());
        assert!(!back.normalized());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let fm = synthetic_feature_map::<f32>(4, 2, 2, 3, 0).unwrap();
        let path = feature_path(dir.path(), 4);
        save_feature_map(&fm, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_feature_map::<f32>(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("5.saaf");
        std::fs::write(&path, b"NOPE").unwrap();
        match load_feature_map::<f32>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn nan_values_are_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let fm = map_from(1, 1, 2, vec![1.0, 2.0]);
        let path = dir.path().join("7.saaf");
        save_feature_map(&fm, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[18..22].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_feature_map::<f32>(&path) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 18);
                assert!(message.contains("non-finite"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let fm = map_from(1, 1, 2, vec![1.0, 2.0]);
        let path = dir.path().join("7.saaf");
        save_feature_map(&fm, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_feature_map::<f32>(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn filename_must_carry_integer_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.saaf");
        std::fs::write(&path, b"SAAF").unwrap();
        assert!(matches!(
            load_feature_map::<f32>(&path),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn normalize_three_four_location() {
        let fm = map_from(1, 2, 2, vec![3.0, 4.0, 0.0, 0.0]);
        let n = normalize_depth(&fm).unwrap();
        assert_eq!(&n.values().data()[0..2], &[0.6, 0.8]);
        assert_eq!(&n.values().data()[2..4], &[0.0, 0.0]);
        assert!(n.normalized());
    }

    #[test]
    fn normalize_norm_scan_oracle() {
        let fm = synthetic_feature_map::<f64>(11, 4, 5, 8, 3).unwrap();
        let n = normalize_depth(&fm).unwrap();
        for loc in 0..n.locations() {
            let v = &n.values().data()[loc * 8..(loc + 1) * 8];
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "location {loc} norm {norm}");
        }
    }

    #[test]
    fn double_normalization_is_an_invalid_state() {
        let fm = map_from(1, 1, 2, vec![3.0, 4.0]);
        let n = normalize_depth(&fm).unwrap();
        assert!(matches!(normalize_depth(&n), Err(Error::InvalidState(_))));
    }

    #[test]
    fn normalization_is_idempotent_in_effect() {
        let fm = synthetic_feature_map::<f64>(2, 3, 3, 4, 9).unwrap();
        let once = normalize_depth(&fm).unwrap();
        let again = normalize_depth(&FeatureMap::new(2, once.values().clone()).unwrap()).unwrap();
        for (a, b) in once.values().data().iter().zip(again.values().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_appends_normalized_coordinates() {
        let fm = synthetic_feature_map::<f64>(1, 14, 14, 2048, 0).unwrap();
        let aug = augment_positions(&fm);
        assert_eq!(aug.depth(), 2050);
        // corner (row 0, col 0) -> (x=0, y=0); corner (13, 13) -> (1, 1)
        let d = aug.depth();
        assert_eq!(&aug.values().data()[d - 2..d], &[0.0, 0.0]);
        let last = (13 * 14 + 13) * d;
        assert_eq!(&aug.values().data()[last + d - 2..last + d], &[1.0, 1.0]);
    }

    #[test]
    fn augment_preserves_original_channels_bitwise() {
        let fm = synthetic_feature_map::<f64>(5, 3, 4, 6, 1).unwrap();
        let aug = augment_positions(&fm);
        for loc in 0..fm.locations() {
            assert_eq!(
                &aug.values().data()[loc * 8..loc * 8 + 6],
                &fm.values().data()[loc * 6..(loc + 1) * 6]
            );
        }
    }

    #[test]
    fn augment_single_row_or_column_pins_coordinate_to_zero() {
        let fm = map_from(1, 1, 2, vec![5.0, 6.0]);
        let aug = augment_positions(&fm);
        assert_eq!(aug.values().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn spatial_mean_constant_and_two_location_cases() {
        let constant = map_from(2, 2, 1, vec![3.5; 4]);
        assert_eq!(spatial_mean(&constant).data(), &[3.5]);
        let two = map_from(1, 2, 1, vec![1.0, 3.0]);
        assert_eq!(spatial_mean(&two).data(), &[2.0]);
    }

    #[test]
    fn spatial_mean_matches_double_loop_oracle() {
        let fm = synthetic_feature_map::<f64>(6, 5, 3, 7, 4).unwrap();
        let got = spatial_mean(&fm);
        let (l, d) = (fm.locations(), fm.depth());
        for ch in 0..d {
            let mut acc = 0.0;
            for loc in 0..l {
                acc += fm.values().data()[loc * d + ch];
            }
            assert!((got.data()[ch] - acc / l as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_mean_is_bitwise_permutation_invariant() {
        use rand::seq::SliceRandom;
        let fm = synthetic_feature_map::<f32>(8, 4, 4, 5, 12).unwrap();
        let (l, d) = (fm.locations(), fm.depth());
        let mut order: Vec<usize> = (0..l).collect();
        let mut rng = crate::rng::seeded_rng(55);
        order.shuffle(&mut rng);
        let mut shuffled = Vec::with_capacity(l * d);
        for &loc in &order {
            shuffled.extend_from_slice(&fm.values().data()[loc * d..(loc + 1) * d]);
        }
        let permuted = map_from_f32(4, 4, 5, shuffled);
        assert_eq!(spatial_mean(&fm).data(), spatial_mean(&permuted).data());
    }

    fn map_from_f32(h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureMap<f32> {
        FeatureMap::new(1, Tensor::from_vec(vec![h, w, d], data).unwrap()).unwrap()
    }

    #[test]
    fn synthetic_generator_is_deterministic_per_image() {
        let a = synthetic_feature_map::<f32>(1, 2, 2, 3, 7).unwrap();
        let b = synthetic_feature_map::<f32>(1, 2, 2, 3, 7).unwrap();
        let c = synthetic_feature_map::<f32>(2, 2, 2, 3, 7).unwrap();
        assert_eq!(a.values().data(), b.values().data());
        assert_ne!(a.values().data(), c.values().data());
    }
}
