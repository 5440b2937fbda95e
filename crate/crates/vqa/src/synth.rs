//! Synthetic planted-attention dataset.
//!
//! Each image is a grid whose cells carry a class code plus a binary location
//! code; the question names a cell and the ten answers all name that cell's
//! class. Per-image class counts are fixed and all cell vectors have squared
//! norm exactly 29, so the spatial mean is bitwise identical across images:
//! a mean-pooled model gets zero image signal, while attention can recover
//! the answer exactly.
//!
//! Cell layout (depth-wise): [class_a, class_b, ±1 location bits..., 0...]
//! where (class_a, class_b) lies on the integer circle a² + b² = 25.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::dataset::{write_records, QuestionRecord, ANSWERS_PER_QUESTION};
use crate::error::{Error, Result};
use crate::features::{feature_path, save_feature_map, FeatureMap, FeatureSet};
use crate::rng::{self, tag};
use crate::tensor::{Real, Tensor};

/// Twelve exact-norm class codes: every (a, b) satisfies a² + b² = 25.
const CLASS_CIRCLE: [(f64, f64); 12] = [
    (5.0, 0.0),
    (4.0, 3.0),
    (3.0, 4.0),
    (0.0, 5.0),
    (-3.0, 4.0),
    (-4.0, 3.0),
    (-5.0, 0.0),
    (-4.0, -3.0),
    (-3.0, -4.0),
    (0.0, -5.0),
    (3.0, -4.0),
    (4.0, -3.0),
];

const CLASS_WORDS: [&str; 12] = [
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white", "brown", "pink",
    "gray", "gold",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub n: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub depth: usize,
    /// Question vocabulary budget including `<unk>`.
    pub vocab_q: usize,
    pub m: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn locations(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn location_bits(&self) -> usize {
        let l = self.locations();
        (usize::BITS - (l - 1).leading_zeros()) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::InvalidArgument(
                "synthetic sizes must be positive".into(),
            ));
        }
        let l = self.locations();
        if l < 2 {
            return Err(Error::InvalidArgument(
                "grid needs at least two cells".into(),
            ));
        }
        if !(2..=CLASS_CIRCLE.len()).contains(&self.m) {
            return Err(Error::InvalidArgument(format!(
                "class count must lie in 2..={}, got {}",
                CLASS_CIRCLE.len(),
                self.m
            )));
        }
        if self.m > l {
            return Err(Error::InvalidArgument(format!(
                "class count {} exceeds the {} grid cells",
                self.m, l
            )));
        }
        let need = 2 + self.location_bits();
        if self.depth < need {
            return Err(Error::InvalidArgument(format!(
                "depth {} too small: class + location codes need {need} channels",
                self.depth
            )));
        }
        // words: what/is/at + one per cell + <unk>.
        let base = 3 + l + 1;
        if self.vocab_q < base {
            return Err(Error::InvalidArgument(format!(
                "question vocabulary budget {} below the {base} words the task uses",
                self.vocab_q
            )));
        }
        Ok(())
    }
}

pub fn class_word(class: usize) -> &'static str {
    CLASS_WORDS[class]
}

/// Balanced per-image class counts: every image holds the same multiset.
fn base_cells(locations: usize, m: usize) -> Vec<usize> {
    let mut cells = Vec::with_capacity(locations);
    for k in 0..m {
        let count = locations / m + usize::from(k < locations % m);
        cells.extend(std::iter::repeat_n(k, count));
    }
    cells
}

fn cell_vector<T: Real>(class: usize, location: usize, bits: usize, depth: usize) -> Vec<T> {
    let mut v = vec![T::zero(); depth];
    let (a, b) = CLASS_CIRCLE[class];
    v[0] = T::from_f64(a);
    v[1] = T::from_f64(b);
    for bit in 0..bits {
        let sign = if location >> bit & 1 == 1 { 1.0 } else { -1.0 };
        v[2 + bit] = T::from_f64(sign);
    }
    v
}

/// Generate the records and raw feature maps in memory.
///
/// Record `i` (ids are 1-based) asks about cell `i mod L` of image `i`; when
/// two records share a cell word, the later image's class at that cell is
/// forced to differ from the earlier one's, so a model blind to the image
/// can answer at most half of each such pair correctly.
pub fn generate<T: Real>(spec: &SynthSpec) -> Result<(Vec<QuestionRecord>, FeatureSet<T>)> {
    spec.validate()?;
    let locations = spec.locations();
    let bits = spec.location_bits();
    let base = base_cells(locations, spec.m);
    let fillers = spec.vocab_q - (3 + locations + 1);

    let mut arrangements: Vec<Vec<usize>> = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut cells = base.clone();
        let mut rng = rng::seeded_rng(rng::derive_seed(spec.seed, &[tag::SYNTH, i as u64 + 1]));
        cells.shuffle(&mut rng);
        let asked = i % locations;
        if i >= locations && cells[asked] == arrangements[i - locations][asked] {
            let other = (0..locations)
                .find(|&j| cells[j] != cells[asked])
                .expect("balanced counts guarantee a second class");
            cells.swap(asked, other);
        }
        arrangements.push(cells);
    }

    let mut records = Vec::with_capacity(spec.n);
    let mut features: FeatureSet<T> = FeatureSet::default();
    for (i, cells) in arrangements.iter().enumerate() {
        let id = i as u64 + 1;
        let mut values = Vec::with_capacity(locations * spec.depth);
        for (location, &class) in cells.iter().enumerate() {
            values.extend(cell_vector::<T>(class, location, bits, spec.depth));
        }
        let tensor = Tensor::from_vec(vec![spec.grid_h, spec.grid_w, spec.depth], values)?;
        features.insert(id, FeatureMap::new(id, tensor)?);

        let asked = i % locations;
        let prefix = if fillers > 0 {
            format!("pad{} ", i % fillers)
        } else {
            String::new()
        };
        records.push(QuestionRecord {
            question_id: id,
            image_id: id,
            text: format!("{prefix}what is at cell{asked}"),
            answers: vec![class_word(cells[asked]).to_string(); ANSWERS_PER_QUESTION],
            answer_type: None,
        });
    }
    Ok((records, features))
}

/// Materialize a dataset directory: `train.jsonl`, `val.jsonl` (same planted
/// records — milestone accuracy on it measures training-set fit), and
/// `features/<id>.saaf`.
pub fn write_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<()> {
    let (records, features) = generate::<f32>(spec)?;
    std::fs::create_dir_all(out_dir)?;
    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir)?;
    write_records(&out_dir.join("train.jsonl"), &records)?;
    write_records(&out_dir.join("val.jsonl"), &records)?;
    let mut ids: Vec<u64> = features.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        save_feature_map(&features[&id], &feature_path(&feature_dir, id))?;
    }
    Ok(())
}

/// The planted task's exact answer: read the asked cell's class code straight
/// from the feature map. Used as the Bayes-optimal reference predictor.
pub fn oracle_answer<T: Real>(record: &QuestionRecord, fm: &FeatureMap<T>) -> Result<String> {
    let cell_word = record
        .text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("cell"))
        .ok_or_else(|| Error::InvalidRecord(format!("question {:?} names no cell", record.text)))?;
    let location: usize = cell_word
        .parse()
        .map_err(|_| Error::InvalidRecord(format!("bad cell word in {:?}", record.text)))?;
    if location >= fm.locations() {
        return Err(Error::InvalidRecord(format!(
            "cell {location} outside the grid"
        )));
    }
    let base = location * fm.depth();
    let a = fm.values().data()[base].to_f64s();
    let b = fm.values().data()[base + 1].to_f64s();
    let class = CLASS_CIRCLE
        .iter()
        .enumerate()
        .min_by(|(_, p), (_, q)| {
            let dp = (p.0 - a).powi(2) + (p.1 - b).powi(2);
            let dq = (q.0 - a).powi(2) + (q.1 - b).powi(2);
            dp.partial_cmp(&dq).unwrap()
        })
        .map(|(k, _)| k)
        .expect("non-empty circle");
    Ok(class_word(class).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_question_vocab;
    use crate::evaluator::evaluate_with;
    use crate::features::{load_feature_map, normalize_depth, spatial_mean};

    fn spec() -> SynthSpec {
        SynthSpec {
            n: 32,
            grid_h: 4,
            grid_w: 4,
            depth: 8,
            vocab_q: 20,
            m: 6,
            seed: 17,
        }
    }

    #[test]
    fn example_sizes_count_out() {
        let (records, features) = generate::<f64>(&spec()).unwrap();
        assert_eq!(records.len(), 32);
        assert_eq!(features.len(), 32);
        for r in &records {
            r.validate().unwrap();
            assert_eq!(r.answers.len(), 10);
            assert!(
                r.answers.windows(2).all(|w| w[0] == w[1]),
                "answers consistent"
            );
        }
        let vocab = build_question_vocab::<f64>(&records, 4, 0).unwrap();
        assert_eq!(vocab.len(), 20);
    }

    #[test]
    fn generation_is_deterministic() {
        let (ra, fa) = generate::<f64>(&spec()).unwrap();
        let (rb, fb) = generate::<f64>(&spec()).unwrap();
        assert_eq!(ra, rb);
        for (id, fm) in &fa {
            assert_eq!(fm.values().data(), fb[id].values().data());
        }
        let (rc, _) = generate::<f64>(&SynthSpec { seed: 18, ..spec() }).unwrap();
        assert_ne!(ra, rc);
    }

    #[test]
    fn written_dataset_is_byte_deterministic() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        write_dataset(&spec(), da.path()).unwrap();
        write_dataset(&spec(), db.path()).unwrap();
        for rel in [
            "train.jsonl",
            "val.jsonl",
            "features/1.saaf",
            "features/32.saaf",
        ] {
            assert_eq!(
                std::fs::read(da.path().join(rel)).unwrap(),
                std::fs::read(db.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let loaded = load_feature_map::<f64>(&da.path().join("features/7.saaf")).unwrap();
        assert_eq!(loaded.depth(), 8);
    }

    #[test]
    fn every_cell_has_squared_norm_29() {
        let (_, features) = generate::<f64>(&spec()).unwrap();
        for fm in features.values() {
            for l in 0..fm.locations() {
                let cell = &fm.values().data()[l * 8..(l + 1) * 8];
                let sq: f64 = cell.iter().map(|v| v * v).sum();
                assert_eq!(sq, 29.0);
            }
        }
    }

    #[test]
    fn spatial_mean_is_bitwise_constant_across_images() {
        let (_, features) = generate::<f64>(&spec()).unwrap();
        let reference = spatial_mean(&features[&1]);
        let reference_norm = spatial_mean(&normalize_depth(&features[&1]).unwrap());
        for id in 2..=32u64 {
            let fm = &features[&id];
            assert_eq!(
                spatial_mean(fm).data(),
                reference.data(),
                "raw mean, image {id}"
            );
            let norm = normalize_depth(fm).unwrap();
            assert_eq!(
                spatial_mean(&norm).data(),
                reference_norm.data(),
                "normalized mean, image {id}"
            );
        }
    }

    #[test]
    fn paired_records_force_differing_answers() {
        let (records, _) = generate::<f64>(&spec()).unwrap();
        for i in 16..32 {
            let word_i: Vec<&str> = records[i]
                .text
                .split_whitespace()
                .filter(|w| w.starts_with("cell"))
                .collect();
            let word_p: Vec<&str> = records[i - 16]
                .text
                .split_whitespace()
                .filter(|w| w.starts_with("cell"))
                .collect();
            assert_eq!(word_i, word_p, "records {i} and {} share a cell", i - 16);
            assert_ne!(
                records[i].answers[0],
                records[i - 16].answers[0],
                "records {i} and {} must disagree",
                i - 16
            );
        }
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let (records, features) = generate::<f64>(&spec()).unwrap();
        let report = evaluate_with(&records, |r| oracle_answer(r, &features[&r.image_id])).unwrap();
        assert_eq!(report.overall, 1.0);
        assert_eq!(report.examples, 32);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn class_counts_are_balanced_and_identical_per_image() {
        let (records, features) = generate::<f64>(&spec()).unwrap();
        let count_classes = |fm: &FeatureMap<f64>| {
            let mut counts = vec![0usize; 6];
            for l in 0..fm.locations() {
                let cell = &fm.values().data()[l * 8..(l + 1) * 8];
                let class = CLASS_CIRCLE
                    .iter()
                    .position(|&(a, b)| a == cell[0] && b == cell[1])
                    .unwrap();
                counts[class] += 1;
            }
            counts
        };
        let reference = count_classes(&features[&1]);
        assert_eq!(reference.iter().sum::<usize>(), 16);
        assert!(reference.iter().all(|&c| c == 2 || c == 3));
        for r in &records {
            assert_eq!(count_classes(&features[&r.image_id]), reference);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SynthSpec { depth: 5, ..spec() }.validate().is_err());
        assert!(SynthSpec { m: 1, ..spec() }.validate().is_err());
        assert!(SynthSpec { m: 13, ..spec() }.validate().is_err());
        assert!(SynthSpec {
            vocab_q: 19,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            grid_h: 1,
            grid_w: 1,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(SynthSpec { n: 0, ..spec() }.validate().is_err());
        spec().validate().unwrap();
    }

    #[test]
    fn filler_words_extend_the_vocabulary() {
        let s = SynthSpec {
            vocab_q: 23,
            ..spec()
        };
        let (records, _) = generate::<f64>(&s).unwrap();
        assert!(records.iter().all(|r| r.text.starts_with("pad")));
        let vocab = build_question_vocab::<f64>(&records, 4, 0).unwrap();
        assert_eq!(vocab.len(), 23);
    }
}
