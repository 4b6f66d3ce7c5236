use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use super::{parse_idx, segment, write_idx, DatasetError, GrayImage, SegmentMap, SegmentParams};
use crate::seeding::substream;

/// Zeroes `min(s, S)` segments of `img`, drawn uniformly without replacement.
pub fn reduce<R: Rng + ?Sized>(img: &GrayImage, segmap: &SegmentMap, s: usize, rng: &mut R) -> GrayImage {
    let total = segmap.segment_count();
    let k = s.min(total);
    let mut out = img.clone();
    if k == 0 {
        return out;
    }
    let mut deleted = vec![false; total + 1];
    for i in index::sample(rng, total, k).iter() {
        deleted[i + 1] = true;
    }
    for (p, &id) in out.pixels_mut().iter_mut().zip(segmap.ids()) {
        if deleted[id as usize] {
            *p = 0;
        }
    }
    out
}

/// Where a deficient set came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub s: usize,
    pub segmentation: SegmentParams,
}

impl Provenance {
    pub fn to_sidecar(&self) -> String {
        format!(
            "source={}\nseed={}\nthreshold={}\nmin_size={}\ns={}\n",
            self.source, self.seed, self.segmentation.threshold, self.segmentation.min_size, self.s
        )
    }
}

/// A copy of the test set with `s` segments removed from every image.
#[derive(Debug, Clone)]
pub struct DeficientSet {
    pub s: usize,
    pub images: Vec<GrayImage>,
    pub provenance: Provenance,
}

/// Builds the deficient sets `s = 0..=s_max`.
///
/// Each image is segmented once. The deletion for image `i` in set `s` draws
/// from the `("deficiency", i, s)` substream of `seed`, so sets are
/// independent of each other and of evaluation order.
pub fn gen_deficient_suite(
    test: &[GrayImage],
    s_max: usize,
    params: SegmentParams,
    seed: u64,
) -> Vec<DeficientSet> {
    let maps: Vec<SegmentMap> = test.iter().map(|img| segment(img, params)).collect();
    (0..=s_max)
        .map(|s| {
            let images = test
                .iter()
                .zip(&maps)
                .enumerate()
                .map(|(i, (img, map))| {
                    let mut rng = substream(seed, "deficiency", &[i as u64, s as u64]);
                    reduce(img, map, s, &mut rng)
                })
                .collect();
            DeficientSet {
                s,
                images,
                provenance: Provenance {
                    source: "t10k".into(),
                    seed,
                    s,
                    segmentation: params,
                },
            }
        })
        .collect()
}

pub fn deficient_file_stem(s: usize, seed: u64) -> String {
    format!("t10k-s{s}-seed{seed}")
}

/// Writes `<stem>-images.idx`, `<stem>-labels.idx` and `<stem>.provenance`.
pub fn write_deficient_set(dir: &Path, set: &DeficientSet) -> Result<Vec<PathBuf>, DatasetError> {
    fs::create_dir_all(dir)?;
    let stem = deficient_file_stem(set.s, set.provenance.seed);
    let images = dir.join(format!("{stem}-images.idx"));
    let labels = dir.join(format!("{stem}-labels.idx"));
    let sidecar = dir.join(format!("{stem}.provenance"));
    write_idx(&set.images, File::create(&images)?, File::create(&labels)?)?;
    fs::write(&sidecar, set.provenance.to_sidecar())?;
    Ok(vec![images, labels, sidecar])
}

pub fn read_deficient_set(
    dir: &Path,
    s: usize,
    seed: u64,
    params: SegmentParams,
) -> Result<DeficientSet, DatasetError> {
    let stem = deficient_file_stem(s, seed);
    let images = parse_idx(
        std::io::BufReader::new(File::open(dir.join(format!("{stem}-images.idx")))?),
        std::io::BufReader::new(File::open(dir.join(format!("{stem}-labels.idx")))?),
    )?;
    let provenance = Provenance {
        source: "t10k".into(),
        seed,
        s,
        segmentation: params,
    };
    let sidecar = fs::read_to_string(dir.join(format!("{stem}.provenance")))?;
    if sidecar != provenance.to_sidecar() {
        return Err(DatasetError::Provenance(format!(
            "{stem} was generated with different parameters"
        )));
    }
    Ok(DeficientSet {
        s,
        images,
        provenance,
    })
}
