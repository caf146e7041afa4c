//! Dataset generation and the JSONL manifest tying volumes, rendered
//! projections, and ground-truth poses together, plus the in-memory view
//! used by training.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::drr::{load_image, render_drr, save_image, CameraConfig, Image2D};
use crate::error::{Error, Result};
use crate::geometry::{pose_vector, sample_pose, Pose};
use crate::phantom::{load_volume, make_phantom, resample, save_volume, MarkerSpec, PhantomSpec, Volume};
use crate::rng::mix;

/// Seed-stream tags, kept distinct so no two stages share a stream.
const TAG_PHANTOM_TRAIN: u64 = 0x1000;
const TAG_PHANTOM_TEST: u64 = 0x2000;
const TAG_POSES_TRAIN: u64 = 0x3000;
const TAG_POSES_TEST: u64 = 0x3001;
const TAG_RECORD_TRAIN: u64 = 0x4000;
const TAG_RECORD_TEST: u64 = 0x5000;

/// Number of projections pooled for the norm-constant calibration.
const CALIBRATION_IMAGES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhantomKind {
    #[serde(rename = "symmetric")]
    Symmetric,
    #[serde(rename = "marked")]
    Marked,
}

/// First line of the manifest: shared camera (with the calibrated
/// norm_constant) and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub camera: CameraConfig,
    pub norm_constant: f64,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub volume_path: String,
    pub image_path: String,
    pub pose: Pose,
    /// Per-record seed for downstream stochastic stages (posterior draws).
    pub seed: u64,
    pub phantom: PhantomKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<DatasetRecord>,
    /// Directory the record paths are relative to.
    pub dir: PathBuf,
}

impl DatasetManifest {
    pub fn path_of(dir: &Path, split: Split) -> PathBuf {
        dir.join(split.dir_name()).join("manifest.jsonl")
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Load and fail fast: every referenced file must exist.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let dir = path
            .parent()
            .ok_or_else(|| Error::Parameter(format!("{} has no parent dir", path.display())))?
            .to_path_buf();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Format(format!("manifest header: {e}")))?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest record: {e}")))?;
            for p in [&r.volume_path, &r.image_path] {
                if !dir.join(p).is_file() {
                    return Err(Error::Format(format!("manifest references missing file {p}")));
                }
            }
            records.push(r);
        }
        if records.is_empty() {
            return Err(Error::Parameter("manifest has no records".into()));
        }
        Ok(DatasetManifest {
            header,
            records,
            dir,
        })
    }
}

fn phantom_spec(cfg: &RunConfig, split: Split, index: usize) -> PhantomSpec {
    let p = &cfg.phantoms;
    let tag = match split {
        Split::Train => TAG_PHANTOM_TRAIN,
        Split::Test => TAG_PHANTOM_TEST,
    };
    // Interleave marked phantoms so every prefix is close to the target
    // fraction.
    let marked = ((index + 1) as f64 * p.marked_fraction).floor()
        > (index as f64 * p.marked_fraction).floor();
    PhantomSpec {
        dims: p.dims,
        spacing_mm: p.spacing_mm,
        n_vertebrae: p.n_vertebrae,
        shape_jitter: p.shape_jitter,
        body_density: p.body_density,
        process_density: p.process_density,
        marker: marked.then(MarkerSpec::default),
        seed: mix(cfg.seed, tag + index as u64),
    }
}

/// Nearest-rank percentile (q in [0, 1]) of the pooled values.
fn percentile(values: &mut [f32], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1] as f64
}

/// Generate one split: phantoms, poses, calibrated renders, manifest.
/// A pure function of the config; repeated runs are byte-identical.
pub fn generate_split(cfg: &RunConfig, split: Split, out_root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = out_root.join(split.dir_name());
    std::fs::create_dir_all(&dir)?;
    let n_phantoms = match split {
        Split::Train => cfg.phantoms.n_train,
        Split::Test => cfg.phantoms.n_test,
    };
    let (pose_tag, record_tag) = match split {
        Split::Train => (TAG_POSES_TRAIN, TAG_RECORD_TRAIN),
        Split::Test => (TAG_POSES_TEST, TAG_RECORD_TEST),
    };
    let poses_per_phantom = match split {
        Split::Train => cfg.poses_per_phantom,
        Split::Test => cfg.test_poses_per_phantom.unwrap_or(cfg.poses_per_phantom),
    };
    let mut sampler = cfg.sampler.clone();
    sampler.seed = mix(cfg.seed, pose_tag);

    let mut volumes = Vec::with_capacity(n_phantoms);
    let mut volume_paths = Vec::with_capacity(n_phantoms);
    let mut kinds = Vec::with_capacity(n_phantoms);
    for i in 0..n_phantoms {
        let spec = phantom_spec(cfg, split, i);
        let kind = if spec.marker.is_some() {
            PhantomKind::Marked
        } else {
            PhantomKind::Symmetric
        };
        let v = make_phantom(&spec)?;
        let rel = format!("phantom_{i:02}.vol");
        save_volume(&v, &dir.join(&rel))?;
        volumes.push(v);
        volume_paths.push(rel);
        kinds.push(kind);
    }

    let n_images = n_phantoms * poses_per_phantom;
    let poses: Vec<Pose> = (0..n_images)
        .map(|i| sample_pose(&sampler, i as u64))
        .collect();

    // Calibrate the shared normalization from raw line integrals of the
    // leading images, then render everything with it.
    let mut raw_cam = cfg.camera.clone();
    raw_cam.norm_constant = 1.0;
    let mut pool = Vec::new();
    for i in 0..n_images.min(CALIBRATION_IMAGES) {
        let v = &volumes[i / poses_per_phantom];
        let img = render_drr(v, &poses[i], &raw_cam)?;
        pool.extend_from_slice(&img.data);
    }
    let norm = percentile(&mut pool, 0.99);
    if !(norm > 0.0) {
        return Err(Error::Numeric(format!(
            "norm calibration produced non-positive constant {norm}"
        )));
    }
    let mut camera = cfg.camera.clone();
    camera.norm_constant = norm;

    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let pi = i / poses_per_phantom;
        let img = render_drr(&volumes[pi], &poses[i], &camera)?;
        let rel = format!("img_{pi:02}_{:03}.f32", i % poses_per_phantom);
        save_image(&img, &dir.join(&rel))?;
        records.push(DatasetRecord {
            volume_path: volume_paths[pi].clone(),
            image_path: rel,
            pose: poses[i],
            seed: mix(cfg.seed, record_tag + i as u64),
            phantom: kinds[pi],
        });
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            camera,
            norm_constant: norm,
            split,
            seed: cfg.seed,
        },
        records,
        dir: dir.clone(),
    };
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// One training sample: indices into the shared volume table plus the
/// projection and normalized pose target.
#[derive(Debug, Clone)]
pub struct DataItem {
    pub volume_idx: usize,
    pub image: Image2D,
    pub pose_vec: [f64; 5],
    /// Target for the 180°-flipped pose, which projects identically on a
    /// symmetric phantom; used by the symmetry-flip training augmentation.
    pub pose_vec_flipped: [f64; 5],
    /// Flip-invariant target: the lao component is folded to the smaller
    /// of the pose's and its 180°-flipped twin's values. For a symmetric
    /// phantom this is the only part of lao the projection determines, so
    /// regression pretraining uses it.
    pub pose_vec_folded: [f64; 5],
    pub seed: u64,
    pub kind: PhantomKind,
}

/// Training view of a manifest: volumes resampled once to the conditioning
/// resolution, images loaded in record order.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub volumes: Vec<Volume>,
    pub items: Vec<DataItem>,
}

impl InMemoryDataset {
    pub fn load(manifest: &DatasetManifest, volume_dims: [usize; 3]) -> Result<InMemoryDataset> {
        let mut volumes = Vec::new();
        let mut path_index: Vec<String> = Vec::new();
        let mut items = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let volume_idx = match path_index.iter().position(|p| p == &r.volume_path) {
                Some(i) => i,
                None => {
                    let v = load_volume(&manifest.resolve(&r.volume_path))?;
                    volumes.push(resample(&v, volume_dims));
                    path_index.push(r.volume_path.clone());
                    volumes.len() - 1
                }
            };
            let image = load_image(&manifest.resolve(&r.image_path))?;
            let p = &r.pose;
            let flipped = Pose::new(p.tx, p.ty, p.tz, p.lao + 180.0, p.cran);
            let pose_vec = pose_vector(p);
            let pose_vec_flipped = pose_vector(&flipped);
            let mut pose_vec_folded = pose_vec;
            pose_vec_folded[3] = pose_vec[3].min(pose_vec_flipped[3]);
            items.push(DataItem {
                volume_idx,
                image,
                pose_vec,
                pose_vec_flipped,
                pose_vec_folded,
                seed: r.seed,
                kind: r.phantom,
            });
        }
        Ok(InMemoryDataset { volumes, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
