//! Cone-beam DRR rendering and image-space utilities.
//!
//! The C-arm is modeled as a point source and a flat detector on opposite
//! sides of the volume isocenter; the beam axis at identity pose is the
//! sagittal (x) axis. A pose moves source and detector rigidly relative to
//! the volume. Each pixel intensity is a fixed-step trilinear line integral
//! over the ray segment inside the volume bounding box, divided by a shared
//! per-dataset normalization constant.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, Pose};
use crate::phantom::{read_json_header, sample_trilinear, Volume};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub source_to_detector_mm: f64,
    pub source_to_isocenter_mm: f64,
    pub detector_px: [usize; 2],
    pub pixel_pitch_mm: f64,
    /// Ray sampling step. `None` means half the minimum voxel spacing.
    #[serde(default)]
    pub step_mm: Option<f64>,
    /// Shared normalization dividing all line integrals; calibrated once
    /// per dataset and stored in the manifest.
    pub norm_constant: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            source_to_detector_mm: 1000.0,
            source_to_isocenter_mm: 600.0,
            detector_px: [64, 64],
            pixel_pitch_mm: 4.0,
            step_mm: None,
            norm_constant: 1.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_to_isocenter_mm > 0.0)
            || !(self.source_to_detector_mm > self.source_to_isocenter_mm)
        {
            return Err(Error::Config(
                "camera requires 0 < source_to_isocenter < source_to_detector".into(),
            ));
        }
        if self.detector_px[0] == 0 || self.detector_px[1] == 0 || !(self.pixel_pitch_mm > 0.0) {
            return Err(Error::Config("detector dims and pitch must be positive".into()));
        }
        if let Some(s) = self.step_mm {
            if !(s > 0.0) {
                return Err(Error::Config("step_mm must be positive".into()));
            }
        }
        if !(self.norm_constant > 0.0) {
            return Err(Error::Config("norm_constant must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_step(&self, v: &Volume) -> f64 {
        self.step_mm.unwrap_or_else(|| {
            0.5 * self
                .spacing_min(v)
        })
    }

    fn spacing_min(&self, v: &Volume) -> f64 {
        v.spacing_mm.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Rendered projection, row-major (`data[iu + w*iv]`), normalized intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub dims: [usize; 2],
    pub data: Vec<f32>,
}

impl Image2D {
    pub fn zeros(dims: [usize; 2]) -> Self {
        Image2D {
            dims,
            data: vec![0.0; dims[0] * dims[1]],
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&x| x as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Ray/axis-aligned-box intersection, box spanned by voxel centers.
/// Returns the parameter interval [t0, t1] in mm along the unit direction,
/// or None when the ray misses.
fn clip_to_box(origin: Vector3<f64>, dir: Vector3<f64>, extent: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d, hi) = (origin[a], dir[a], extent[a]);
        if d.abs() < 1e-12 {
            if o < 0.0 || o > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((0.0 - o) / d, (hi - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

fn point_in_box(p: Vector3<f64>, extent: [f64; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= extent[a])
}

/// Integrate the volume along one ray with midpoint sampling. The nominal
/// step is shrunk to divide the chord exactly, so a uniform unit-density
/// volume integrates to the chord length up to rounding.
fn integrate_ray(v: &Volume, origin: Vector3<f64>, through: Vector3<f64>, step: f64) -> f64 {
    let dir = (through - origin).normalize();
    let extent = v.extent_mm();
    let Some((t0, t1)) = clip_to_box(origin, dir, extent) else {
        return 0.0;
    };
    let len = t1 - t0;
    if len <= 0.0 {
        return 0.0;
    }
    let n = (len / step).ceil() as usize;
    let h = len / n as f64;
    let mut acc = 0.0;
    for m in 0..n {
        let t = t0 + (m as f64 + 0.5) * h;
        let p = origin + dir * t;
        acc += sample_trilinear(
            v,
            [
                p.x / v.spacing_mm[0],
                p.y / v.spacing_mm[1],
                p.z / v.spacing_mm[2],
            ],
        );
    }
    acc * h
}

struct RaySetup {
    source: Vector3<f64>,
    det_origin: Vector3<f64>,
    du: Vector3<f64>,
    dv: Vector3<f64>,
}

fn setup_rays(v: &Volume, p: &Pose, cam: &CameraConfig) -> Result<RaySetup> {
    cam.validate()?;
    let c = v.center_mm();
    let center = Vector3::new(c[0], c[1], c[2]);
    let tr = pose_to_transform(p, c);
    let beam = Vector3::x();
    let u_axis = Vector3::z();
    let v_axis = Vector3::y();
    let [w, h] = cam.detector_px;
    let det_center = center + beam * (cam.source_to_detector_mm - cam.source_to_isocenter_mm);
    let source0 = center - beam * cam.source_to_isocenter_mm;
    let pitch = cam.pixel_pitch_mm;
    let det_origin0 = det_center
        - u_axis * (0.5 * (w as f64 - 1.0) * pitch)
        - v_axis * (0.5 * (h as f64 - 1.0) * pitch);
    let source = tr.apply(source0);
    if point_in_box(source, v.extent_mm()) {
        return Err(Error::Config(
            "degenerate camera: source lies inside the volume bounding box".into(),
        ));
    }
    Ok(RaySetup {
        source,
        det_origin: tr.apply(det_origin0),
        du: tr.rotation * (u_axis * pitch),
        dv: tr.rotation * (v_axis * pitch),
    })
}

fn render_row(v: &Volume, rays: &RaySetup, cam: &CameraConfig, step: f64, iv: usize, out: &mut [f32]) {
    for (iu, px) in out.iter_mut().enumerate() {
        let pixel = rays.det_origin + rays.du * iu as f64 + rays.dv * iv as f64;
        *px = (integrate_ray(v, rays.source, pixel, step) / cam.norm_constant) as f32;
    }
}

/// Sequential renderer; always available and used as the bench baseline.
pub fn render_drr_seq(v: &Volume, p: &Pose, cam: &CameraConfig) -> Result<Image2D> {
    let rays = setup_rays(v, p, cam)?;
    let step = cam.effective_step(v);
    let [w, h] = cam.detector_px;
    let mut img = Image2D::zeros([w, h]);
    for iv in 0..h {
        render_row(v, &rays, cam, step, iv, &mut img.data[iv * w..(iv + 1) * w]);
    }
    Ok(img)
}

/// Data-parallel renderer over detector rows. Per-pixel rays are
/// independent and each row writes a disjoint slice, so the output is
/// bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn render_drr_par(v: &Volume, p: &Pose, cam: &CameraConfig) -> Result<Image2D> {
    use rayon::prelude::*;
    let rays = setup_rays(v, p, cam)?;
    let step = cam.effective_step(v);
    let [w, h] = cam.detector_px;
    let mut img = Image2D::zeros([w, h]);
    img.data
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(iv, row)| render_row(v, &rays, cam, step, iv, row));
    Ok(img)
}

/// Render a DRR; dispatches to the parallel path when the `parallel`
/// feature is enabled.
pub fn render_drr(v: &Volume, p: &Pose, cam: &CameraConfig) -> Result<Image2D> {
    #[cfg(feature = "parallel")]
    {
        render_drr_par(v, p, cam)
    }
    #[cfg(not(feature = "parallel"))]
    {
        render_drr_seq(v, p, cam)
    }
}

/// Mean absolute per-pixel difference.
pub fn l1_image_distance(a: &Image2D, b: &Image2D) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Parameter(format!(
            "image dims {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / n)
}

///// Noise plus contrast augmentation with explicit parameters:
/// x -> clamp(gamma * (x + noise - 0.5) + 0.5, 0, 1).
/// sigma = 0, gamma = 1 is the exact identity (no clamping either, so the
/// guarantee holds for unnormalized inputs too).
pub fn augment_with(data: &mut [f32], sigma: f64, gamma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 && gamma == 1.0 {
        return;
    }
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).expect("sigma >= 0"))
    } else {
        None
    };
    for x in data.iter_mut() {
        let mut v = *x as f64;
        if let Some(n) = &noise {
            v += n.sample(rng);
        }
        v = gamma * (v - 0.5) + 0.5;
        *x = v.clamp(0.0, 1.0) as f32;
    }
}

/// Draw augmentation parameters (sigma in [0, 0.02], gamma in [0.8, 1.25])
/// and apply them to an image.
pub fn augment(img: &Image2D, rng: &mut impl Rng) -> Image2D {
    let sigma = rng.gen_range(0.0..=0.02);
    let gamma = rng.gen_range(0.8..=1.25);
    let mut out = img.clone();
    augment_with(&mut out.data, sigma, gamma, rng);
    out
}

/// Volume analogue of [`augment`].
pub fn augment_volume(v: &Volume, rng: &mut impl Rng) -> Volume {
    let sigma = rng.gen_range(0.0..=0.02);
    let gamma = rng.gen_range(0.8..=1.25);
    let mut out = v.clone();
    augment_with(&mut out.data, sigma, gamma, rng);
    out
}

#[derive(Serialize, Deserialize)]
struct ImageHeader {
    dims: [usize; 2],
    dtype: String,
}

pub fn save_image(img: &Image2D, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &ImageHeader {
            dims: img.dims,
            dtype: "f32le".into(),
        },
    )?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for x in &img.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image2D> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header: ImageHeader = read_json_header(&mut r)?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported image dtype {}", header.dtype)));
    }
    let n = header.dims[0] * header.dims[1];
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "image payload is {} bytes, expected {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Image2D {
        dims: header.dims,
        data,
    })
}

/// Lossy 8-bit PGM export for visual inspection. Never read back.
pub fn save_pgm(img: &Image2D, path: &Path) -> Result<()> {
    let [w, h] = img.dims;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out)?;
    Ok(())
}
