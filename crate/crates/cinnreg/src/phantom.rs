//! Procedural density volumes with controllable 180°-rotation symmetry.
//!
//! The phantom stands in for a spine CT: a stack of vertebra-like primitives
//! (ellipsoid body plus cylindrical process) centered on the longitudinal
//! axis. Marker-free phantoms are voxel-exactly invariant under a 180°
//! rotation about the central longitudinal grid axis, which is the source of
//! the projection ambiguity the pipeline is built to detect. An optional
//! off-axis spherical marker breaks the symmetry.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix;

/// 3D scalar density grid with physical spacing.
///
/// Data is row-major with x fastest: `data[i + nx*(j + ny*k)]`. Values are
/// unitless relative densities in `[0, 1]`. The longitudinal (patient) axis
/// is the y grid axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3]) -> Self {
        Volume {
            dims,
            spacing_mm,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Index triple of the voxel paired with (i, j, k) under the 180°
    /// rotation about the central longitudinal (y) axis.
    #[inline]
    pub fn rot180(&self, i: usize, j: usize, k: usize) -> (usize, usize, usize) {
        (self.dims[0] - 1 - i, j, self.dims[2] - 1 - k)
    }

    /// Physical center of the grid in mm (voxel-center convention).
    pub fn center_mm(&self) -> [f64; 3] {
        [
            0.5 * (self.dims[0] - 1) as f64 * self.spacing_mm[0],
            0.5 * (self.dims[1] - 1) as f64 * self.spacing_mm[1],
            0.5 * (self.dims[2] - 1) as f64 * self.spacing_mm[2],
        ]
    }

    /// Physical extent covered by voxel centers, per axis, in mm.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing_mm[0],
            (self.dims[1] - 1) as f64 * self.spacing_mm[1],
            (self.dims[2] - 1) as f64 * self.spacing_mm[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.dims[0] * self.dims[1] * self.dims[2] {
            return Err(Error::Format(format!(
                "volume payload length {} does not match dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self
            .data
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Numeric("volume values outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Off-axis sphere that breaks the 180° symmetry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MarkerSpec {
    /// Offset from the volume center, mm.
    pub offset_mm: [f64; 3],
    pub radius_mm: f64,
    pub density: f64,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        MarkerSpec {
            offset_mm: [30.0, 0.0, 25.0],
            radius_mm: 15.0,
            density: 1.0,
        }
    }
}

fn default_shape_jitter() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Count of repeated vertebra-like primitives along the y axis.
    pub n_vertebrae: usize,
    /// Relative per-vertebra size jitter; 0 makes the shape independent of
    /// the seed.
    #[serde(default = "default_shape_jitter")]
    pub shape_jitter: f64,
    pub body_density: f64,
    pub process_density: f64,
    #[serde(default)]
    pub marker: Option<MarkerSpec>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 128, 64],
            spacing_mm: [2.0, 2.0, 2.0],
            n_vertebrae: 5,
            shape_jitter: default_shape_jitter(),
            body_density: 0.7,
            process_density: 0.9,
            marker: None,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Parameter(format!(
                "phantom dims must be >= 8 per axis, got {:?}",
                self.dims
            )));
        }
        for (name, d) in [
            ("body_density", self.body_density),
            ("process_density", self.process_density),
        ] {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Parameter(format!("{name} must be in [0,1], got {d}")));
            }
        }
        if let Some(m) = &self.marker {
            if !(0.0..=1.0).contains(&m.density) || m.radius_mm <= 0.0 {
                return Err(Error::Parameter("invalid marker density/radius".into()));
            }
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Parameter("spacing must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.shape_jitter) {
            return Err(Error::Parameter(format!(
                "shape_jitter must be in [0, 1), got {}",
                self.shape_jitter
            )));
        }
        Ok(())
    }
}

/// Generate a phantom volume. Pure function of the spec (seed included).
///
/// The raw shape field is evaluated per voxel, then symmetrized by taking
/// the max with its 180°-rotated counterpart, which makes the marker-free
/// volume voxel-exactly symmetric. The marker is painted afterwards.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let [sx, sy, sz] = spec.spacing_mm;
    let mut v = Volume::zeros(spec.dims, spec.spacing_mm);
    let center = v.center_mm();

    if spec.n_vertebrae > 0 {
        let extent_y = (ny as f64) * sy;
        let pitch = extent_y / spec.n_vertebrae as f64;
        // Per-vertebra size jitter, deterministic in (seed, vertebra index).
        let verts: Vec<Vertebra> = (0..spec.n_vertebrae)
            .map(|vi| {
                let jitter =
                    1.0 + spec.shape_jitter * (2.0 * unit_f64(mix(spec.seed, vi as u64)) - 1.0);
                // Tilt the process of each vertebra by a different angle in
                // the x-z plane, spread evenly across the stack. The pattern
                // of projected process lengths then varies steeply and
                // uniquely with the rotation angle about the longitudinal
                // axis, so projections from different angles stay visually
                // distinct.
                let frac = if spec.n_vertebrae > 1 {
                    vi as f64 / (spec.n_vertebrae - 1) as f64 - 0.5
                } else {
                    0.0
                };
                let tilt = 2.0 * frac * PROC_TILT_SPREAD_RAD;
                Vertebra {
                    cy: (vi as f64 + 0.5) * pitch - 0.5 * sy,
                    rx: 0.28 * (nx as f64) * sx * jitter,
                    ry: 0.33 * pitch,
                    rz: 0.22 * (nz as f64) * sz * jitter,
                    proc_r: 0.08 * (nx as f64) * sx,
                    proc_len: 0.38 * (nz as f64) * sz,
                    proc_ux: tilt.sin(),
                    proc_uz: tilt.cos(),
                }
            })
            .collect();

        let field = |x: f64, y: f64, z: f64| -> f64 {
            let dx = x - center[0];
            let dz = z - center[2];
            let mut d: f64 = 0.0;
            for vt in &verts {
                let dy = y - vt.cy;
                if dy.abs() > vt.ry + vt.proc_r {
                    continue;
                }
                let e = (dx / vt.rx).powi(2) + (dy / vt.ry).powi(2) + (dz / vt.rz).powi(2);
                if e <= 1.0 {
                    d = d.max(spec.body_density);
                }
                // Posterior process: cylinder from the body center outward
                // along this vertebra's tilt direction; symmetrization below
                // mirrors it through the center as well.
                let s = dx * vt.proc_ux + dz * vt.proc_uz;
                let px = dx - s * vt.proc_ux;
                let pz = dz - s * vt.proc_uz;
                let perp2 = px * px + dy * dy + pz * pz;
                if perp2 <= vt.proc_r * vt.proc_r && s >= 0.0 && s <= vt.rz + vt.proc_len {
                    d = d.max(spec.process_density);
                }
            }
            d
        };

        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = v.index(i, j, k);
                    v.data[idx] = field(i as f64 * sx, j as f64 * sy, k as f64 * sz) as f32;
                }
            }
        }
        // Symmetrize: V[i] = max(V[i], V[rot180(i)]). Voxel-exact.
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let (ri, rj, rk) = v.rot180(i, j, k);
                    let a = v.at(i, j, k);
                    let b = v.at(ri, rj, rk);
                    let m = a.max(b);
                    let idx = v.index(i, j, k);
                    v.data[idx] = m;
                }
            }
        }
    }

    if let Some(m) = &spec.marker {
        let cx = center[0] + m.offset_mm[0];
        let cy = center[1] + m.offset_mm[1];
        let cz = center[2] + m.offset_mm[2];
        let r2 = m.radius_mm * m.radius_mm;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let dx = i as f64 * sx - cx;
                    let dy = j as f64 * sy - cy;
                    let dz = k as f64 * sz - cz;
                    if dx * dx + dy * dy + dz * dz <= r2 {
                        let idx = v.index(i, j, k);
                        v.data[idx] = v.data[idx].max(m.density as f32);
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Half-width of the per-vertebra process tilt fan in the x-z plane: tilts
/// run from -60° to +60° across the stack.
const PROC_TILT_SPREAD_RAD: f64 = std::f64::consts::FRAC_PI_3;

struct Vertebra {
    cy: f64,
    rx: f64,
    ry: f64,
    rz: f64,
    proc_r: f64,
    proc_len: f64,
    proc_ux: f64,
    proc_uz: f64,
}

/// Map a 64-bit hash to a uniform f64 in [0, 1).
fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear interpolation at a continuous point in voxel coordinates.
/// Points outside the grid (any missing neighbor) contribute 0.
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let [nx, ny, nz] = v.dims;
    let fx = p[0].floor();
    let fy = p[1].floor();
    let fz = p[2].floor();
    let tx = p[0] - fx;
    let ty = p[1] - fy;
    let tz = p[2] - fz;
    let i0 = fx as i64;
    let j0 = fy as i64;
    let k0 = fz as i64;

    let fetch = |i: i64, j: i64, k: i64| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            0.0
        } else {
            v.at(i as usize, j as usize, k as usize) as f64
        }
    };

    let mut acc = 0.0;
    for dk in 0..2 {
        let wz = if dk == 0 { 1.0 - tz } else { tz };
        if wz == 0.0 {
            continue;
        }
        for dj in 0..2 {
            let wy = if dj == 0 { 1.0 - ty } else { ty };
            if wy == 0.0 {
                continue;
            }
            for di in 0..2 {
                let wx = if di == 0 { 1.0 - tx } else { tx };
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(i0 + di, j0 + dj, k0 + dk);
            }
        }
    }
    acc
}

/// Trilinear resample to new dims (used to feed the conditioning network).
pub fn resample(v: &Volume, dims: [usize; 3]) -> Volume {
    let mut out = Volume::zeros(
        dims,
        [
            v.spacing_mm[0] * (v.dims[0] as f64 / dims[0] as f64),
            v.spacing_mm[1] * (v.dims[1] as f64 / dims[1] as f64),
            v.spacing_mm[2] * (v.dims[2] as f64 / dims[2] as f64),
        ],
    );
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [
                    i as f64 * (v.dims[0] - 1) as f64 / (dims[0] - 1).max(1) as f64,
                    j as f64 * (v.dims[1] - 1) as f64 / (dims[1] - 1).max(1) as f64,
                    k as f64 * (v.dims[2] - 1) as f64 / (dims[2] - 1).max(1) as f64,
                ];
                let idx = out.index(i, j, k);
                out.data[idx] = sample_trilinear(v, p) as f32;
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

/// Write a volume: one JSON header line, then little-endian f32 payload.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = VolumeHeader {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        dtype: "f32le".into(),
        order: "x-fastest".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header: VolumeHeader = read_json_header(&mut r)?;
    if header.dtype != "f32le" || header.order != "x-fastest" {
        return Err(Error::Format(format!(
            "unsupported volume encoding {}/{}",
            header.dtype, header.order
        )));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "volume payload is {} bytes, expected {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume {
        dims: header.dims,
        spacing_mm: header.spacing_mm,
        data,
    })
}

/// Read a single newline-terminated JSON header line from a binary stream.
pub(crate) fn read_json_header<T: serde::de::DeserializeOwned>(
    r: &mut impl Read,
) -> Result<T> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format("missing newline after JSON header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 16 {
            return Err(Error::Format("header line too long".into()));
        }
    }
    serde_json::from_slice(&line).map_err(|e| Error::Format(format!("bad header: {e}")))
}
