//! Conditional invertible network over the 5-dim pose vector.
//!
//! A stack of affine coupling blocks with fixed random permutations. Each
//! block passes 2 dims through untouched and transforms the other 3 with an
//! elementwise affine map whose log-scale (soft-clamped) and shift come
//! from small dense subnets of the passive dims and the condition vector.
//! Forward and inverse are exact mutual inverses; the log-determinant is
//! the sum of the clamped log-scales. Subnet output layers start at zero,
//! so a fresh model is the identity (up to permutation) with zero logdet.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::drr::Image2D;
use crate::error::Result;
use crate::geometry::{vector_pose, Pose};
use crate::nncore::{Dense, Mode, Param, Parameterized, Relu, Tensor};
use crate::phantom::Volume;
use crate::rng::stream;

pub const POSE_DIM: usize = 5;
pub const PASSIVE: usize = 2;
pub const ACTIVE: usize = POSE_DIM - PASSIVE;

/// ln(2*pi)
const LN_2PI: f64 = 1.8378770664093453;

/// Bounded smooth squashing of the log-scale: (2a/pi) * atan(s/a).
pub fn soft_clamp(s: f64, alpha: f64) -> f64 {
    (2.0 * alpha / std::f64::consts::PI) * (s / alpha).atan()
}

pub fn soft_clamp_deriv(s: f64, alpha: f64) -> f64 {
    (2.0 / std::f64::consts::PI) / (1.0 + (s / alpha) * (s / alpha))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub depth: usize,
    pub subnet_width: usize,
    pub clamp_alpha: f64,
    pub cond_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            depth: 8,
            subnet_width: 64,
            clamp_alpha: 1.9,
            cond_dim: 64,
        }
    }
}

/// Two hidden ReLU layers, zero-initialized output layer.
#[derive(Debug, Clone)]
struct Subnet {
    l1: Dense,
    r1: Relu,
    l2: Dense,
    r2: Relu,
    l3: Dense,
}

impl Subnet {
    fn new(in_dim: usize, width: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Subnet {
            l1: Dense::new(in_dim, width, rng),
            r1: Relu::new(),
            l2: Dense::new(width, width, rng),
            r2: Relu::new(),
            l3: Dense::new_zeroed(width, out_dim),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.l1.forward(x);
        let y = self.r1.forward(&y);
        let y = self.l2.forward(&y);
        let y = self.r2.forward(&y);
        self.l3.forward(&y)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.l3.backward(gy);
        let g = self.r2.backward(&g);
        let g = self.l2.backward(&g);
        let g = self.r1.backward(&g);
        self.l1.backward(&g)
    }
}

#[derive(Debug, Clone)]
struct CouplingBlock {
    s_net: Subnet,
    t_net: Subnet,
    clamp_alpha: f64,
    cache: BlockCache,
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    /// Permuted input y = perm(x), [B, 5].
    y: Vec<f64>,
    /// Raw subnet log-scales, [B, 3].
    s_raw: Vec<f64>,
    /// Clamped log-scales, [B, 3].
    sc: Vec<f64>,
}

impl CouplingBlock {
    fn new(cfg: &FlowConfig, rng: &mut impl Rng) -> Self {
        CouplingBlock {
            s_net: Subnet::new(PASSIVE + cfg.cond_dim, cfg.subnet_width, ACTIVE, rng),
            t_net: Subnet::new(PASSIVE + cfg.cond_dim, cfg.subnet_width, ACTIVE, rng),
            clamp_alpha: cfg.clamp_alpha,
            cache: BlockCache::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub cfg: FlowConfig,
    /// Fixed permutation per block: y[i] = x[perm[i]].
    pub perms: Vec<[usize; POSE_DIM]>,
    blocks: Vec<CouplingBlock>,
}

impl FlowModel {
    pub fn new(cfg: &FlowConfig, seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        let mut perms = Vec::with_capacity(cfg.depth);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let mut p = [0usize; POSE_DIM];
            for (i, v) in p.iter_mut().enumerate() {
                *v = i;
            }
            p.shuffle(&mut rng);
            perms.push(p);
            blocks.push(CouplingBlock::new(cfg, &mut rng));
        }
        FlowModel {
            cfg: cfg.clone(),
            perms,
            blocks,
        }
    }

    /// Rebuild a model with given permutations (checkpoint restore).
    pub fn with_perms(cfg: &FlowConfig, perms: Vec<[usize; POSE_DIM]>, seed: u64) -> Self {
        let mut model = FlowModel::new(cfg, seed);
        assert_eq!(perms.len(), model.perms.len());
        model.perms = perms;
        model
    }

    /// Forward pass x -> (z, per-sample logdet). `x` is [B, 5] flattened,
    /// `cond` is [B, cond_dim]. Caches for `backward`.
    pub fn forward(&mut self, x: &Tensor, cond: &Tensor) -> (Tensor, Vec<f64>) {
        let batch = x.len() / POSE_DIM;
        let c = self.cfg.cond_dim;
        let mut cur = x.clone();
        let mut logdet = vec![0.0; batch];
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let perm = &self.perms[bi];
            let mut y = vec![0.0; batch * POSE_DIM];
            for b in 0..batch {
                for i in 0..POSE_DIM {
                    y[b * POSE_DIM + i] = cur.data[b * POSE_DIM + perm[i]];
                }
            }
            // Subnet input: passive dims then condition.
            let mut sin = Tensor::zeros(&[batch, PASSIVE + c]);
            for b in 0..batch {
                sin.data[b * (PASSIVE + c)..b * (PASSIVE + c) + PASSIVE]
                    .copy_from_slice(&y[b * POSE_DIM..b * POSE_DIM + PASSIVE]);
                sin.data[b * (PASSIVE + c) + PASSIVE..(b + 1) * (PASSIVE + c)]
                    .copy_from_slice(&cond.data[b * c..(b + 1) * c]);
            }
            let s_raw = block.s_net.forward(&sin);
            let t = block.t_net.forward(&sin);
            let alpha = block.clamp_alpha;
            let mut sc = vec![0.0; batch * ACTIVE];
            let mut out = Tensor::zeros(&[batch, POSE_DIM]);
            for b in 0..batch {
                for i in 0..PASSIVE {
                    out.data[b * POSE_DIM + i] = y[b * POSE_DIM + i];
                }
                for a in 0..ACTIVE {
                    let s = soft_clamp(s_raw.data[b * ACTIVE + a], alpha);
                    sc[b * ACTIVE + a] = s;
                    logdet[b] += s;
                    out.data[b * POSE_DIM + PASSIVE + a] = y[b * POSE_DIM + PASSIVE + a]
                        * s.exp()
                        + t.data[b * ACTIVE + a];
                }
            }
            block.cache = BlockCache {
                y,
                s_raw: s_raw.data,
                sc,
            };
            cur = out;
        }
        (cur, logdet)
    }

    /// Exact algebraic inverse of [`forward`].
    pub fn inverse(&mut self, z: &Tensor, cond: &Tensor) -> Tensor {
        let batch = z.len() / POSE_DIM;
        let c = self.cfg.cond_dim;
        let mut cur = z.clone();
        for bi in (0..self.blocks.len()).rev() {
            let perm = &self.perms[bi];
            let block = &mut self.blocks[bi];
            let mut sin = Tensor::zeros(&[batch, PASSIVE + c]);
            for b in 0..batch {
                sin.data[b * (PASSIVE + c)..b * (PASSIVE + c) + PASSIVE]
                    .copy_from_slice(&cur.data[b * POSE_DIM..b * POSE_DIM + PASSIVE]);
                sin.data[b * (PASSIVE + c) + PASSIVE..(b + 1) * (PASSIVE + c)]
                    .copy_from_slice(&cond.data[b * c..(b + 1) * c]);
            }
            let s_raw = block.s_net.forward(&sin);
            let t = block.t_net.forward(&sin);
            let alpha = block.clamp_alpha;
            let mut x = Tensor::zeros(&[batch, POSE_DIM]);
            for b in 0..batch {
                let mut y = [0.0; POSE_DIM];
                y[..PASSIVE].copy_from_slice(&cur.data[b * POSE_DIM..b * POSE_DIM + PASSIVE]);
                for a in 0..ACTIVE {
                    let s = soft_clamp(s_raw.data[b * ACTIVE + a], alpha);
                    y[PASSIVE + a] = (cur.data[b * POSE_DIM + PASSIVE + a]
                        - t.data[b * ACTIVE + a])
                        * (-s).exp();
                }
                for i in 0..POSE_DIM {
                    x.data[b * POSE_DIM + perm[i]] = y[i];
                }
            }
            cur = x;
        }
        cur
    }

    /// Backward through the cached forward pass. `gz` is dL/dz [B, 5],
    /// `glogdet` is dL/dlogdet per sample. Accumulates subnet parameter
    /// gradients and returns (dL/dx, dL/dcond).
    pub fn backward(&mut self, gz: &Tensor, glogdet: &[f64]) -> (Tensor, Tensor) {
        let batch = gz.len() / POSE_DIM;
        let c = self.cfg.cond_dim;
        let mut gcur = gz.clone();
        let mut gcond = Tensor::zeros(&[batch, c]);
        for bi in (0..self.blocks.len()).rev() {
            let perm = &self.perms[bi];
            let block = &mut self.blocks[bi];
            let alpha = block.clamp_alpha;
            let cache = std::mem::take(&mut block.cache);
            let mut gs_raw = Tensor::zeros(&[batch, ACTIVE]);
            let mut gt = Tensor::zeros(&[batch, ACTIVE]);
            let mut gy = vec![0.0; batch * POSE_DIM];
            for b in 0..batch {
                for i in 0..PASSIVE {
                    gy[b * POSE_DIM + i] = gcur.data[b * POSE_DIM + i];
                }
                for a in 0..ACTIVE {
                    let gza = gcur.data[b * POSE_DIM + PASSIVE + a];
                    let sc = cache.sc[b * ACTIVE + a];
                    let ya = cache.y[b * POSE_DIM + PASSIVE + a];
                    let esc = sc.exp();
                    gy[b * POSE_DIM + PASSIVE + a] = gza * esc;
                    let gsc = gza * ya * esc + glogdet[b];
                    gs_raw.data[b * ACTIVE + a] =
                        gsc * soft_clamp_deriv(cache.s_raw[b * ACTIVE + a], alpha);
                    gt.data[b * ACTIVE + a] = gza;
                }
            }
            let gin_s = block.s_net.backward(&gs_raw);
            let gin_t = block.t_net.backward(&gt);
            for b in 0..batch {
                for i in 0..PASSIVE {
                    gy[b * POSE_DIM + i] += gin_s.data[b * (PASSIVE + c) + i]
                        + gin_t.data[b * (PASSIVE + c) + i];
                }
                for j in 0..c {
                    gcond.data[b * c + j] += gin_s.data[b * (PASSIVE + c) + PASSIVE + j]
                        + gin_t.data[b * (PASSIVE + c) + PASSIVE + j];
                }
            }
            let mut gx = Tensor::zeros(&[batch, POSE_DIM]);
            for b in 0..batch {
                for i in 0..POSE_DIM {
                    gx.data[b * POSE_DIM + perm[i]] = gy[b * POSE_DIM + i];
                }
            }
            gcur = gx;
        }
        (gcur, gcond)
    }

    /// Mean negative log-likelihood of the batch under the standard-Gaussian
    /// latent: mean of 0.5*||z||^2 - logdet + (5/2) ln(2 pi).
    pub fn nll(&mut self, x: &Tensor, cond: &Tensor) -> Result<f64> {
        let (z, logdet) = self.forward(x, cond);
        z.check_finite("flow latent")?;
        let batch = logdet.len();
        let mut total = 0.0;
        for b in 0..batch {
            let zz: f64 = z.data[b * POSE_DIM..(b + 1) * POSE_DIM]
                .iter()
                .map(|&v| v * v)
                .sum();
            total += 0.5 * zz - logdet[b];
        }
        Ok(total / batch as f64 + 0.5 * POSE_DIM as f64 * LN_2PI)
    }

    /// NLL plus backward: accumulates parameter gradients and returns
    /// (loss, dL/dcond).
    pub fn nll_backward(&mut self, x: &Tensor, cond: &Tensor) -> Result<(f64, Tensor)> {
        let (z, logdet) = self.forward(x, cond);
        z.check_finite("flow latent")?;
        let batch = logdet.len();
        let inv_b = 1.0 / batch as f64;
        let mut total = 0.0;
        let mut gz = Tensor::zeros(&[batch, POSE_DIM]);
        for b in 0..batch {
            let zrow = &z.data[b * POSE_DIM..(b + 1) * POSE_DIM];
            total += 0.5 * zrow.iter().map(|&v| v * v).sum::<f64>() - logdet[b];
            for i in 0..POSE_DIM {
                gz.data[b * POSE_DIM + i] = zrow[i] * inv_b;
            }
        }
        let glogdet = vec![-inv_b; batch];
        let (_, gcond) = self.backward(&gz, &glogdet);
        Ok((total * inv_b + 0.5 * POSE_DIM as f64 * LN_2PI, gcond))
    }
}

impl Parameterized for FlowModel {
    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (net, tag) in [(&mut b.s_net, "s"), (&mut b.t_net, "t")] {
                out.push((format!("block{i}.{tag}.l1.w"), &mut net.l1.w));
                out.push((format!("block{i}.{tag}.l1.b"), &mut net.l1.b));
                out.push((format!("block{i}.{tag}.l2.w"), &mut net.l2.w));
                out.push((format!("block{i}.{tag}.l2.b"), &mut net.l2.b));
                out.push((format!("block{i}.{tag}.l3.w"), &mut net.l3.w));
                out.push((format!("block{i}.{tag}.l3.b"), &mut net.l3.b));
            }
        }
        out
    }
}

/// Draw `n` latent samples, invert the flow under the condition computed
/// once from (volume, image), and return normalized pose vectors with their
/// canonicalized poses. Deterministic in `seed`.
pub fn sample_posterior(
    flow: &mut FlowModel,
    condnet: &mut crate::condnet::CondNet,
    volume_ds: &Volume,
    image: &Image2D,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<[f64; POSE_DIM]>, Vec<Pose>)> {
    let vol = condnet.volume_batch(&[volume_ds])?;
    let img = condnet.image_batch(&[image])?;
    let cond1 = condnet.embed(&vol, &img, Mode::Eval, &mut stream(seed, u64::MAX));
    sample_posterior_with_cond(flow, &cond1, n_samples, seed)
}

/// Sampling core given a single condition vector [1, cond_dim].
pub fn sample_posterior_with_cond(
    flow: &mut FlowModel,
    cond1: &Tensor,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<[f64; POSE_DIM]>, Vec<Pose>)> {
    let c = flow.cfg.cond_dim;
    let mut z = Tensor::zeros(&[n_samples, POSE_DIM]);
    for i in 0..n_samples {
        let mut rng = stream(seed, i as u64);
        for d in 0..POSE_DIM {
            z.data[i * POSE_DIM + d] = StandardNormal.sample(&mut rng);
        }
    }
    let mut cond = Tensor::zeros(&[n_samples, c]);
    for i in 0..n_samples {
        cond.data[i * c..(i + 1) * c].copy_from_slice(&cond1.data[..c]);
    }
    let x = flow.inverse(&z, &cond);
    x.check_finite("posterior samples")?;
    let mut vecs = Vec::with_capacity(n_samples);
    let mut poses = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut v = [0.0; POSE_DIM];
        v.copy_from_slice(&x.data[i * POSE_DIM..(i + 1) * POSE_DIM]);
        let p = vector_pose(&v);
        // Re-normalize so downstream GMM fitting sees canonical LAO.
        let vc = crate::geometry::pose_vector(&p);
        vecs.push(vc);
        poses.push(p);
    }
    Ok((vecs, poses))
}
