//! Conditioning network: embeds a (volume, projection) pair into a compact
//! condition vector for the flow.
//!
//! Two convolutional branches (3D for the downsampled volume, 2D for the
//! projection), each a stack of conv -> batchnorm -> dropout -> relu blocks
//! ending in global average pooling; the pooled features are concatenated
//! and mapped by a dense layer to the condition vector. A zero-initialized
//! regression head predicts the normalized pose for stage-1 pretraining and
//! is discarded afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drr::Image2D;
use crate::error::{Error, Result};
use crate::nncore::{
    global_avg_pool, global_avg_pool_backward, BatchNorm, Conv2d, Conv3d, Dense, Dropout, Mode,
    Param, Parameterized, Relu, Tensor,
};
use crate::phantom::Volume;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CondNetConfig {
    /// Volume input dims (nx, ny, nz) after trilinear downsampling.
    pub volume_input_dims: [usize; 3],
    pub image_input_dims: [usize; 2],
    /// conv -> batchnorm -> dropout -> relu stages per branch.
    pub blocks: usize,
    /// Channel width of the first block; doubled per stage.
    pub base_channels: usize,
    pub cond_dim: usize,
    pub dropout_rate: f64,
    /// How the final feature maps are reduced before the fusion layer.
    /// Flattening keeps spatial layout (needed to regress translations from
    /// small detectors); averaging is cheaper but nearly pose-blind.
    #[serde(default)]
    pub pool: PoolKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Gap,
    #[default]
    Flatten,
}

impl Default for CondNetConfig {
    fn default() -> Self {
        CondNetConfig {
            volume_input_dims: [32, 64, 32],
            image_input_dims: [64, 64],
            blocks: 3,
            base_channels: 4,
            cond_dim: 64,
            dropout_rate: 0.1,
            pool: PoolKind::Flatten,
        }
    }
}

impl CondNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cond_dim < 5 {
            return Err(Error::Config("cond_dim must be >= 5".into()));
        }
        if self.blocks == 0 || self.base_channels == 0 {
            return Err(Error::Config("blocks and base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0,1)".into()));
        }
        let stride_total = 1usize << self.blocks;
        for d in self
            .volume_input_dims
            .iter()
            .chain(self.image_input_dims.iter())
        {
            if d % stride_total != 0 {
                return Err(Error::Config(format!(
                    "input dim {d} not divisible by total stride {stride_total}"
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn final_channels(&self) -> usize {
        self.channels(self.blocks - 1)
    }

    fn spatial_out(dims: &[usize]) -> usize {
        dims.iter().product()
    }
}

#[derive(Debug, Clone)]
struct ConvBlock3d {
    conv: Conv3d,
    bn: BatchNorm,
    drop: Dropout,
    relu: Relu,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl ConvBlock3d {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Tensor {
        let y = self.conv.forward(x, self.in_dims);
        let spatial = self.out_dims.iter().product();
        let y = self.bn.forward(&y, spatial, mode);
        let y = self.drop.forward(&y, mode, rng);
        self.relu.forward(&y)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.relu.backward(gy);
        let g = self.drop.backward(&g);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock2d {
    conv: Conv2d,
    bn: BatchNorm,
    drop: Dropout,
    relu: Relu,
    in_dims: [usize; 2],
    out_dims: [usize; 2],
}

impl ConvBlock2d {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Tensor {
        let y = self.conv.forward(x, self.in_dims);
        let spatial = self.out_dims.iter().product();
        let y = self.bn.forward(&y, spatial, mode);
        let y = self.drop.forward(&y, mode, rng);
        self.relu.forward(&y)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let g = self.relu.backward(gy);
        let g = self.drop.backward(&g);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub struct CondNet {
    pub cfg: CondNetConfig,
    vol_blocks: Vec<ConvBlock3d>,
    img_blocks: Vec<ConvBlock2d>,
    vol_feat: usize,
    img_feat: usize,
    fuse: Dense,
    /// Stage-1 pose-regression head; zero-initialized, unused after
    /// pretraining.
    pub head: Dense,
}

impl CondNet {
    pub fn new(cfg: &CondNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let [vx, vy, vz] = cfg.volume_input_dims;
        // Volume data is x-fastest, so the conv sees (d, h, w) = (nz, ny, nx).
        let mut vol_dims = [vz, vy, vx];
        let mut img_dims = cfg.image_input_dims;
        let mut vol_blocks = Vec::new();
        let mut img_blocks = Vec::new();
        let mut in_ch = 1;
        for stage in 0..cfg.blocks {
            let out_ch = cfg.channels(stage);
            let vout = vol_dims.map(|d| d / 2);
            vol_blocks.push(ConvBlock3d {
                conv: Conv3d::new(in_ch, out_ch, 2, rng),
                bn: BatchNorm::new(out_ch),
                drop: Dropout::new(cfg.dropout_rate),
                relu: Relu::new(),
                in_dims: vol_dims,
                out_dims: vout,
            });
            let iout = img_dims.map(|d| d / 2);
            img_blocks.push(ConvBlock2d {
                conv: Conv2d::new(in_ch, out_ch, 2, rng),
                bn: BatchNorm::new(out_ch),
                drop: Dropout::new(cfg.dropout_rate),
                relu: Relu::new(),
                in_dims: img_dims,
                out_dims: iout,
            });
            vol_dims = vout;
            img_dims = iout;
            in_ch = out_ch;
        }
        let fc = cfg.final_channels();
        let (vol_feat, img_feat) = match cfg.pool {
            PoolKind::Gap => (fc, fc),
            PoolKind::Flatten => (
                fc * CondNetConfig::spatial_out(&vol_dims),
                fc * CondNetConfig::spatial_out(&img_dims),
            ),
        };
        Ok(CondNet {
            cfg: cfg.clone(),
            vol_blocks,
            img_blocks,
            vol_feat,
            img_feat,
            fuse: Dense::new(vol_feat + img_feat, cfg.cond_dim, rng),
            head: Dense::new_zeroed(cfg.cond_dim, 5),
        })
    }

    /// Tensorize a batch of downsampled volumes, shape [B, 1, nz, ny, nx].
    pub fn volume_batch(&self, volumes: &[&Volume]) -> Result<Tensor> {
        let [vx, vy, vz] = self.cfg.volume_input_dims;
        let n = vx * vy * vz;
        let mut data = Vec::with_capacity(volumes.len() * n);
        for v in volumes {
            if v.dims != self.cfg.volume_input_dims {
                return Err(Error::Parameter(format!(
                    "volume dims {:?} do not match configured input {:?}",
                    v.dims, self.cfg.volume_input_dims
                )));
            }
            data.extend(v.data.iter().map(|&x| x as f64));
        }
        Ok(Tensor::from_vec(&[volumes.len(), 1, vz, vy, vx], data))
    }

    /// Tensorize a batch of images, shape [B, 1, h, w].
    pub fn image_batch(&self, images: &[&Image2D]) -> Result<Tensor> {
        let [w, h] = self.cfg.image_input_dims;
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.dims != self.cfg.image_input_dims {
                return Err(Error::Parameter(format!(
                    "image dims {:?} do not match configured input {:?}",
                    img.dims, self.cfg.image_input_dims
                )));
            }
            data.extend(img.data.iter().map(|&x| x as f64));
        }
        Ok(Tensor::from_vec(&[images.len(), 1, h, w], data))
    }

    /// Joint embedding of a batch of (volume, image) pairs -> [B, cond_dim].
    pub fn embed(
        &mut self,
        volumes: &Tensor,
        images: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Tensor {
        let batch = volumes.shape[0];
        let mut v = volumes.clone();
        for blk in &mut self.vol_blocks {
            v = blk.forward(&v, mode, rng);
        }
        let mut im = images.clone();
        for blk in &mut self.img_blocks {
            im = blk.forward(&im, mode, rng);
        }
        let fc = self.cfg.final_channels();
        let (vp, ip) = match self.cfg.pool {
            PoolKind::Gap => (global_avg_pool(&v, fc), global_avg_pool(&im, fc)),
            PoolKind::Flatten => (v, im),
        };
        let (vf, if_) = (self.vol_feat, self.img_feat);
        let width = vf + if_;
        let mut cat = Tensor::zeros(&[batch, width]);
        for b in 0..batch {
            cat.data[b * width..b * width + vf].copy_from_slice(&vp.data[b * vf..(b + 1) * vf]);
            cat.data[b * width + vf..(b + 1) * width]
                .copy_from_slice(&ip.data[b * if_..(b + 1) * if_]);
        }
        self.fuse.forward(&cat)
    }

    /// Backward from a gradient w.r.t. the condition vector, accumulating
    /// parameter gradients through both branches.
    pub fn backward_embed(&mut self, gcond: &Tensor) {
        let batch = gcond.shape[0];
        let fc = self.cfg.final_channels();
        let gcat = self.fuse.backward(gcond);
        let (vf, if_) = (self.vol_feat, self.img_feat);
        let width = vf + if_;
        let mut gvp = Tensor::zeros(&[batch, vf]);
        let mut gip = Tensor::zeros(&[batch, if_]);
        for b in 0..batch {
            gvp.data[b * vf..(b + 1) * vf].copy_from_slice(&gcat.data[b * width..b * width + vf]);
            gip.data[b * if_..(b + 1) * if_]
                .copy_from_slice(&gcat.data[b * width + vf..(b + 1) * width]);
        }
        let vspatial: usize = self.vol_blocks.last().unwrap().out_dims.iter().product();
        let ispatial: usize = self.img_blocks.last().unwrap().out_dims.iter().product();
        let mut gv = match self.cfg.pool {
            PoolKind::Gap => global_avg_pool_backward(&gvp, fc, vspatial),
            PoolKind::Flatten => gvp,
        };
        for blk in self.vol_blocks.iter_mut().rev() {
            gv = blk.backward(&gv);
        }
        let mut gi = match self.cfg.pool {
            PoolKind::Gap => global_avg_pool_backward(&gip, fc, ispatial),
            PoolKind::Flatten => gip,
        };
        for blk in self.img_blocks.iter_mut().rev() {
            gi = blk.backward(&gi);
        }
    }

    /// Stage-1 forward: pose prediction from the embedding.
    pub fn predict_pose(&mut self, cond: &Tensor) -> Tensor {
        self.head.forward(cond)
    }

    /// Names of parameters that belong to the stage-1 head.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Non-trainable state (batchnorm running statistics), named for
    /// checkpointing alongside the parameters.
    pub fn named_buffers(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, blk) in self.vol_blocks.iter_mut().enumerate() {
            out.push((format!("vol{i}.bn.running_mean"), &mut blk.bn.running_mean));
            out.push((format!("vol{i}.bn.running_var"), &mut blk.bn.running_var));
        }
        for (i, blk) in self.img_blocks.iter_mut().enumerate() {
            out.push((format!("img{i}.bn.running_mean"), &mut blk.bn.running_mean));
            out.push((format!("img{i}.bn.running_var"), &mut blk.bn.running_var));
        }
        out
    }
}

impl Parameterized for CondNet {
    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, blk) in self.vol_blocks.iter_mut().enumerate() {
            out.push((format!("vol{i}.conv.w"), &mut blk.conv.w));
            out.push((format!("vol{i}.conv.b"), &mut blk.conv.b));
            out.push((format!("vol{i}.bn.gamma"), &mut blk.bn.gamma));
            out.push((format!("vol{i}.bn.beta"), &mut blk.bn.beta));
        }
        for (i, blk) in self.img_blocks.iter_mut().enumerate() {
            out.push((format!("img{i}.conv.w"), &mut blk.conv.w));
            out.push((format!("img{i}.conv.b"), &mut blk.conv.b));
            out.push((format!("img{i}.bn.gamma"), &mut blk.bn.gamma));
            out.push((format!("img{i}.bn.beta"), &mut blk.bn.beta));
        }
        out.push(("fuse.w".into(), &mut self.fuse.w));
        out.push(("fuse.b".into(), &mut self.fuse.b));
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }
}

/// Mean squared error over all elements; returns (loss, grad wrt pred).
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(&pred.shape);
    grad.shape = pred.shape.clone();
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    (loss / n, grad)
}
