//! Run configuration: a flat key-value TOML document mirroring RunConfig.
//! Every key has a desk-scale default, so an empty file is a valid config.

use serde::Deserialize;

use crate::backbone::{
    BackboneConfig, BlockConfig, LayerConfig, OperatorKind, DIFFUSION_OFFSETS,
};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::partition::WindowShape;
use crate::scene::SceneSpec;
use crate::voxel::VoxelGrid;

/// Channels of a voxelized point row: intensity plus the xyz offsets from
/// the voxel center.
pub const RAW_POINT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Availability {
    pub lidar: bool,
    pub camera: bool,
    pub temporal: bool,
}

impl Availability {
    pub fn tag(&self) -> String {
        let mut s = String::new();
        if self.lidar {
            s.push('L');
        }
        if self.camera {
            s.push('C');
        }
        if self.temporal {
            s.push('T');
        }
        s
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: String,
    pub operator: String,
    pub lidar: bool,
    pub camera: bool,
    pub temporal: bool,

    pub grid_origin: [f64; 3],
    pub grid_voxel_size: [f64; 3],
    pub grid_extent: [u32; 3],

    pub channels: usize,
    pub blocks: usize,
    pub window_x: Vec<u32>,
    pub window_y: Vec<u32>,
    pub window_z: Vec<u32>,
    pub group_sizes: Vec<usize>,
    pub foreground_ratio: f64,
    pub map_classes: usize,
    pub top_k: usize,

    pub scene_frames: usize,
    pub scene_boxes: usize,
    pub scene_points_per_box: usize,
    pub scene_ground_points: usize,
    pub scene_cameras: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub scene_noise: f64,
    pub scene_area: f64,
    pub ego_speed: f64,
    pub frame_dt: f64,

    pub train_steps: usize,
    pub learning_rate: f64,
    pub loss_weights: [f64; 5],
    /// Heads active in training: subset of det, occ, map, mot, plan.
    pub train_tasks: Vec<String>,

    pub bench_lengths: Vec<usize>,
    pub bench_channels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: "f64".into(),
            operator: "selective".into(),
            lidar: true,
            camera: true,
            temporal: true,
            grid_origin: [-7.2, -7.2, -0.5],
            grid_voxel_size: [0.3, 0.3, 0.25],
            grid_extent: [48, 48, 32],
            channels: 16,
            blocks: 4,
            window_x: vec![13, 13, 13, 13],
            window_y: vec![13, 13, 13, 13],
            window_z: vec![32, 16, 8, 4],
            group_sizes: vec![4096, 2048, 1024, 512],
            foreground_ratio: 0.2,
            map_classes: 4,
            top_k: 4,
            scene_frames: 4,
            scene_boxes: 3,
            scene_points_per_box: 250,
            scene_ground_points: 400,
            scene_cameras: 2,
            image_h: 6,
            image_w: 8,
            depth_bins: 48,
            depth_min: 1.0,
            depth_max: 60.0,
            scene_noise: 0.0,
            scene_area: 7.0,
            ego_speed: 2.0,
            frame_dt: 0.5,
            train_steps: 200,
            learning_rate: 0.05,
            loss_weights: [1.0, 0.5, 1.0, 1.0, 1.0],
            train_tasks: vec!["det".into(), "occ".into()],
            bench_lengths: vec![1024, 2048, 4096],
            bench_channels: 16,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != "f64" {
            return Err(Error::InvalidConfig(format!(
                "precision '{}' unsupported; this build computes in f64",
                self.precision
            )));
        }
        self.operator_kind()?;
        if !(self.lidar || self.camera || self.temporal) {
            return Err(Error::InvalidConfig("at least one modality must be enabled".into()));
        }
        if !self.lidar && !self.camera {
            return Err(Error::InvalidConfig(
                "temporal-only runs need a live modality to fuse".into(),
            ));
        }
        for v in [&self.window_x, &self.window_y, &self.window_z] {
            if v.len() != self.blocks {
                return Err(Error::InvalidConfig(format!(
                    "window lists must have one entry per block ({} != {})",
                    v.len(),
                    self.blocks
                )));
            }
        }
        if self.group_sizes.len() != self.blocks {
            return Err(Error::InvalidConfig(
                "group_sizes must have one entry per block".into(),
            ));
        }
        if !(self.foreground_ratio > 0.0 && self.foreground_ratio <= 1.0) {
            return Err(Error::InvalidConfig("foreground_ratio must be in (0, 1]".into()));
        }
        if self.top_k < 1 || self.top_k > self.depth_bins {
            return Err(Error::InvalidConfig("top_k must be in [1, depth_bins]".into()));
        }
        if self.channels < 1 {
            return Err(Error::InvalidConfig("channels must be >= 1".into()));
        }
        for t in &self.train_tasks {
            if !["det", "occ", "map", "mot", "plan"].contains(&t.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown train task '{t}'")));
            }
        }
        self.grid()?;
        self.backbone_config()?.validate()
    }

    pub fn operator_kind(&self) -> Result<OperatorKind> {
        match self.operator.as_str() {
            "selective" => Ok(OperatorKind::Selective),
            "wkv" => Ok(OperatorKind::Wkv),
            other => Err(Error::InvalidConfig(format!(
                "operator '{other}' is not one of selective | wkv"
            ))),
        }
    }

    pub fn availability(&self) -> Availability {
        Availability {
            lidar: self.lidar,
            camera: self.camera,
            temporal: self.temporal,
        }
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::new(self.grid_origin, self.grid_voxel_size, self.grid_extent)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let operator = self.operator_kind()?;
        let mut blocks = Vec::new();
        for b in 0..self.blocks {
            let window = WindowShape::new(self.window_x[b], self.window_y[b], self.window_z[b])?;
            blocks.push(BlockConfig::uniform(LayerConfig {
                window,
                group_size: self.group_sizes[b],
                operator,
                channels: self.channels,
            }));
        }
        Ok(BackboneConfig {
            channels: self.channels,
            blocks,
            height_merge_stride: [1, 1, 2],
            foreground_ratio: self.foreground_ratio,
            diffusion_offsets: DIFFUSION_OFFSETS.to_vec(),
        })
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        Ok(ModelDims {
            raw_channels: RAW_POINT_CHANNELS,
            channels: self.channels,
            blocks: self.blocks,
            operator: self.operator_kind()?,
            map_classes: self.map_classes,
        })
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            frames: self.scene_frames,
            boxes: self.scene_boxes,
            points_per_box: self.scene_points_per_box,
            ground_points: self.scene_ground_points,
            cameras: self.scene_cameras,
            image_h: self.image_h,
            image_w: self.image_w,
            depth_bins: self.depth_bins,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            channels: self.channels,
            ego_speed: self.ego_speed,
            frame_dt: self.frame_dt,
            noise: self.scene_noise,
            area: self.scene_area,
        }
    }
}
