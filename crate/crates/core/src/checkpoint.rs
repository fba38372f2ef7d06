//! Trained model checkpoints: backbone, projection head, class centers and
//! the configuration that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, WeightsSource};
use crate::error::{Error, Result};
use crate::metric::ClassCenters;
use crate::store::Container;
use crate::style::{Activation, ProjectionHead, StyleModel};

pub const CHECKPOINT_KIND: &str = "sedd-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    /// Full run configuration the checkpoint was trained with.
    pub run_config: serde_json::Value,
    pub backbone: BackboneConfig,
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    pub normalize_gram: bool,
    /// dataset id → class label, in registration order.
    pub class_labels: Vec<(String, u32)>,
    pub center_lr: f64,
    #[serde(default)]
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StyleModel,
    pub centers: ClassCenters,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(&self.meta)?);
        self.model.backbone.write_tensors(&mut c, "backbone.");
        let head = self.model.head.params().to_vec();
        c.push_f64("head.params", vec![head.len()], head);
        for (label, center) in &self.centers.centers {
            c.push_f64(format!("centers.{label}"), vec![center.len()], center.clone());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Init(format!("checkpoint metadata: {e}")))?;
        // weights come from the container, not from the configured source
        let shell = BackboneConfig {
            weights_source: WeightsSource::Seeded,
            weights_path: None,
            ..meta.backbone.clone()
        };
        let mut backbone = Backbone::from_config(&shell, 0)?;
        backbone.read_tensors(c, "backbone.")?;
        let mut head = ProjectionHead::zeros(&meta.head_widths, meta.activation)?;
        let params = c
            .get("head.params")
            .ok_or_else(|| Error::Init("checkpoint lacks head.params".into()))?
            .data
            .to_f64();
        if params.len() != head.params().len() {
            return Err(Error::Init(format!(
                "head.params has {} values, widths {:?} need {}",
                params.len(),
                meta.head_widths,
                head.params().len()
            )));
        }
        head.params_mut().copy_from_slice(&params);
        let mut centers = BTreeMap::new();
        for t in &c.tensors {
            if let Some(label) = t.name.strip_prefix("centers.") {
                let label: u32 = label
                    .parse()
                    .map_err(|_| Error::Init(format!("bad center tensor name {}", t.name)))?;
                centers.insert(label, t.data.to_f64());
            }
        }
        Ok(Checkpoint {
            model: StyleModel {
                backbone,
                head,
                normalize_gram: meta.normalize_gram,
            },
            centers: ClassCenters {
                centers,
                center_lr: meta.center_lr,
            },
            meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(&c).map_err(|e| Error::Init(format!("{}: {e}", path.display())))
    }
}
