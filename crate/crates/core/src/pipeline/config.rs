use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bim::ObjectKind;
use crate::error::{Error, Result};
use crate::ground::GroundFilterParams;
use crate::instance::GraphParams;
use crate::registration::{CoarseParams, FineParams};
use crate::semantic::DEFAULT_PROPAGATION_K;
use crate::weak_labels::LabelerParams;

pub const DEFAULT_SEED: u64 = 42;

/// Largest horizontal distance between a pairing hint and an instance
/// centroid for the nearest-centroid selector.
pub const DEFAULT_PAIRING_RADIUS: f64 = 5.0;

/// Plan-view reach from an instance's base within which ground points are
/// returned to it for registration.
pub const DEFAULT_BASE_RADIUS: f64 = 0.05;

/// Picks the segmented instance a design model is registered against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Selector {
    /// A 1-based instance id from the segmentation.
    Instance(u32),
    /// The instance of a compatible class whose centroid lies nearest to
    /// this scene position in plan view.
    Near([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub mesh: PathBuf,
    pub kind: ObjectKind,
    pub select: Selector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationParams {
    pub k: usize,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams { k: DEFAULT_PROPAGATION_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    pub coarse: CoarseParams,
    pub fine: FineParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingParams {
    pub radius: f64,
    /// Zero disables base recovery.
    pub base_radius: f64,
}

impl Default for PairingParams {
    fn default() -> Self {
        PairingParams {
            radius: DEFAULT_PAIRING_RADIUS,
            base_radius: DEFAULT_BASE_RADIUS,
        }
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// One pipeline run. Relative paths resolve against the directory of the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub scene: PathBuf,
    /// One class id per scene point.
    #[serde(default)]
    pub truth_labels: Option<PathBuf>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub ground: GroundFilterParams,
    #[serde(default)]
    pub labeler: LabelerParams,
    #[serde(default)]
    pub propagation: PropagationParams,
    #[serde(default)]
    pub graph: GraphParams,
    #[serde(default)]
    pub pairing: PairingParams,
    #[serde(rename = "match", default)]
    pub matching: MatchParams,
}

impl JobConfig {
    pub fn new(scene: impl Into<PathBuf>) -> Self {
        JobConfig {
            scene: scene.into(),
            truth_labels: None,
            objects: Vec::new(),
            output_dir: default_output(),
            seed: DEFAULT_SEED,
            ground: GroundFilterParams::default(),
            labeler: LabelerParams::default(),
            propagation: PropagationParams::default(),
            graph: GraphParams::default(),
            pairing: PairingParams::default(),
            matching: MatchParams::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = JobConfig::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.scene);
        if let Some(t) = self.truth_labels.as_mut() {
            join(t);
        }
        join(&mut self.output_dir);
        for o in &mut self.objects {
            join(&mut o.mesh);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The coarse and fine parameters with the job seed applied.
    pub fn match_params(&self) -> (CoarseParams, FineParams) {
        let mut coarse = self.matching.coarse;
        let mut fine = self.matching.fine;
        coarse.seed = self.seed;
        fine.seed = self.seed;
        (coarse, fine)
    }

    /// Checks every parameter section and that every input file exists,
    /// before any computation.
    pub fn validate(&self) -> Result<()> {
        self.ground.validate()?;
        self.labeler.validate()?;
        self.graph.validate()?;
        let (coarse, fine) = self.match_params();
        coarse.validate()?;
        fine.validate()?;
        if self.propagation.k == 0 {
            return Err(Error::Config("propagation.k must be at least 1".into()));
        }
        if !(self.pairing.radius > 0.0) {
            return Err(Error::Config("pairing.radius must be positive".into()));
        }
        if !(self.pairing.base_radius >= 0.0 && self.pairing.base_radius.is_finite()) {
            return Err(Error::Config("pairing.base_radius must be non-negative".into()));
        }
        let mut names = std::collections::HashSet::new();
        for o in &self.objects {
            if !names.insert(o.name.as_str()) {
                return Err(Error::Config(format!("duplicate object name {:?}", o.name)));
            }
            if o.name.is_empty() || o.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("object name {:?} is not a valid file stem", o.name)));
            }
            if let Selector::Instance(0) = o.select {
                return Err(Error::Config(format!("object {:?}: instance ids start at 1", o.name)));
            }
        }
        let inputs = std::iter::once(("scene", &self.scene))
            .chain(self.truth_labels.iter().map(|p| ("truth_labels", p)))
            .chain(self.objects.iter().map(|o| ("mesh", &o.mesh)));
        for (what, path) in inputs {
            if !path.is_file() {
                return Err(Error::Config(format!("{what} file not found: {}", path.display())));
            }
        }
        Ok(())
    }
}
