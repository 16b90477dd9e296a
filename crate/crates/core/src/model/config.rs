use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::kv::KvMap;
use crate::normbank::{CombinationScheme, DEFAULT_EPS, DEFAULT_MOMENTUM, MAX_DOMAINS};

/// How classifier heads are shared between the main path and the bank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassifierMode {
    /// One head for the main path and one per bank unit.
    #[default]
    Independent,
    /// A single head shared by the main path and every sub-path.
    SharedOne,
    /// One main head plus one head shared by all sub-paths.
    SharedTwo,
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Independent => "independent",
            Self::SharedOne => "shared_one",
            Self::SharedTwo => "shared_two",
        })
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "shared_one" => Ok(Self::SharedOne),
            "shared_two" => Ok(Self::SharedTwo),
            _ => invalid(format!("unknown classifier mode {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Backbone {
    /// Linear -> norm -> ReLU blocks.
    #[default]
    Mlp,
    /// 3x3 conv -> norm -> ReLU blocks over the input reshaped to a square
    /// single-channel image, then global average pooling.
    SmallConv,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::SmallConv => "smallconv",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "smallconv" => Ok(Self::SmallConv),
            _ => invalid(format!("unknown backbone {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the normalized hidden blocks; the last one is the feature width.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub domains: usize,
    pub use_on: bool,
    pub use_aug: bool,
    pub classifier_mode: ClassifierMode,
    pub backbone: Backbone,
    pub scheme: CombinationScheme,
    pub eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64, 64, 32],
            classes: 5,
            domains: 3,
            use_on: true,
            use_aug: true,
            classifier_mode: ClassifierMode::Independent,
            backbone: Backbone::Mlp,
            scheme: CombinationScheme::Reduced,
            eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "input_dim",
    "hidden",
    "classes",
    "domains",
    "use_on",
    "use_aug",
    "classifier_mode",
    "backbone",
    "scheme",
    "eps",
    "bn_momentum",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 || self.domains > MAX_DOMAINS {
            return invalid(format!("domains must be in 2..={MAX_DOMAINS}, got {}", self.domains));
        }
        if self.classes < 2 {
            return invalid(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.input_dim == 0 {
            return invalid("input_dim must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return invalid(format!("hidden sizes must be positive, got {:?}", self.hidden));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return invalid("eps must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return invalid("bn_momentum must be in (0, 1]");
        }
        if self.backbone == Backbone::SmallConv && self.image_side().is_none() {
            return invalid(format!(
                "smallconv backbone needs a square input_dim, got {}",
                self.input_dim
            ));
        }
        if self.use_on && self.backbone == Backbone::Mlp && self.hidden.contains(&1) {
            return Err(Error::InstanceNormSingleFeature);
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated hidden sizes")
    }

    pub(crate) fn image_side(&self) -> Option<usize> {
        let s = (self.input_dim as f64).sqrt().round() as usize;
        (s * s == self.input_dim).then_some(s)
    }

    /// Overrides fields from any model keys present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parsed("input_dim")? {
            self.input_dim = v;
        }
        if let Some(v) = kv.list("hidden")? {
            self.hidden = v;
        }
        if let Some(v) = kv.parsed("classes")? {
            self.classes = v;
        }
        if let Some(v) = kv.parsed("domains")? {
            self.domains = v;
        }
        if let Some(v) = kv.parsed("use_on")? {
            self.use_on = v;
        }
        if let Some(v) = kv.parsed("use_aug")? {
            self.use_aug = v;
        }
        if let Some(v) = kv.parsed("classifier_mode")? {
            self.classifier_mode = v;
        }
        if let Some(v) = kv.parsed("backbone")? {
            self.backbone = v;
        }
        if let Some(v) = kv.parsed("scheme")? {
            self.scheme = v;
        }
        if let Some(v) = kv.parsed("eps")? {
            self.eps = v;
        }
        if let Some(v) = kv.parsed("bn_momentum")? {
            self.bn_momentum = v;
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        kv.set("input_dim", self.input_dim);
        kv.set("hidden", hidden.join(","));
        kv.set("classes", self.classes);
        kv.set("domains", self.domains);
        kv.set("use_on", self.use_on);
        kv.set("use_aug", self.use_aug);
        kv.set("classifier_mode", self.classifier_mode);
        kv.set("backbone", self.backbone);
        kv.set("scheme", self.scheme);
        kv.set("eps", self.eps);
        kv.set("bn_momentum", self.bn_momentum);
    }
}
