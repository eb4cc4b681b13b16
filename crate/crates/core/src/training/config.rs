//! Flat `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. A single
//! file may carry network keys and training keys side by side. Every key must
//! be known and may appear once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::TrainConfig;
use crate::blocks::{BlockVariant, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, ActivationKind};

/// Parsed `key = value` pairs in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|(line, v)| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("line {line}: bad value '{v}' for '{key}': {e}")))
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.entries
            .get(key)
            .map(|(line, v)| {
                v.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Config(format!("line {line}: bad list '{v}' for '{key}': {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Rejects any key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {line}: unknown key '{k}'")));
            }
        }
        Ok(())
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

#[derive(Debug, Clone, Copy)]
struct Flag(bool);

impl FromStr for Flag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_bool(s).map(Flag)
    }
}

pub const NETWORK_KEYS: &[&str] = &[
    "preset",
    "variant",
    "in_channels",
    "stem_channels",
    "stage_depths",
    "stage_channels",
    "expansion",
    "weight_shared",
    "num_classes",
    "activation",
    "activation_radius",
    "hardtanh_min",
    "hardtanh_max",
    "activation_placement",
    "activation_position",
    "batchnorm",
    "image_size",
    "stem_stride",
    "padding",
];

pub const TRAIN_KEYS: &[&str] = &[
    "peak_lr",
    "warmup_epochs",
    "total_epochs",
    "batch_size",
    "momentum",
    "weight_decay",
    "seed",
    "backoff_factor",
    "max_backoffs",
    "clip_activation_placement",
    "augment_flip",
];

/// Network configuration from `kv`. `preset` (`desk` or `full`, default
/// `desk`) supplies every key that is absent.
pub fn network_from_kv(kv: &KvFile) -> Result<NetworkConfig> {
    let variant: BlockVariant = kv.value("variant")?.unwrap_or(BlockVariant::Eq3);
    let mut c = match kv.get("preset").unwrap_or("desk") {
        "desk" => NetworkConfig::desk(variant),
        "full" => NetworkConfig::full(variant),
        other => return Err(Error::Config(format!("unknown preset '{other}' (desk or full)"))),
    };
    macro_rules! set {
        ($field:ident, $key:literal) => {
            if let Some(v) = kv.value($key)? {
                c.$field = v;
            }
        };
    }
    set!(in_channels, "in_channels");
    set!(stem_channels, "stem_channels");
    set!(expansion, "expansion");
    set!(num_classes, "num_classes");
    set!(activation_placement, "activation_placement");
    set!(activation_position, "activation_position");
    set!(image_size, "image_size");
    set!(stem_stride, "stem_stride");
    set!(padding, "padding");
    if let Some(v) = kv.list("stage_depths")? {
        c.stage_depths = v;
    }
    if let Some(v) = kv.list("stage_channels")? {
        c.stage_channels = v;
    }
    if let Some(Flag(b)) = kv.value("weight_shared")? {
        c.weight_shared = b;
    }
    if let Some(Flag(b)) = kv.value("batchnorm")? {
        c.batchnorm = b;
    }
    if let Some(kind) = kv.value::<ActivationKind>("activation")? {
        c.activation = Activation::new(kind);
    }
    match kv.get("activation_radius") {
        None | Some("auto") => {}
        Some(_) => c.activation.radius = kv.value("activation_radius")?,
    }
    if let Some(v) = kv.value("hardtanh_min")? {
        c.activation.min_val = v;
    }
    if let Some(v) = kv.value("hardtanh_max")? {
        c.activation.max_val = v;
    }
    c.validate()?;
    Ok(c)
}

/// Every network key, so that [`network_from_kv`] restores `c` exactly.
pub fn network_to_kv(c: &NetworkConfig) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let _ = writeln!(s, "variant = {}", c.variant);
    let _ = writeln!(s, "in_channels = {}", c.in_channels);
    let _ = writeln!(s, "stem_channels = {}", c.stem_channels);
    let _ = writeln!(s, "stage_depths = {}", join(&c.stage_depths));
    let _ = writeln!(s, "stage_channels = {}", join(&c.stage_channels));
    let _ = writeln!(s, "expansion = {}", c.expansion);
    let _ = writeln!(s, "weight_shared = {}", c.weight_shared);
    let _ = writeln!(s, "num_classes = {}", c.num_classes);
    let _ = writeln!(s, "activation = {}", c.activation.kind.name());
    match c.activation.radius {
        // `{:?}` prints the shortest representation that parses back exactly.
        Some(r) => {
            let _ = writeln!(s, "activation_radius = {r:?}");
        }
        None => {
            let _ = writeln!(s, "activation_radius = auto");
        }
    }
    let _ = writeln!(s, "hardtanh_min = {:?}", c.activation.min_val);
    let _ = writeln!(s, "hardtanh_max = {:?}", c.activation.max_val);
    let _ = writeln!(s, "activation_placement = {}", c.activation_placement);
    let _ = writeln!(s, "activation_position = {}", c.activation_position);
    let _ = writeln!(s, "batchnorm = {}", c.batchnorm);
    let _ = writeln!(s, "image_size = {}", c.image_size);
    let _ = writeln!(s, "stem_stride = {}", c.stem_stride);
    let _ = writeln!(s, "padding = {}", c.padding);
    s
}

/// Training configuration from `kv`; absent keys take [`TrainConfig::default`].
pub fn train_from_kv(kv: &KvFile) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = kv.value(stringify!($field))? {
                c.$field = v;
            }
        };
    }
    set!(peak_lr);
    set!(warmup_epochs);
    set!(total_epochs);
    set!(batch_size);
    set!(momentum);
    set!(weight_decay);
    set!(seed);
    set!(backoff_factor);
    set!(max_backoffs);
    if let Some(v) = kv.value("clip_activation_placement")? {
        c.clip_activation_placement = Some(v);
    }
    if let Some(Flag(b)) = kv.value("augment_flip")? {
        c.augment_flip = b;
    }
    c.validate()?;
    Ok(c)
}

/// Network and training settings read from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The training file's `clip_activation_placement`, when given, overrides
    /// the network's `activation_placement`.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let known: Vec<&str> = NETWORK_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
        kv.check_known(&known)?;
        let mut network = network_from_kv(&kv)?;
        let train = train_from_kv(&kv)?;
        if let Some(p) = train.clip_activation_placement {
            network.activation_placement = p;
        }
        Ok(RunConfig { network, train })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ActivationPlacement;
    use crate::nn::PaddingMode;

    #[test]
    fn comments_blanks_and_whitespace() {
        let kv = KvFile::parse("# header\n\n  variant =  eq5  # trailing\nseed=3\n").unwrap();
        assert_eq!(kv.get("variant"), Some("eq5"));
        assert_eq!(kv.get("seed"), Some("3"));
        assert_eq!(kv.keys().count(), 2);
    }

    #[test]
    fn duplicates_unknowns_and_garbage_are_rejected() {
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
        assert!(KvFile::parse("just words\n").is_err());
        assert!(RunConfig::parse("variant = eq3\nlearning_rate = 1\n").is_err());
        assert!(RunConfig::parse("stage_depths = 1,x\n").is_err());
        assert!(RunConfig::parse("peak_lr = -1\n").is_err());
    }

    #[test]
    fn network_round_trip() {
        let mut c = NetworkConfig::desk(BlockVariant::Eq6);
        c.stage_depths = vec![1, 3];
        c.stage_channels = vec![8, 12];
        c.activation = Activation::hardball(Some(0.1 + 0.2));
        c.padding = PaddingMode::NeumannReflect;
        c.activation_placement = ActivationPlacement::AllBlocks;
        c.weight_shared = false;
        let back = network_from_kv(&KvFile::parse(&network_to_kv(&c)).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn full_preset_and_overrides() {
        let r = RunConfig::parse("preset = full\nvariant = eq4\npeak_lr = 0.2\nclip_activation_placement = all\n").unwrap();
        assert_eq!(r.network.stage_depths, vec![3, 4, 6, 3]);
        assert_eq!(r.network.variant, BlockVariant::Eq4);
        assert_eq!(r.network.activation_placement, ActivationPlacement::AllBlocks);
        assert_eq!(r.train.peak_lr, 0.2);
    }
}
