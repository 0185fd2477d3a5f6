//! Training configuration as seen from the command line. Layers, lowest
//! precedence first: built-in default, preset, JSON config file, flags.

use std::path::PathBuf;

use clap::Args;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::Head;
use crate::training::{EpochSizes, OptimizerKind, TrainConfig, PRESETS};

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Starting point: paper, desk, best or table-s1-row1..6.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// JSON file merged over the preset; may be partial.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any field by its dotted path, e.g. `sampler.positive_fraction=0.7`.
    /// The value is parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Also selects the matching head (dice: sigmoid, otherwise softmax)
    /// unless `--head` is given.
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// sigmoid or softmax.
    #[arg(long, value_parser = parse_head)]
    pub head: Option<Head>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Patches per epoch for sagittal, coronal and axial.
    #[arg(long, value_delimiter = ',', value_name = "S,C,A")]
    pub epoch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Disable the learning-rate step.
    #[arg(long)]
    pub no_lr_step: bool,
    /// Disable data augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

pub fn parse_head(s: &str) -> Result<Head> {
    match s {
        "sigmoid" | "sigmoid-1ch" => Ok(Head::Sigmoid),
        "softmax" | "softmax-2ch" => Ok(Head::Softmax),
        other => Err(Error::InvalidArgument(format!("unknown head '{other}' (sigmoid, softmax)"))),
    }
}

/// Recursively merges `overlay` into `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("checked"),
            _ => return Err(Error::InvalidArgument(format!("--set: unknown config field '{key}'"))),
        };
    }
    *slot = value;
    Ok(())
}

/// Resolves the layered configuration. Returns it validated, together with
/// a description of every layer that contributed.
pub fn resolve(args: &ConfigArgs) -> Result<(TrainConfig, Vec<String>)> {
    if !PRESETS.contains(&args.preset.as_str()) {
        return Err(Error::InvalidArgument(format!(
            "unknown preset '{}' (expected one of {})",
            args.preset,
            PRESETS.join(", ")
        )));
    }
    let mut sources = vec!["built-in defaults".to_string(), format!("preset {}", args.preset)];
    let mut value = serde_json::to_value(TrainConfig::preset(&args.preset)?)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text)?;
        if !overlay.is_object() {
            return Err(Error::InvalidArgument(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut value, overlay);
        sources.push(format!("config file {}", path.display()));
    }
    for s in &args.set {
        set_path(&mut value, s)?;
        sources.push(format!("--set {s}"));
    }
    let mut c: TrainConfig = serde_json::from_value(value)
        .map_err(|e| Error::InvalidArgument(format!("invalid training configuration: {e}")))?;

    let mut flag = |name: &str| sources.push(format!("--{name}"));
    if let Some(o) = args.optimizer {
        c.optimizer = o;
        flag("optimizer");
    }
    if let Some(lr) = args.lr {
        c.initial_lr = lr;
        flag("lr");
    }
    if let Some(loss) = args.loss {
        c.loss = loss;
        c.network.head = if loss == LossKind::Dice { Head::Sigmoid } else { Head::Softmax };
        flag("loss");
    }
    if let Some(head) = args.head {
        c.network.head = head;
        flag("head");
    }
    if let Some(n) = args.max_epochs {
        c.max_epochs = n;
        flag("max-epochs");
    }
    if let Some(n) = args.patience {
        c.patience = n;
        flag("patience");
    }
    if let Some(n) = args.batch_size {
        c.batch_size = n;
        flag("batch-size");
    }
    if let Some(sizes) = &args.epoch_sizes {
        if sizes.len() != 3 {
            return Err(Error::InvalidArgument(format!("--epoch-sizes takes three values, got {}", sizes.len())));
        }
        c.sampler.epoch_sizes = EpochSizes { sagittal: sizes[0], coronal: sizes[1], axial: sizes[2] };
        flag("epoch-sizes");
    }
    if let Some(seed) = args.seed {
        c.seed = seed;
        flag("seed");
    }
    if let Some(n) = args.base_width {
        c.network.base_width = n;
        flag("base-width");
    }
    if let Some(n) = args.depth {
        c.network.depth = n;
        flag("depth");
    }
    if args.no_lr_step {
        c.lr_step = None;
        flag("no-lr-step");
    }
    if args.no_augment {
        c.sampler.augment.enabled = false;
        flag("no-augment");
    }
    c.validate()?;
    Ok((c, sources))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn args(preset: &str) -> ConfigArgs {
        ConfigArgs { preset: preset.into(), ..Default::default() }
    }

    #[test]
    fn best_preset() {
        let (c, _) = resolve(&args("best")).unwrap();
        assert_eq!((c.optimizer, c.initial_lr, c.loss), (OptimizerKind::Radam, 0.001, LossKind::Boundary));
    }

    #[test]
    fn flags_give_first_hyperparameter_row() {
        let a = ConfigArgs { loss: Some(LossKind::Dice), optimizer: Some(OptimizerKind::Sgd), lr: Some(0.005), ..args("desk") };
        let (c, sources) = resolve(&a).unwrap();
        let row1 = TrainConfig::table_s1(1).unwrap();
        assert_eq!(c, row1);
        assert!(sources.contains(&"--lr".to_string()));
    }

    #[test]
    fn precedence_flag_over_file_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, json!({"patience": 7, "max_epochs": 40, "sampler": {"positive_fraction": 0.7}}).to_string())
            .unwrap();
        let a = ConfigArgs { config: Some(file), patience: Some(9), ..args("desk") };
        let (c, sources) = resolve(&a).unwrap();
        assert_eq!(c.patience, 9);
        assert_eq!(c.max_epochs, 40);
        assert_eq!(c.sampler.positive_fraction, 0.7);
        // untouched nested siblings survive the merge
        assert_eq!(c.sampler.patch_size, TrainConfig::desk().sampler.patch_size);
        assert_eq!(sources.len(), 4);
    }

    #[test]
    fn set_paths() {
        let a = ConfigArgs {
            set: vec!["sampler.epoch_sizes.axial=12".into(), "network.head=sigmoid-1ch".into(), "loss=dice".into()],
            ..args("desk")
        };
        let (c, _) = resolve(&a).unwrap();
        assert_eq!(c.sampler.epoch_sizes.axial, 12);
        assert_eq!(c.network.head, Head::Sigmoid);
        let bad = ConfigArgs { set: vec!["sampler.nope=1".into()], ..args("desk") };
        assert!(resolve(&bad).is_err());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(resolve(&args("nope")).is_err());
        let a = ConfigArgs { head: Some(Head::Sigmoid), ..args("desk") };
        assert!(resolve(&a).is_err(), "boundary loss needs the softmax head");
        let a = ConfigArgs { patience: Some(60), ..args("desk") };
        assert!(resolve(&a).is_err());
    }
}
