//! Declarative run configuration: flat `key = value` text with `#` comments
//! and dotted keys. Every field always serializes, parsing rejects unknown
//! keys, and `parse(serialize(c)) == c` holds exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Recovery,
    GroupSynth,
    Custom,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExperimentKind::Recovery => "recovery",
            ExperimentKind::GroupSynth => "group_synth",
            ExperimentKind::Custom => "custom",
        };
        write!(f, "{}", s)
    }
}

impl FromStr for ExperimentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "recovery" => Ok(ExperimentKind::Recovery),
            "group_synth" => Ok(ExperimentKind::GroupSynth),
            "custom" => Ok(ExperimentKind::Custom),
            other => Err(format!("unknown experiment kind '{}'", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateChoice {
    DselectStatic,
    DselectPerExample,
    TopK,
    Softmax,
    Gumbel,
    AblationAnneal,
    AblationEntropy,
}

impl GateChoice {
    pub const ALL: [GateChoice; 7] = [
        GateChoice::DselectStatic,
        GateChoice::DselectPerExample,
        GateChoice::TopK,
        GateChoice::Softmax,
        GateChoice::Gumbel,
        GateChoice::AblationAnneal,
        GateChoice::AblationEntropy,
    ];
}

impl fmt::Display for GateChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GateChoice::DselectStatic => "dselect_static",
            GateChoice::DselectPerExample => "dselect_per_example",
            GateChoice::TopK => "topk",
            GateChoice::Softmax => "softmax",
            GateChoice::Gumbel => "gumbel",
            GateChoice::AblationAnneal => "ablation_anneal",
            GateChoice::AblationEntropy => "ablation_entropy",
        };
        write!(f, "{}", s)
    }
}

impl FromStr for GateChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dselect_static" => Ok(GateChoice::DselectStatic),
            "dselect_per_example" => Ok(GateChoice::DselectPerExample),
            "topk" => Ok(GateChoice::TopK),
            "softmax" => Ok(GateChoice::Softmax),
            "gumbel" => Ok(GateChoice::Gumbel),
            "ablation_anneal" => Ok(GateChoice::AblationAnneal),
            "ablation_entropy" => Ok(GateChoice::AblationEntropy),
            other => Err(format!("unknown gate kind '{}'", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptChoice {
    Sgd,
    Adam,
    Adagrad,
}

impl fmt::Display for OptChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OptChoice::Sgd => "sgd",
            OptChoice::Adam => "adam",
            OptChoice::Adagrad => "adagrad",
        };
        write!(f, "{}", s)
    }
}

impl FromStr for OptChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptChoice::Sgd),
            "adam" => Ok(OptChoice::Adam),
            "adagrad" => Ok(OptChoice::Adagrad),
            other => Err(format!("unknown optimizer '{}'", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealTarget {
    None,
    Gamma,
    Temperature,
}

impl fmt::Display for AnnealTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnnealTarget::None => "none",
            AnnealTarget::Gamma => "gamma",
            AnnealTarget::Temperature => "temperature",
        };
        write!(f, "{}", s)
    }
}

impl FromStr for AnnealTarget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(AnnealTarget::None),
            "gamma" => Ok(AnnealTarget::Gamma),
            "temperature" => Ok(AnnealTarget::Temperature),
            other => Err(format!("unknown anneal target '{}'", other)),
        }
    }
}

/// Dataset parameters. The recovery experiment uses `p` and `n`; the group
/// synthetic and custom experiments use the group fields and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub p: usize,
    pub n: usize,
    pub groups: usize,
    pub tasks_per_group: usize,
    pub experts_per_group: usize,
    pub units_per_expert: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub corr: f64,
}

/// Annealing applied during training; `steps = 0` spreads the schedule over
/// the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealConfig {
    pub target: AnnealTarget,
    pub end: f64,
    pub steps: usize,
    pub log_spacing: bool,
}

/// Hyperparameter grids for `sweep`; empty lists mean "use the base value".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepConfig {
    pub learning_rate: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
}

/// Full declarative description of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub gate: GateChoice,
    /// Number of experts in the trained model; 0 derives it from the data
    /// generator (groups * experts_per_group).
    pub n_experts: usize,
    pub k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub xi: f64,
    pub temperature: f64,
    pub gate_bias: bool,
    pub task_weight: f64,
    pub optimizer: OptChoice,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub snapshot_cadence: usize,
    pub out_dir: String,
    pub write_dataset: bool,
    pub data: DataConfig,
    pub anneal: AnnealConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::GroupSynth,
            gate: GateChoice::DselectStatic,
            n_experts: 0,
            k: 4,
            gamma: 1.0,
            lambda: 0.01,
            xi: 0.0,
            temperature: 1.0,
            gate_bias: true,
            task_weight: 0.5,
            optimizer: OptChoice::Adam,
            learning_rate: 0.01,
            batch_size: 256,
            epochs: 50,
            patience: 10,
            min_delta: 1e-6,
            seed: 0,
            snapshot_cadence: 50,
            out_dir: "out".into(),
            write_dataset: false,
            data: DataConfig {
                p: 10,
                n: 20_000,
                groups: 2,
                tasks_per_group: 8,
                experts_per_group: 4,
                units_per_expert: 4,
                n_train: 10_000,
                n_val: 2_000,
                n_test: 2_000,
                corr: 0.8,
            },
            anneal: AnnealConfig { target: AnnealTarget::None, end: 1e-3, steps: 0, log_spacing: true },
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the frozen-expert recovery experiment.
    pub fn recovery_default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Recovery,
            n_experts: 16,
            k: 4,
            epochs: 60,
            ..ExperimentConfig::default()
        }
    }

    /// Defaults for the group-structured synthetic regression experiment.
    pub fn group_synth_default() -> Self {
        ExperimentConfig::default()
    }

    /// Number of experts the trained model actually uses.
    pub fn resolved_n_experts(&self) -> usize {
        if self.n_experts > 0 {
            self.n_experts
        } else {
            self.data.groups * self.data.experts_per_group
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |d: String| Err(HarnessError::Config(d));
        let n = self.resolved_n_experts();
        if n < 2 {
            return bad(format!("need at least 2 experts, got {}", n));
        }
        if self.k < 1 || self.k > n {
            return bad(format!("k must satisfy 1 <= k <= {}, got {}", n, self.k));
        }
        if self.gamma <= 0.0 {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.lambda < 0.0 || self.xi < 0.0 {
            return bad("lambda and xi must be non-negative".into());
        }
        if self.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.task_weight) {
            return bad(format!("task_weight must be in [0, 1], got {}", self.task_weight));
        }
        if self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.snapshot_cadence == 0 {
            return bad("batch_size, epochs and snapshot_cadence must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.corr) {
            return bad(format!("data.corr must be in [0, 1), got {}", self.data.corr));
        }
        if self.data.p == 0 || self.data.n < 2 {
            return bad("data.p must be positive and data.n at least 2".into());
        }
        if self.anneal.target != AnnealTarget::None && self.anneal.end <= 0.0 {
            return bad(format!("anneal.end must be positive, got {}", self.anneal.end));
        }
        for (name, grid) in [
            ("sweep.learning_rate", &self.sweep.learning_rate),
            ("sweep.lambda", &self.sweep.lambda),
            ("sweep.gamma", &self.sweep.gamma),
            ("sweep.xi", &self.sweep.xi),
        ] {
            if grid.iter().any(|v| !v.is_finite()) {
                return bad(format!("{} contains a non-finite value", name));
            }
        }
        match self.experiment {
            ExperimentKind::Recovery => {
                if self.data.n < 4 {
                    return bad("recovery data.n too small".into());
                }
            }
            ExperimentKind::GroupSynth | ExperimentKind::Custom => {
                if self.data.groups == 0 || self.data.tasks_per_group == 0 {
                    return bad("group experiments need groups and tasks_per_group".into());
                }
            }
        }
        Ok(())
    }

    /// Canonical flat serialization; every field appears exactly once.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("experiment", self.experiment.to_string());
        kv("gate", self.gate.to_string());
        kv("n_experts", self.n_experts.to_string());
        kv("k", self.k.to_string());
        kv("gamma", fmt_float(self.gamma));
        kv("lambda", fmt_float(self.lambda));
        kv("xi", fmt_float(self.xi));
        kv("temperature", fmt_float(self.temperature));
        kv("gate_bias", self.gate_bias.to_string());
        kv("task_weight", fmt_float(self.task_weight));
        kv("optimizer.kind", self.optimizer.to_string());
        kv("optimizer.learning_rate", fmt_float(self.learning_rate));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("early_stop.patience", self.patience.to_string());
        kv("early_stop.min_delta", fmt_float(self.min_delta));
        kv("seed", self.seed.to_string());
        kv("snapshot_cadence", self.snapshot_cadence.to_string());
        kv("out_dir", self.out_dir.clone());
        kv("write_dataset", self.write_dataset.to_string());
        kv("data.p", self.data.p.to_string());
        kv("data.n", self.data.n.to_string());
        kv("data.groups", self.data.groups.to_string());
        kv("data.tasks_per_group", self.data.tasks_per_group.to_string());
        kv("data.experts_per_group", self.data.experts_per_group.to_string());
        kv("data.units_per_expert", self.data.units_per_expert.to_string());
        kv("data.n_train", self.data.n_train.to_string());
        kv("data.n_val", self.data.n_val.to_string());
        kv("data.n_test", self.data.n_test.to_string());
        kv("data.corr", fmt_float(self.data.corr));
        kv("anneal.target", self.anneal.target.to_string());
        kv("anneal.end", fmt_float(self.anneal.end));
        kv("anneal.steps", self.anneal.steps.to_string());
        kv("anneal.log_spacing", self.anneal.log_spacing.to_string());
        kv("sweep.learning_rate", fmt_list(&self.sweep.learning_rate));
        kv("sweep.lambda", fmt_list(&self.sweep.lambda));
        kv("sweep.gamma", fmt_list(&self.sweep.gamma));
        kv("sweep.xi", fmt_list(&self.sweep.xi));
        out
    }

    /// Parses the flat text format, starting from defaults. Unknown keys and
    /// malformed values are rejected.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                return Err(HarnessError::Config(format!(
                    "line {}: key '{}' already set on line {}",
                    lineno + 1,
                    key,
                    prev
                )));
            }
            cfg.apply(key, value).map_err(|e| {
                HarnessError::Config(format!("line {}: {}", lineno + 1, e))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("bad value '{}': {}", v, e))
        }
        match key {
            "experiment" => self.experiment = p(value)?,
            "gate" => self.gate = p(value)?,
            "n_experts" => self.n_experts = p(value)?,
            "k" => self.k = p(value)?,
            "gamma" => self.gamma = p(value)?,
            "lambda" => self.lambda = p(value)?,
            "xi" => self.xi = p(value)?,
            "temperature" => self.temperature = p(value)?,
            "gate_bias" => self.gate_bias = p(value)?,
            "task_weight" => self.task_weight = p(value)?,
            "optimizer.kind" => self.optimizer = p(value)?,
            "optimizer.learning_rate" => self.learning_rate = p(value)?,
            "batch_size" => self.batch_size = p(value)?,
            "epochs" => self.epochs = p(value)?,
            "early_stop.patience" => self.patience = p(value)?,
            "early_stop.min_delta" => self.min_delta = p(value)?,
            "seed" => self.seed = p(value)?,
            "snapshot_cadence" => self.snapshot_cadence = p(value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "write_dataset" => self.write_dataset = p(value)?,
            "data.p" => self.data.p = p(value)?,
            "data.n" => self.data.n = p(value)?,
            "data.groups" => self.data.groups = p(value)?,
            "data.tasks_per_group" => self.data.tasks_per_group = p(value)?,
            "data.experts_per_group" => self.data.experts_per_group = p(value)?,
            "data.units_per_expert" => self.data.units_per_expert = p(value)?,
            "data.n_train" => self.data.n_train = p(value)?,
            "data.n_val" => self.data.n_val = p(value)?,
            "data.n_test" => self.data.n_test = p(value)?,
            "data.corr" => self.data.corr = p(value)?,
            "anneal.target" => self.anneal.target = p(value)?,
            "anneal.end" => self.anneal.end = p(value)?,
            "anneal.steps" => self.anneal.steps = p(value)?,
            "anneal.log_spacing" => self.anneal.log_spacing = p(value)?,
            "sweep.learning_rate" => self.sweep.learning_rate = parse_list(value)?,
            "sweep.lambda" => self.sweep.lambda = parse_list(value)?,
            "sweep.gamma" => self.sweep.gamma = parse_list(value)?,
            "sweep.xi" => self.sweep.xi = parse_list(value)?,
            other => return Err(format!("unknown key '{}'", other)),
        }
        Ok(())
    }
}

fn fmt_float(v: f64) -> String {
    // The shortest representation that round-trips exactly.
    format!("{}", v)
}

fn fmt_list(vs: &[f64]) -> String {
    if vs.is_empty() {
        "-".to_string()
    } else {
        vs.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(",")
    }
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    if value == "-" || value.is_empty() {
        return Ok(vec![]);
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad list entry '{}': {}", v, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_default_and_modified() {
        let cfg = ExperimentConfig::default();
        let text = cfg.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);

        let mut cfg = ExperimentConfig::recovery_default();
        cfg.gate = GateChoice::TopK;
        cfg.lambda = 0.125;
        cfg.seed = 424242;
        cfg.sweep.lambda = vec![0.001, 0.01, 0.1, 1.0];
        cfg.anneal.target = AnnealTarget::Gamma;
        cfg.anneal.end = 1e-4;
        cfg.out_dir = "runs/exp1".into();
        let parsed = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn comments_and_whitespace_are_ignored() {
        let text = "\n# a comment\n  experiment = recovery   # trailing\n\nk = 2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Recovery);
        assert_eq!(cfg.k, 2);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("frobnicate = 3\n"),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("k = 2\nk = 3\n"),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("k = banana\n"),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        for bad in [
            "gamma = 0",
            "gamma = -1",
            "k = 0",
            "k = 99",
            "task_weight = 1.5",
            "optimizer.learning_rate = 0",
            "data.corr = 1.0",
            "temperature = -2",
            "epochs = 0",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(&format!("{}\n", bad)), Err(HarnessError::Config(_))),
                "'{}' should be rejected",
                bad
            );
        }
    }

    #[test]
    fn gate_and_experiment_names_cover_all_variants() {
        for g in GateChoice::ALL {
            assert_eq!(g.to_string().parse::<GateChoice>().unwrap(), g);
        }
        for e in ["recovery", "group_synth", "custom"] {
            let k: ExperimentKind = e.parse().unwrap();
            assert_eq!(k.to_string(), e);
        }
    }
}
