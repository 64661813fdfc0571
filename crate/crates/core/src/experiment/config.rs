//! Experiment configuration: a TOML file whose tables flatten to dotted
//! keys (`attack.method`, `local.lr`, ...). Validation reports every
//! offending key at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::{AttackConfig, AttackMethod, XiReference};
use crate::data::PatchSpec;
use crate::defense::{AggregationRule, ClipMode, DefenseSpec, PostHoc};
use crate::error::{Error, Result};
use crate::fl::LocalConfig;
use crate::pfl::{StrategyKind, StrategySpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DatasetSource {
    ShapeSet,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub per_class: usize,
    pub noise: f32,
    pub contrast: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationConfig {
    pub clients: usize,
    pub compromised: usize,
    pub fraction: f64,
    pub rounds: u64,
    pub dirichlet_alpha: f64,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Evaluate every `cadence` rounds; the final round is always evaluated.
    pub cadence: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a global checkpoint every k rounds (0 = final only).
    pub checkpoint_every: u64,
    /// Record real wall-clock times (breaks byte-identical reruns).
    pub wall_time: bool,
    /// Worker threads (0 = rayon default).
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub population: PopulationConfig,
    pub local: LocalConfig,
    pub strategy: StrategySpec,
    pub attack: AttackConfig,
    pub defense: DefenseSpec,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale pipeline.
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: DatasetConfig {
                source: DatasetSource::ShapeSet,
                classes: 5,
                channels: 1,
                size: 16,
                per_class: 600,
                noise: 0.3,
                contrast: 0.2,
            },
            population: PopulationConfig {
                clients: 20,
                compromised: 2,
                fraction: 0.2,
                rounds: 100,
                dirichlet_alpha: 0.5,
                train_fraction: 0.8,
            },
            local: LocalConfig::default(),
            strategy: StrategySpec::default(),
            // budgets scaled to the ShapeSet class margin (contrast / 2)
            attack: AttackConfig { epsilon: 0.125, sigma: 0.0625, ..AttackConfig::default() },
            defense: DefenseSpec::default(),
            eval: EvalConfig { cadence: 0 },
            output: OutputConfig { dir: PathBuf::from("out"), checkpoint_every: 0, wall_time: false, threads: 0 },
        }
    }
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset.source",
    "dataset.path",
    "dataset.classes",
    "dataset.channels",
    "dataset.size",
    "dataset.per_class",
    "dataset.noise",
    "dataset.contrast",
    "population.clients",
    "population.compromised",
    "population.fraction",
    "population.rounds",
    "population.dirichlet_alpha",
    "population.train_fraction",
    "local.steps",
    "local.lr",
    "local.batch_size",
    "strategy.kind",
    "strategy.lambda",
    "strategy.finetune_steps",
    "strategy.head_steps",
    "strategy.body_steps",
    "attack.method",
    "attack.target",
    "attack.alpha",
    "attack.epsilon",
    "attack.sigma",
    "attack.generator_steps",
    "attack.generator_lr",
    "attack.generator_batch",
    "attack.generator_width",
    "attack.generator_depth",
    "attack.modrep_gamma",
    "attack.pgd_rho",
    "attack.neurotoxin_ratio",
    "attack.patch_top",
    "attack.patch_left",
    "attack.patch_size",
    "attack.patch_value",
    "attack.use_delta",
    "attack.use_xi",
    "attack.xi_reference",
    "defense.rule",
    "defense.clip_threshold",
    "defense.clip_mode",
    "defense.krum_f",
    "defense.krum_select",
    "defense.sign_step",
    "defense.posthoc",
    "defense.posthoc_steps",
    "eval.cadence",
    "output.dir",
    "output.checkpoint_every",
    "output.wall_time",
    "output.threads",
];

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Pulls typed values out of the flat map, collecting every problem.
struct Reader {
    map: BTreeMap<String, toml::Value>,
    errors: Vec<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.map.remove(key)
    }

    fn fail(&mut self, key: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{key}: {msg}"));
    }

    fn uint<T: TryFrom<i64>>(&mut self, key: &str, slot: &mut T) {
        match self.take(key) {
            None => {}
            Some(toml::Value::Integer(i)) => match T::try_from(i) {
                Ok(v) if i >= 0 => *slot = v,
                _ => self.fail(key, format!("expected a non-negative integer, got {i}")),
            },
            Some(v) => self.fail(key, format!("expected an integer, got {}", v.type_str())),
        }
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        match self.take(key)? {
            toml::Value::Float(f) => Some(f),
            toml::Value::Integer(i) => Some(i as f64),
            v => {
                self.fail(key, format!("expected a number, got {}", v.type_str()));
                None
            }
        }
    }

    fn f64(&mut self, key: &str, slot: &mut f64) {
        if let Some(v) = self.float(key) {
            *slot = v;
        }
    }

    fn f32(&mut self, key: &str, slot: &mut f32) {
        if let Some(v) = self.float(key) {
            *slot = v as f32;
        }
    }

    fn bool(&mut self, key: &str, slot: &mut bool) {
        match self.take(key) {
            None => {}
            Some(toml::Value::Boolean(b)) => *slot = b,
            Some(v) => self.fail(key, format!("expected true or false, got {}", v.type_str())),
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.take(key)? {
            toml::Value::String(s) => Some(s),
            v => {
                self.fail(key, format!("expected a string, got {}", v.type_str()));
                None
            }
        }
    }

    fn choice<T: Copy>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>, allowed: &[&str]) {
        if let Some(s) = self.string(key) {
            match parse(&s) {
                Some(v) => *slot = v,
                None => self.fail(key, format!("unknown value `{s}` (expected one of: {})", allowed.join(", "))),
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        Self::from_flat(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml_str(&text)
    }

    /// Builds a config from dotted keys on top of the desk defaults.
    pub fn from_flat(map: BTreeMap<String, toml::Value>) -> Result<Self> {
        let mut c = Self::default();
        let mut r = Reader { map, errors: Vec::new() };

        r.uint("seed", &mut c.seed);

        let d = &mut c.dataset;
        let source = r.string("dataset.source");
        let path = r.string("dataset.path");
        match (source.as_deref(), path) {
            (None | Some("shapeset"), None) => {}
            (None | Some("file"), Some(p)) => d.source = DatasetSource::File(PathBuf::from(p)),
            (Some("file"), None) => r.fail("dataset.path", "required when dataset.source = \"file\""),
            (Some("shapeset"), Some(_)) => r.fail("dataset.path", "only valid with dataset.source = \"file\""),
            (Some(s), _) => r.fail("dataset.source", format!("unknown value `{s}` (expected shapeset or file)")),
        }
        r.uint("dataset.classes", &mut d.classes);
        r.uint("dataset.channels", &mut d.channels);
        r.uint("dataset.size", &mut d.size);
        r.uint("dataset.per_class", &mut d.per_class);
        r.f32("dataset.noise", &mut d.noise);
        r.f32("dataset.contrast", &mut d.contrast);

        let p = &mut c.population;
        r.uint("population.clients", &mut p.clients);
        r.uint("population.compromised", &mut p.compromised);
        r.f64("population.fraction", &mut p.fraction);
        r.uint("population.rounds", &mut p.rounds);
        r.f64("population.dirichlet_alpha", &mut p.dirichlet_alpha);
        r.f64("population.train_fraction", &mut p.train_fraction);

        r.uint("local.steps", &mut c.local.steps);
        r.f32("local.lr", &mut c.local.lr);
        r.uint("local.batch_size", &mut c.local.batch_size);

        let s = &mut c.strategy;
        let kinds: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        r.choice("strategy.kind", &mut s.kind, StrategyKind::parse, &kinds);
        r.f32("strategy.lambda", &mut s.lambda);
        r.uint("strategy.finetune_steps", &mut s.finetune_steps);
        r.uint("strategy.head_steps", &mut s.head_steps);
        r.uint("strategy.body_steps", &mut s.body_steps);

        let a = &mut c.attack;
        let methods: Vec<&str> = AttackMethod::ALL.iter().map(|k| k.name()).collect();
        r.choice("attack.method", &mut a.method, AttackMethod::parse, &methods);
        r.uint("attack.target", &mut a.target);
        r.f32("attack.alpha", &mut a.alpha);
        r.f32("attack.epsilon", &mut a.epsilon);
        r.f32("attack.sigma", &mut a.sigma);
        r.uint("attack.generator_steps", &mut a.generator_steps);
        r.f32("attack.generator_lr", &mut a.generator_lr);
        r.uint("attack.generator_batch", &mut a.generator_batch);
        r.uint("attack.generator_width", &mut a.generator_width);
        r.uint("attack.generator_depth", &mut a.generator_depth);
        r.f32("attack.modrep_gamma", &mut a.modrep_gamma);
        r.f32("attack.pgd_rho", &mut a.pgd_rho);
        r.f32("attack.neurotoxin_ratio", &mut a.neurotoxin_ratio);
        let mut patch_size = a.patch.height;
        r.uint("attack.patch_top", &mut a.patch.top);
        r.uint("attack.patch_left", &mut a.patch.left);
        r.uint("attack.patch_size", &mut patch_size);
        r.f32("attack.patch_value", &mut a.patch.value);
        a.patch = PatchSpec { height: patch_size, width: patch_size, ..a.patch };
        r.bool("attack.use_delta", &mut a.use_delta);
        r.bool("attack.use_xi", &mut a.use_xi);
        let refs: Vec<&str> = XiReference::ALL.iter().map(|k| k.name()).collect();
        r.choice("attack.xi_reference", &mut a.xi_reference, XiReference::parse, &refs);

        let f = &mut c.defense;
        let rules: Vec<&str> = AggregationRule::ALL.iter().map(|k| k.name()).collect();
        r.choice("defense.rule", &mut f.rule, AggregationRule::parse, &rules);
        r.f32("defense.clip_threshold", &mut f.clip_threshold);
        let parse_clip = |s: &str| match s {
            "raw" => Some(ClipMode::Raw),
            "delta" => Some(ClipMode::Delta),
            _ => None,
        };
        r.choice("defense.clip_mode", &mut f.clip_mode, parse_clip, &["raw", "delta"]);
        r.uint("defense.krum_f", &mut f.krum_f);
        r.uint("defense.krum_select", &mut f.krum_select);
        r.f32("defense.sign_step", &mut f.sign_step);
        let mut posthoc = "none";
        let mut posthoc_steps = 45usize;
        let parse_posthoc = |s: &str| ["none", "finetune", "simple-tuning"].into_iter().find(|k| *k == s);
        r.choice("defense.posthoc", &mut posthoc, parse_posthoc, &["none", "finetune", "simple-tuning"]);
        r.uint("defense.posthoc_steps", &mut posthoc_steps);
        f.posthoc = match posthoc {
            "finetune" => PostHoc::Finetune(posthoc_steps),
            "simple-tuning" => PostHoc::SimpleTuning(posthoc_steps),
            _ => PostHoc::None,
        };

        r.uint("eval.cadence", &mut c.eval.cadence);

        if let Some(dir) = r.string("output.dir") {
            c.output.dir = PathBuf::from(dir);
        }
        r.uint("output.checkpoint_every", &mut c.output.checkpoint_every);
        r.bool("output.wall_time", &mut c.output.wall_time);
        r.uint("output.threads", &mut c.output.threads);

        let leftover: Vec<String> = r.map.keys().cloned().collect();
        for key in leftover {
            r.fail(&key, "unknown key");
        }
        r.errors.extend(c.problems());
        if r.errors.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(r.errors))
        }
    }

    /// Semantic checks; one message per offending key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push(format!("{k}: {m}"));
        let d = &self.dataset;
        if d.classes < 2 {
            bad("dataset.classes", format!("need at least 2 classes, got {}", d.classes));
        }
        if d.channels == 0 {
            bad("dataset.channels", "must be >= 1".into());
        }
        if d.size < 4 || d.size % 4 != 0 {
            bad("dataset.size", format!("must be a multiple of 4 and >= 4, got {}", d.size));
        }
        if !(0.0..=1.0).contains(&d.contrast) {
            bad("dataset.contrast", format!("must be in [0, 1], got {}", d.contrast));
        }
        if d.per_class == 0 {
            bad("dataset.per_class", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&d.noise) {
            bad("dataset.noise", format!("must be in [0, 1], got {}", d.noise));
        }
        let p = &self.population;
        if p.clients == 0 {
            bad("population.clients", "must be >= 1".into());
        }
        if p.compromised > p.clients {
            bad("population.compromised", format!("{} exceeds the {} clients", p.compromised, p.clients));
        }
        if !(p.fraction > 0.0 && p.fraction <= 1.0) {
            bad("population.fraction", format!("must be in (0, 1], got {}", p.fraction));
        }
        if p.rounds == 0 {
            bad("population.rounds", "must be >= 1".into());
        }
        if !(p.dirichlet_alpha > 0.0 && p.dirichlet_alpha.is_finite()) {
            bad("population.dirichlet_alpha", format!("must be a finite value > 0, got {}", p.dirichlet_alpha));
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            bad("population.train_fraction", format!("must be in (0, 1), got {}", p.train_fraction));
        }
        if !(self.local.lr > 0.0 && self.local.lr.is_finite()) {
            bad("local.lr", format!("must be a finite value > 0, got {}", self.local.lr));
        }
        if self.local.batch_size == 0 {
            bad("local.batch_size", "must be >= 1".into());
        }
        if let Err(e) = self.strategy.validate() {
            bad("strategy.lambda", e.to_string());
        }
        for (k, m) in self.attack.problems(d.classes, d.size, d.size) {
            let key = match k.as_str() {
                "patch" => "attack.patch_size".to_string(),
                "patch.value" => "attack.patch_value".to_string(),
                other => format!("attack.{other}"),
            };
            bad(&key, m);
        }
        for (k, m) in self.defense.problems() {
            bad(&format!("defense.{k}"), m);
        }
        if self.defense.rule == AggregationRule::Multikrum {
            let per_round = crate::fl::selection_size(p.clients, p.fraction);
            let f = self.defense.krum_f;
            if per_round < f + 3 || self.defense.krum_select > per_round {
                bad(
                    "defense.krum_select",
                    format!("{per_round} uploads per round cannot support f = {f} with {} selected", self.defense.krum_select),
                );
            }
        }
        out
    }

    /// The configuration as a TOML document using the same keys.
    pub fn to_toml(&self) -> String {
        let a = &self.attack;
        let f = &self.defense;
        let (posthoc, posthoc_steps) = match f.posthoc {
            PostHoc::None => ("none", 0),
            PostHoc::Finetune(k) => ("finetune", k),
            PostHoc::SimpleTuning(k) => ("simple-tuning", k),
        };
        let source = match &self.dataset.source {
            DatasetSource::ShapeSet => "source = \"shapeset\"".to_string(),
            DatasetSource::File(p) => format!("source = \"file\"\npath = {:?}", p.display().to_string()),
        };
        let d = &self.dataset;
        let p = &self.population;
        let s = &self.strategy;
        format!(
            "seed = {}\n\n[dataset]\n{source}\nclasses = {}\nchannels = {}\nsize = {}\nper_class = {}\nnoise = {:?}\ncontrast = {:?}\n\n\
             [population]\nclients = {}\ncompromised = {}\nfraction = {:?}\nrounds = {}\ndirichlet_alpha = {:?}\ntrain_fraction = {:?}\n\n\
             [local]\nsteps = {}\nlr = {:?}\nbatch_size = {}\n\n\
             [strategy]\nkind = \"{}\"\nlambda = {:?}\nfinetune_steps = {}\nhead_steps = {}\nbody_steps = {}\n\n\
             [attack]\nmethod = \"{}\"\ntarget = {}\nalpha = {:?}\nepsilon = {:?}\nsigma = {:?}\ngenerator_steps = {}\ngenerator_lr = {:?}\n\
             generator_batch = {}\ngenerator_width = {}\ngenerator_depth = {}\nmodrep_gamma = {:?}\npgd_rho = {:?}\nneurotoxin_ratio = {:?}\n\
             patch_top = {}\npatch_left = {}\npatch_size = {}\npatch_value = {:?}\nuse_delta = {}\nuse_xi = {}\nxi_reference = \"{}\"\n\n\
             [defense]\nrule = \"{}\"\nclip_threshold = {:?}\nclip_mode = \"{}\"\nkrum_f = {}\nkrum_select = {}\nsign_step = {:?}\n\
             posthoc = \"{posthoc}\"\nposthoc_steps = {posthoc_steps}\n\n\
             [eval]\ncadence = {}\n\n[output]\ndir = {:?}\ncheckpoint_every = {}\nwall_time = {}\nthreads = {}\n",
            self.seed,
            d.classes,
            d.channels,
            d.size,
            d.per_class,
            d.noise,
            d.contrast,
            p.clients,
            p.compromised,
            p.fraction,
            p.rounds,
            p.dirichlet_alpha,
            p.train_fraction,
            self.local.steps,
            self.local.lr,
            self.local.batch_size,
            s.kind.name(),
            s.lambda,
            s.finetune_steps,
            s.head_steps,
            s.body_steps,
            a.method.name(),
            a.target,
            a.alpha,
            a.epsilon,
            a.sigma,
            a.generator_steps,
            a.generator_lr,
            a.generator_batch,
            a.generator_width,
            a.generator_depth,
            a.modrep_gamma,
            a.pgd_rho,
            a.neurotoxin_ratio,
            a.patch.top,
            a.patch.left,
            a.patch.height,
            a.patch.value,
            a.use_delta,
            a.use_xi,
            a.xi_reference.name(),
            f.rule.name(),
            f.clip_threshold,
            match f.clip_mode {
                ClipMode::Raw => "raw",
                ClipMode::Delta => "delta",
            },
            f.krum_f,
            f.krum_select,
            f.sign_step,
            self.eval.cadence,
            self.output.dir.display().to_string(),
            self.output.checkpoint_every,
            self.output.wall_time,
            self.output.threads,
        )
    }
}
