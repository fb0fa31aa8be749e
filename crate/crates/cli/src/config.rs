//! Layered key=value run configuration.
//!
//! Defaults, then an optional config file, then repeated `--set` overrides;
//! a `PIPS_SEED` environment variable finally replaces every stage seed.
//! Unknown sections or keys are rejected so typos fail loudly. The
//! effective configuration is echoed back into the output directory.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use pips_core::synth::DatasetConfig;
use pips_core::train::{PipsConfig, PseudoGtConfig, StudentConfig, TeacherConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub teacher: TeacherConfig,
    pub pseudo_gt: PseudoGtConfig,
    /// Share of training clouds that receive pseudo-labels.
    pub pseudo_fraction: f64,
    pub pips: PipsConfig,
    pub student: StudentConfig,
    /// Query budget for observed-cloud evaluation.
    pub eval_observed_n: usize,
    pub eval_jitter: f64,
    pub eval_dropout: f64,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            pseudo_gt: PseudoGtConfig::default(),
            pseudo_fraction: 0.2,
            pips: PipsConfig::default(),
            student: StudentConfig::default(),
            eval_observed_n: 48,
            eval_jitter: 0.01,
            eval_dropout: 0.0,
            eval_seed: 7,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| anyhow!("invalid value {v:?} for {key}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => bail!("invalid bool {v:?} for {key}"),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num::<usize>(key, s))
        .collect::<Result<Vec<_>>>()
}

/// "layer:divisor" pairs, comma separated, e.g. "0:3,1:4".
fn parse_downsample(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| anyhow!("invalid pair {pair:?} for {key}"))?;
            Ok((parse_num::<usize>(key, a)?, parse_num::<usize>(key, b)?))
        })
        .collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| anyhow!("invalid range {v:?} for {key} (want min,max)"))?;
    Ok((parse_num::<f64>(key, a)?, parse_num::<f64>(key, b)?))
}

fn fmt_usize_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_downsample(v: &[(usize, usize)]) -> String {
    v.iter()
        .map(|(a, b)| format!("{a}:{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one dotted override, e.g. `teacher.epochs=100`.
    pub fn apply(&mut self, dotted_key: &str, value: &str) -> Result<()> {
        let (section, key) = dotted_key
            .split_once('.')
            .ok_or_else(|| anyhow!("key {dotted_key:?} is not of the form section.key"))?;
        let k = dotted_key;
        match (section, key) {
            ("data", "n_train") => self.data.n_train = parse_num(k, value)?,
            ("data", "n_test") => self.data.n_test = parse_num(k, value)?,
            ("data", "master_seed") => self.data.master_seed = parse_num(k, value)?,
            ("data", "holdout_margin") => self.data.holdout_margin = parse_num(k, value)?,
            ("data", "train_occlusion") => self.data.train_occlusion = parse_pair(k, value)?,
            ("data", "train_noise") => self.data.train_noise = parse_pair(k, value)?,
            ("data", "high_occlusion") => self.data.high_occlusion = parse_num(k, value)?,
            ("data", "severe_noise") => self.data.severe_noise = parse_num(k, value)?,
            ("data", "train_param_fraction") => {
                self.data.train_param_fraction = parse_num(k, value)?
            }
            ("net", "k_init") => {
                let v: usize = parse_num(k, value)?;
                self.net_backbones(|b| b.k_init = v);
            }
            ("net", "receptive_field") => {
                let v: usize = parse_num(k, value)?;
                self.net_backbones(|b| b.receptive_field = v);
            }
            ("net", "n_supports") => {
                let v: usize = parse_num(k, value)?;
                self.net_backbones(|b| b.n_supports = v);
            }
            ("net", "widths") => {
                let w = parse_usize_list(k, value)?;
                self.net_backbones(|b| b.widths = w.clone());
            }
            ("net", "downsample") => {
                let d = parse_downsample(k, value)?;
                self.net_backbones(|b| b.downsample = d.clone());
            }
            ("net", "support_radius") => {
                let v: f64 = parse_num(k, value)?;
                self.net_backbones(|b| b.support_radius = v);
            }
            ("net", "center_rotate") => {
                let v = parse_bool(k, value)?;
                self.net_backbones(|b| b.center_rotate = v);
            }
            ("net", "propagation_k") => {
                let p: usize = parse_num(k, value)?;
                self.teacher.net.propagation_k = p;
                self.student.net.propagation_k = p;
                self.pips.propagation_k = p;
            }
            ("net", "head_widths") => {
                let w = parse_usize_list(k, value)?;
                self.teacher.net.head_widths = w.clone();
                self.student.net.head_widths = w.clone();
                self.pips.head_widths = w;
            }
            ("teacher", "epochs") => self.teacher.epochs = parse_num(k, value)?,
            ("teacher", "steps_per_epoch") => self.teacher.steps_per_epoch = parse_num(k, value)?,
            ("teacher", "batch") => self.teacher.batch = parse_num(k, value)?,
            ("teacher", "input_points") => self.teacher.input_points = parse_num(k, value)?,
            ("teacher", "queries_per_cloud") => {
                self.teacher.queries_per_cloud = parse_num(k, value)?
            }
            ("teacher", "surface_fraction") => self.teacher.surface_fraction = parse_num(k, value)?,
            ("teacher", "dense_pool") => self.teacher.dense_pool = parse_num(k, value)?,
            ("teacher", "lr") => self.teacher.lr = parse_num(k, value)?,
            ("teacher", "lambda_unc") => self.teacher.lambda_unc = parse_num(k, value)?,
            ("teacher", "detach_uncertainty") => {
                self.teacher.detach_uncertainty = parse_bool(k, value)?
            }
            ("teacher", "seed") => self.teacher.seed = parse_num(k, value)?,
            ("pseudo_gt", "omega") => self.pseudo_gt.omega = parse_num(k, value)?,
            ("pseudo_gt", "h") => {
                let h: usize = parse_num(k, value)?;
                self.pseudo_gt.h = h;
                self.pips.grid_h = h;
            }
            ("pseudo_gt", "n_probe") => self.pseudo_gt.n_probe = parse_num(k, value)?,
            ("pseudo_gt", "input_points") => self.pseudo_gt.input_points = parse_num(k, value)?,
            ("pseudo_gt", "seed") => self.pseudo_gt.seed = parse_num(k, value)?,
            ("pseudo_gt", "fraction") => self.pseudo_fraction = parse_num(k, value)?,
            ("pips", "epochs") => self.pips.epochs = parse_num(k, value)?,
            ("pips", "batch") => self.pips.batch = parse_num(k, value)?,
            ("pips", "input_points") => self.pips.input_points = parse_num(k, value)?,
            ("pips", "lr") => self.pips.lr = parse_num(k, value)?,
            ("pips", "rho") => self.pips.rho = parse_num(k, value)?,
            ("pips", "w_sparsity") => self.pips.w_sparsity = parse_num(k, value)?,
            ("pips", "w_stability") => self.pips.w_stability = parse_num(k, value)?,
            ("pips", "anneal_epochs") => self.pips.anneal_epochs = parse_num(k, value)?,
            ("pips", "seed") => self.pips.seed = parse_num(k, value)?,
            ("student", "epochs") => self.student.epochs = parse_num(k, value)?,
            ("student", "steps_per_epoch") => self.student.steps_per_epoch = parse_num(k, value)?,
            ("student", "batch") => self.student.batch = parse_num(k, value)?,
            ("student", "input_points") => self.student.input_points = parse_num(k, value)?,
            ("student", "random_budget") => self.student.random_budget = parse_num(k, value)?,
            ("student", "lr") => self.student.lr = parse_num(k, value)?,
            ("student", "seed") => self.student.seed = parse_num(k, value)?,
            ("eval", "observed_n") => self.eval_observed_n = parse_num(k, value)?,
            ("eval", "jitter") => self.eval_jitter = parse_num(k, value)?,
            ("eval", "dropout") => self.eval_dropout = parse_num(k, value)?,
            ("eval", "seed") => self.eval_seed = parse_num(k, value)?,
            _ => bail!("unknown config key {dotted_key:?}"),
        }
        Ok(())
    }

    /// The backbone config is shared by the teacher, student, and
    /// classifier networks; `[net]` keys update all three.
    fn net_backbones(&mut self, mut f: impl FnMut(&mut pips_core::vnconv::BackboneConfig)) {
        f(&mut self.teacher.net.backbone);
        f(&mut self.student.net.backbone);
        f(&mut self.pips.backbone);
    }

    /// Parses a config file: `[section]` headers, `key = value` lines,
    /// `#` comments, blank lines ignored.
    pub fn apply_file(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", lineno + 1))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| anyhow!("{origin}:{}: key before any [section]", lineno + 1))?;
            self.apply(&format!("{sec}.{}", key.trim()), value.trim())
                .with_context(|| format!("{origin}:{}", lineno + 1))?;
        }
        Ok(())
    }

    /// Replaces every stage seed; used by the `PIPS_SEED` override.
    pub fn set_all_seeds(&mut self, seed: u64) {
        self.data.master_seed = seed;
        self.teacher.seed = seed;
        self.pseudo_gt.seed = seed;
        self.pips.seed = seed;
        self.student.seed = seed;
        self.eval_seed = seed;
    }

    /// Renders the effective configuration in the file format; the output
    /// round-trips through `apply_file`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "n_train = {}", self.data.n_train);
        let _ = writeln!(s, "n_test = {}", self.data.n_test);
        let _ = writeln!(s, "master_seed = {}", self.data.master_seed);
        let _ = writeln!(s, "holdout_margin = {}", self.data.holdout_margin);
        let _ = writeln!(
            s,
            "train_occlusion = {},{}",
            self.data.train_occlusion.0, self.data.train_occlusion.1
        );
        let _ = writeln!(
            s,
            "train_noise = {},{}",
            self.data.train_noise.0, self.data.train_noise.1
        );
        let _ = writeln!(s, "high_occlusion = {}", self.data.high_occlusion);
        let _ = writeln!(s, "severe_noise = {}", self.data.severe_noise);
        let _ = writeln!(
            s,
            "train_param_fraction = {}",
            self.data.train_param_fraction
        );
        let b = &self.teacher.net.backbone;
        let _ = writeln!(s, "\n[net]");
        let _ = writeln!(s, "k_init = {}", b.k_init);
        let _ = writeln!(s, "receptive_field = {}", b.receptive_field);
        let _ = writeln!(s, "n_supports = {}", b.n_supports);
        let _ = writeln!(s, "widths = {}", fmt_usize_list(&b.widths));
        let _ = writeln!(s, "downsample = {}", fmt_downsample(&b.downsample));
        let _ = writeln!(s, "support_radius = {}", b.support_radius);
        let _ = writeln!(s, "center_rotate = {}", b.center_rotate);
        let _ = writeln!(s, "propagation_k = {}", self.teacher.net.propagation_k);
        let _ = writeln!(
            s,
            "head_widths = {}",
            fmt_usize_list(&self.teacher.net.head_widths)
        );
        let _ = writeln!(s, "\n[teacher]");
        let _ = writeln!(s, "epochs = {}", self.teacher.epochs);
        let _ = writeln!(s, "steps_per_epoch = {}", self.teacher.steps_per_epoch);
        let _ = writeln!(s, "batch = {}", self.teacher.batch);
        let _ = writeln!(s, "input_points = {}", self.teacher.input_points);
        let _ = writeln!(s, "queries_per_cloud = {}", self.teacher.queries_per_cloud);
        let _ = writeln!(s, "surface_fraction = {}", self.teacher.surface_fraction);
        let _ = writeln!(s, "dense_pool = {}", self.teacher.dense_pool);
        let _ = writeln!(s, "lr = {}", self.teacher.lr);
        let _ = writeln!(s, "lambda_unc = {}", self.teacher.lambda_unc);
        let _ = writeln!(s, "detach_uncertainty = {}", self.teacher.detach_uncertainty);
        let _ = writeln!(s, "seed = {}", self.teacher.seed);
        let _ = writeln!(s, "\n[pseudo_gt]");
        let _ = writeln!(s, "omega = {}", self.pseudo_gt.omega);
        let _ = writeln!(s, "h = {}", self.pseudo_gt.h);
        let _ = writeln!(s, "n_probe = {}", self.pseudo_gt.n_probe);
        let _ = writeln!(s, "input_points = {}", self.pseudo_gt.input_points);
        let _ = writeln!(s, "seed = {}", self.pseudo_gt.seed);
        let _ = writeln!(s, "fraction = {}", self.pseudo_fraction);
        let _ = writeln!(s, "\n[pips]");
        let _ = writeln!(s, "epochs = {}", self.pips.epochs);
        let _ = writeln!(s, "batch = {}", self.pips.batch);
        let _ = writeln!(s, "input_points = {}", self.pips.input_points);
        let _ = writeln!(s, "lr = {}", self.pips.lr);
        let _ = writeln!(s, "rho = {}", self.pips.rho);
        let _ = writeln!(s, "w_sparsity = {}", self.pips.w_sparsity);
        let _ = writeln!(s, "w_stability = {}", self.pips.w_stability);
        let _ = writeln!(s, "anneal_epochs = {}", self.pips.anneal_epochs);
        let _ = writeln!(s, "seed = {}", self.pips.seed);
        let _ = writeln!(s, "\n[student]");
        let _ = writeln!(s, "epochs = {}", self.student.epochs);
        let _ = writeln!(s, "steps_per_epoch = {}", self.student.steps_per_epoch);
        let _ = writeln!(s, "batch = {}", self.student.batch);
        let _ = writeln!(s, "input_points = {}", self.student.input_points);
        let _ = writeln!(s, "random_budget = {}", self.student.random_budget);
        let _ = writeln!(s, "lr = {}", self.student.lr);
        let _ = writeln!(s, "seed = {}", self.student.seed);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "observed_n = {}", self.eval_observed_n);
        let _ = writeln!(s, "jitter = {}", self.eval_jitter);
        let _ = writeln!(s, "dropout = {}", self.eval_dropout);
        let _ = writeln!(s, "seed = {}", self.eval_seed);
        s
    }
}

/// Defaults, optional file, `--set` overrides, then the env seed override.
pub fn load_config(file: Option<&std::path::Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_file(&text, &path.display().to_string())?;
    }
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set {s:?} is not of the form section.key=value"))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Ok(v) = std::env::var("PIPS_SEED") {
        let seed: u64 = v
            .parse()
            .map_err(|_| anyhow!("PIPS_SEED={v:?} is not a u64"))?;
        cfg.set_all_seeds(seed);
    }
    Ok(cfg)
}
