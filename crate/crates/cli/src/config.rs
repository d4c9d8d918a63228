//! Flat `key=value` run configuration.
//!
//! Precedence is flags, then config-file keys, then defaults. Unknown keys are
//! errors. [`RunConfig::render`] writes every key back out, so a run's
//! `meta.txt` can be passed to `--config` to repeat it.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use hsvideo::csc::{CscParams, QuadSolver};
use hsvideo::patch::{BlockSelectionConfig, PatchConfig, SelectionStrategy};
use hsvideo::synthetic::MotionVideo;
use hsvideo::training::CscTrainConfig;

/// Lines after this marker in a metadata file describe the run, not its inputs.
pub const RUN_SECTION: &str = "[run]";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: usize,
    pub bump: usize,
    pub seed: u64,
    /// Side of rendered synthetic videos.
    pub size: usize,
    pub csc: CscParams,
    /// `None` follows `frames`.
    pub patch_pt: Option<usize>,
    /// `None` means twice the block length.
    pub patch_atoms: Option<usize>,
    pub patch: PatchConfig,
    pub selection: BlockSelectionConfig,
    pub train: CscTrainConfig,
    /// Synthetic training images (train-csc) or videos (train-patch) to generate
    /// when no input is given.
    pub train_count: usize,
    pub train_size: usize,
    /// Contrast normalization width for filter training images.
    pub train_contrast_sigma: f64,
    pub sweep_beta_d: Vec<f64>,
    pub sweep_beta_2: Vec<f64>,
    pub sweep_videos: Vec<MotionVideo>,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frames: 20,
            bump: 3,
            seed: 1,
            size: 64,
            csc: CscParams::default(),
            patch_pt: None,
            patch_atoms: None,
            patch: PatchConfig::default(),
            selection: BlockSelectionConfig::default(),
            train: CscTrainConfig::default(),
            train_count: 8,
            train_size: 64,
            train_contrast_sigma: 2.0,
            sweep_beta_d: vec![1.0, 10.0, 100.0, 1000.0],
            sweep_beta_2: vec![0.0, 0.1, 1.0, 10.0],
            sweep_videos: MotionVideo::ALL.to_vec(),
            threads: None,
            deterministic: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("bad value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("bad value {value:?} for {key}: expected true or false"),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn auto<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "frames" => self.frames = parse(key, v)?,
            "bump" => self.bump = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "beta_d" => self.csc.beta_d = parse(key, v)?,
            "beta_1" => self.csc.beta_1 = parse(key, v)?,
            "beta_2" => self.csc.beta_2 = parse(key, v)?,
            "rho" => self.csc.rho = parse(key, v)?,
            "outer_iters" => self.csc.outer_iters = parse(key, v)?,
            "quad_tol" => self.csc.quad_tol = parse(key, v)?,
            "quad_max_iters" => self.csc.quad_max_iters = parse(key, v)?,
            "stop_tol" => self.csc.stop_tol = parse(key, v)?,
            "quad_solver" => {
                self.csc.quad_solver = match v {
                    "direct" => QuadSolver::Direct,
                    "cg" => QuadSolver::ConjugateGradient,
                    _ => bail!("bad value {v:?} for quad_solver: expected direct or cg"),
                }
            }
            "background_sigma" => {
                self.csc.background_sigma = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "patch_px" => self.patch.px = parse(key, v)?,
            "patch_py" => self.patch.py = parse(key, v)?,
            "patch_pt" => self.patch_pt = parse_auto(key, v)?,
            "patch_stride" => self.patch.stride = parse(key, v)?,
            "patch_atoms" => self.patch_atoms = parse_auto(key, v)?,
            "patch_train_sparsity" => self.patch.train_sparsity = parse(key, v)?,
            "patch_ksvd_iters" => self.patch.ksvd_iters = parse(key, v)?,
            "patch_lambda" => self.patch.lambda = parse(key, v)?,
            "patch_remove_mean" => self.patch.remove_mean = parse_bool(key, v)?,
            "selection" => {
                self.selection.strategy = SelectionStrategy::from_name(v)
                    .ok_or_else(|| anyhow!("unknown selection strategy {v:?}"))?
            }
            "selection_gamma" => self.selection.gamma = parse(key, v)?,
            "selection_count" => self.selection.count = parse(key, v)?,
            "selection_seed" => self.selection.seed = parse(key, v)?,
            "train_filters" => self.train.filters = parse(key, v)?,
            "train_filter_size" => self.train.size = parse(key, v)?,
            "train_sparsity" => self.train.sparsity = parse(key, v)?,
            "train_alternations" => self.train.alternations = parse(key, v)?,
            "train_code_iters" => self.train.code_iters = parse(key, v)?,
            "train_filter_iters" => self.train.filter_iters = parse(key, v)?,
            "train_rho" => self.train.rho = parse(key, v)?,
            "train_seed" => self.train.seed = parse(key, v)?,
            "train_count" => self.train_count = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "train_contrast_sigma" => self.train_contrast_sigma = parse(key, v)?,
            "sweep_beta_d" => self.sweep_beta_d = parse_list(key, v)?,
            "sweep_beta_2" => self.sweep_beta_2 = parse_list(key, v)?,
            "sweep_videos" => {
                self.sweep_videos = v
                    .split(',')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .map(|n| MotionVideo::from_name(n).ok_or_else(|| anyhow!("unknown video {n:?}")))
                    .collect::<Result<_>>()?
            }
            "threads" => self.threads = parse_auto(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            // written into metadata for the record, ignored on reload
            "command" | "version" => {}
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped and
    /// reading stops at the [`RUN_SECTION`] marker.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line == RUN_SECTION {
                break;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", i + 1))?;
            self.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    /// Patch parameters with the `auto` entries resolved.
    pub fn patch_config(&self) -> PatchConfig {
        let mut p = self.patch.clone();
        p.pt = self.patch_pt.unwrap_or(self.frames);
        p.atoms = self.patch_atoms.unwrap_or(2 * p.px * p.py * p.pt);
        p
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.csc;
        let p = &self.patch;
        let s = &self.selection;
        let t = &self.train;
        vec![
            ("frames", self.frames.to_string()),
            ("bump", self.bump.to_string()),
            ("seed", self.seed.to_string()),
            ("size", self.size.to_string()),
            ("beta_d", c.beta_d.to_string()),
            ("beta_1", c.beta_1.to_string()),
            ("beta_2", c.beta_2.to_string()),
            ("rho", c.rho.to_string()),
            ("outer_iters", c.outer_iters.to_string()),
            ("quad_tol", c.quad_tol.to_string()),
            ("quad_max_iters", c.quad_max_iters.to_string()),
            ("stop_tol", c.stop_tol.to_string()),
            ("quad_solver", c.quad_solver.to_string()),
            ("background_sigma", c.background_sigma.map_or("none".into(), |v| v.to_string())),
            ("patch_px", p.px.to_string()),
            ("patch_py", p.py.to_string()),
            ("patch_pt", auto(self.patch_pt)),
            ("patch_stride", p.stride.to_string()),
            ("patch_atoms", auto(self.patch_atoms)),
            ("patch_train_sparsity", p.train_sparsity.to_string()),
            ("patch_ksvd_iters", p.ksvd_iters.to_string()),
            ("patch_lambda", p.lambda.to_string()),
            ("patch_remove_mean", p.remove_mean.to_string()),
            ("selection", s.strategy.name().to_string()),
            ("selection_gamma", s.gamma.to_string()),
            ("selection_count", s.count.to_string()),
            ("selection_seed", s.seed.to_string()),
            ("train_filters", t.filters.to_string()),
            ("train_filter_size", t.size.to_string()),
            ("train_sparsity", t.sparsity.to_string()),
            ("train_alternations", t.alternations.to_string()),
            ("train_code_iters", t.code_iters.to_string()),
            ("train_filter_iters", t.filter_iters.to_string()),
            ("train_rho", t.rho.to_string()),
            ("train_seed", t.seed.to_string()),
            ("train_count", self.train_count.to_string()),
            ("train_size", self.train_size.to_string()),
            ("train_contrast_sigma", self.train_contrast_sigma.to_string()),
            ("sweep_beta_d", join(&self.sweep_beta_d)),
            ("sweep_beta_2", join(&self.sweep_beta_2)),
            (
                "sweep_videos",
                self.sweep_videos.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            ),
            ("threads", auto(self.threads)),
            ("deterministic", self.deterministic.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
