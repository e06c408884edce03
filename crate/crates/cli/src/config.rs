//! Run configuration: a plain-text `key = value` file merged with
//! `--key value` overrides. Every command has a fixed key table; unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const GLOBAL: &[Key] = &[
    key("seed", "0", "master seed"),
    key("threads", "0", "worker threads (0 = all cores)"),
    key("out_dir", "runs", "directory receiving run subdirectories"),
];

const SIM: &[Key] = &[
    key("sigma_x", "2", "lateral PSF standard deviation, pixels"),
    key("sigma_z", "2", "axial PSF envelope standard deviation, pixels"),
    key("cycles", "2", "carrier periods across the axial PSF"),
    key("noise_std", "1", "scatterer standard deviation"),
    key("floor_db", "-55", "log-compression floor, dB"),
];

const CORPUS: &[Key] = &[
    key("manifest", "", "corpus manifest; empty uses a synthetic phantom corpus"),
    key("sources", "32", "synthetic corpus size"),
    key("source_size", "128", "synthetic source extent, pixels"),
];

pub const COMMANDS: &[(&str, &str, &[&[Key]])] = &[
    ("phantom", "write an evaluation phantom and its ROIs", &[&[key("preset", "cyst2", "phantom preset")]]),
    (
        "simulate",
        "simulate speckle realizations of an echogenicity map",
        &[
            &[
                key("input", "", "echogenicity map (raw) or display image (pgm); empty uses the cyst2 phantom"),
                key("k", "1", "number of realizations"),
            ],
            SIM,
        ],
    ),
    (
        "degrade",
        "blur and contrast-narrow a display image",
        &[&[
            key("input", "", "display image (pgm)"),
            key("blur_sigma_min", "0.5", "lower bound of the blur sigma"),
            key("blur_sigma_max", "2", "upper bound of the blur sigma"),
            key("alpha_min", "0.6", "lower bound of the narrowing factor"),
            key("alpha_max", "1", "upper bound of the narrowing factor"),
        ]],
    ),
    (
        "train",
        "train the despeckle or deblur branch",
        &[
            &[
                key("branch", "despeckle", "despeckle | deblur"),
                key("init", "", "checkpoint to start from; empty builds a seeded model"),
                key("epochs", "20", "passes over the corpus"),
                key("batch_size", "8", "samples per step"),
                key("patch_size", "64", "training patch extent"),
                key("realizations_k", "2", "speckle realizations per despeckle sample"),
                key("pairs_per_source", "32", "samples per source per epoch"),
                key("average_targets", "false", "average the other realizations as the target"),
                key("best_window", "50", "steps in the running loss used to pick the best model"),
                key("checkpoint_every", "0", "steps between intermediate checkpoints (0 = none)"),
            ],
            CORPUS,
            SIM,
        ],
    ),
    (
        "fuse",
        "combine trained despeckle and deblur checkpoints",
        &[&[key("despeckle", "", "despeckle checkpoint"), key("deblur", "", "deblur checkpoint")]],
    ),
    (
        "quantize",
        "calibrate, correct and convert a model to int8",
        &[
            &[
                key("model", "", "float checkpoint"),
                key("calib_dir", "", "directory of pgm calibration images; empty uses synthetic images"),
                key("calib_count", "16", "calibration images"),
                key("mode", "full", "full | weights-only"),
                key("equalize", "true", "cross-layer equalization (full mode)"),
                key("round_weights", "true", "least-squares weight rounding"),
                key("bias_correction", "true", "empirical bias correction"),
                key("qat_epochs", "0", "quantization-aware fine-tuning epochs (0 = none)"),
                key("qat_pairs_per_source", "8", "fine-tuning samples per source per epoch"),
            ],
            CORPUS,
            SIM,
        ],
    ),
    (
        "infer",
        "enhance images with a checkpoint",
        &[&[
            key("model", "", "checkpoint"),
            key("input", "", "pgm image or directory of pgm images"),
            key("branch", "fused", "despeckle | deblur | fused"),
            key("precision", "f32", "f32 | int8"),
            key("mode", "full", "int8 mode: full | weights-only"),
        ]],
    ),
    (
        "eval",
        "compare methods with CNR, SSNR, ENL, AGM and SSIM",
        &[
            &[
                key("input", "", "display image; empty simulates the cyst2 phantom"),
                key("rois", "", "ROI file; empty uses the cyst2 ROIs"),
                key("methods", "", "comma list from input,lee,srad,edgesrie-f32,edgesrie-int8"),
                key("model", "", "float checkpoint for edgesrie-f32"),
                key("model_int8", "", "int8 checkpoint for edgesrie-int8"),
                key("branch", "fused", "network branch"),
                key("background_roi", "background", "homogeneous region for SSNR/ENL, CNR and Lee Cu"),
                key("contrast_roi", "cyst", "contrast region for CNR"),
                key("profile_roi", "profile", "profile for AGM"),
                key("lee_window", "7", "Lee window"),
                key("lee_cu", "0", "Lee Cu (0 = estimate from the background ROI)"),
                key("srad_iterations", "50", "SRAD iterations"),
                key("srad_dt", "0.05", "SRAD time step"),
                key("srad_decay", "0.1666666666666667", "SRAD q0 decay rate"),
            ],
            SIM,
        ],
    ),
    (
        "profile",
        "report parameter and FLOP counts",
        &[&[
            key("model", "", "checkpoint; empty uses the default architecture"),
            key("sizes", "256x256", "comma list of WxH input sizes"),
        ]],
    ),
    (
        "bench",
        "measure f32 and int8 throughput",
        &[
            &[
                key("model", "", "float checkpoint; empty uses a seeded model"),
                key("model_int8", "", "int8 checkpoint; empty calibrates the float model on the input"),
                key("input", "", "display image; empty simulates the cyst2 phantom"),
                key("branch", "fused", "network branch"),
                key("precision", "both", "f32 | int8 | both"),
                key("seconds", "2", "minimum timed seconds per measurement"),
                key("min_runs", "100", "minimum timed runs per measurement"),
                key("warmup", "3", "untimed runs before measuring"),
            ],
            SIM,
        ],
    ),
];

pub fn command(name: &str) -> Option<&'static (&'static str, &'static str, &'static [&'static [Key]])> {
    COMMANDS.iter().find(|c| c.0 == name)
}

/// All keys of a command, global keys first.
pub fn keys(cmd: &str) -> Vec<&'static Key> {
    let mut out: Vec<&Key> = GLOBAL.iter().collect();
    if let Some((_, _, groups)) = command(cmd) {
        out.extend(groups.iter().flat_map(|g| g.iter()));
    }
    out
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the file entries, then the overrides.
    pub fn resolve(cmd: &str, file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, CliError> {
        let table = keys(cmd);
        let mut values: BTreeMap<String, String> =
            table.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        for (k, v) in file.iter().chain(overrides) {
            match values.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(CliError::Config(format!("unknown key '{k}' for {cmd}"))),
            }
        }
        Ok(Self { command: cmd.to_string(), values })
    }

    pub fn str(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or_else(|| panic!("key '{k}' is not in the table"))
    }

    pub fn opt_path(&self, k: &str) -> Option<PathBuf> {
        let v = self.str(k);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn path(&self, k: &str) -> Result<PathBuf, CliError> {
        self.opt_path(k).ok_or_else(|| CliError::Config(format!("{} needs --{}", self.command, k.replace('_', "-"))))
    }

    pub fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T, CliError> {
        let v = self.str(k);
        v.parse().map_err(|_| CliError::Config(format!("cannot parse {k} = '{v}'")))
    }

    /// `key = value` lines in key order; feeding this back via `--config`
    /// reproduces the run.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// `<command>-<crc32 of the resolved config>`.
    pub fn stamp(&self) -> String {
        format!("{}-{:08x}", self.command, crc32fast::hash(self.to_text().as_bytes()))
    }
}
