//! Command-line entry points. One thin binary dispatches the subcommands;
//! all real work lives in the library modules.
//!
//! Exit codes: 0 success, 2 usage error (unknown command/flag, bad value),
//! 1 anything else (I/O, format, training failures). Errors are single
//! lines on stderr; logs go to stderr, data to stdout or `--out` paths.

use crate::codec;
use crate::error::{Error, Result};
use crate::image::{load_pnm, save_pnm};
use crate::metrics;
use crate::model::CodecModel;
use crate::quant::{self, QuantConfig};
use crate::rng::Rng;
use crate::synth;
use crate::tensor::Tensor;
use crate::training::{self, Metric, TrainConfig, TrainGraph};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const USAGE: &str = "usage: iqdz <command> [flags]
commands:
  train           --out <model.iqdzm> [--log <csv>] [--config <file>] [--dir <pnm dir>]
                  [--seed N] [--steps N] [--lambda1 F] [--lambda2 F] [--alpha F]
                  [--metric mse|ssim] [--patch-size N] [--channels 1|3]
                  [--latent-dim N] [--patches N] [--lr F] [--batch-size N]
  encode          --model <m> --in <img.ppm|pgm> --out <img.iqdz> [--q F] [--offset F]
  decode          --model <m> --in <img.iqdz> --out <img.ppm|pgm>
  rdsweep         --model <m> --dir <pnm dir> --out <rd.csv>
  isometry-check  --model <m> [--lambda2 F] [--alpha F] [--samples N] [--seed N]
  gradcheck       [--seed N] [--tol F]
  selftest";

/// Parsed `--flag value` pairs after the subcommand.
struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String]) -> std::result::Result<Flags, String> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let key = &args[i];
            if !key.starts_with("--") {
                return Err(format!("unexpected argument '{key}'"));
            }
            let name = key.trim_start_matches("--").to_string();
            if !KNOWN_FLAGS.contains(&name.as_str()) {
                return Err(format!("unknown flag '--{name}'"));
            }
            let Some(value) = args.get(i + 1) else {
                return Err(format!("flag '--{name}' needs a value"));
            };
            values.insert(name, value.clone());
            i += 2;
        }
        Ok(Flags { values })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn required(&self, name: &str) -> std::result::Result<&str, String> {
        self.get(name)
            .ok_or_else(|| format!("missing required flag '--{name}'"))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> std::result::Result<Option<T>, String> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("bad value '{v}' for '--{name}'")),
        }
    }
}

const KNOWN_FLAGS: &[&str] = &[
    "out", "log", "config", "dir", "seed", "steps", "lambda1", "lambda2", "alpha", "metric",
    "patch-size", "channels", "latent-dim", "patches", "lr", "batch-size", "model", "in", "q",
    "offset", "samples", "tol",
];

/// Dispatch a full argv (without the program name). Returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let Some(command) = args.first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    let flags = match Flags::parse(&args[1..]) {
        Ok(f) => f,
        Err(m) => {
            eprintln!("usage error: {m}");
            return 2;
        }
    };
    let outcome = match command.as_str() {
        "train" => cmd_train(&flags),
        "encode" => cmd_encode(&flags),
        "decode" => cmd_decode(&flags),
        "rdsweep" => cmd_rdsweep(&flags),
        "isometry-check" => cmd_isometry(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "selftest" => cmd_selftest(&flags),
        other => {
            eprintln!("usage error: unknown command '{other}'");
            eprintln!("{USAGE}");
            return 2;
        }
    };
    match outcome {
        Ok(code) => code,
        Err(UsageOr::Usage(m)) => {
            eprintln!("usage error: {m}");
            2
        }
        Err(UsageOr::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum UsageOr {
    Usage(String),
    Run(Error),
}

impl From<Error> for UsageOr {
    fn from(e: Error) -> Self {
        UsageOr::Run(e)
    }
}

impl From<String> for UsageOr {
    fn from(m: String) -> Self {
        UsageOr::Usage(m)
    }
}

type CmdResult = std::result::Result<i32, UsageOr>;
type TrainConfigResult = std::result::Result<TrainConfig, UsageOr>;

/// Flat key=value config file; '#' starts a comment line.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "{}:{}: expected key=value",
                path.display(),
                ln + 1
            )));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn build_train_config(flags: &Flags) -> TrainConfigResult {
    let mut cfg = TrainConfig::default();
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = flags.get("config") {
        kv = read_config_file(Path::new(path)).map_err(UsageOr::Run)?;
    }
    // Flags override the config file.
    for (k, v) in &flags.values {
        kv.insert(k.clone(), v.clone());
    }
    for (k, v) in &kv {
        let bad = || format!("bad value '{v}' for '{k}'");
        match k.as_str() {
            "lambda1" => cfg.lambda1 = v.parse().map_err(|_| bad())?,
            "lambda2" => cfg.lambda2 = v.parse().map_err(|_| bad())?,
            "alpha" => cfg.alpha = v.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "steps" => cfg.steps = v.parse().map_err(|_| bad())?,
            "lr" | "learning_rate" => cfg.learning_rate = v.parse().map_err(|_| bad())?,
            "batch-size" | "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad())?,
            "patch-size" | "patch_size" => cfg.patch_size = v.parse().map_err(|_| bad())?,
            "channels" => cfg.channels = v.parse().map_err(|_| bad())?,
            "latent-dim" | "latent_dim" => cfg.latent_dim = v.parse().map_err(|_| bad())?,
            "metric" => {
                cfg.metric = match v.as_str() {
                    "mse" => Metric::Mse,
                    "ssim" => Metric::Ssim,
                    _ => return Err(UsageOr::Usage(format!("metric must be mse or ssim, got '{v}'"))),
                };
                // Stock SSIM multipliers unless explicitly overridden.
                if cfg.metric == Metric::Ssim {
                    if !kv.contains_key("lambda1") {
                        cfg.lambda1 = 1.0;
                    }
                    if !kv.contains_key("lambda2") {
                        cfg.lambda2 = 256.0;
                    }
                }
            }
            // Handled elsewhere or not part of TrainConfig.
            "out" | "log" | "config" | "dir" | "patches" | "model" | "in" | "q" | "offset"
            | "samples" | "tol" => {}
            other => return Err(UsageOr::Usage(format!("unknown config key '{other}'"))),
        }
    }
    Ok(cfg)
}


/// All PGM/PPM files in a directory, sorted by file name.
fn load_dir_images(dir: &Path) -> Result<Vec<crate::image::Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .ppm/.pgm files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_pnm(p)).collect()
}

fn cmd_train(flags: &Flags) -> CmdResult {
    let out = flags.required("out")?;
    let cfg = build_train_config(flags)?;
    let n_patches: usize = flags.parse_num("patches")?.unwrap_or(4096);

    let dataset: Vec<Vec<f64>> = match flags.get("dir") {
        Some(dir) => {
            let images = load_dir_images(Path::new(dir))?;
            let mut patches = Vec::new();
            for img in &images {
                if img.channels != cfg.channels {
                    return Err(UsageOr::Run(Error::Config(format!(
                        "training images must have {} channels",
                        cfg.channels
                    ))));
                }
                for py in 0..img.height / cfg.patch_size {
                    for px in 0..img.width / cfg.patch_size {
                        patches.push(synth::extract_patch(
                            img,
                            px * cfg.patch_size,
                            py * cfg.patch_size,
                            cfg.patch_size,
                        ));
                    }
                }
            }
            patches
        }
        None => synth::training_patches(n_patches, cfg.patch_size, cfg.channels, cfg.seed),
    };
    eprintln!(
        "training on {} patches ({}x{}x{}), {} steps, seed {}",
        dataset.len(),
        cfg.patch_size,
        cfg.patch_size,
        cfg.channels,
        cfg.steps,
        cfg.seed
    );
    let (model, log) = training::train(&dataset, &cfg)?;
    model.save(Path::new(out))?;
    eprintln!(
        "saved model {:#018x} to {out}; final loss {:.4}",
        model.model_hash(),
        log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    if let Some(log_path) = flags.get("log") {
        std::fs::write(log_path, log.to_csv()).map_err(Error::Io)?;
    }
    Ok(0)
}

fn cmd_encode(flags: &Flags) -> CmdResult {
    let model = CodecModel::load(Path::new(flags.required("model")?))?;
    let image = load_pnm(Path::new(flags.required("in")?))?;
    let out = flags.required("out")?;
    let q: f64 = flags.parse_num("q")?.unwrap_or(1.0);
    let offset: f64 = flags.parse_num("offset")?.unwrap_or(0.45);
    let cfg = QuantConfig::new(q, offset)?;
    let bytes = codec::encode_image(&image, &model, &cfg)?;
    let bpp = 8.0 * bytes.len() as f64 / image.num_pixels() as f64;
    std::fs::write(out, &bytes).map_err(Error::Io)?;
    eprintln!(
        "encoded {}x{}x{} at Q={q} offset={offset}: {} bytes ({:.6} bpp)",
        image.width,
        image.height,
        image.channels,
        bytes.len(),
        bpp
    );
    Ok(0)
}

fn cmd_decode(flags: &Flags) -> CmdResult {
    let model = CodecModel::load(Path::new(flags.required("model")?))?;
    let bytes = std::fs::read(flags.required("in")?).map_err(Error::Io)?;
    let out = flags.required("out")?;
    let image = codec::decode_image(&bytes, &model)?;
    save_pnm(Path::new(out), &image)?;
    eprintln!(
        "decoded {}x{}x{} to {out}",
        image.width, image.height, image.channels
    );
    Ok(0)
}

fn cmd_rdsweep(flags: &Flags) -> CmdResult {
    let model = CodecModel::load(Path::new(flags.required("model")?))?;
    let images = load_dir_images(Path::new(flags.required("dir")?))?;
    let out = flags.required("out")?;
    let points = codec::rd_sweep_default(&images, &model)?;
    std::fs::write(out, codec::rd_csv(&points)).map_err(Error::Io)?;
    eprintln!("wrote {} sweep rows to {out}", points.len());
    Ok(0)
}

fn cmd_isometry(flags: &Flags) -> CmdResult {
    let model = CodecModel::load(Path::new(flags.required("model")?))?;
    let mut cfg = TrainConfig {
        patch_size: model.autoencoder.patch_size,
        channels: model.autoencoder.channels_in,
        latent_dim: model.autoencoder.latent_dim,
        ..TrainConfig::default()
    };
    if let Some(l2) = flags.parse_num::<f64>("lambda2")? {
        cfg.lambda2 = l2;
    }
    if let Some(a) = flags.parse_num::<f64>("alpha")? {
        cfg.alpha = a;
    }
    let samples: usize = flags.parse_num("samples")?.unwrap_or(32);
    let seed: u64 = flags.parse_num("seed")?.unwrap_or(0);
    let patches = synth::training_patches(samples, cfg.patch_size, cfg.channels, seed);
    let report = training::isometry_check(&model, &patches, &cfg)?;
    println!("samples {}", report.samples);
    println!("mean_diag {:.6}", report.mean_diag);
    println!("max_offdiag_ratio {:.6}", report.max_offdiag_ratio);
    println!("expected_c {:.6}", report.expected_c);
    println!("sigma_sq {:.6}", report.sigma_sq);
    println!("sigma {:.6}", report.sigma);
    Ok(0)
}

fn cmd_gradcheck(flags: &Flags) -> CmdResult {
    let seed: u64 = flags.parse_num("seed")?.unwrap_or(0);
    let tol: f64 = flags.parse_num("tol")?.unwrap_or(1e-5);
    let cfg = TrainConfig {
        patch_size: 4,
        latent_dim: 4,
        hidden_layers: 1,
        seed,
        ..TrainConfig::default()
    };
    let model = CodecModel::init(4, 1, 4, 1, 3, seed.wrapping_add(1));
    let patches = synth::training_patches(1000, 4, 1, seed);
    let b = 3;
    let d = 16;
    let mut data = Vec::with_capacity(b * d);
    for p in patches.iter().take(b) {
        data.extend_from_slice(p);
    }
    let batch = Tensor::new(&[b, d], data)?;
    let mut rng = Rng::new(seed.wrapping_add(2));
    let noise = Tensor::new(&[b, 4], cfg.noise().sample(b * 4, &mut rng))?;
    let mut tg = TrainGraph::build(&model, &cfg, b);
    let report = tg.graph.grad_check(&TrainGraph::inputs(&batch, &noise), tol)?;
    for e in &report.entries {
        if e.excluded {
            println!("param {:<10} excluded", e.name);
        } else {
            println!("param {:<10} max_rel_err {:.3e}", e.name, e.max_rel_err);
        }
    }
    for n in &report.excluded_nodes {
        println!("excluded node: {n}");
    }
    println!(
        "gradcheck {} (tolerance {:.1e}, worst {:.3e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.tolerance,
        report.worst()
    );
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_selftest(_flags: &Flags) -> CmdResult {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Quantizer: partition membership and widths over the sweep grids.
    {
        let mut rng = Rng::new(1);
        let mut ok = true;
        'outer: for &q in &quant::Q_SWEEP {
            for &offset in &quant::OFFSET_SWEEP {
                let cfg = QuantConfig::new(q, offset).unwrap();
                for _ in 0..30_000 {
                    let y = rng.uniform(-40.0, 40.0);
                    let s = quant::dead_zone_quantize(y, &cfg);
                    let (lo, hi) = quant::symbol_interval(s, &cfg);
                    if !(y >= lo && y < hi) {
                        ok = false;
                        break 'outer;
                    }
                }
                let (lo0, hi0) = quant::symbol_interval(0, &cfg);
                if ((hi0 - lo0) - 2.0 * (1.0 - offset) * q).abs() > 1e-12 {
                    ok = false;
                    break 'outer;
                }
            }
        }
        check("quantizer partition and dead-zone width", ok);
    }

    // Round quantization equivalence at offset 0.5.
    {
        let cfg = QuantConfig::new(1.25, 0.5).unwrap();
        let mut rng = Rng::new(2);
        let ok = (0..100_000).all(|_| {
            let y = rng.uniform(-30.0, 30.0);
            quant::dead_zone_quantize(y, &cfg) == (y / 1.25).round() as i64
        });
        check("offset 0.5 equals round-to-nearest", ok);
    }

    // Coder round trips against random tables.
    {
        let mut rng = Rng::new(3);
        let mut ok = true;
        for _ in 0..20 {
            let n = 3 + rng.below(40);
            let probs: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-6).collect();
            let freqs = quant::apportion_frequencies(&probs).unwrap();
            let table = crate::coder::FrequencyTable::new(-(n as i64 / 2), freqs).unwrap();
            let symbols: Vec<i64> = (0..5000)
                .map(|_| {
                    let span = (table.s_max() - table.s_min() + 1) as usize;
                    table.s_min() + rng.below(span) as i64
                })
                .collect();
            let plane = crate::quant::SymbolPlane {
                n_units: symbols.len(),
                n_channels: 1,
                symbols: symbols.clone(),
            };
            let bytes = crate::coder::range_encode(&plane, std::slice::from_ref(&table)).unwrap();
            let back = crate::coder::range_decode(&bytes, std::slice::from_ref(&table), symbols.len())
                .unwrap();
            if back != symbols {
                ok = false;
                break;
            }
        }
        check("range coder round trip", ok);
    }

    // Metric fixed points.
    {
        let ok = (metrics::msssim_db(0.9) - 10.0).abs() < 1e-9
            && (metrics::msssim_db(0.99) - 20.0).abs() < 1e-9
            && metrics::msssim_db(1.0) == 100.0;
        check("ms-ssim dB fixed points", ok);
    }

    // Bitstream container round trip.
    {
        let header = crate::coder::BitstreamHeader {
            flags: 0,
            width: 40,
            height: 30,
            channels: 1,
            patch_size: 8,
            latent_dim: 2,
            q: 1.0,
            offset: 0.45,
            model_hash: 0xABCD,
            symbol_bounds: vec![(-3, 3), (-5, 5)],
        };
        let bytes = crate::coder::write_bitstream(&header, b"payload").unwrap();
        let ok = matches!(crate::coder::read_bitstream(&bytes), Ok((h, p)) if h == header && p == b"payload");
        check("bitstream container round trip", ok);
    }

    if failures == 0 {
        println!("selftest PASS");
        Ok(0)
    } else {
        println!("selftest FAIL ({failures} failures)");
        Ok(1)
    }
}
