//! Command-line surface: shape and parameter reports, wavelet roundtrip
//! inspection, attention cost benchmarks, synthetic data generation,
//! training, evaluation, and inference.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 failed `--check`
//! assertion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use waveformer::attention::{window_msa, AttentionConfig, BlockParams};
use waveformer::autodiff::Tape;
use waveformer::error::CoreError;
use waveformer::metrics::{dice_by_size_bin, dice_eval, hd95, LabelVolume};
use waveformer::model::{self, ModelConfig, Variant};
use waveformer::prng::Prng;
use waveformer::tensor::Tensor;
use waveformer::train::{gen_synthetic, predict_labels, train_toy, SynthSample, TrainOptions};
use waveformer::wavelet::{dwt3d_multi, idwt3d_multi, lf_upsample, WaveletFilter};
use waveformer_cli::config::RunConfig;
use waveformer_cli::{io, CliError};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |err| CliError::Io {
        path: path.display().to_string(),
        err,
    }
}

#[derive(Parser)]
#[command(
    name = "waveformer",
    version,
    about = "Wavelet-attention 3D segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the encoder/decoder shape chain and verify the shape contract
    Shapes {
        #[arg(long)]
        config: PathBuf,
        /// Assert the stage chain and exit 2 on any violation
        #[arg(long)]
        check: bool,
    },
    /// Report parameter counts per variant and module
    Params {
        /// Model config; defaults to the full-scale reference (96³, C=48)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict the report to one variant
        #[arg(long)]
        variant: Option<String>,
        /// Assert count equalities/orderings and exit 2 on violation
        #[arg(long)]
        check: bool,
    },
    /// Decompose and reconstruct a volume, reporting errors and energy
    Roundtrip {
        #[arg(long = "in")]
        input: PathBuf,
        /// Write the low-frequency-only reconstruction here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value = "haar")]
        wavelet: String,
    },
    /// Compare attention token counts and wall-clock with and without DWT
    BenchAttn {
        /// Model config; defaults to the full-scale reference
        #[arg(long)]
        config: Option<PathBuf>,
        /// Assert token counts and the timing ordering, exit 2 on violation
        #[arg(long)]
        check: bool,
    },
    /// Generate a seeded synthetic dataset under the configured data dir
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the generated dataset; writes checkpoint and loss trace
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score predictions (from a checkpoint or a directory) against labels
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of *.lab.wvf predictions to score instead of a model
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Run inference on volumes and write argmax label files
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A *.vol.wvf file or a directory of them
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Shapes { config, check } => cmd_shapes(&config, check),
        Cmd::Params {
            config,
            variant,
            check,
        } => cmd_params(config.as_deref(), variant.as_deref(), check),
        Cmd::Roundtrip {
            input,
            out,
            levels,
            wavelet,
        } => cmd_roundtrip(&input, out.as_deref(), levels, &wavelet),
        Cmd::BenchAttn { config, check } => cmd_bench_attn(config.as_deref(), check),
        Cmd::GenData { config, seed } => cmd_gen_data(&config, seed),
        Cmd::Train {
            config,
            seed,
            iters,
        } => cmd_train(&config, seed, iters),
        Cmd::Eval {
            config,
            checkpoint,
            pred_dir,
        } => cmd_eval(&config, checkpoint.as_deref(), pred_dir.as_deref()),
        Cmd::Predict {
            config,
            checkpoint,
            input,
            out,
        } => cmd_predict(&config, &checkpoint, &input, &out),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Check(msg)) => {
            eprintln!("check failed: {msg}");
            std::process::exit(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

fn base_config(config: Option<&Path>) -> Result<ModelConfig, CliError> {
    match config {
        Some(path) => RunConfig::load(path)?.model_config(),
        None => Ok(ModelConfig::full(4, 4)),
    }
}

fn cmd_shapes(config: &Path, check: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?.model_config()?;
    println!(
        "shape chain for {}³ input, {} channels in, {} classes, variant {}:",
        cfg.input_extent,
        cfg.in_channels,
        cfg.num_classes,
        cfg.variant.name()
    );
    for (name, shape) in model::shape_report(&cfg)? {
        let dims = shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" x ");
        println!("  {name:<34} {dims}");
    }
    println!("attention windows:");
    for s in 0..4 {
        let g = cfg.stage_grid(s);
        let m = cfg.stage_dwt_levels[s];
        let lf = g >> m;
        println!(
            "  stage {}: grid {g}³, dwt level {m}, attention grid {lf}³, {} tokens per window",
            s + 1,
            cfg.window.pow(3)
        );
    }
    if check {
        let mut failures = Vec::new();
        for s in 0..4 {
            let want_grid = cfg.input_extent >> (s + 1);
            let want_ch = cfg.base_channels << s;
            if cfg.stage_grid(s) != want_grid || cfg.stage_channels(s) != want_ch {
                failures.push(format!("stage {} breaks the halving/doubling chain", s + 1));
            }
            if cfg.window << cfg.stage_dwt_levels[s] != cfg.stage_grid(s) {
                failures.push(format!("stage {} window/level mismatch", s + 1));
            }
        }
        let rows: BTreeMap<String, Vec<usize>> = model::shape_report(&cfg)?.into_iter().collect();
        let e = cfg.input_extent;
        let expect: Vec<(String, Vec<usize>)> = vec![
            (
                "decoder.stage3".into(),
                vec![4 * cfg.base_channels, e / 8, e / 8, e / 8],
            ),
            (
                "decoder.stage2".into(),
                vec![2 * cfg.base_channels, e / 4, e / 4, e / 4],
            ),
            (
                "decoder.stage1".into(),
                vec![cfg.base_channels, e / 2, e / 2, e / 2],
            ),
            ("logits".into(), vec![cfg.num_classes, e, e, e]),
        ];
        for (name, want) in expect {
            if rows.get(&name) != Some(&want) {
                failures.push(format!("{name} is not {want:?}"));
            }
        }
        if failures.is_empty() {
            println!("shape contract OK");
        } else {
            return Err(CliError::Check(failures.join("; ")));
        }
    }
    Ok(())
}

fn module_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "enc" | "dec" | "up" if parts.len() > 2 => format!("{}.{}", parts[0], parts[1]),
        _ => parts[0].to_string(),
    }
}

fn cmd_params(config: Option<&Path>, variant: Option<&str>, check: bool) -> Result<(), CliError> {
    let base = base_config(config)?;
    let variants: Vec<Variant> = match variant {
        Some(name) => vec![Variant::parse(name)?],
        None => Variant::ALL.to_vec(),
    };
    for v in &variants {
        let mut cfg = base.clone();
        cfg.variant = *v;
        let specs = model::param_shapes(&cfg)?;
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for spec in &specs {
            *groups.entry(module_group(&spec.name)).or_default() +=
                spec.shape.iter().product::<usize>();
        }
        println!(
            "variant {}: {} parameters",
            v.name(),
            model::count_params(&cfg)?
        );
        for (group, count) in &groups {
            println!("  {group:<12} {count:>12}");
        }
    }
    if check {
        let count_of = |v: Variant| -> Result<usize, CliError> {
            let mut cfg = base.clone();
            cfg.variant = v;
            Ok(model::count_params(&cfg)?)
        };
        let simple = count_of(Variant::SimpleUp)?;
        let ru = count_of(Variant::ResidualUp)?;
        let hf = count_of(Variant::ResidualUpHFRef)?;
        let mla = count_of(Variant::ResidualUpMultiLevel)?;
        if ru != mla {
            return Err(CliError::Check(format!(
                "residual-up ({ru}) and residual-up-mla ({mla}) must share weights"
            )));
        }
        println!("check: residual-up == residual-up-mla ({ru})");
        if !(simple > hf && hf > ru) {
            return Err(CliError::Check(format!(
                "expected simple-up > hf-ref > residual-up, got {simple} / {hf} / {ru}"
            )));
        }
        println!("check: simple-up ({simple}) > hf-ref ({hf}) > residual-up ({ru})");
    }
    Ok(())
}

fn cmd_roundtrip(
    input: &Path,
    out: Option<&Path>,
    levels: usize,
    wavelet: &str,
) -> Result<(), CliError> {
    let filter = WaveletFilter::by_name(wavelet)?;
    let vol = io::read_volume(input)?;
    let dec = dwt3d_multi(&vol, levels, &filter)?;
    let rec = idwt3d_multi(&dec, &filter)?;
    let err = vol.max_abs_diff(&rec);
    println!(
        "{}: shape {:?}, {} level(s), wavelet {}",
        input.display(),
        vol.shape(),
        levels,
        filter.name
    );
    println!("roundtrip max-abs error: {err:.3e}");

    let energy = |t: &Tensor<f32>| -> f64 { t.data().iter().map(|&v| (v as f64).powi(2)).sum() };
    let total = energy(&vol);
    if total > 0.0 {
        let lf_frac = energy(&dec.lf) / total;
        let mut sum = lf_frac;
        println!("energy fractions:");
        println!("  approximation (level {levels}): {lf_frac:.6}");
        for (i, bands) in dec.details.iter().enumerate().rev() {
            let frac: f64 = bands.iter().map(|b| energy(b)).sum::<f64>() / total;
            sum += frac;
            println!("  details at level {}:        {frac:.6}", i + 1);
        }
        println!("  sum:                        {sum:.6}");
    } else {
        println!("volume has zero energy; fractions undefined");
    }

    if let Some(out) = out {
        let lf_only = lf_upsample(&dec.lf, levels, &filter)?;
        io::write_volume(out, &lf_only)?;
        println!("wrote low-frequency reconstruction to {}", out.display());
    }
    Ok(())
}

/// Wall-clock of one windowed-attention forward at the given grid extent.
fn time_attention(
    dim: usize,
    extent: usize,
    heads: usize,
    window: usize,
    seed: u64,
) -> Result<Duration, CliError> {
    let acfg = AttentionConfig {
        num_heads: heads,
        feature_dim: dim,
        window,
    };
    let mut rng = Prng::new(seed);
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(rng.randn(&[dim, extent, extent, extent]));
    let scale = 0.05f32;
    let w_qkv = tape.leaf(rng.randn::<f32>(&[3 * dim, dim]).scale(scale));
    let b_qkv = tape.leaf(Tensor::zeros(&[3 * dim]));
    let w_proj = tape.leaf(rng.randn::<f32>(&[dim, dim]).scale(scale));
    let b_proj = tape.leaf(Tensor::zeros(&[dim]));
    let dummy = tape.leaf(Tensor::zeros(&[dim]));
    let params = BlockParams {
        ln1_gamma: dummy,
        ln1_beta: dummy,
        w_qkv,
        b_qkv,
        w_proj,
        b_proj,
        ln2_gamma: dummy,
        ln2_beta: dummy,
        mlp_w1: dummy,
        mlp_b1: dummy,
        mlp_w2: dummy,
        mlp_b2: dummy,
    };
    let start = Instant::now();
    let _ = window_msa(&mut tape, x, &params, &acfg)?;
    Ok(start.elapsed())
}

fn cmd_bench_attn(config: Option<&Path>, check: bool) -> Result<(), CliError> {
    let cfg = base_config(config)?;
    println!(
        "attention cost per stage (window {}, {} tokens per window):",
        cfg.window,
        cfg.window.pow(3)
    );
    let mut rows = Vec::new();
    for s in 0..4 {
        let g = cfg.stage_grid(s);
        let m = cfg.stage_dwt_levels[s];
        let lf = g >> m;
        let tokens_full = g * g * g;
        let tokens_lf = lf * lf * lf;
        let reduction = tokens_full / tokens_lf;
        let t_full = time_attention(
            cfg.stage_channels(s),
            g,
            cfg.heads[s],
            cfg.window,
            90 + s as u64,
        )?;
        let t_lf = if m == 0 {
            t_full
        } else {
            time_attention(
                cfg.stage_channels(s),
                lf,
                cfg.heads[s],
                cfg.window,
                190 + s as u64,
            )?
        };
        println!(
            "  stage {}: tokens {tokens_full} -> {tokens_lf} (x{reduction}), score-matrix x{}, wall-clock {:?} -> {:?}",
            s + 1,
            reduction * reduction,
            t_full,
            t_lf,
        );
        rows.push((tokens_lf, reduction, t_full, t_lf, m));
    }
    if check {
        let want_tokens = cfg.window.pow(3);
        for (s, row) in rows.iter().enumerate() {
            if row.0 != want_tokens {
                return Err(CliError::Check(format!(
                    "stage {}: attended tokens {} != {want_tokens}",
                    s + 1,
                    row.0
                )));
            }
        }
        println!("check: every stage attends {want_tokens} tokens");
        let (_, reduction, t_full, t_lf, m) = rows[0];
        let want_reduction = 1usize << (3 * m);
        if reduction != want_reduction {
            return Err(CliError::Check(format!(
                "stage 1 token reduction {reduction} != {want_reduction}"
            )));
        }
        println!("check: stage 1 token reduction x{reduction}");
        if m > 0 && t_lf >= t_full {
            return Err(CliError::Check(format!(
                "reduced attention ({t_lf:?}) not faster than full ({t_full:?})"
            )));
        }
        println!("check: reduced attention is faster ({t_lf:?} < {t_full:?})");
    }
    Ok(())
}

fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

fn write_cases(dir: &Path, samples: &[SynthSample]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = case_name(i);
        io::write_volume(&dir.join(format!("{stem}.vol.wvf")), &s.volume)?;
        io::write_labels(&dir.join(format!("{stem}.lab.wvf")), &s.labels)?;
    }
    Ok(())
}

fn cmd_gen_data(config: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let cfg = rc.model_config()?;
    let seed = seed.unwrap_or(rc.run.seed);
    let n = rc.data.n_train + rc.data.n_val;
    let all = gen_synthetic(seed, n, cfg.input_extent, cfg.in_channels, cfg.num_classes)?;
    let root = PathBuf::from(&rc.data.dir);
    write_cases(&root.join("train"), &all[..rc.data.n_train])?;
    write_cases(&root.join("val"), &all[rc.data.n_train..])?;
    println!(
        "wrote {} training and {} validation cases ({}³, {} channels, {} classes, seed {seed}) to {}",
        rc.data.n_train,
        rc.data.n_val,
        cfg.input_extent,
        cfg.in_channels,
        cfg.num_classes,
        root.display()
    );
    Ok(())
}

fn sorted_cases(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".vol.wvf") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Format(format!(
            "{}: no *.vol.wvf volumes found",
            dir.display()
        )));
    }
    Ok(stems)
}

fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>, CliError> {
    let mut out = Vec::new();
    for stem in sorted_cases(dir)? {
        let volume = io::read_volume(&dir.join(format!("{stem}.vol.wvf")))?;
        let labels = io::read_labels(&dir.join(format!("{stem}.lab.wvf")))?;
        out.push(SynthSample { volume, labels });
    }
    Ok(out)
}

fn cmd_train(config: &Path, seed: Option<u64>, iters: Option<usize>) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let cfg = rc.model_config()?;
    let data = load_dataset(&PathBuf::from(&rc.data.dir).join("train"))?;
    let opts = TrainOptions {
        iters: iters.unwrap_or(rc.run.iterations),
        lr: rc.run.lr,
        weight_decay: rc.run.weight_decay,
        seed: seed.unwrap_or(rc.run.seed),
    };
    println!(
        "training {} for {} iterations on {} cases (lr {}, seed {})",
        cfg.variant.name(),
        opts.iters,
        data.len(),
        opts.lr,
        opts.seed
    );
    let start = Instant::now();
    let (params, trace) = train_toy(&cfg, &data, &opts)?;
    let out_dir = PathBuf::from(&rc.run.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let ckpt = out_dir.join("checkpoint.wfck");
    io::write_checkpoint(&ckpt, &params)?;
    let trace_path = out_dir.join("trace.csv");
    let mut csv = String::from("iteration,loss,dice,ce\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.iter, row.loss, row.dice, row.ce
        ));
    }
    std::fs::write(&trace_path, csv).map_err(io_err(&trace_path))?;
    let last = trace.last().expect("nonempty trace");
    println!(
        "finished in {:?}: loss {:.4} (dice {:.4}, ce {:.4})",
        start.elapsed(),
        last.loss,
        last.dice,
        last.ce
    );
    println!("wrote {} and {}", ckpt.display(), trace_path.display());
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

fn cmd_eval(
    config: &Path,
    checkpoint: Option<&Path>,
    pred_dir: Option<&Path>,
) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let cfg = rc.model_config()?;
    let gt_dir = PathBuf::from(&rc.data.dir).join("val");
    let stems = sorted_cases(&gt_dir)?;
    let spacing = rc.eval.spacing;
    let want_dice = rc.eval.metrics.iter().any(|m| m == "dice");
    let want_hd = rc.eval.metrics.iter().any(|m| m == "hd95");

    let store = match (pred_dir, checkpoint) {
        (Some(_), _) => None,
        (None, Some(ckpt)) => Some(io::read_checkpoint_for(ckpt, &cfg)?),
        (None, None) => {
            return Err(CliError::Config(
                "eval needs either --checkpoint or --pred-dir".into(),
            ))
        }
    };

    let mut gts: Vec<LabelVolume> = Vec::new();
    let mut preds: Vec<LabelVolume> = Vec::new();
    for stem in &stems {
        let gt = io::read_labels(&gt_dir.join(format!("{stem}.lab.wvf")))?;
        let pred = match (pred_dir, &store) {
            (Some(dir), _) => io::read_labels(&dir.join(format!("{stem}.lab.wvf")))?,
            (None, Some(store)) => {
                let vol = io::read_volume(&gt_dir.join(format!("{stem}.vol.wvf")))?;
                predict_labels(&cfg, store, &vol)?
            }
            _ => unreachable!(),
        };
        gts.push(gt);
        preds.push(pred);
    }

    let classes: Vec<u32> = (1..cfg.num_classes as u32).collect();
    let mut csv = String::from("case,class,dice,hd95\n");
    let mut dice_sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut hd_sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    println!("case            class   dice     hd95");
    for (i, stem) in stems.iter().enumerate() {
        for &class in &classes {
            let d = if want_dice {
                Some(dice_eval(&preds[i], &gts[i], class)?)
            } else {
                None
            };
            let h = if want_hd {
                match hd95(&preds[i], &gts[i], class, spacing) {
                    Ok(v) => Some(v),
                    Err(CoreError::EmptyMask(_)) => None,
                    Err(e) => return Err(e.into()),
                }
            } else {
                None
            };
            if let Some(v) = d {
                let e = dice_sums.entry(class).or_default();
                e.0 += v;
                e.1 += 1;
            }
            if let Some(v) = h {
                let e = hd_sums.entry(class).or_default();
                e.0 += v;
                e.1 += 1;
            }
            println!(
                "{stem:<15} {class:<7} {:<8} {}",
                fmt_metric(d),
                fmt_metric(h)
            );
            csv.push_str(&format!(
                "{stem},{class},{},{}\n",
                d.map(|v| v.to_string()).unwrap_or_default(),
                h.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
    }

    println!("aggregate:");
    let mut fg_dice = (0.0, 0usize);
    for &class in &classes {
        let d = dice_sums.get(&class).map(|(s, n)| s / *n as f64);
        let h = hd_sums.get(&class).map(|(s, n)| s / *n as f64);
        if let Some((s, n)) = dice_sums.get(&class) {
            fg_dice.0 += s;
            fg_dice.1 += n;
        }
        println!(
            "  class {class}: mean dice {} ({} cases), mean hd95 {} ({} cases)",
            fmt_metric(d),
            dice_sums.get(&class).map(|e| e.1).unwrap_or(0),
            fmt_metric(h),
            hd_sums.get(&class).map(|e| e.1).unwrap_or(0),
        );
    }
    if fg_dice.1 > 0 {
        println!(
            "  mean foreground dice: {:.4}",
            fg_dice.0 / fg_dice.1 as f64
        );
    }

    if !rc.eval.bins_cm3.is_empty() && want_dice {
        for &class in &classes {
            let stats = dice_by_size_bin(&preds, &gts, class, &rc.eval.bins_cm3, spacing)?;
            println!("  class {class} dice by reference volume (cm³):");
            for s in &stats {
                println!(
                    "    {:<12} {} ({} cases)",
                    s.label,
                    fmt_metric(s.mean_dice),
                    s.cases
                );
            }
        }
    }

    let out_dir = PathBuf::from(&rc.run.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_predict(config: &Path, checkpoint: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let cfg = rc.model_config()?;
    let store = io::read_checkpoint_for(checkpoint, &cfg)?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        sorted_cases(input)?
            .into_iter()
            .map(|stem| input.join(format!("{stem}.vol.wvf")))
            .collect()
    } else {
        vec![input.to_path_buf()]
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for path in &inputs {
        let vol = io::read_volume(path)?;
        let labels = predict_labels(&cfg, &store, &vol)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume.vol.wvf".into());
        let stem = name.strip_suffix(".vol.wvf").unwrap_or(&name);
        let target = out.join(format!("{stem}.lab.wvf"));
        io::write_labels(&target, &labels)?;
        println!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}
