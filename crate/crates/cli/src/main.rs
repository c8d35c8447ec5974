//! `metaconv` command-line tool. Every subcommand reads one pipeline config,
//! writes its artifacts into `--output`, and finishes with a manifest.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metaconv::adapt::{fit_calibration, hybrid_logits, predictions, transfer_fit, transfer_logits, CalibrationLayer, TransferHead};
use metaconv::analytics::{
    alexnet_layers, compressed_layers, confusion_matrix, count_macs, energy_estimate, hybrid_layers, pca_project, write_pca_csv,
};
use metaconv::distill::{accuracy, distill_train, predict_student, teacher_accuracy, train_teacher, KdConfig, TeacherLogits};
use metaconv::io::config::{PipelineConfig, Scale};
use metaconv::io::container::TensorFile;
use metaconv::io::dataset::{write_pgm, LabeledImageSet};
use metaconv::io::features::FeatureDataset;
use metaconv::io::manifest::Manifest;
use metaconv::io::synthetic;
use metaconv::kernel_bank::{write_kernels, CHANNEL_NAMES};
use metaconv::nn::student::StudentNetwork;
use metaconv::nn::N_CLASSES;
use metaconv::pipeline;
use metaconv::sensor::PsfBank;
use metaconv::{Student32, Student64};
use ndarray::Array2;
use serde_json::json;

/// Published full-scale compressed-network accuracies, quoted in reports.
const FULL_SCALE_NOTE: &str = "published full-scale accuracies (75.90% distilled student, 76.59% compressed CNN) use the full \
                               teacher and full training data and are not reproducible at desk scale";

#[derive(Parser)]
#[command(name = "metaconv", version, about = "Metasurface convolution encoder: design, simulate, distill, calibrate")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every stage seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "metaconv-out")]
    output: PathBuf,
    #[arg(long, global = true, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// Allow the full-size 1600×1600 logical map.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write the configured synthetic dataset as CIFAR-10 binary batches.
    SynthData {
        /// Use the transfer dataset section instead of the main one.
        #[arg(long)]
        transfer: bool,
    },
    /// Fit the phase proxy to the phase table for every wavelength.
    FitProxy,
    /// Train the desk-scale teacher and export its logits.
    Teacher,
    /// Train the student, optionally distilling from teacher logits.
    Distill {
        #[arg(long)]
        teacher_logits: Option<PathBuf>,
    },
    /// Design the PSF bank for a student's kernels.
    Design {
        #[arg(long)]
        student: PathBuf,
        /// Use the kernels themselves as PSFs (oracle bank, no optimization).
        #[arg(long)]
        ideal: bool,
    },
    /// Simulate capture of both dataset splits into feature files.
    Encode {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        transfer: bool,
    },
    /// Fit the calibration layer on training features.
    Calibrate {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Fit a transfer head on features of the transfer dataset.
    Transfer {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        test_features: PathBuf,
    },
    /// Accuracy, confusion matrix and PCA of a digital or hybrid model.
    Eval {
        #[arg(long)]
        student: PathBuf,
        /// Test feature file; without it the digital student is evaluated.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, conflicts_with = "transfer")]
        calibration: Option<PathBuf>,
        #[arg(long)]
        transfer: Option<PathBuf>,
        /// Evaluate on the transfer dataset's test split (digital mode).
        #[arg(long)]
        transfer_data: bool,
    },
    /// MAC ledgers of the original, compressed and hybrid networks.
    Macs,
    /// Sensor and compute energy per classified image.
    Energy,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Config => "config",
            Command::SynthData { .. } => "synth-data",
            Command::FitProxy => "fit-proxy",
            Command::Teacher => "teacher",
            Command::Distill { .. } => "distill",
            Command::Design { .. } => "design",
            Command::Encode { .. } => "encode",
            Command::Calibrate { .. } => "calibrate",
            Command::Transfer { .. } => "transfer",
            Command::Eval { .. } => "eval",
            Command::Macs => "macs",
            Command::Energy => "energy",
        }
    }
}

/// Output files written so far; removed again if the run fails.
struct Run {
    dir: PathBuf,
    written: Vec<PathBuf>,
    manifest: Manifest,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.output(&path, name)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.input(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(())
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn read_tensors(run: &mut Run, path: &Path) -> Result<TensorFile> {
    run.input(path)?;
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(TensorFile::read(BufReader::new(f))?)
}

fn read_features(run: &mut Run, path: &Path) -> Result<FeatureDataset> {
    run.input(path)?;
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(FeatureDataset::read(BufReader::new(f))?)
}

fn tensor_bytes(f: &TensorFile) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f.write(&mut buf)?;
    Ok(buf)
}

fn load_data(run: &mut Run, cfg: &PipelineConfig, transfer: bool) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let section = if transfer { &cfg.transfer_data } else { &cfg.data };
    let (train, test) = section.load()?;
    run.manifest.data_provenance.push(train.provenance.clone());
    run.manifest.data_provenance.push(test.provenance.clone());
    run.manifest.count("train_images", train.len() as u64);
    run.manifest.count("test_images", test.len() as u64);
    let skipped = train.skipped.len() + test.skipped.len();
    if skipped > 0 {
        run.manifest.count("skipped_files", skipped as u64);
        run.manifest.notes.extend(train.skipped.iter().chain(&test.skipped).map(|s| format!("skipped {s}")));
    }
    Ok((train, test))
}

fn load_student(run: &mut Run, path: &Path) -> Result<Student64> {
    Ok(StudentNetwork::from_tensors(&read_tensors(run, path)?)?)
}

fn eval_outputs(run: &mut Run, prefix: &str, logits: &Array2<f64>, backend_inputs: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    let preds = predictions(logits);
    let labels_us: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let cm = confusion_matrix(&preds, &labels_us, N_CLASSES)?;
    let mut buf = Vec::new();
    cm.write_csv(&mut buf)?;
    run.write(&format!("{prefix}confusion.csv"), &buf)?;
    let rows: Vec<Vec<f64>> = backend_inputs.rows().into_iter().map(|r| r.to_vec()).collect();
    if rows.len() > 2 {
        let pca = pca_project(&rows, &labels_us, 2)?;
        let mut buf = Vec::new();
        write_pca_csv(&pca, &labels_us, &mut buf)?;
        run.write(&format!("{prefix}pca.csv"), &buf)?;
    }
    Ok(cm.accuracy())
}

fn execute(command: &Command, cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    match command {
        Command::Config => unreachable!("handled before the run starts"),
        Command::SynthData { transfer } => {
            let section = if *transfer { &cfg.transfer_data } else { &cfg.data };
            let train = synthetic::generate(section.family, section.train_count, section.seed);
            let test = synthetic::generate(section.family, section.test_count, section.seed.wrapping_add(1));
            for (name, set) in [("data_batch_1.bin", &train), ("test_batch.bin", &test)] {
                let mut buf = Vec::new();
                set.write_cifar(&mut buf)?;
                run.write(name, &buf)?;
            }
            run.manifest.data_provenance = vec![train.provenance.clone(), test.provenance.clone()];
            run.manifest.count("train_images", train.len() as u64);
            run.manifest.count("test_images", test.len() as u64);
            println!("wrote {} train and {} test images ({})", train.len(), test.len(), section.family.name());
        }
        Command::FitProxy => {
            if let Some(p) = &cfg.optics.phase_table {
                run.input(p)?;
            }
            let fits = pipeline::fit_proxies(cfg)?;
            let mut out = csv_writer();
            out.write_record(["wavelength_m", "amplitude", "center_m", "width_param_m2", "offset", "n_eff", "rms_residual"])?;
            for f in &fits {
                let p = &f.params;
                out.write_record(
                    [p.wavelength, p.amplitude, p.center, p.width_param, p.offset, p.n_eff, f.rms_residual].map(|v| format!("{v:e}")),
                )?;
                println!("{:.0} nm: rms residual {:.4} rad", p.wavelength * 1e9, f.rms_residual);
            }
            run.write("proxy_fits.csv", &out.into_inner()?)?;
        }
        Command::Teacher => {
            let (train, test) = load_data(run, cfg, false)?;
            let (net, logits, losses) = train_teacher::<f32>(&train, &cfg.teacher)?;
            let acc = teacher_accuracy(&net, &test)?;
            let mut tf = TensorFile::new();
            net.to_tensors(&mut tf)?;
            run.write("teacher.tensors", &tensor_bytes(&tf)?)?;
            let mut buf = Vec::new();
            logits.write(&mut buf)?;
            run.write("teacher_logits.bin", &buf)?;
            run.write_json("teacher_report.json", &json!({ "test_accuracy": acc, "epoch_loss": losses }))?;
            println!("teacher test accuracy {:.2}%", 100.0 * acc);
        }
        Command::Distill { teacher_logits } => {
            let (train, test) = load_data(run, cfg, false)?;
            let teacher = match teacher_logits {
                Some(p) => {
                    run.input(p)?;
                    Some(TeacherLogits::read(BufReader::new(fs::File::open(p)?))?)
                }
                None => None,
            };
            // Without teacher logits only the label term remains.
            let kd = KdConfig {
                alpha: if teacher.is_some() { cfg.distill.alpha } else { 1.0 },
                ..cfg.distill.clone()
            };
            let (net, history) = distill_train::<f32>(&train, teacher.as_ref(), &kd, Student32::init(kd.seed))?;
            let acc = accuracy(&predict_student(&net, &test)?, &test.labels);
            let mut tf = TensorFile::new();
            net.to_tensors(&mut tf)?;
            run.write("student.tensors", &tensor_bytes(&tf)?)?;
            let mut buf = Vec::new();
            write_kernels(&net.conv_kernels(), &mut buf)?;
            run.write("kernels.bin", &buf)?;
            run.manifest.notes.push(FULL_SCALE_NOTE.into());
            run.write_json(
                "distill_report.json",
                &json!({
                    "test_accuracy": acc,
                    "teacher": teacher.is_some(),
                    "history": history,
                    "note": FULL_SCALE_NOTE,
                }),
            )?;
            println!("student test accuracy {:.2}% ({})", 100.0 * acc, if teacher.is_some() { "distilled" } else { "labels only" });
            println!("note: {FULL_SCALE_NOTE}");
        }
        Command::Design { student, ideal } => {
            let net = load_student(run, student)?;
            let kernels = net.conv_kernels();
            let e = cfg.sensor.enlargement;
            let bank = if *ideal {
                PsfBank::ideal(&kernels, e)?
            } else {
                if let Some(p) = &cfg.optics.phase_table {
                    run.input(p)?;
                }
                let fits = pipeline::fit_proxies(cfg)?;
                let (design, bank) = pipeline::design_psf_bank(cfg, &fits, &kernels)?;
                let n = kernels.n_kernels();
                let mut out = csv_writer();
                out.write_record(["optic", "kernel", "polarity", "channel", "eta", "best_iteration"])?;
                for (i, r) in design.results.iter().enumerate() {
                    for (c, eta) in r.cosine.iter().enumerate() {
                        let eta = eta.map(|v| format!("{v:.6}")).unwrap_or_else(|| "untargeted".into());
                        let polarity = if i < n { "pos" } else { "neg" };
                        out.write_record([i.to_string(), (i % n).to_string(), polarity.into(), CHANNEL_NAMES[c].into(), eta, r.best_iteration.to_string()])?;
                    }
                    let mut buf = Vec::new();
                    r.map.write_checkpoint(&mut buf, cfg.design.seed.wrapping_add(i as u64), r.best_iteration)?;
                    run.write(&format!("widths/optic_{i:03}.bin"), &buf)?;
                }
                run.write("design_report.csv", &out.into_inner()?)?;
                println!("designed {} optics, mean eta {:.4}", design.results.len(), design.mean_cosine());
                bank
            };
            for (i, optic) in bank.optics.iter().enumerate() {
                for (c, plane) in optic.planes.iter().enumerate() {
                    if let Some(p) = plane {
                        let mut buf = Vec::new();
                        write_pgm(p, optic.window, &mut buf)?;
                        run.write(&format!("psfs/optic_{i:03}_{}.pgm", CHANNEL_NAMES[c]), &buf)?;
                    }
                }
            }
            run.write("psf_bank.tensors", &tensor_bytes(&bank.to_tensor_file()?)?)?;
            run.manifest.count("optics", bank.optics.len() as u64);
        }
        Command::Encode { bank, transfer } => {
            let bank = PsfBank::<f64>::from_tensor_file(&read_tensors(run, bank)?)?;
            let (train, test) = load_data(run, cfg, *transfer)?;
            let (tr, te, exposure) = pipeline::encode_splits(&bank, &cfg.sensor, cfg.seed, &train, &test)?;
            let prefix = if *transfer { "transfer_" } else { "" };
            for (name, f) in [("features_train.bin", &tr), ("features_test.bin", &te)] {
                let mut buf = Vec::new();
                f.write(&mut buf)?;
                run.write(&format!("{prefix}{name}"), &buf)?;
            }
            run.manifest.count("overexposed_train", tr.header.overexposed.len() as u64);
            run.manifest.count("overexposed_test", te.header.overexposed.len() as u64);
            run.write_json(
                &format!("{prefix}encode_report.json"),
                &json!({
                    "exposure_gain": exposure.gain,
                    "dark_calibration": exposure.dark,
                    "exposure_scenes": pipeline::EXPOSURE_SCENES.min(train.len()),
                    "overexposed_train": tr.header.overexposed,
                    "overexposed_test": te.header.overexposed,
                }),
            )?;
            println!(
                "encoded {} + {} images, gain {:.4}, overexposed {} / {}",
                tr.len(),
                te.len(),
                exposure.gain,
                tr.header.overexposed.len(),
                te.header.overexposed.len()
            );
        }
        Command::Calibrate { student, features } => {
            let net = load_student(run, student)?;
            let feats = read_features(run, features)?;
            let (train, _) = load_data(run, cfg, false)?;
            let digital = pipeline::aligned_digital(&net, &train, &feats)?;
            let (optical, _) = feats.matrix::<f64>(&feats.included());
            run.manifest.count("excluded_overexposed", feats.header.overexposed.len() as u64);
            let (layer, report) = fit_calibration(&optical, &digital, &cfg.calibration)?;
            let mut tf = TensorFile::new();
            layer.to_tensors(&mut tf)?;
            run.write("calibration.tensors", &tensor_bytes(&tf)?)?;
            run.write_json(
                "calibration_report.json",
                &json!({
                    "samples": report.samples,
                    "iterations": report.iterations,
                    "identity_loss": report.identity_loss,
                    "final_loss": report.loss_history.last().copied().unwrap_or(report.identity_loss),
                    "loss_history": report.loss_history,
                }),
            )?;
            println!(
                "calibration on {} samples: loss {:.4e} -> {:.4e}",
                report.samples,
                report.identity_loss,
                report.loss_history.last().copied().unwrap_or(report.identity_loss)
            );
        }
        Command::Transfer { student, features, test_features } => {
            let net = load_student(run, student)?;
            let feats = read_features(run, features)?;
            let test_feats = read_features(run, test_features)?;
            let (train, _) = load_data(run, cfg, true)?;
            let digital = pipeline::aligned_digital(&net, &train, &feats)?;
            let (optical, labels) = feats.matrix::<f64>(&feats.included());
            let (head, history) = transfer_fit(&optical, &digital, &labels, &net, &cfg.transfer)?;
            let (test_x, test_labels) = test_feats.matrix::<f64>(&test_feats.included());
            let baseline = accuracy(&predictions(&hybrid_logits(&net, None, &test_x)), &test_labels);
            let acc = accuracy(&predictions(&transfer_logits(&head, &net, &test_x)), &test_labels);
            let mut tf = TensorFile::new();
            head.to_tensors(&mut tf)?;
            run.write("transfer.tensors", &tensor_bytes(&tf)?)?;
            run.write_json(
                "transfer_report.json",
                &json!({ "baseline_accuracy": baseline, "transfer_accuracy": acc, "epoch_loss": history.epoch_loss }),
            )?;
            println!("transfer: frozen baseline {:.2}% -> {:.2}%", 100.0 * baseline, 100.0 * acc);
        }
        Command::Eval {
            student,
            features,
            calibration,
            transfer,
            transfer_data,
        } => {
            let net = load_student(run, student)?;
            let (inputs, logits, labels, mode) = match features {
                Some(p) => {
                    let feats = read_features(run, p)?;
                    let keep = feats.included();
                    run.manifest.count("excluded_overexposed", feats.header.overexposed.len() as u64);
                    let (x, labels) = feats.matrix::<f64>(&keep);
                    if let Some(c) = calibration {
                        let cal = CalibrationLayer::from_tensors(&read_tensors(run, c)?)?;
                        let x = cal.apply(x.view());
                        let logits = hybrid_logits(&net, None, &x);
                        (x, logits, labels, "hybrid+calibration")
                    } else if let Some(t) = transfer {
                        let head = TransferHead::from_tensors(&read_tensors(run, t)?)?;
                        let x = head.forward(x.view()).output;
                        let logits = hybrid_logits(&net, None, &x);
                        (x, logits, labels, "hybrid+transfer")
                    } else {
                        let logits = hybrid_logits(&net, None, &x);
                        (x, logits, labels, "hybrid")
                    }
                }
                None => {
                    if calibration.is_some() || transfer.is_some() {
                        bail!("--calibration and --transfer apply to optical features; pass --features");
                    }
                    let (_, test) = load_data(run, cfg, *transfer_data)?;
                    let x = pipeline::digital_features(&net, &test)?;
                    let logits = hybrid_logits(&net, None, &x);
                    (x, logits, test.labels.clone(), "digital")
                }
            };
            run.manifest.count("evaluated", labels.len() as u64);
            let acc = eval_outputs(run, "eval_", &logits, &inputs, &labels)?;
            run.write_json("eval_report.json", &json!({ "mode": mode, "images": labels.len(), "accuracy": acc }))?;
            println!("{mode} accuracy {:.2}% on {} images", 100.0 * acc, labels.len());
        }
        Command::Macs => {
            let ledgers = [
                count_macs("alexnet", &alexnet_layers()),
                count_macs("compressed", &compressed_layers()),
                count_macs("hybrid", &hybrid_layers()),
            ];
            for l in &ledgers {
                let mut buf = Vec::new();
                l.write_csv(&mut buf)?;
                run.write(&format!("macs_{}.csv", l.architecture), &buf)?;
                println!("{:>10}: {:>13} MACs", l.architecture, l.total);
            }
            let [a, c, h] = [ledgers[0].total, ledgers[1].total, ledgers[2].total].map(|v| v as f64);
            run.write_json(
                "macs_summary.json",
                &json!({
                    "alexnet": ledgers[0].total,
                    "compressed": ledgers[1].total,
                    "hybrid": ledgers[2].total,
                    "alexnet_over_compressed": a / c,
                    "compressed_over_hybrid": c / h,
                    "alexnet_over_hybrid": a / h,
                }),
            )?;
            println!("ratios: {:.0}x, {:.1}x, {:.0}x", a / c, c / h, a / h);
        }
        Command::Energy => {
            let digital = energy_estimate(&count_macs("alexnet", &alexnet_layers()), 32 * 32, &cfg.energy)?;
            let hybrid = energy_estimate(&count_macs("hybrid", &hybrid_layers()), 32 * 6 * 6, &cfg.energy)?;
            let per_pixel = cfg.energy.energy_per_pixel_j();
            run.write_json(
                "energy.json",
                &json!({
                    "energy_per_pixel_j": per_pixel,
                    "original": digital,
                    "hybrid": hybrid,
                }),
            )?;
            println!("sensor energy per pixel {:.2} nJ", per_pixel * 1e9);
            println!(
                "original: sensor {:.1} uJ, compute {:.3} mJ",
                digital.sensor_j * 1e6,
                digital.compute_j * 1e3
            );
            println!("hybrid:   sensor {:.1} uJ, compute {:.0} nJ", hybrid.sensor_j * 1e6, hybrid.compute_j * 1e9);
        }
    }
    Ok(())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if g.paper_scale {
        cfg.set_scale(Scale::Paper);
    } else if g.desk_scale {
        cfg.scale = Scale::Desk;
    }
    cfg.validate()?;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    fs::create_dir_all(&g.output).with_context(|| format!("creating {}", g.output.display()))?;
    let mut run = Run {
        dir: g.output.clone(),
        written: Vec::new(),
        manifest: Manifest::new(cli.command.name(), &cfg)?,
    };
    if let Some(p) = &g.config {
        run.input(p)?;
    }
    let result = execute(&cli.command, &cfg, &mut run).and_then(|()| {
        run.manifest.write(&run.dir)?;
        Ok(())
    });
    if result.is_err() {
        run.cleanup();
    }
    result
}
