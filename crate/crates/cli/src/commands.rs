//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fiwkit::he_pipeline::{compile, run_encrypted_inference, CompileOptions, OpCountReport};
use fiwkit::he_sim::{default_log_q, select_moduli, HeParams, RnsContext};
use fiwkit::network::{
    fiw_empirical, fiw_static, int_infer, quantise_network, BiasMode, FiwReport, IntNetwork,
    NetworkDoc, PtqConfig,
};
use fiwkit::qat::{evaluate, evaluate_int, train, TrainConfig};
use fiwkit::quant::{quantise_inputs, QuantMode};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{FiwArgs, InferHeArgs, ModulusArgs, ParamsArgs, PtqArgs, TrainArgs};
use crate::manifest::{write_json, RunManifest};

/// Bad flag combinations clap cannot express; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `(network, quantisation)` labels used to group artifacts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub network: String,
    pub quantisation: String,
}

fn trained_bits(doc: &NetworkDoc) -> Option<u64> {
    doc.meta.get("training")?.get("bits")?.as_u64()
}

pub fn labels_of(doc: &NetworkDoc) -> Labels {
    let quantisation = match &doc.params {
        Some(fiwkit::network::Params::Int { quant: Some(q), .. }) => {
            let how = if trained_bits(doc) == Some(q.bits as u64) {
                "QAT"
            } else {
                "PTQ"
            };
            let mode = match q.mode {
                QuantMode::Symmetric => "",
                QuantMode::Affine => " affine",
            };
            format!("{how} {}-bit{mode}", q.bits)
        }
        Some(fiwkit::network::Params::Int { quant: None, .. }) => "integer".into(),
        _ => match trained_bits(doc) {
            Some(b) => format!("QAT {b}-bit"),
            None => "float".into(),
        },
    };
    Labels {
        network: doc.arch.name.clone(),
        quantisation,
    }
}

fn load_doc(path: &Path, manifest: &mut RunManifest) -> Result<NetworkDoc> {
    manifest.hash_input(path)?;
    NetworkDoc::load(path).with_context(|| format!("loading {}", path.display()))
}

fn log_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".fiwnet.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    out.with_file_name(format!("{stem}.log.jsonl"))
}

pub fn train_cmd(args: &TrainArgs, mut manifest: RunManifest) -> Result<()> {
    let doc = load_doc(&args.net, &mut manifest)?;
    let mut arch = doc.arch;
    if let Some(b) = args.b_in {
        arch.input_bits = b;
    }
    let mut cfg = match &args.config {
        Some(path) => {
            manifest.config(path)?;
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if args.bits.is_some() {
        cfg.bits = args.bits;
    }
    if let Some(r) = args.rule {
        cfg.scale_rule = r;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    manifest.seed = Some(cfg.seed);

    let train_set = args.data.load(cfg.seed, &mut manifest)?.ok_or_else(|| {
        usage("train needs a dataset (--data, --data-images/--data-labels or --cifar-batch)")
    })?;
    let test_set = match args.test.load(cfg.seed, &mut manifest)? {
        Some(t) => t,
        None => {
            log::warn!("no test set given; reporting accuracy on the training set");
            train_set.clone()
        }
    };
    let outcome = train(&arch, &cfg, &train_set, &test_set)?;
    let last = outcome.log.last();

    let mut out_doc = NetworkDoc::from(outcome.net);
    out_doc
        .meta
        .insert("training".into(), serde_json::to_value(&cfg)?);
    let labels = labels_of(&out_doc);
    out_doc
        .meta
        .insert("labels".into(), serde_json::to_value(&labels)?);
    out_doc.meta.insert(
        "metrics".into(),
        json!({
            "train_samples": train_set.len(),
            "test_samples": test_set.len(),
            "loss": last.map(|l| l.loss),
            "train_accuracy": last.map(|l| l.train_acc),
            "test_accuracy": last.map(|l| l.test_acc),
        }),
    );
    out_doc.meta.insert("manifest".into(), manifest.to_value());
    write_json(&args.out, &out_doc)?;

    let mut lines = String::new();
    for entry in &outcome.log {
        lines += &serde_json::to_string(entry)?;
        lines.push('\n');
    }
    let log_file = log_path(&args.out);
    fs::write(&log_file, lines).with_context(|| format!("writing {}", log_file.display()))?;

    println!(
        "{:>5}  {:>10}  {:>9}  {:>9}",
        "epoch", "loss", "train", "test"
    );
    for e in &outcome.log {
        println!(
            "{:>5}  {:>10.5}  {:>8.2}%  {:>8.2}%",
            e.epoch,
            e.loss,
            100.0 * e.train_acc,
            100.0 * e.test_acc
        );
    }
    println!(
        "{} {}: wrote {}",
        labels.network,
        labels.quantisation,
        args.out.display()
    );
    Ok(())
}

pub fn ptq_cmd(args: &PtqArgs, mut manifest: RunManifest) -> Result<()> {
    manifest.seed = Some(args.seed);
    let doc = load_doc(&args.net, &mut manifest)?;
    let training = doc.meta.get("training").cloned();
    let float = doc.into_float()?;
    let cfg = PtqConfig {
        bits: args.bits,
        rule: args.rule,
        mode: if args.affine {
            QuantMode::Affine
        } else {
            QuantMode::Symmetric
        },
        bias: if args.drop_bias {
            BiasMode::Drop
        } else {
            BiasMode::Quantise
        },
    };
    let int = quantise_network(&float, &cfg)?;

    let mut metrics = serde_json::Map::new();
    if let Some(ds) = args.data.load(args.seed, &mut manifest)? {
        let float_acc = evaluate(&float, &ds)?;
        let int_acc = evaluate_int(&int, &ds)?;
        println!("samples        {}", ds.len());
        println!("float accuracy {:.2}%", 100.0 * float_acc);
        println!("int accuracy   {:.2}%", 100.0 * int_acc);
        metrics.insert("samples".into(), json!(ds.len()));
        metrics.insert("float_accuracy".into(), json!(float_acc));
        metrics.insert("int_accuracy".into(), json!(int_acc));
    }

    let mut out_doc = NetworkDoc::from(int);
    if let Some(t) = training {
        out_doc.meta.insert("training".into(), t);
    }
    out_doc
        .meta
        .insert("ptq".into(), serde_json::to_value(cfg)?);
    let labels = labels_of(&out_doc);
    out_doc
        .meta
        .insert("labels".into(), serde_json::to_value(&labels)?);
    if !metrics.is_empty() {
        out_doc
            .meta
            .insert("metrics".into(), Value::Object(metrics));
    }
    out_doc.meta.insert("manifest".into(), manifest.to_value());
    write_json(&args.out, &out_doc)?;
    println!(
        "{} {}: wrote {}",
        labels.network,
        labels.quantisation,
        args.out.display()
    );
    Ok(())
}

fn load_int(path: &Path, manifest: &mut RunManifest) -> Result<(IntNetwork, Labels)> {
    let doc = load_doc(path, manifest)?;
    let labels = labels_of(&doc);
    Ok((doc.into_int()?, labels))
}

#[derive(Serialize)]
struct FiwOutput<'a> {
    kind: &'static str,
    #[serde(flatten)]
    labels: &'a Labels,
    fiw: u64,
    empirical: Option<&'a FiwReport>,
    #[serde(rename = "static")]
    static_bound: Option<&'a FiwReport>,
    manifest: &'a RunManifest,
}

fn print_fiw(title: &str, r: &FiwReport) {
    println!("{title} (samples: {})", r.sample_count);
    for l in &r.layers {
        println!(
            "  {:<10} {:>4} bits  max |v| {}",
            l.layer, l.width, l.max_abs
        );
    }
    println!("  FIW {}", r.final_integer_width);
}

pub fn fiw_cmd(args: &FiwArgs, mut manifest: RunManifest) -> Result<()> {
    manifest.seed = Some(args.seed);
    let (net, labels) = load_int(&args.net, &mut manifest)?;
    let empirical = match args.data.load(args.seed, &mut manifest)? {
        Some(ds) => Some(fiw_empirical(&net, &ds.int_inputs(net.arch.input_bits)?)?),
        None => None,
    };
    let static_bound = if args.static_bound || empirical.is_none() {
        Some(fiw_static(&net)?)
    } else {
        None
    };
    if let Some(r) = &empirical {
        print_fiw("empirical", r);
    }
    if let Some(r) = &static_bound {
        print_fiw("static bound", r);
    }
    let fiw = empirical
        .as_ref()
        .or(static_bound.as_ref())
        .map(|r| r.final_integer_width)
        .expect("one report exists");
    if let Some(out) = &args.out {
        write_json(
            out,
            &FiwOutput {
                kind: "fiw",
                labels: &labels,
                fiw,
                empirical: empirical.as_ref(),
                static_bound: static_bound.as_ref(),
                manifest: &manifest,
            },
        )?;
    }
    Ok(())
}

/// FIW from `--fiw` or a `fiw` report, plus labels found in the report.
fn resolve_fiw(
    args: &ModulusArgs,
    manifest: &mut RunManifest,
) -> Result<Option<(u32, Option<Labels>)>> {
    if let Some(f) = args.fiw {
        return Ok(Some((f, None)));
    }
    let Some(path) = &args.fiw_report else {
        return Ok(None);
    };
    manifest.hash_input(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let fiw = v
        .get("fiw")
        .and_then(Value::as_u64)
        .with_context(|| format!("{} has no `fiw` field", path.display()))?;
    let labels = serde_json::from_value::<Labels>(v).ok();
    Ok(Some((u32::try_from(fiw)?, labels)))
}

#[derive(Serialize)]
struct ParamsOutput<'a> {
    kind: &'static str,
    #[serde(flatten)]
    params: &'a HeParams,
    instances: usize,
    fiw: u32,
    cap: u32,
    product_bits: u64,
    best_smaller_bits: u64,
    cap_certificate: bool,
    manifest: &'a RunManifest,
}

pub fn params_cmd(args: &ParamsArgs, mut manifest: RunManifest) -> Result<()> {
    let (fiw, found) = resolve_fiw(&args.modulus, &mut manifest)?
        .ok_or_else(|| usage("params needs --fiw or --fiw-report"))?;
    let sel = select_moduli(fiw, args.modulus.cap, args.modulus.n)?;
    let n = args.modulus.n;
    let params = HeParams {
        network: args
            .network
            .clone()
            .or_else(|| found.as_ref().map(|l| l.network.clone()))
            .unwrap_or_default(),
        quantisation: args
            .quantisation
            .clone()
            .or_else(|| found.as_ref().map(|l| l.quantisation.clone()))
            .unwrap_or_default(),
        n,
        log_q: args.log_q.or_else(|| default_log_q(n)),
        moduli: sel.ctx.moduli().to_vec(),
    };
    println!("FIW {fiw}, cap {} bits, N = {n}", sel.cap);
    println!("instances {}", sel.ctx.instances());
    for (i, p) in params.moduli.iter().enumerate() {
        println!("  t{i} = {p} ({} bits)", 64 - p.leading_zeros());
    }
    println!(
        "product {} bits; best {} primes give {} bits",
        sel.product_bits,
        sel.ctx.instances() - 1,
        sel.best_smaller_bits
    );
    if let Some(out) = &args.out {
        write_json(
            out,
            &ParamsOutput {
                kind: "params",
                params: &params,
                instances: sel.ctx.instances(),
                fiw,
                cap: sel.cap,
                product_bits: sel.product_bits,
                best_smaller_bits: sel.best_smaller_bits,
                cap_certificate: sel.cap_certificate,
                manifest: &manifest,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InferOutput<'a> {
    kind: &'static str,
    #[serde(flatten)]
    labels: &'a Labels,
    index: usize,
    label: u8,
    logits: Vec<String>,
    prediction: usize,
    instances: usize,
    moduli: &'a [u64],
    op_counts: &'a OpCountReport,
    sequential_cost: u64,
    matches_plaintext: bool,
    manifest: &'a RunManifest,
}

pub fn infer_he_cmd(args: &InferHeArgs, mut manifest: RunManifest) -> Result<()> {
    manifest.seed = Some(args.seed);
    let (net, labels) = load_int(&args.net, &mut manifest)?;
    let (ctx, fiw): (RnsContext, Option<u32>) = match &args.params {
        Some(path) => {
            manifest.config(path)?;
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let fiw = v
                .get("fiw")
                .and_then(Value::as_u64)
                .map(u32::try_from)
                .transpose()?;
            (serde_json::from_value::<HeParams>(v)?.context()?, fiw)
        }
        None => {
            let fiw = match resolve_fiw(&args.modulus, &mut manifest)? {
                Some((f, _)) => f,
                None => {
                    let f = fiw_static(&net)?.final_integer_width;
                    log::info!("no FIW given; using the static bound {f}");
                    u32::try_from(f)?
                }
            };
            (
                select_moduli(fiw, args.modulus.cap, args.modulus.n)?.ctx,
                Some(fiw),
            )
        }
    };
    let ds = args
        .data
        .load(args.seed, &mut manifest)?
        .ok_or_else(|| usage("infer-he needs a dataset to draw the image from"))?;
    if args.index >= ds.len() {
        return Err(usage(format!(
            "--index {} out of range for {} samples",
            args.index,
            ds.len()
        )));
    }
    if ds.shape != net.arch.input_shape {
        bail!(
            "dataset images are {:?} but the network expects {:?}",
            ds.shape,
            net.arch.input_shape
        );
    }
    let image = quantise_inputs(
        &ds.images[args.index],
        ds.shape.to_vec(),
        net.arch.input_bits,
    )?;

    let mut plan = compile(
        &net,
        ctx.n(),
        CompileOptions {
            skip_zeros: !args.no_skip,
        },
    )?;
    if let Some(f) = fiw {
        plan = plan.with_required_fiw(f);
    }
    let he = run_encrypted_inference(&plan, &image, &ctx)?;
    let plain = int_infer(&net, &image)?;
    let matches = he.logits == plain;
    let prediction = fiwkit::network::argmax(he.logits.data());

    let r = &he.report;
    println!(
        "{} {} image {} (label {})",
        labels.network, labels.quantisation, args.index, ds.labels[args.index]
    );
    println!("prediction {prediction}; matches plaintext: {matches}");
    println!(
        "per instance: {} rotations, {} plain muls, {} cipher muls, {} additions",
        r.rotations, r.plain_muls, r.cipher_muls, r.additions
    );
    println!(
        "skipped: {} rotations, {} plain muls, {} additions",
        r.skipped.rotations, r.skipped.plain_muls, r.skipped.additions
    );
    println!(
        "instances {}; sequential cost {}",
        r.instances, r.sequential_cost
    );

    if let Some(out) = &args.out {
        write_json(
            out,
            &InferOutput {
                kind: "infer_he",
                labels: &labels,
                index: args.index,
                label: ds.labels[args.index],
                logits: he.logits.data().iter().map(|v| v.to_string()).collect(),
                prediction,
                instances: r.instances,
                moduli: ctx.moduli(),
                op_counts: r,
                sequential_cost: r.sequential_cost,
                matches_plaintext: matches,
                manifest: &manifest,
            },
        )?;
    }
    if !matches {
        bail!("encrypted logits differ from plaintext integer inference");
    }
    Ok(())
}
