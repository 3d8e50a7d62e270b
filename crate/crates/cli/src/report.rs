//! Summary table over stored artifacts.

use std::fs;

use anyhow::{Context, Result};
use fiwkit::network::NetworkDoc;
use serde::Serialize;
use serde_json::Value;

use crate::args::ReportArgs;
use crate::commands::{labels_of, Labels};
use crate::manifest::{write_json, RunManifest};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Row {
    pub network: String,
    pub quantisation: String,
    pub accuracy: Option<f64>,
    pub fiw: Option<u64>,
    pub instances: Option<u64>,
    pub sequential_cost: Option<u64>,
    #[serde(skip)]
    acc_rank: u8,
}

#[derive(Serialize)]
struct ReportOutput<'a> {
    kind: &'static str,
    rows: &'a [Row],
    manifest: &'a RunManifest,
}

fn row<'a>(rows: &'a mut Vec<Row>, labels: &Labels) -> &'a mut Row {
    let at = rows
        .iter()
        .position(|r| r.network == labels.network && r.quantisation == labels.quantisation)
        .unwrap_or_else(|| {
            rows.push(Row {
                network: labels.network.clone(),
                quantisation: labels.quantisation.clone(),
                ..Row::default()
            });
            rows.len() - 1
        });
    &mut rows[at]
}

/// Fold one artifact into the rows. Integer accuracy outranks the
/// fake-quantised accuracy logged during training.
fn absorb(rows: &mut Vec<Row>, v: Value) -> Result<()> {
    if v.get("format").and_then(Value::as_str) == Some("fiwnet") {
        let doc: NetworkDoc = serde_json::from_value(v)?;
        let labels = labels_of(&doc);
        let metrics = doc.meta.get("metrics");
        let found = [("int_accuracy", 2), ("test_accuracy", 1)]
            .into_iter()
            .find_map(|(k, rank)| Some((metrics?.get(k)?.as_f64()?, rank)));
        let r = row(rows, &labels);
        if let Some((acc, rank)) = found {
            if rank >= r.acc_rank {
                r.accuracy = Some(acc);
                r.acc_rank = rank;
            }
        }
        return Ok(());
    }
    let kind = v
        .get("kind")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let labels: Labels =
        serde_json::from_value(v.clone()).context("artifact has no network/quantisation labels")?;
    let r = row(rows, &labels);
    let int = |k: &str| v.get(k).and_then(Value::as_u64);
    match kind.as_str() {
        "fiw" => r.fiw = int("fiw"),
        "params" => {
            r.instances = int("instances");
            r.fiw = r.fiw.or(int("fiw"));
        }
        "infer_he" => {
            r.instances = int("instances");
            r.sequential_cost = int("sequential_cost");
        }
        other => anyhow::bail!("unknown artifact kind `{other}`"),
    }
    Ok(())
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

pub fn report_cmd(args: &ReportArgs, mut manifest: RunManifest) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        manifest.hash_input(path)?;
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        absorb(&mut rows, v).with_context(|| format!("in {}", path.display()))?;
    }
    println!(
        "{:<14} {:<16} {:>8} {:>5} {:>10} {:>16}",
        "network", "quantisation", "Acc", "FIW", "instances", "sequential_cost"
    );
    for r in &rows {
        println!(
            "{:<14} {:<16} {:>8} {:>5} {:>10} {:>16}",
            r.network,
            r.quantisation,
            cell(r.accuracy.map(|a| format!("{:.2}%", 100.0 * a))),
            cell(r.fiw),
            cell(r.instances),
            cell(r.sequential_cost)
        );
    }
    if let Some(out) = &args.out {
        write_json(
            out,
            &ReportOutput {
                kind: "report",
                rows: &rows,
                manifest: &manifest,
            },
        )?;
    }
    Ok(())
}
