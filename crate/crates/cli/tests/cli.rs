use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fiwkit::bigtensor::IntTensor;
use fiwkit::datasets::{write_idx_images, write_idx_labels, LabeledDataset};
use fiwkit::network::{Architecture, IntLayerParams, IntNetwork, LayerSpec, NetworkDoc};
use num_bigint::BigInt;
use serde_json::Value;

fn fiwkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fiwkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fiwkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONV_W: [i64; 8] = [1, -1, 2, 0, 0, 1, -1, 1];
const CONV_B: [i64; 2] = [1, -2];
const DENSE_W: [i64; 24] = [
    1, 0, -1, 1, 0, 1, 0, -1, //
    0, 1, 1, 0, -1, 0, 1, 0, //
    -1, -1, 0, 0, 1, 1, 0, 1,
];
const DENSE_B: [i64; 3] = [0, 3, -5];

fn tiny_arch() -> Architecture {
    Architecture {
        name: "tiny".into(),
        input_shape: [1, 4, 4],
        input_bits: 2,
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 2,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
            },
            LayerSpec::Square,
            LayerSpec::SumPool {
                window: 2,
                stride: 1,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 3 },
        ],
    }
}

fn tiny_net() -> IntNetwork {
    let t = |shape: Vec<usize>, v: &[i64]| IntTensor::from_i64(shape, v).unwrap();
    IntNetwork::new(
        tiny_arch(),
        vec![
            Some(IntLayerParams {
                weight: t(vec![2, 1, 2, 2], &CONV_W),
                bias: Some(t(vec![2], &CONV_B)),
            }),
            None,
            None,
            None,
            Some(IntLayerParams {
                weight: t(vec![3, 8], &DENSE_W),
                bias: Some(t(vec![3], &DENSE_B)),
            }),
        ],
        None,
    )
    .unwrap()
}

fn fixture_images() -> LabeledDataset {
    let images = (0..6u32)
        .map(|i| {
            (0..16u32)
                .map(|j| ((i * 37 + j * 101) % 256) as u8)
                .collect()
        })
        .collect();
    LabeledDataset {
        shape: [1, 4, 4],
        images,
        labels: vec![0, 1, 2, 0, 1, 2],
        split: "fixture".into(),
    }
}

/// Plain i64 forward pass of the tiny network, written out loop by loop.
fn brute_force_logits(pixels: &[u8]) -> Vec<i64> {
    // 2-bit inputs: round(p * 3 / 255), ties up.
    let x: Vec<i64> = pixels
        .iter()
        .map(|&p| (2 * p as i64 * 3 + 255) / 510)
        .collect();
    let mut conv = [[[0i64; 3]; 3]; 2];
    for (o, plane) in conv.iter_mut().enumerate() {
        for (y, row) in plane.iter_mut().enumerate() {
            for (xx, v) in row.iter_mut().enumerate() {
                let mut acc = CONV_B[o];
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += CONV_W[o * 4 + dy * 2 + dx] * x[(y + dy) * 4 + xx + dx];
                    }
                }
                *v = acc * acc;
            }
        }
    }
    let mut flat = Vec::new();
    for plane in &conv {
        for y in 0..2 {
            for xx in 0..2 {
                flat.push(
                    plane[y][xx] + plane[y][xx + 1] + plane[y + 1][xx] + plane[y + 1][xx + 1],
                );
            }
        }
    }
    (0..3)
        .map(|o| DENSE_B[o] + (0..8).map(|i| DENSE_W[o * 8 + i] * flat[i]).sum::<i64>())
        .collect()
}

fn bits(v: i64) -> u64 {
    64 - v.unsigned_abs().leading_zeros() as u64
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    net: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let net = root.join("tiny.fiwnet.json");
    NetworkDoc::from(tiny_net()).save(&net).unwrap();
    let data = root.join("fixtures");
    fs::create_dir(&data).unwrap();
    let ds = fixture_images();
    write_idx_images(data.join("tiny-images-idx3-ubyte"), &ds).unwrap();
    write_idx_labels(data.join("tiny-labels-idx1-ubyte"), &ds).unwrap();
    Fixture {
        _dir: dir,
        root,
        net,
        data,
    }
}

#[test]
fn params_for_fiw_29_cap_30_is_one_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("params.json");
    ok(&[
        "params",
        "--fiw",
        "29",
        "--cap",
        "30",
        "--n",
        "16384",
        "--out",
        s(&out),
    ]);
    let v = json(&out);
    assert_eq!(v["instances"], 1);
    assert_eq!(v["N"], 16384);
    assert_eq!(v["log_q"], 389);
    let p = v["moduli"][0].as_u64().unwrap();
    assert_eq!(p % (2 * 16384), 1);
    assert!((1 << 29..1 << 30).contains(&p));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(fiwkit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fiwkit(&["params", "--bogus"]).status.code(), Some(2));
    // Valid syntax, but no FIW source.
    assert_eq!(fiwkit(&["params", "--cap", "30"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let out = fiwkit(&["fiw", "--net", "/nonexistent/net.fiwnet.json", "--static"]);
    assert_eq!(out.status.code(), Some(1));
    // No prime p = 1 mod 2^15 fits below 2^10.
    assert_eq!(
        fiwkit(&["params", "--fiw", "20", "--cap", "10"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn fiw_on_fixture_directory_matches_brute_force() {
    let f = fixture();
    let out = f.root.join("fiw.json");
    ok(&[
        "fiw",
        "--net",
        s(&f.net),
        "--data",
        s(&f.data),
        "--static",
        "--out",
        s(&out),
    ]);
    let v = json(&out);
    let max = fixture_images()
        .images
        .iter()
        .flat_map(|img| brute_force_logits(img))
        .map(i64::abs)
        .max()
        .unwrap();
    assert_eq!(v["fiw"].as_u64().unwrap(), bits(max) + 1);
    assert_eq!(v["empirical"]["sample_count"], 6);
    assert!(v["static"]["final_integer_width"].as_u64().unwrap() > bits(max));
    assert_eq!(v["network"], "tiny");
    assert_eq!(v["manifest"]["artifacts"].as_object().unwrap().len(), 3);
}

#[test]
fn infer_he_logits_match_brute_force() {
    let f = fixture();
    let fiw = f.root.join("fiw.json");
    let params = f.root.join("params.json");
    let he = f.root.join("he.json");
    ok(&[
        "fiw",
        "--net",
        s(&f.net),
        "--data",
        s(&f.data),
        "--out",
        s(&fiw),
    ]);
    ok(&[
        "params",
        "--fiw-report",
        s(&fiw),
        "--cap",
        "20",
        "--n",
        "64",
        "--out",
        s(&params),
    ]);
    for index in 0..6usize {
        ok(&[
            "infer-he",
            "--net",
            s(&f.net),
            "--params",
            s(&params),
            "--data",
            s(&f.data),
            "--index",
            &index.to_string(),
            "--out",
            s(&he),
        ]);
        let v = json(&he);
        let expected: Vec<BigInt> = brute_force_logits(&fixture_images().images[index])
            .into_iter()
            .map(BigInt::from)
            .collect();
        let got: Vec<BigInt> = v["logits"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_str().unwrap().parse().unwrap())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(v["matches_plaintext"], true);
        assert_eq!(v["instances"], json(&params)["instances"]);
        let per = v["op_counts"]["total_ops"].as_u64().unwrap();
        assert_eq!(
            v["sequential_cost"].as_u64().unwrap(),
            per * v["instances"].as_u64().unwrap()
        );
    }
}

#[test]
fn pipeline_is_byte_identical_on_rerun() {
    let f = fixture();
    let arch = f.root.join("arch.fiwnet.json");
    NetworkDoc::architecture(tiny_arch()).save(&arch).unwrap();
    let run = || -> Vec<Vec<u8>> {
        let ck = f.root.join("float.fiwnet.json");
        let int = f.root.join("int.fiwnet.json");
        let fiw = f.root.join("fiw.json");
        let params = f.root.join("params.json");
        let report = f.root.join("report.json");
        ok(&[
            "train",
            "--net",
            s(&arch),
            "--data",
            s(&f.data),
            "--bits",
            "2",
            "--epochs",
            "3",
            "--batch-size",
            "2",
            "--lr",
            "0.01",
            "--seed",
            "9",
            "--out",
            s(&ck),
        ]);
        ok(&[
            "ptq",
            "--net",
            s(&ck),
            "--bits",
            "2",
            "--data",
            s(&f.data),
            "--out",
            s(&int),
        ]);
        ok(&[
            "fiw",
            "--net",
            s(&int),
            "--data",
            s(&f.data),
            "--out",
            s(&fiw),
        ]);
        ok(&[
            "params",
            "--fiw-report",
            s(&fiw),
            "--cap",
            "30",
            "--n",
            "64",
            "--out",
            s(&params),
        ]);
        ok(&[
            "report",
            s(&ck),
            s(&int),
            s(&fiw),
            s(&params),
            "--out",
            s(&report),
        ]);
        [
            &ck,
            &f.root.join("float.log.jsonl"),
            &int,
            &fiw,
            &params,
            &report,
        ]
        .iter()
        .map(|p| fs::read(p).unwrap())
        .collect()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    let report: Value = serde_json::from_slice(&first[5]).unwrap();
    let row = &report["rows"][0];
    assert_eq!(row["network"], "tiny");
    assert_eq!(row["quantisation"], "QAT 2-bit");
    assert!(row["accuracy"].is_number());
    assert!(row["fiw"].is_number());
    assert!(row["instances"].is_number());
}
