//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use feallm_core::encoder::{EncoderSpec, StubEncoder, VisualEncoder};
use feallm_core::feabench::{
    evaluate_responses, extract_aus, extract_fe, filter_shared_aus, macro_average, uniform_sample, DatasetAdapter,
    EvalTask, GroundTruthRecord, ResponseRecord, TaskKind, BP4D_AUS, DISFA_AUS,
};
use feallm_core::instructions::{split_dataset, AnnotationRecord, CANONICAL_AUD_PROMPT, CANONICAL_FER_PROMPT};
use feallm_core::labels::{render_aus, AuSet, FeClass, VALID_AUS};
use feallm_core::lca::{self, LcaConfig};
use feallm_core::mpp::{self, MppConfig, LOCAL_BLOCK, SELF_BLOCK};
use feallm_core::numerics::{
    grad_check, GradCheckOptions, Graph, NodeId, ParamGroup, ParamStore, Real, ScalarFunction, Tensor,
};
use feallm_core::region_cropper::{crop_regions, crop_window, CropMode, CropSpec, ImageTensor, LocalRegionSet};
use feallm_core::training::corpus::{memorization_corpus, memorization_faces};
use feallm_core::training::{
    generate, train_stage, Example, FeallmModel, LearningRates, ModelConfig, Optimizer, Stage, StageConfig, Tokenizer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn face(seed: u64, side: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..side * side * 3).map(|_| rng.gen::<f64>()).collect();
    ImageTensor::from_fn(side, side, |y, x, c| {
        let smooth = 0.5 + 0.3 * ((y as f64 * 0.21 + c as f64).sin() * (x as f64 * 0.17).cos());
        0.7 * smooth + 0.3 * noise[(y * side + x) * 3 + c]
    })
    .unwrap()
}

// ------------------------------------------------------------ gradients

fn readout<T: Real>(g: &mut Graph<'_, T>, x: NodeId) -> feallm_core::Result<NodeId> {
    let n = g.value(x).len();
    let flat = g.reshape(x, &[1, n])?;
    let w: Vec<T> = (0..n).map(|i| T::of((i as f64 * 1.7 + 0.3).sin())).collect();
    let w = g.input(Tensor::matrix(n, 1, w)?);
    g.matmul(flat, w)
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul,
    Transpose,
    Add,
    AddBias,
    Scale,
    ScaleBy,
    Gelu,
    Linear,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    Reshape,
    Conv,
    StridedConv,
    AvgPool,
    Attention,
    CausalAttention,
    Gather,
    MaskedLoss,
    Sum,
}

const OPS: [Op; 21] = [
    Op::Matmul,
    Op::Transpose,
    Op::Add,
    Op::AddBias,
    Op::Scale,
    Op::ScaleBy,
    Op::Gelu,
    Op::Linear,
    Op::ConcatRows,
    Op::SliceRows,
    Op::ConcatCols,
    Op::SliceCols,
    Op::Reshape,
    Op::Conv,
    Op::StridedConv,
    Op::AvgPool,
    Op::Attention,
    Op::CausalAttention,
    Op::Gather,
    Op::MaskedLoss,
    Op::Sum,
];

impl ScalarFunction for Op {
    fn evaluate<T: Real>(&self, g: &mut Graph<'_, T>) -> feallm_core::Result<NodeId> {
        let a = g.param("a")?;
        let b = g.param("b")?;
        let c = g.param("c")?;
        let out = match *self {
            Op::Matmul => g.matmul(a, b)?,
            Op::Transpose => g.transpose(a)?,
            Op::Add => g.add(a, c)?,
            Op::AddBias => {
                let bias = g.param("bias")?;
                g.add_bias(a, bias)?
            }
            Op::Scale => g.scale(a, T::of(-1.25)),
            Op::ScaleBy => {
                let s = g.param("s")?;
                g.scale_by(a, s)?
            }
            Op::Gelu => g.gelu(a),
            Op::Linear => {
                let bias = g.param("bias3")?;
                g.linear(a, b, Some(bias))?
            }
            Op::ConcatRows => g.concat_rows(&[a, c])?,
            Op::SliceRows => g.slice_rows(a, 1, 2)?,
            Op::ConcatCols => {
                let bt = g.transpose(b)?;
                g.concat_cols(&[a, bt])?
            }
            Op::SliceCols => g.slice_cols(a, 1, 2)?,
            Op::Reshape => g.reshape(a, &[2, 6])?,
            Op::Conv | Op::StridedConv => {
                let img = g.param("img")?;
                let k = g.param("kernel")?;
                let kb = g.param("kbias")?;
                let stride = if matches!(self, Op::Conv) { 1 } else { 2 };
                g.conv2d(img, k, kb, stride, 1)?
            }
            Op::AvgPool => {
                let img = g.param("img")?;
                g.avgpool(img)?
            }
            Op::Attention | Op::CausalAttention => {
                let q = g.param("q")?;
                let k = g.param("k")?;
                let v = g.param("v")?;
                let causal = matches!(self, Op::CausalAttention).then_some(1);
                g.attention(q, k, v, causal)?
            }
            Op::Gather => {
                let table = g.param("table")?;
                g.gather(table, &[2, 0, 2, 5])?
            }
            Op::MaskedLoss => {
                let table = g.param("table")?;
                let logits = g.transpose(table)?;
                return g.masked_lm_loss(logits, &[1, 5, 0, 3], &[true, false, true, true]);
            }
            Op::Sum => return Ok(g.sum(a)),
        };
        readout(g, out)
    }
}

fn op_store(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let g = ParamGroup::Other;
    for (name, shape, sd) in [
        ("a", &[3, 4][..], 0.7),
        ("b", &[4, 3], 0.7),
        ("c", &[3, 4], 0.7),
        ("bias", &[4], 0.5),
        ("bias3", &[3], 0.5),
        ("img", &[5, 6, 2], 0.8),
        ("kernel", &[3, 3, 2, 3], 0.4),
        ("kbias", &[3], 0.2),
        ("q", &[4, 3], 0.8),
        ("k", &[5, 3], 0.8),
        ("v", &[5, 2], 0.8),
        ("table", &[6, 4], 0.9),
    ] {
        s.insert_normal(name, g, shape, sd, &mut rng).unwrap();
    }
    s.insert("s", g, Tensor::scalar(0.8)).unwrap();
    s
}

struct LcaLoss {
    cfg: LcaConfig,
    regions: LocalRegionSet,
}

impl ScalarFunction for LcaLoss {
    fn evaluate<T: Real>(&self, g: &mut Graph<'_, T>) -> feallm_core::Result<NodeId> {
        let inputs = lca::region_inputs(g, &self.regions)?;
        let nodes = lca::forward_nodes(g, &self.cfg, &inputs)?;
        readout(g, nodes.f_local)
    }
}

struct MppLoss {
    cfg: MppConfig,
    maps: Vec<Tensor<f64>>,
    f_attn: Tensor<f64>,
}

impl ScalarFunction for MppLoss {
    fn evaluate<T: Real>(&self, g: &mut Graph<'_, T>) -> feallm_core::Result<NodeId> {
        let maps: Vec<NodeId> = self.maps.iter().map(|m| g.input(m.cast())).collect();
        let fa = g.input(self.f_attn.cast());
        let nodes = mpp::forward_nodes(g, &self.cfg, &maps, fa)?;
        readout(g, nodes.vision)
    }
}

/// Worst relative error at 64 and 32 bits.
fn worst_errors<F: ScalarFunction>(
    f: &F,
    store: &ParamStore<f64>,
    sample: Option<usize>,
) -> Result<(f64, f64), String> {
    let opts = GradCheckOptions {
        max_entries_per_param: sample,
        ..GradCheckOptions::default()
    };
    let r64 = grad_check::<f64, _>(f, store, &opts).map_err(fail)?;
    let r32 = grad_check::<f32, _>(f, store, &opts).map_err(fail)?;
    Ok((r64.max_rel_error, r32.max_rel_error))
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    let mut record = |label: &str, (e64, e32): (f64, f64)| -> Result<(), String> {
        worst = (worst.0.max(e64), worst.1.max(e32));
        ensure(
            e64 < 1e-6 && e32 < 1e-4,
            format!("{label}: rel error {e64:.2e} (64-bit), {e32:.2e} (32-bit)"),
        )
    };
    for seed in 0..2 {
        let store = op_store(seed);
        for op in OPS {
            record(&format!("{op:?}"), worst_errors(&op, &store, None)?)?;
        }
    }

    let lca_cfg = LcaConfig {
        channels: 4,
        token_dim: 6,
        ..LcaConfig::default()
    };
    let mut store = ParamStore::new();
    lca::init_params(&lca_cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).map_err(fail)?;
    let f = LcaLoss {
        cfg: lca_cfg,
        regions: crop_regions(&face(11, 64)).map_err(fail)?,
    };
    record("lca_forward", worst_errors(&f, &store, Some(24))?)?;

    let spec = EncoderSpec {
        channels: 8,
        ..EncoderSpec::default()
    };
    let mpp_cfg = MppConfig {
        channels: 8,
        attention_dim: 4,
        local_channels: 4,
        mlp_hidden: 8,
        token_dim: 6,
        gamma1_init: 0.7,
        gamma2_init: 1.3,
        ..MppConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut store = ParamStore::new();
    mpp::init_params(&mpp_cfg, &mut store, &mut rng).map_err(fail)?;
    let f_attn = Tensor::matrix(16, 4, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(fail)?;
    let f = MppLoss {
        cfg: mpp_cfg,
        maps: StubEncoder::new(spec)
            .map_err(fail)?
            .encode(&face(5, 36))
            .map_err(fail)?
            .maps()
            .to_vec(),
        f_attn,
    };
    let report = grad_check::<f64, _>(&f, &store, &GradCheckOptions::default()).map_err(fail)?;
    for name in [mpp::GAMMA1, mpp::GAMMA2] {
        ensure(
            report.analytic.iter().any(|(n, _)| n == name),
            format!("{name} not checked"),
        )?;
    }
    record("mpp_forward", worst_errors(&f, &store, Some(24))?)?;

    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} ops + lca + mpp; worst rel error {:.1e} (64-bit), {:.1e} (32-bit); {:.1?}",
        OPS.len(),
        worst.0,
        worst.1,
        elapsed
    ))
}

// ------------------------------------------------------------ geometry

fn criterion_crop_geometry() -> Outcome {
    for side in [96usize, 97] {
        for spec in CropSpec::canonical() {
            let f = match spec.fraction {
                feallm_core::region_cropper::Fraction::Half => 0.5,
                feallm_core::region_cropper::Fraction::ThreeQuarters => 0.75,
            };
            let keep = (f * side as f64).floor() as usize;
            let name = spec.direction.name();
            let rows = if name.starts_with("top") {
                (0, keep)
            } else if name.starts_with("bottom") {
                (side - keep, side)
            } else {
                (0, side)
            };
            let cols = if name.ends_with("left") {
                (0, keep)
            } else if name.ends_with("right") {
                (side - keep, side)
            } else {
                (0, side)
            };
            let w = crop_window(side, side, spec, CropMode::Strip).map_err(fail)?;
            ensure(
                (w.row_start, w.row_end, w.col_start, w.col_end) == (rows.0, rows.1, cols.0, cols.1),
                format!("{side}: {} gave {w:?}", spec.label()),
            )?;
        }
    }

    let mut worst = 0.0f64;
    for (side, seed) in [(96, 1), (97, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageTensor::new(side, side, (0..side * side * 3).map(|_| rng.gen()).collect()).map_err(fail)?;
        let original = crop_regions(&image).map_err(fail)?;
        let flipped = crop_regions(&image.mirror_horizontal()).map_err(fail)?;
        for spec in CropSpec::canonical() {
            let across = CropSpec {
                direction: spec.direction.mirrored_horizontal(),
                ..spec
            };
            let a = flipped.region(spec).ok_or("missing region")?;
            let b = original.region(across).ok_or("missing region")?.mirror_horizontal();
            let d = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    ensure(worst < 1e-6, format!("mirror symmetry off by {worst:.2e}"))?;
    Ok(format!("32 windows exact; mirror symmetry within {worst:.1e}"))
}

// ------------------------------------------------------------ degeneracies

fn criterion_degeneracies() -> Outcome {
    let cfg = MppConfig {
        channels: 8,
        attention_dim: 8,
        local_channels: 8,
        mlp_hidden: 10,
        token_dim: 6,
        gamma1_init: 0.6,
        gamma2_init: 1.4,
        ..MppConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut base = ParamStore::new();
    mpp::init_params(&cfg, &mut base, &mut rng).map_err(fail)?;
    let spec = EncoderSpec {
        channels: 8,
        ..EncoderSpec::default()
    };
    let pyramid = StubEncoder::new(spec)
        .map_err(fail)?
        .encode(&face(8, 30))
        .map_err(fail)?;
    let f_attn = Tensor::matrix(16, 8, (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(fail)?;

    let mut store = base.clone();
    store.set_value(mpp::GAMMA1, Tensor::scalar(0.0)).map_err(fail)?;
    let shallow = mpp::fuse_shallow(&pyramid, &cfg, &store).map_err(fail)?;
    let local = mpp::project_local(&f_attn, &store).map_err(fail)?;
    let fused = mpp::fuse_local(&shallow, &local, &cfg, &store).map_err(fail)?;
    let mut g = Graph::new(&store);
    let q = g.input(shallow.clone());
    let s = g.input(local.clone());
    let attn = mpp::attention_block_node(&mut g, LOCAL_BLOCK, cfg.heads, q, s).map_err(fail)?;
    ensure(
        fused.data() == g.value(attn).data(),
        "gamma1 = 0 is not pure cross-attention",
    )?;

    let mut store = base.clone();
    for part in ["wv", "bv", "bo"] {
        let name = format!("{LOCAL_BLOCK}.{part}");
        let shape = store.value(&name).map_err(fail)?.shape().to_vec();
        store.set_value(&name, Tensor::zeros(&shape)).map_err(fail)?;
    }
    let shallow = mpp::fuse_shallow(&pyramid, &cfg, &store).map_err(fail)?;
    let local = mpp::project_local(&f_attn, &store).map_err(fail)?;
    let fused = mpp::fuse_local(&shallow, &local, &cfg, &store).map_err(fail)?;
    ensure(
        fused.data() == shallow.scale(0.6).data(),
        "zero value projection is not gamma1 * shallow",
    )?;

    let mut store = base;
    for part in ["wv", "wo"] {
        store
            .set_value(&format!("{SELF_BLOCK}.{part}"), Tensor::identity(8))
            .map_err(fail)?;
    }
    for part in ["bv", "bo"] {
        store
            .set_value(&format!("{SELF_BLOCK}.{part}"), Tensor::zeros(&[8]))
            .map_err(fail)?;
    }
    let x = Tensor::matrix(1, 8, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(fail)?;
    for gamma in [0.0, 0.5, 1.0, -0.75, 2.25] {
        store.set_value(mpp::GAMMA2, Tensor::scalar(gamma)).map_err(fail)?;
        let out = mpp::refine(&x, &cfg, &store).map_err(fail)?;
        ensure(
            out.data() == x.scale(1.0 + gamma).data(),
            format!("single token, gamma2 = {gamma}"),
        )?;
    }
    Ok("gamma1 = 0, zero value projection and single-token refinement hold bitwise".into())
}

// ------------------------------------------------------------ scoring

fn criterion_reference_rows() -> Outcome {
    let feallm = [
        53.51, 33.33, 87.99, 77.92, 76.94, 78.56, 80.68, 25.50, 6.72, 66.67, 88.18, 39.17,
    ];
    let llava_lora = [
        37.25, 33.55, 83.01, 76.15, 78.09, 74.00, 78.69, 24.16, 12.31, 53.40, 86.72, 32.21,
    ];
    let mean = |row: &[f64]| 100.0 * macro_average(&row.iter().map(|v| v / 100.0).collect::<Vec<_>>());
    let (a, b) = (mean(&feallm), mean(&llava_lora));
    ensure((a - 59.60).abs() <= 0.01, format!("first row averages to {a:.4}"))?;
    ensure((b - 55.79).abs() <= 0.01, format!("second row averages to {b:.4}"))?;
    Ok(format!("{a:.3}% and {b:.3}%"))
}

fn criterion_extraction() -> Outcome {
    for mask in 0..4096u32 {
        let aus: AuSet = VALID_AUS
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &a)| a)
            .collect();
        let text = render_aus(&aus);
        ensure(extract_aus(&text, &VALID_AUS) == aus, format!("subset {text}"))?;
    }
    let templates = [
        "The facial expression is {}.",
        "This person appears {} overall.",
        "Expression: {}",
    ];
    let mut sentences = 0;
    for class in FeClass::ALL {
        for form in [
            class.name().to_string(),
            class.name().to_lowercase(),
            class.inflection().to_string(),
        ] {
            for t in templates {
                let s = t.replace("{}", &form);
                ensure(extract_fe(&s) == Some(class), format!("{s:?}"))?;
                sentences += 1;
            }
        }
    }
    Ok(format!(
        "4096 AU subsets and {sentences} expression sentences recovered"
    ))
}

// ------------------------------------------------------------ dataset

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("feallm-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(fail))
        .filter(|v: &Result<serde_json::Value, String>| v.as_ref().map_or(true, |v| v.get("meta").is_none()))
        .collect()
}

fn criterion_dataset() -> Outcome {
    let out = scratch("dataset");
    let status = Command::new(env!("CARGO_BIN_EXE_feallm"))
        .arg("build-dataset")
        .arg("--annotations")
        .arg(fixtures().join("annotations.jsonl"))
        .arg("--fixture-dir")
        .arg(fixtures().join("responses"))
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(fail)?;
    ensure(
        status.status.success(),
        format!("build-dataset failed: {}", String::from_utf8_lossy(&status.stderr)),
    )?;

    let quarantined: BTreeSet<String> = read_jsonl(&out.join("quarantine.jsonl"))?
        .iter()
        .map(|q| q["image_id"].as_str().unwrap_or_default().to_string())
        .collect();
    let planted: BTreeSet<String> = ["img01", "img05", "img09", "img10"].map(String::from).into();
    ensure(quarantined == planted, format!("quarantined {quarantined:?}"))?;

    let instructions = read_jsonl(&out.join("instructions.jsonl"))?;
    let mut kinds: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in &instructions {
        kinds
            .entry(r["image_id"].as_str().unwrap_or_default().into())
            .or_default()
            .push(r["type"].to_string());
    }
    ensure(kinds.len() == 8, format!("{} images with instructions", kinds.len()))?;
    for (id, k) in &kinds {
        let distinct: BTreeSet<&String> = k.iter().collect();
        ensure(k.len() == 3 && distinct.len() == 3, format!("{id}: {k:?}"))?;
        ensure(!planted.contains(id), format!("{id} was planted but got instructions"))?;
    }

    let records: Vec<AnnotationRecord> = read_jsonl(&fixtures().join("annotations.jsonl"))?
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(fail))
        .collect::<Result<_, _>>()?;
    for seed in 0..100 {
        let (train, eval) = split_dataset(&records, 4, seed).map_err(fail)?;
        let subjects = |side: &[AnnotationRecord]| side.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>();
        ensure(
            subjects(&train).is_disjoint(&subjects(&eval)),
            format!("seed {seed} shares a subject"),
        )?;
        ensure(
            train.len() + eval.len() == records.len(),
            format!("seed {seed} lost records"),
        )?;
    }
    let _ = std::fs::remove_dir_all(&out);
    Ok(format!(
        "{} instructions for 8 images; 4/4 planted records quarantined; 100 subject-disjoint splits",
        instructions.len()
    ))
}

// ------------------------------------------------------------ training

fn toy_model(data: &[Example], seed: u64) -> Result<FeallmModel, String> {
    let texts = data.iter().flat_map(|e| [e.question.as_str(), e.answer.as_str()]);
    FeallmModel::new(ModelConfig::tiny(), Tokenizer::from_corpus(texts), seed).map_err(fail)
}

fn criterion_memorization() -> Outcome {
    let start = Instant::now();
    let data = memorization_corpus(64).map_err(fail)?;
    let mut model = toy_model(&data, 7)?;
    let stage = StageConfig {
        stage: Stage::Finetune,
        lr: LearningRates::uniform(1e-3),
        batch_size: 8,
        epochs: 1,
        max_steps: Some(500),
        optimizer: Optimizer::adam(),
        target_loss: Some(0.01),
    };
    let log = train_stage(&mut model, &data, &stage, 1)
        .map_err(fail)?
        .into_result()
        .map_err(fail)?;
    let loss = log.final_loss().unwrap_or(f64::INFINITY);
    ensure(loss < 0.05, format!("loss {loss:.4} after {} steps", log.steps.len()))?;

    let mut responses = Vec::new();
    for ex in &data {
        let text = generate(&model, &ex.image, &ex.question, 16).map_err(fail)?;
        ensure(
            text == ex.answer,
            format!("{}: {:?} instead of {:?}", ex.image_id, text, ex.answer),
        )?;
        let task = if ex.question == CANONICAL_FER_PROMPT {
            TaskKind::Fer
        } else {
            assert_eq!(ex.question, CANONICAL_AUD_PROMPT);
            TaskKind::Aud
        };
        responses.push(ResponseRecord {
            image_id: ex.image_id.clone(),
            task,
            question: ex.question.clone(),
            response: text,
        });
    }
    let truth: Vec<GroundTruthRecord> = memorization_faces()
        .into_iter()
        .map(|(id, fe, aus)| GroundTruthRecord {
            image_id: id,
            fe_label: Some(fe),
            au_set: Some(aus),
        })
        .collect();
    let of = |kind: TaskKind| responses.iter().filter(|r| r.task == kind).cloned().collect::<Vec<_>>();
    let fer = evaluate_responses(&of(TaskKind::Fer), &truth, &EvalTask::fer()).map_err(fail)?;
    let aud = evaluate_responses(&of(TaskKind::Aud), &truth, &EvalTask::aud()).map_err(fail)?;
    let accuracy = fer.fer.map_or(0.0, |m| m.accuracy);
    let macro_f1 = aud.aud.map_or(0.0, |m| m.macro_f1);
    ensure(
        accuracy == 1.0 && macro_f1 == 1.0,
        format!("accuracy {accuracy}, macro F1 {macro_f1}"),
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "loss {loss:.4} at step {}; 8/8 answers reproduced; accuracy {accuracy}, macro F1 {macro_f1}; {elapsed:.1?}",
        log.steps.len()
    ))
}

fn criterion_freezing() -> Outcome {
    let data = memorization_corpus(64).map_err(fail)?;
    for (stage, frozen) in [
        (Stage::Pretrain, &[ParamGroup::LanguageModel, ParamGroup::Lora][..]),
        (Stage::Finetune, &[ParamGroup::LanguageModel][..]),
    ] {
        let mut model = toy_model(&data, 6)?;
        let before = model.params.snapshot();
        let config = StageConfig {
            stage,
            lr: LearningRates::uniform(0.05),
            batch_size: 4,
            epochs: 1,
            max_steps: Some(10),
            optimizer: Optimizer::Sgd,
            target_loss: None,
        };
        train_stage(&mut model, &data, &config, 1)
            .map_err(fail)?
            .into_result()
            .map_err(fail)?;
        for (p, (_, old)) in model.params.iter().zip(&before) {
            if frozen.contains(&p.group) {
                ensure(&p.value == old, format!("{} changed in {stage:?}", p.name))?;
            }
        }
    }

    let model = toy_model(&data, 3)?;
    let prepared = model.prepare(&data[0].image).map_err(fail)?;
    let prefix = model
        .prefix(&prepared, &model.instruction_ids(&data[0].question))
        .map_err(fail)?;
    let tokens = model.response_ids(&data[0].answer).map_err(fail)?;
    let with = model.logits_after(&prefix, &tokens, true).map_err(fail)?;
    let without = model.logits_after(&prefix, &tokens, false).map_err(fail)?;
    let diff = with
        .data()
        .iter()
        .zip(without.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(diff <= 1e-12, format!("adapted logits differ by {diff:.2e} at init"))?;
    Ok(format!(
        "frozen groups bitwise unchanged in both stages; init logit gap {diff:.1e}"
    ))
}

// ------------------------------------------------------------ zero-shot

fn criterion_zero_shot() -> Outcome {
    let frames: Vec<usize> = (0..10_000).collect();
    let picked = uniform_sample(&frames, 0.02).map_err(fail)?;
    ensure(picked.len() == 200, format!("{} frames sampled", picked.len()))?;
    ensure(
        picked.iter().enumerate().all(|(i, &f)| f == 50 * i),
        "frames not in stride order",
    )?;

    let bp4d = filter_shared_aus(&BP4D_AUS, &VALID_AUS).map_err(fail)?;
    let disfa = filter_shared_aus(&DISFA_AUS, &VALID_AUS).map_err(fail)?;
    ensure(
        bp4d == [1, 2, 4, 6, 7, 10, 12, 15, 23, 24],
        format!("BP4D columns {bp4d:?}"),
    )?;
    ensure(disfa == [1, 2, 4, 6, 12, 25, 26], format!("DISFA columns {disfa:?}"))?;
    ensure(
        DatasetAdapter::Bp4d.task(TaskKind::Aud).map_err(fail)?.vocabulary == bp4d
            && DatasetAdapter::Disfa.task(TaskKind::Aud).map_err(fail)?.vocabulary == disfa,
        "adapter vocabularies differ from the shared columns",
    )?;
    Ok("200 frames at stride 50; BP4D and DISFA shared columns match".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", criterion_gradients),
        ("crop geometry", criterion_crop_geometry),
        ("projector degeneracies", criterion_degeneracies),
        ("reference AU means", criterion_reference_rows),
        ("label extraction round trip", criterion_extraction),
        ("dataset pipeline", criterion_dataset),
        ("end-to-end memorization", criterion_memorization),
        ("freezing and LoRA contracts", criterion_freezing),
        ("zero-shot mechanics", criterion_zero_shot),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
