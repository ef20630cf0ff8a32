//! One test per acceptance criterion; each prints a single PASS/FAIL line.
//!
//! Criteria 4 to 7 need a trained baseline and refiner and are skipped unless
//! `SRN_ACCEPT_FULL=1`. They train both models once at the budget below and
//! cache data and checkpoints in `SRN_ACCEPT_DIR`; complete checkpoints found
//! there (for example from `srn train`) are reused.
//!
//! | variable                   | default |
//! |----------------------------|---------|
//! | `SRN_ACCEPT_DIR`           | `$TMPDIR/srn-acceptance-<budget>` |
//! | `SRN_ACCEPT_IMAGES`        | 5000    |
//! | `SRN_ACCEPT_IMAGE_SIZE`    | 64      |
//! | `SRN_ACCEPT_EPOCHS`        | 50      |
//! | `SRN_ACCEPT_WIDTH_DIVISOR` | 1       |
//! | `SRN_ACCEPT_SEED`          | 0       |
//!
//! Run them with `SRN_ACCEPT_FULL=1 cargo test --release -p srn-cli --test acceptance`.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srn_core::eval::{self, DecompositionReport, ACTIVITY_THRESHOLD};
use srn_core::gradcheck::{self, OP_TOL, PIPELINE_TOL, SUITE_EPS};
use srn_core::model::{Checkpoint, ModelConfig, ModelParams, RefineConfig, Session, SetAutoencoder, Variant};
use srn_core::nn::BatchNormMode;
use srn_core::scenes::{Dataset, SceneConfig, DEFAULT_PALETTE};
use srn_core::tensor::Tensor;
use srn_core::train::{self, read_log, TrainConfig};

type Verdict = (bool, String);

struct Criterion {
    n: u32,
    name: &'static str,
    heavy: bool,
    run: fn() -> Verdict,
}

const CRITERIA: [Criterion; 8] = [
    Criterion { n: 1, name: "gradient correctness", heavy: false, run: criterion_1_gradient_correctness },
    Criterion { n: 2, name: "permutation invariance", heavy: false, run: criterion_2_permutation_invariance },
    Criterion { n: 3, name: "degeneracy equivalence", heavy: false, run: criterion_3_degeneracy_equivalence },
    Criterion { n: 4, name: "decomposition success gap", heavy: true, run: criterion_4_decomposition_success_gap },
    Criterion { n: 5, name: "responsibility sweep", heavy: true, run: criterion_5_responsibility_sweep },
    Criterion { n: 6, name: "inner loss descent", heavy: true, run: criterion_6_inner_loss_descent },
    Criterion { n: 7, name: "reconstruction ordering", heavy: true, run: criterion_7_reconstruction_ordering },
    Criterion { n: 8, name: "reproducibility and formats", heavy: false, run: criterion_8_reproducibility_and_formats },
];

fn main() -> ExitCode {
    let full = std::env::var("SRN_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let mut failed = 0;
    for c in &CRITERIA {
        if c.heavy && !full {
            println!("SKIP criterion {} ({}): needs trained models, set SRN_ACCEPT_FULL=1", c.n, c.name);
            continue;
        }
        let (pass, detail) = panic::catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        println!("{} criterion {} ({}): {detail}", if pass { "PASS" } else { "FAIL" }, c.n, c.name);
        failed += !pass as u32;
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

fn tiny(set_size: usize, elem_dim: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        set_size,
        elem_dim,
        embed_dim: 5,
        hidden_dim: 6,
        fspool_pieces: 4,
        encoder_channels: [2, 2, 2, 3],
        decoder_channels: [2, 2, 2],
        batch_norm: true,
    }
}

fn criterion_1_gradient_correctness() -> Verdict {
    let entries = gradcheck::standard_suite().unwrap();
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.passed())
        .map(|e| format!("{} ({:.2e})", e.name, e.report.max_rel_err))
        .collect();
    let pipeline = entries.iter().find(|e| e.name == "unrolled refiner pipeline").expect("pipeline check");
    let ops_ok = entries.iter().filter(|e| e.report.tol == OP_TOL).all(|e| e.report.passed());
    let pass = failed.is_empty() && ops_ok && pipeline.report.tol == PIPELINE_TOL && pipeline.report.passed();
    (
        pass,
        format!(
            "{} checks at eps {SUITE_EPS:e}, pipeline max rel err {:.2e} over {} coordinates; failing: {:?}",
            entries.len(),
            pipeline.report.max_rel_err,
            pipeline.report.checked,
            failed
        ),
    )
}

fn criterion_2_permutation_invariance() -> Verdict {
    let cfg = ModelConfig { encoder_channels: [2, 2, 2, 8], ..tiny(8, 6) };
    let model = SetAutoencoder::new(cfg, Variant::Srn, RefineConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, n, d) = (2, 8, 6);
    let mut broken = 0;
    for trial in 0..20 {
        let params: ModelParams<f32> = model.init_params(trial).unwrap();
        let s = Tensor::<f32>::from_fn(&[b, n, d], |_| rng.gen_range(-2.0..2.0));
        let run = |s: &Tensor<f32>| {
            let mut sess = Session::new(&params, BatchNormMode::Eval);
            let sv = sess.tape.constant(s.clone());
            let h = model.aggregate(&mut sess, sv).unwrap();
            let (y, _) = model.decode(&mut sess, sv).unwrap();
            (sess.tape.value(h).clone(), sess.tape.value(y).clone())
        };
        let reference = run(&s);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let p = Tensor::from_fn(&[b, n, d], |k| {
                let (bi, i, j) = (k / (n * d), (k / d) % n, k % d);
                s.data()[(bi * n + perm[i]) * d + j]
            });
            let (h, y) = run(&p);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if bits(&h) != bits(&reference.0) || bits(&y) != bits(&reference.1) {
                broken += 1;
            }
        }
    }
    (broken == 0, format!("{broken} of 2000 permutations changed an output bit"))
}

fn criterion_3_degeneracy_equivalence() -> Verdict {
    let cfg = ModelConfig { image_size: 32, set_size: 4, elem_dim: 8, embed_dim: 6, hidden_dim: 16, ..ModelConfig::default() }
        .with_width_divisor(8);
    let base = SetAutoencoder::new(cfg.clone(), Variant::Baseline, RefineConfig::default()).unwrap();
    let base_params: ModelParams<f32> = base.init_params(5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::from_fn(&[3, 3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let outputs = |model: &SetAutoencoder, params: &ModelParams<f32>, mode| {
        let mut sess = Session::new(params, mode);
        let xv = sess.tape.constant(x.clone());
        let out = model.forward(&mut sess, xv, false).unwrap();
        let bits = |v| sess.tape.value(v).data().iter().map(|f: &f32| f.to_bits()).collect::<Vec<_>>();
        (bits(out.recon), bits(out.slots))
    };
    let mut mismatches = Vec::new();
    for refine in [
        RefineConfig { steps: 0, ..RefineConfig::default() },
        RefineConfig { inner_lr: 0.0, ..RefineConfig::default() },
    ] {
        let srn = SetAutoencoder::new(cfg.clone(), Variant::Srn, refine).unwrap();
        let srn_params: ModelParams<f32> = srn.init_params(5).unwrap();
        for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
            if outputs(&srn, &srn_params, mode) != outputs(&base, &base_params, mode) {
                mismatches.push(format!("r={} alpha={} {:?}", refine.steps, refine.inner_lr, mode));
            }
        }
    }
    (
        mismatches.is_empty(),
        format!("r=0 and alpha=0 against baseline in train and eval modes; mismatches: {mismatches:?}"),
    )
}

fn criterion_8_reproducibility_and_formats() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = Dataset::generate(8, 48, &SceneConfig::for_size(32)).unwrap();
    ds.save(&data).unwrap();
    let loaded = Dataset::load(&data).unwrap();
    let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    let data_ok = loaded.manifest == ds.manifest && bits(loaded.images()) == bits(ds.images());

    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 1,
        seed: 8,
        model: ModelConfig { image_size: 32, set_size: 4, elem_dim: 8, ..ModelConfig::default() }.with_width_divisor(8),
        refine: RefineConfig { steps: 2, ..RefineConfig::default() },
        data: data.clone(),
        checkpoint: dir.path().join("a.ckpt"),
        eval_decomposition: false,
        ..TrainConfig::default()
    };
    let a = train::train(&cfg, |_| {}).unwrap();
    let b = train::train(&TrainConfig { checkpoint: dir.path().join("b.ckpt"), ..cfg.clone() }, |_| {}).unwrap();
    let loss_ok = a.epochs[0].train_loss.to_bits() == b.epochs[0].train_loss.to_bits()
        && a.epochs[0].val_loss.to_bits() == b.epochs[0].val_loss.to_bits();
    let ck = Checkpoint::load(&cfg.checkpoint).unwrap();
    let ckpt_ok = ck == a.checkpoint && std::fs::read(&cfg.checkpoint).unwrap() == std::fs::read(dir.path().join("b.ckpt")).unwrap();

    let gc = Command::new(env!("CARGO_BIN_EXE_srn")).arg("gradcheck").output().unwrap();
    let gc_ok = gc.status.code() == Some(0);
    (
        data_ok && loss_ok && ckpt_ok && gc_ok,
        format!(
            "dataset round trip {data_ok}, checkpoint round trip {ckpt_ok}, epoch-1 losses identical {loss_ok}, gradcheck exit {:?}",
            gc.status.code()
        ),
    )
}

struct Budget {
    images: usize,
    image_size: usize,
    epochs: usize,
    width_divisor: usize,
    seed: u64,
    dir: PathBuf,
}

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    match std::env::var(key) {
        Ok(v) => v.parse().unwrap_or_else(|_| panic!("{key}={v} is not valid")),
        Err(_) => default,
    }
}

impl Budget {
    fn from_env() -> Self {
        let images = env_or("SRN_ACCEPT_IMAGES", 5000);
        let image_size = env_or("SRN_ACCEPT_IMAGE_SIZE", 64);
        let epochs = env_or("SRN_ACCEPT_EPOCHS", 50);
        let width_divisor = env_or("SRN_ACCEPT_WIDTH_DIVISOR", 1);
        let seed = env_or("SRN_ACCEPT_SEED", 0);
        let dir = std::env::var_os("SRN_ACCEPT_DIR").map(PathBuf::from).unwrap_or_else(|| {
            std::env::temp_dir()
                .join(format!("srn-acceptance-{images}-{image_size}px-{epochs}ep-w{width_divisor}-s{seed}"))
        });
        Budget { images, image_size, epochs, width_divisor, seed, dir }
    }

    fn describe(&self) -> String {
        format!(
            "{} images at {}px, {} epochs, width/{}, seed {}",
            self.images, self.image_size, self.epochs, self.width_divisor, self.seed
        )
    }
}

struct Trained {
    budget: Budget,
    data: Dataset,
    val: Vec<usize>,
    baseline: Checkpoint,
    srn: Checkpoint,
    baseline_report: DecompositionReport,
    srn_report: DecompositionReport,
}

fn complete(ckpt: &Path, epochs: usize) -> bool {
    let log = PathBuf::from(format!("{}.log.jsonl", ckpt.display()));
    ckpt.exists() && read_log(&log).map(|l| l.len() == epochs).unwrap_or(false)
}

fn train_or_reuse(b: &Budget, variant: Variant) -> Checkpoint {
    let path = b.dir.join(format!("{variant}.ckpt"));
    if !complete(&path, b.epochs) {
        let model = ModelConfig { image_size: b.image_size, ..ModelConfig::default() }.with_width_divisor(b.width_divisor);
        let cfg = TrainConfig {
            seed: b.seed,
            epochs: b.epochs,
            variant,
            model,
            data: b.dir.join("data"),
            checkpoint: path.clone(),
            eval_decomposition: false,
            ..TrainConfig::default()
        };
        train::train(&cfg, |e| eprintln!("{variant} epoch {} train {:.6} val {:.6}", e.epoch, e.train_loss, e.val_loss))
            .unwrap();
    }
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.model.config.image_size, b.image_size, "{} was trained at another image size", path.display());
    ck
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let budget = Budget::from_env();
        let data_dir = budget.dir.join("data");
        let data = match Dataset::load(&data_dir) {
            Ok(d) if d.len() == budget.images && d.image_size() == budget.image_size => d,
            _ => {
                let d = Dataset::generate(budget.seed, budget.images, &SceneConfig::for_size(budget.image_size)).unwrap();
                d.save(&data_dir).unwrap();
                d
            }
        };
        let baseline = train_or_reuse(&budget, Variant::Baseline);
        let srn = train_or_reuse(&budget, Variant::Srn);
        let (_, val) = data.split();
        let baseline_report = eval::evaluate_decomposition(&baseline.model, &baseline.params, &data, &val, 32).unwrap();
        let srn_report = eval::evaluate_decomposition(&srn.model, &srn.params, &data, &val, 32).unwrap();
        Trained { budget, data, val, baseline, srn, baseline_report, srn_report }
    })
}

fn pct(r: Option<f64>) -> f64 {
    100.0 * r.unwrap_or(0.0)
}

fn criterion_4_decomposition_success_gap() -> Verdict {
    let t = trained();
    let (s2, s3) = (pct(t.srn_report.rate_for(2)), pct(t.srn_report.rate_for(3)));
    let (b2, b3) = (pct(t.baseline_report.rate_for(2)), pct(t.baseline_report.rate_for(3)));
    let pass = s2 - b2 >= 20.0 && s3 - b3 >= 20.0 && s2 >= 60.0;
    (
        pass,
        format!(
            "2 circles srn {s2:.1}% vs baseline {b2:.1}%, 3 circles srn {s3:.1}% vs baseline {b3:.1}% on {} validation images ({})",
            t.val.len(),
            t.budget.describe()
        ),
    )
}

fn criterion_5_responsibility_sweep() -> Verdict {
    let t = trained();
    let size = t.budget.image_size;
    let (a, b) = eval::horizontal_sweep(size, 8.5 * size as f64 / 64.0, DEFAULT_PALETTE[0].1);
    let frames = 60;
    let base = eval::responsibility_trace(&t.baseline.model, &t.baseline.params, &a, &b, frames).unwrap();
    let srn = eval::responsibility_trace(&t.srn.model, &t.srn.params, &a, &b, frames).unwrap();
    let single = srn.single_slot_frames() as f64 / frames as f64;
    let pass = base.handoff_frames() > srn.handoff_frames() && single >= 0.7;
    (
        pass,
        format!(
            "frames with >=2 active slots: baseline {} vs srn {}; srn single-slot frames {:.0}% (threshold {ACTIVITY_THRESHOLD}, {})",
            base.handoff_frames(),
            srn.handoff_frames(),
            100.0 * single,
            t.budget.describe()
        ),
    )
}

fn criterion_6_inner_loss_descent() -> Verdict {
    let t = trained();
    let initial = t.srn_report.inner_loss_initial.expect("refiner reports inner losses");
    let fin = t.srn_report.inner_loss_final.expect("refiner reports inner losses");
    (
        fin <= 1.05 * initial,
        format!("mean inner loss {initial:.6} at S0, {fin:.6} after refinement ({})", t.budget.describe()),
    )
}

fn criterion_7_reconstruction_ordering() -> Verdict {
    let t = trained();
    let (s, b) = (t.srn_report.mse, t.baseline_report.mse);
    let images = t.data.len();
    (
        s <= b,
        format!("validation mse srn {s:.6} vs baseline {b:.6} ({images} images total, {})", t.budget.describe()),
    )
}
