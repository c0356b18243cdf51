//! Acceptance suite. One test per numbered criterion; each prints a single
//! `criterion N: PASS` line on success (visible with `--nocapture`) and
//! fails loudly otherwise. Criteria 2 and 9 share one smoke training run.
//!
//! Tolerances are pinned as constants next to the criterion that uses them.

use std::sync::{LazyLock, Mutex, MutexGuard};

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use spk::batch::{Batch, Stage, Value};
use spk::config::parse_config;
use spk::data::sampler_indices;
use spk::launch;
use spk::linalg;
use spk::logging::Logger;
use spk::losses::nt_xent;
use spk::manager::ResumeMode;
use spk::monitors::callbacks::{Callback, CallbackCtx};
use spk::monitors::collapse::{lidar, rankme, LIDAR_DELTA, LIDAR_EPS, RANKME_EPS};
use spk::monitors::queue::QueueRegistry;
use spk::monitors::OnlineProbe;
use spk::optim::{lars_update, warmup_cosine_lr};
use spk::tensor::Tensor;

/// Training runs mutate the process-global seed, so criteria that train
/// serialize on this lock. Pure oracle criteria stay parallel.
static TRAIN_LOCK: Mutex<()> = Mutex::new(());

fn train_guard() -> MutexGuard<'static, ()> {
    TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(n: u32, what: &str) {
    println!("criterion {n}: PASS - {what}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_full_scale_tables_substituted() {
    // The published linear-probe and robustness tables need pretrained
    // foundation checkpoints and full datasets; they are out of scope at
    // desk scale by design. The oracle and property suites below (criteria
    // 2-10) stand in for them. This test records that substitution.
    pass(
        1,
        "full-scale tables out of scope; substituted by criteria 2-10 oracle/property suites",
    );
}

// ------------------------------------------------------- 2 and 9 (shared)

const SMOKE_KNN_MIN_TOP1: f64 = 0.30; // 3x chance on 10 classes
const SMOKE_MAX_SECONDS: u64 = 3600; // CPU budget

struct SmokeOutcome {
    epoch_loss: Vec<f64>,
    knn_final: f64,
    early_probe_stream: Vec<f64>,
    late_probe_stream: Vec<f64>,
    seconds: u64,
}

fn smoke_config(run_dir: &std::path::Path) -> String {
    format!(
        r#"
seed = 2024
run_dir = "{}"

[data]
batch_size = 256
val_samples = 500

[data.dataset]
name = "synthetic_images"
n_samples = 10000
n_classes = 10
size = 16
noise = 0.05

[data.train_transform]
kind = "multi_view"
views = [
    [
        {{ type = "random_resized_crop", size = 16, scale = [0.6, 1.0] }},
        {{ type = "random_horizontal_flip", p = 0.5 }},
        {{ type = "color_jitter", brightness = 0.2, contrast = 0.2, saturation = 0.1 }},
        {{ type = "random_grayscale", p = 0.05 }},
    ],
    [
        {{ type = "random_resized_crop", size = 16, scale = [0.6, 1.0] }},
        {{ type = "random_horizontal_flip", p = 0.5 }},
        {{ type = "color_jitter", brightness = 0.2, contrast = 0.2, saturation = 0.1 }},
        {{ type = "random_grayscale", p = 0.05 }},
    ],
]

[module]
forward = "simclr"
temperature = 0.5

[module.backbone]
name = "small_conv"
channels = 16
embedding_dim = 64

[module.projector]
name = "mlp"
in_dim = 64
hidden = 64
out_dim = 32
batch_norm = true

[module.optim]
interval = "step"

[module.optim.optimizer]
type = "LARS"
lr = 0.04
weight_decay = 1e-6
momentum = 0.9

[module.optim.scheduler]
type = "LinearWarmupCosineAnnealing"
warmup_steps = 20
eta_min = 0.0

[trainer]
max_epochs = 5
checkpoint_every_n_epochs = 0

[[callbacks]]
type = "online_knn"
name = "knn"
queue_length = 2000
k = 10

[[callbacks]]
type = "depth_probes"
name = "depth"
layers = ["pool1", "fc"]
n_classes = 10
lr = 0.003
"#,
        run_dir.display()
    )
}

fn read_metrics(path: &std::path::Path) -> Vec<(String, f64, u64, u64)> {
    let text = std::fs::read_to_string(path).expect("metrics.csv readable");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,value,step,epoch"), "csv header");
    lines
        .map(|line| {
            let mut parts = line.split(',');
            let name = parts.next().unwrap().to_string();
            let value: f64 = parts.next().unwrap().parse().unwrap();
            let step: u64 = parts.next().unwrap().parse().unwrap();
            let epoch: u64 = parts.next().unwrap().parse().unwrap();
            (name, value, step, epoch)
        })
        .collect()
}

fn per_epoch_series<'r>(
    records: &'r [(String, f64, u64, u64)],
    name: &str,
    epochs: u64,
) -> Vec<Vec<&'r f64>> {
    (0..epochs)
        .map(|e| {
            records
                .iter()
                .filter(|(n, _, _, ep)| n == name && *ep == e)
                .map(|(_, v, _, _)| v)
                .collect()
        })
        .collect()
}

static SMOKE: LazyLock<SmokeOutcome> = LazyLock::new(|| {
    let _guard = train_guard();
    let dir = tempfile::tempdir().expect("tempdir");
    let run_dir = dir.path().join("smoke");
    let cfg = parse_config(&smoke_config(&run_dir), &[]).expect("smoke config parses");

    let started = std::time::Instant::now();
    launch::prepare(&cfg, ResumeMode::Never)
        .expect("smoke constructs")
        .run()
        .expect("smoke run completes");
    let seconds = started.elapsed().as_secs();

    let records = read_metrics(&run_dir.join("metrics.csv"));
    let epochs = cfg.trainer.max_epochs;

    let epoch_loss: Vec<f64> = per_epoch_series(&records, "train/loss", epochs)
        .iter()
        .map(|vs| {
            assert!(!vs.is_empty(), "every epoch logs train/loss");
            vs.iter().copied().sum::<f64>() / vs.len() as f64
        })
        .collect();
    let knn_final = records
        .iter()
        .rev()
        .find(|(n, ..)| n == "val/knn/top1")
        .map(|(_, v, _, _)| *v)
        .expect("knn top-1 logged");
    let flatten = |series: Vec<Vec<&f64>>| -> Vec<f64> {
        series.into_iter().flatten().copied().collect()
    };
    let early_probe_stream = flatten(per_epoch_series(&records, "val/depth_pool1/top1", epochs));
    let late_probe_stream = flatten(per_epoch_series(&records, "val/depth_fc/top1", epochs));

    eprintln!(
        "smoke: epoch_loss={epoch_loss:?} knn={knn_final} early={early_probe_stream:?} late={late_probe_stream:?} {seconds}s"
    );

    SmokeOutcome {
        epoch_loss,
        knn_final,
        early_probe_stream,
        late_probe_stream,
        seconds,
    }
});

#[test]
fn criterion_02_simclr_smoke_training() {
    let smoke = &*SMOKE;
    assert_eq!(smoke.epoch_loss.len(), 5, "five epoch averages");
    for w in smoke.epoch_loss.windows(2) {
        assert!(
            w[1] < w[0],
            "epoch-average train/loss must strictly decrease: {:?}",
            smoke.epoch_loss
        );
    }
    assert!(
        smoke.knn_final >= SMOKE_KNN_MIN_TOP1,
        "kNN top-1 {} below {}",
        smoke.knn_final,
        SMOKE_KNN_MIN_TOP1
    );
    assert!(
        smoke.seconds <= SMOKE_MAX_SECONDS,
        "smoke run took {}s, budget {}s",
        smoke.seconds,
        SMOKE_MAX_SECONDS
    );
    pass(
        2,
        &format!(
            "kNN top-1 {:.3} >= {SMOKE_KNN_MIN_TOP1}, epoch losses {:?} strictly decreasing, {}s",
            smoke.knn_final, smoke.epoch_loss, smoke.seconds
        ),
    );
}

#[test]
fn criterion_09_depth_probes_favor_later_layer() {
    let smoke = &*SMOKE;
    assert_eq!(
        smoke.early_probe_stream.len(),
        5,
        "early layer logs one val top-1 per epoch"
    );
    assert_eq!(
        smoke.late_probe_stream.len(),
        5,
        "late layer logs one val top-1 per epoch"
    );
    let early = *smoke.early_probe_stream.last().unwrap();
    let late = *smoke.late_probe_stream.last().unwrap();
    assert!(
        late >= early,
        "later layer top-1 {late} must be >= earlier layer top-1 {early}"
    );
    pass(
        9,
        &format!("per-layer streams present; final top-1 later {late:.3} >= earlier {early:.3}"),
    );
}

// ---------------------------------------------------------------- 3

const RANKME_DEGENERATE_TOL: f64 = 1e-6;
const RANKME_SIGMA_TOL: f64 = 1e-4;
const RANKME_GRAM_REL_TOL: f64 = 1e-5;
const LIDAR_CLOSED_FORM_TOL: f64 = 1e-3;
const LIDAR_INVARIANCE_TOL: f64 = 1e-6;

/// Independent spectrum-entropy evaluation via the Gram matrix: singular
/// values as square roots of eigenvalues of `Z^T Z` (two-sided Jacobi),
/// while the implementation uses one-sided Jacobi on `Z` itself.
fn rankme_gram_route(z: &Array2<f64>, eps: f64) -> f64 {
    let gram = z.t().dot(z);
    let (eigs, _) = linalg::sym_eigen(&gram);
    let sigma: Vec<f64> = eigs.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let total: f64 = sigma.iter().sum();
    let mut entropy = 0.0;
    for s in sigma {
        let p = s / (total + eps);
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

fn random_orthogonal(d: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    // eigenvectors of a random symmetric matrix form an orthogonal basis
    let m = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() - 0.5);
    let sym = &m + &m.t();
    let (_, q) = linalg::sym_eigen(&sym);
    q
}

#[test]
fn criterion_03_collapse_metric_oracles() {
    // rank-1 embedding: all rows on one ray
    let u = Array1::from_shape_fn(64, |i| (i as f64 * 0.37).sin() + 1.5);
    let v = Array1::from_shape_fn(32, |j| (j as f64 * 0.61).cos() + 0.2);
    let rank1 = Array2::from_shape_fn((64, 32), |(i, j)| u[i] * v[j]);
    let r = rankme(rank1.view(), RANKME_EPS).unwrap();
    assert!((r - 1.0).abs() <= RANKME_DEGENERATE_TOL, "rank-1 -> {r}");

    // 4x4 identity: flat spectrum
    let r = rankme(Array2::eye(4).view(), RANKME_EPS).unwrap();
    assert!((r - 4.0).abs() <= RANKME_DEGENERATE_TOL, "identity -> {r}");

    // sigma = (2,1,1,0): exp entropy = 2 sqrt(2)
    let sig = Array2::from_diag(&ndarray::arr1(&[2.0, 1.0, 1.0, 0.0]));
    let r = rankme(sig.view(), RANKME_EPS).unwrap();
    assert!(
        (r - 2.0 * std::f64::consts::SQRT_2).abs() <= RANKME_SIGMA_TOL,
        "sigma (2,1,1,0) -> {r}"
    );

    // Gram-route equivalence on 100 random instances
    let mut rng = ChaCha12Rng::seed_from_u64(30);
    for i in 0..100 {
        let z = Array2::from_shape_fn((64, 32), |_| rng.random::<f64>() * 2.0 - 1.0);
        let a = rankme(z.view(), RANKME_EPS).unwrap();
        let b = rankme_gram_route(&z, RANKME_EPS);
        let rel = (a - b).abs() / b.abs().max(1e-12);
        assert!(rel <= RANKME_GRAM_REL_TOL, "instance {i}: {a} vs {b} (rel {rel})");
    }

    // lidar: full collapse (every embedding identical) -> 1.0
    let collapsed = Array3::from_elem((8, 4, 16), 0.7);
    let l = lidar(collapsed.view(), LIDAR_DELTA, LIDAR_EPS).unwrap();
    assert!((l - 1.0).abs() <= RANKME_DEGENERATE_TOL, "collapsed -> {l}");

    // two classes at +/- e1, no within-class scatter: exactly one
    // discriminative direction, so effective rank 1
    let mut two = Array3::zeros((2, 4, 8));
    for q in 0..4 {
        two[(0, q, 0)] = 1.0;
        two[(1, q, 0)] = -1.0;
    }
    let l = lidar(two.view(), LIDAR_DELTA, LIDAR_EPS).unwrap();
    assert!((l - 1.0).abs() <= LIDAR_CLOSED_FORM_TOL, "two-class +/-e1 -> {l}");

    // orthogonal invariance: rotating embedding space preserves the value
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let views = Array3::from_shape_fn((6, 3, 12), |(i, _, k)| {
        (i as f64 - 2.5) * ((k * i + 1) as f64 * 0.13).sin() + 0.05 * rng.random::<f64>()
    });
    let base = lidar(views.view(), LIDAR_DELTA, LIDAR_EPS).unwrap();
    for trial in 0..5 {
        let q = random_orthogonal(12, &mut rng);
        let (n, vcount, d) = views.dim();
        let mut rotated = Array3::zeros((n, vcount, d));
        for i in 0..n {
            for j in 0..vcount {
                let row = views.index_axis(ndarray::Axis(0), i);
                let r = row.index_axis(ndarray::Axis(0), j);
                let rq = r.dot(&q);
                rotated.index_axis_mut(ndarray::Axis(0), i).row_mut(j).assign(&rq);
            }
        }
        let rot = lidar(rotated.view(), LIDAR_DELTA, LIDAR_EPS).unwrap();
        assert!(
            (rot - base).abs() <= LIDAR_INVARIANCE_TOL,
            "trial {trial}: {base} vs {rot}"
        );
    }

    pass(3, "rankme degenerate + Gram-route oracles, lidar closed forms + rotation invariance");
}

// ---------------------------------------------------------------- 4

const NT_XENT_ABS_TOL: f64 = 1e-5;
const NT_XENT_GRAD_REL_TOL: f64 = 1e-3;

/// Direct per-anchor evaluation of the contrastive objective. Shares no
/// code with the library: plain loops, textbook formula.
fn nt_xent_reference(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> f64 {
    let n = z1.nrows();
    let d = z1.ncols();
    let mut u = Array2::zeros((2 * n, d));
    for i in 0..n {
        let n1 = z1.row(i).dot(&z1.row(i)).sqrt();
        let n2 = z2.row(i).dot(&z2.row(i)).sqrt();
        for j in 0..d {
            u[(i, j)] = z1[(i, j)] / n1;
            u[(n + i, j)] = z2[(i, j)] / n2;
        }
    }
    let mut total = 0.0;
    for i in 0..2 * n {
        let p = (i + n) % (2 * n);
        let pos = (u.row(i).dot(&u.row(p)) / tau).exp();
        let mut denom = 0.0;
        for k in 0..2 * n {
            if k != i {
                denom += (u.row(i).dot(&u.row(k)) / tau).exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / (2 * n) as f64
}

fn loss_value(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> f64 {
    nt_xent(
        &Tensor::constant(z1.clone().into_dyn()),
        &Tensor::constant(z2.clone().into_dyn()),
        tau,
    )
    .unwrap()
    .item()
}

#[test]
fn criterion_04_nt_xent_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(40);
    for i in 0..100 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(3..=24);
        let tau = [0.1, 0.5, 1.0][i % 3];
        let z1 = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let z2 = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let got = loss_value(&z1, &z2, tau);
        let want = nt_xent_reference(&z1, &z2, tau);
        assert!(
            (got - want).abs() <= NT_XENT_ABS_TOL,
            "instance {i} (n={n}, d={d}, tau={tau}): {got} vs {want}"
        );
    }

    // N=1, identical views: the denominator is exactly the positive
    let z = ndarray::arr2(&[[0.3, -1.2, 0.8]]);
    assert_eq!(loss_value(&z, &z, 0.5), 0.0, "N=1 identical pair must be exactly zero");

    // finite-difference gradient check
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let z1 = ArrayD::from_shape_fn(IxDyn(&[6, 5]), |_| rng.random::<f64>() * 2.0 - 1.0);
    let z2 = ArrayD::from_shape_fn(IxDyn(&[6, 5]), |_| rng.random::<f64>() * 2.0 - 1.0);
    let p1 = Tensor::parameter(z1.clone());
    let p2 = Tensor::parameter(z2.clone());
    let loss = nt_xent(&p1, &p2, 0.5).unwrap();
    loss.backward().unwrap();
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for (param, base, other, first) in [(&p1, &z1, &z2, true), (&p2, &z2, &z1, false)] {
        let grad = param.grad().expect("gradient reaches inputs");
        for idx in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |z: &ArrayD<f64>| {
                let (a, b) = if first { (z, other) } else { (other, z) };
                nt_xent(
                    &Tensor::constant(a.clone()),
                    &Tensor::constant(b.clone()),
                    0.5,
                )
                .unwrap()
                .item()
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grad.as_slice().unwrap()[idx];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    assert!(
        max_rel < NT_XENT_GRAD_REL_TOL,
        "finite-difference max relative error {max_rel}"
    );

    pass(
        4,
        &format!("100 brute-force matches <= {NT_XENT_ABS_TOL}, N=1 exact zero, grad check {max_rel:.2e}"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_probe_isolation() {
    let _guard = train_guard();
    spk::rng::seed_everything(50);

    let cfg = parse_config(
        r#"
[data]
batch_size = 8
[data.dataset]
name = "gaussian_blobs"
n_samples = 32
n_classes = 4
dim = 6

[module]
forward = "supervised"
[module.backbone]
name = "mlp"
in_dim = 6
hidden = 16
out_dim = 12
[module.head]
name = "linear"
in_dim = 12
out_dim = 4
[module.optim.optimizer]
type = "SGD"
lr = 0.1

[trainer]
max_epochs = 1
"#,
        &[],
    )
    .unwrap();
    let module = spk::registry::build_module(&cfg.module, 50).unwrap();
    let data = spk::registry::build_data(&cfg.data, 50).unwrap();

    let hash_backbone = |module: &spk::module::Module| -> Vec<u8> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, value) in module.state() {
            if name.starts_with("backbone.") {
                hasher.update(name.as_bytes());
                for v in value.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.finalize().to_vec()
    };

    let before = hash_backbone(&module);
    let mut probe = OnlineProbe::new("probe", "embedding", "label", 4).unwrap();
    let logger = Logger::disabled();
    let registry = QueueRegistry::new();
    let mut batches = data.train.epoch(0);
    let batch = batches.next().unwrap().unwrap();
    // the visible batch carries the live (graph-attached) embedding tensor,
    // exactly as callbacks see it during training
    let out = module.run_forward(&batch, Stage::Train, 0).unwrap();
    let mut visible = Batch::new();
    visible.insert("embedding", Value::Tensor(out.tensor("embedding").unwrap().clone()));
    visible.insert("label", batch.get("label").unwrap().clone());
    for step in 0..100 {
        let ctx = CallbackCtx {
            logger: &logger,
            registry: &registry,
            step,
            epoch: 0,
        };
        probe.on_batch_end(Stage::Train, &visible, &ctx).unwrap();
    }
    let after = hash_backbone(&module);
    assert_eq!(before, after, "backbone hash changed after probe-only steps");
    pass(5, "backbone parameter hash bit-exact after 100 probe-only steps");
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_queue_dedup_and_fifo() {
    // two subscribers to the same (key, length) share one buffer
    let registry = QueueRegistry::new();
    let a = registry.register("embedding", 512, 16).unwrap();
    let b = registry.register("embedding", 512, 16).unwrap();
    assert!(std::rc::Rc::ptr_eq(&a, &b), "subscribers must share the buffer");

    // ring behavior equals a brute-force list model
    let mut rng = ChaCha12Rng::seed_from_u64(60);
    let mut stamp = 0.0f64;
    for case in 0..1000 {
        let cap = rng.random_range(1..=64);
        let dim = rng.random_range(1..=5);
        let queue = registry.register(&format!("q{case}"), cap, dim).unwrap();
        let mut model: Vec<(Vec<f64>, i64)> = Vec::new();
        for _ in 0..rng.random_range(1..=12) {
            let rows = rng.random_range(1..=2 * cap);
            let mut feats = Array2::zeros((rows, dim));
            let mut labels = Vec::with_capacity(rows);
            for r in 0..rows {
                stamp += 1.0;
                for c in 0..dim {
                    feats[(r, c)] = stamp + c as f64 * 0.25;
                }
                labels.push(stamp as i64);
                model.push((feats.row(r).to_vec(), stamp as i64));
            }
            queue.append(feats.view(), &labels).unwrap();
            if model.len() > cap {
                model.drain(..model.len() - cap);
            }
            let (snap_feats, snap_labels) = queue.snapshot();
            assert_eq!(snap_feats.nrows(), model.len(), "case {case}: fill");
            for (r, (want_row, want_label)) in model.iter().enumerate() {
                assert_eq!(snap_labels[r], *want_label, "case {case}: label order");
                assert_eq!(snap_feats.row(r).to_vec(), *want_row, "case {case}: row {r}");
            }
        }
    }
    pass(6, "shared-handle dedup and 1000 FIFO sequences match the list model");
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_sampler_properties() {
    let mut rng = ChaCha12Rng::seed_from_u64(70);
    let mut sizes = vec![1, 2, 3, 1000];
    for _ in 0..20 {
        sizes.push(rng.random_range(4..1000));
    }
    for &n in &sizes {
        for &v in &[1usize, 2, 4] {
            let seed = rng.random::<u64>();
            let seq = sampler_indices(n, v, seed, 3).unwrap();
            assert_eq!(seq.len(), n * v, "n={n} v={v}: length");

            // exact multiset: every index exactly v times
            let mut counts = vec![0usize; n];
            for &i in &seq {
                counts[i] += 1;
            }
            assert!(counts.iter().all(|&c| c == v), "n={n} v={v}: multiset");

            // contiguous runs of v identical indices
            for chunk in seq.chunks(v) {
                assert!(chunk.iter().all(|&i| i == chunk[0]), "n={n} v={v}: runs");
            }

            // determinism under fixed (seed, epoch)
            assert_eq!(seq, sampler_indices(n, v, seed, 3).unwrap(), "determinism");

            // distinct permutations across epochs (n >= 2 so a permutation
            // change is possible; equality for all epochs would mean the
            // epoch is ignored)
            if n >= 2 {
                let differs = (0..5).any(|e| sampler_indices(n, v, seed, e).unwrap() != seq);
                assert!(differs, "n={n} v={v}: epochs must reshuffle");
            }
        }
    }
    pass(7, "multiset, contiguous view runs, determinism, epoch reshuffle for n <= 1000, V in (1,2,4)");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_resume_determinism() {
    let _guard = train_guard();
    let dir = tempfile::tempdir().unwrap();

    let config = |run_dir: &std::path::Path, epochs: u64| -> String {
        format!(
            r#"
seed = 80
run_dir = "{}"

[data]
batch_size = 8
val_samples = 8
[data.dataset]
name = "gaussian_blobs"
n_samples = 48
n_classes = 4
dim = 6

[module]
forward = "supervised"
[module.backbone]
name = "mlp"
in_dim = 6
hidden = 16
out_dim = 12
batch_norm = true
[module.head]
name = "linear"
in_dim = 12
out_dim = 4
[module.optim]
interval = "step"
[module.optim.optimizer]
type = "SGD"
lr = 0.05
momentum = 0.9
[module.optim.scheduler]
type = "LinearWarmupCosineAnnealing"
warmup_steps = 4

[trainer]
max_epochs = {epochs}

[[callbacks]]
type = "online_probe"
name = "probe"
n_classes = 4
"#,
            run_dir.display()
        )
    };

    // unbroken 2-epoch run; the epoch cadence keeps epoch_0.ckpt around
    let run_dir = dir.path().join("run");
    let cfg = parse_config(&config(&run_dir, 2), &[]).unwrap();
    let solid = launch::prepare(&cfg, ResumeMode::Never).unwrap().run().unwrap();

    // simulate preemption right after epoch 0's checkpoint: rewind
    // last.ckpt to that state and relaunch the identical config
    std::fs::copy(run_dir.join("epoch_0.ckpt"), run_dir.join("last.ckpt")).unwrap();
    let relaunch = parse_config(&config(&run_dir, 2), &[]).unwrap();
    let resumed = launch::prepare(&relaunch, ResumeMode::Must)
        .unwrap()
        .run()
        .unwrap();

    // global_step arithmetic: 48 samples x 8 batch = 6 steps/epoch
    assert_eq!(solid.global_step, 12, "unbroken step count");
    assert_eq!(resumed.global_step, 12, "resumed step count");
    assert_eq!(solid.epoch, resumed.epoch);

    // weights bit-exact (f64 equality is 0-ULP)
    assert_eq!(solid.weights.len(), resumed.weights.len());
    for ((n1, w1), (n2, w2)) in solid.weights.iter().zip(resumed.weights.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(w1.shape(), w2.shape());
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "weight {n1} differs");
        }
    }
    // optimizer state too: momentum buffers must carry across the boundary
    for ((n1, w1), (n2, w2)) in solid.optimizer.iter().zip(resumed.optimizer.iter()) {
        assert_eq!(n1, n2);
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "optimizer state {n1} differs");
        }
    }
    pass(8, "1+resume+1 equals unbroken 2-epoch run bit-exactly; step arithmetic exact");
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_scheduler_and_lars_hand_cases() {
    // warmup boundary values exact
    let (w, t, base) = (4u64, 12u64, 0.8f64);
    assert_eq!(warmup_cosine_lr(0, w, t, base, 0.0), 0.0, "t=0");
    assert_eq!(warmup_cosine_lr(w, w, t, base, 0.0), base, "t=W");
    assert_eq!(warmup_cosine_lr(8, w, t, base, 0.0), base / 2.0, "midpoint");

    // LARS trust ratio 0.5: |w|=5, |g|=10, wd=0 -> r = 5/10
    let w_arr = ndarray::arr1(&[3.0, 4.0]).into_dyn();
    let g_arr = ndarray::arr1(&[6.0, 8.0]).into_dyn();
    let lr = 0.1;
    let got = lars_update(&w_arr, &g_arr, lr, 0.0, 0.0).unwrap();
    let scale = lr * 0.5;
    for i in 0..2 {
        let want = w_arr.as_slice().unwrap()[i] - g_arr.as_slice().unwrap()[i] * scale;
        assert_eq!(got.as_slice().unwrap()[i].to_bits(), want.to_bits(), "r=0.5 case");
    }

    // zero weight: trust ratio defined as 1, so the step is plain SGD
    let w_arr = ArrayD::zeros(IxDyn(&[3]));
    let g_arr = ndarray::arr1(&[1.0, -2.0, 0.5]).into_dyn();
    let got = lars_update(&w_arr, &g_arr, lr, 0.0, 1e-9).unwrap();
    for i in 0..3 {
        let want = -g_arr.as_slice().unwrap()[i] * lr;
        assert_eq!(got.as_slice().unwrap()[i].to_bits(), want.to_bits(), "zero-weight case");
    }

    // zero gradient, zero decay: exact fixed point
    let w_arr = ndarray::arr1(&[0.7, -0.1]).into_dyn();
    let g_arr = ArrayD::zeros(IxDyn(&[2]));
    let got = lars_update(&w_arr, &g_arr, lr, 0.0, 1e-9).unwrap();
    assert_eq!(
        got.as_slice().unwrap(),
        w_arr.as_slice().unwrap(),
        "zero-grad fixed point"
    );

    pass(10, "warmup boundaries and LARS hand cases exact");
}
