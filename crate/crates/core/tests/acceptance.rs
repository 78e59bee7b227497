//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! its own PASS/FAIL line. Pass check names as arguments to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use actor_core::ablation::{run_suite, AblationConfig, Bench, Suite, SuiteResult};
use actor_core::applications::{denoise_many, jitter_score};
use actor_core::body::{forward_kinematics, FramePose, Motion, Skeleton, Vec3};
use actor_core::data::{generate_dataset, Dataset, DatasetSpec, Duration};
use actor_core::eval::{
    self, accuracy, fid, generated_accuracy, train_recognizer, EvalConfig, EvalReport, FeatureSet, Recognizer,
    RecognizerConfig, Reference, Source,
};
use actor_core::losses::{batch_loss, kl_loss, LossWeights, TimeReduction};
use actor_core::model::batch::MotionBatch;
use actor_core::model::nn::Mode;
use actor_core::model::{build_variant, ActorModel, ModelConfig, Precision};
use actor_core::rotations::{
    axis_angle_to_matrix, axis_angle_to_quaternion, geodesic_distance, matrix_to_axis_angle, matrix_to_quaternion,
    matrix_to_sixd, quaternion_to_axis_angle, quaternion_to_matrix, random_rotation, sixd_to_matrix, AxisAngle,
    RotMatrix, RotationRep,
};
use actor_core::par::{map_indexed, Strategy};
use actor_core::training::{checkpoint_bytes, checkpoint_from_bytes, finetune_variable, train, Checkpoint, EpochLog, Hooks, RunConfig, TrainConfig};

type Outcome = (bool, String);

const FINETUNE_EPOCHS: usize = 20;
const FINETUNE_LR: f64 = 1e-4;
const LONG_PER_ACTION: usize = 100;

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("rotation_suite", rotation_suite),
        ("fk_oracle", fk_oracle),
        ("kl_monte_carlo", kl_monte_carlo),
        ("gradient_check", gradient_check),
        ("fid_oracles", fid_oracles),
        ("toy_training", toy_training),
        ("variable_duration", variable_duration),
        ("denoising", denoising),
        ("ablation_harness", ablation_harness),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {name} ({:.1}s): {detail}", t.elapsed().as_secs_f64());
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// rotations

fn rotation_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rots: Vec<RotMatrix> = (0..10_000).map(|_| random_rotation(&mut rng)).collect();
    let mut max_geo: f64 = 0.0;
    let mut max_ortho: f64 = 0.0;
    let mut det_err: f64 = 0.0;
    let mut check = |m: &RotMatrix, back: &RotMatrix| {
        max_geo = max_geo.max(geodesic_distance(m, back));
        max_ortho = max_ortho.max((back.0.transpose() * back.0 - nalgebra::Matrix3::identity()).abs().max());
        det_err = det_err.max((back.0.determinant() - 1.0).abs());
    };
    for m in &rots {
        let sixd = matrix_to_sixd(m).unwrap();
        check(m, &sixd_to_matrix(&sixd).unwrap());
        let q = matrix_to_quaternion(m);
        check(m, &quaternion_to_matrix(&q));
        let aa = matrix_to_axis_angle(m);
        check(m, &axis_angle_to_matrix(&aa));
        check(m, &axis_angle_to_matrix(&quaternion_to_axis_angle(&q)));
        check(m, &quaternion_to_matrix(&axis_angle_to_quaternion(&aa)));
        for rep in RotationRep::ALL {
            let back = sixd_to_matrix(&rep.decode_to_sixd(&rep.encode(m))).unwrap();
            check(m, &back);
        }
    }
    // Crossing angle pi about a fixed axis: 6D moves by O(step), axis-angle flips.
    let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
    let (before, after) = (std::f64::consts::PI - 1e-4, std::f64::consts::PI + 1e-4);
    let ma = axis_angle_to_matrix(&AxisAngle(axis * before));
    let mb = axis_angle_to_matrix(&AxisAngle(axis * after));
    let sa = RotationRep::SixD.encode(&ma);
    let sb = RotationRep::SixD.encode(&mb);
    let six_jump: f64 = sa.iter().zip(&sb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let aa_a = RotationRep::AxisAngle.encode(&ma);
    let aa_b = RotationRep::AxisAngle.encode(&mb);
    let aa_jump: f64 = aa_a.iter().zip(&aa_b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let continuity = six_jump < 1e-3 && aa_jump > 6.0;
    let secs = t.elapsed().as_secs_f64();
    let ok = max_geo < 1e-5 && max_ortho < 1e-6 && det_err < 1e-6 && continuity && secs < 30.0;
    (
        ok,
        format!(
            "max geodesic {max_geo:.2e} rad, orthonormality {max_ortho:.2e}, det {det_err:.2e}, \
             6D step {six_jump:.2e} vs axis-angle step {aa_jump:.3} at angle pi, {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// forward kinematics

fn pose_from(rots: &[RotMatrix], disp: [f64; 3]) -> FramePose {
    FramePose { rotations: rots.iter().map(|r| matrix_to_sixd(r).unwrap()).collect(), displacement: disp }
}

fn fk_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    // Two bones of length 1 along x, hand-computed positions.
    let s = Skeleton::chain(3, Vec3::new(1.0, 0.0, 0.0)).unwrap();
    let half = std::f64::consts::FRAC_PI_2;
    let cases: Vec<([RotMatrix; 3], [f64; 3], [[f64; 3]; 3])> = vec![
        ([RotMatrix::identity(); 3], [0.0; 3], [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
        (
            [RotMatrix::about_z(half), RotMatrix::identity(), RotMatrix::identity()],
            [0.0; 3],
            [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]],
        ),
        (
            [RotMatrix::identity(), RotMatrix::about_z(half), RotMatrix::identity()],
            [0.0; 3],
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
        ),
        (
            [RotMatrix::about_z(half), RotMatrix::about_z(half), RotMatrix::identity()],
            [0.5, 0.0, -2.0],
            [[0.5, 0.0, -2.0], [0.5, 1.0, -2.0], [-0.5, 1.0, -2.0]],
        ),
        (
            [RotMatrix::about_y(half), RotMatrix::about_z(half), RotMatrix::identity()],
            [0.0; 3],
            [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, -1.0]],
        ),
    ];
    for (rots, disp, want) in &cases {
        let got = forward_kinematics(&s, &pose_from(rots, *disp), true).unwrap();
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - Vec3::from(*w)).abs().max());
        }
    }
    let hand = worst;

    let body = Skeleton::smpl_like();
    let j = body.names().len();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut equiv: f64 = 0.0;
    let mut bones: f64 = 0.0;
    for _ in 0..1000 {
        let rots: Vec<RotMatrix> = (0..j).map(|_| random_rotation(&mut rng)).collect();
        let disp = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let p = forward_kinematics(&body, &pose_from(&rots, disp), true).unwrap();
        for k in 1..j {
            let parent = body.parent(k).unwrap();
            let len = (p[k] - p[parent]).norm();
            bones = bones.max((len - body.rest_offsets()[k].norm()).abs());
        }
        // Global rotation g of the root and the displacement rotates every joint.
        let g = random_rotation(&mut rng);
        let mut moved = rots.clone();
        moved[0] = g.compose(&rots[0]);
        let gd = g.apply(&Vec3::from(disp));
        let q = forward_kinematics(&body, &pose_from(&moved, [gd.x, gd.y, gd.z]), true).unwrap();
        for (a, b) in p.iter().zip(&q) {
            equiv = equiv.max((g.apply(a) - b).abs().max());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = hand < 1e-6 && equiv < 1e-6 && bones < 1e-6 && secs < 30.0;
    (ok, format!("hand cases {hand:.2e}, equivariance {equiv:.2e}, bone length {bones:.2e}, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// KL

fn kl_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
        .map(|_| {
            let mu = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lv = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            (mu, lv)
        })
        .collect();
    let errs: Vec<f64> = map_indexed(pairs.len(), Strategy::available(), |i| {
            let (mu, lv) = &pairs[i];
            let mut r = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                // log q(z) - log p(z) at z ~ q
                for k in 0..4 {
                    let e: f64 = StandardNormal.sample(&mut r);
                    let z = mu[k] + (0.5 * lv[k]).exp() * e;
                    acc += -0.5 * e * e - 0.5 * lv[k] + 0.5 * z * z;
                }
            }
            let exact = kl_loss(mu, lv);
            ((acc / n as f64) - exact).abs() / exact
        });
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    (worst < 0.01, format!("max relative error {worst:.2e} over 20 pairs"))
}

// ---------------------------------------------------------------------------
// gradient check

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let body = Skeleton::chain(3, Vec3::new(0.0, 0.3, 0.0)).unwrap();
    let cfg = ModelConfig {
        latent_dim: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        dropout: 0.0,
        num_actions: 3,
        num_joints: 3,
        fixed_length: 4,
        precision: Precision::F64,
        init_seed: 5,
        ..ModelConfig::default()
    };
    let model = build_variant(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let motions: Vec<Motion> = (0..3)
        .map(|a| Motion {
            frames: (0..4)
                .map(|_| {
                    let rots: Vec<RotMatrix> = (0..3).map(|_| random_rotation(&mut rng)).collect();
                    pose_from(&rots, [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                })
                .collect(),
            action: a,
            fps: 20.0,
        })
        .collect();
    let refs: Vec<&Motion> = motions.iter().collect();
    let batch = MotionBatch::new(&refs, &model.layout(), DType::F64, &Device::Cpu).unwrap();
    let eps = model.standard_normal(3, &mut rng).unwrap();
    let weights = LossWeights {
        lambda_kl: 1.0,
        rotation: true,
        displacement: true,
        vertices: true,
        joints: true,
        time_reduction: TimeReduction::Sum,
    };
    let loss = |m: &ActorModel| -> Tensor {
        let out = m.forward_with_eps(&batch, &eps, &mut Mode::Eval).unwrap();
        batch_loss(&out, &batch, &m.layout(), &body, &weights).unwrap().total
    };
    let grads = loss(&model).backward().unwrap();
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut tensors = 0;
    let mut entries = 0;
    for (name, var) in model.params().named() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.as_tensor().shape().clone();
        tensors += 1;
        for i in 0..base.len() {
            let probe = |delta: f64| -> f64 {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                loss(&model).to_scalar::<f64>().unwrap()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a:.6e} numeric {numeric:.6e}"));
            }
            entries += 1;
        }
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    }
    let families = ["encoder.mu_token", "encoder.sigma_token", "decoder.bias_token"];
    let covered = families.iter().all(|f| model.params().get(f).is_some());
    let secs = t.elapsed().as_secs_f64();
    let ok = worst.0 < 1e-4 && covered && secs < 300.0;
    (
        ok,
        format!(
            "{entries} entries in {tensors} tensors (token families present: {covered}), max relative error {:.2e} ({}), {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// FID

fn feature_set(rows: Vec<Vec<f64>>) -> FeatureSet {
    let n = rows.len();
    FeatureSet::new(rows, vec![0; n], Source::Generated)
}

fn gaussian(n: usize, mean: &[f64], mix: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = mean.len();
    (0..n)
        .map(|_| {
            let x = mix * DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            (0..d).map(|i| x[i] + mean[i]).collect()
        })
        .collect()
}

// Plain-loop moments; the trace term from the eigenvalues of the (non-symmetric)
// covariance product, whose square roots sum to tr sqrt(C_a C_b).
fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let stats = |x: &[Vec<f64>]| {
        let (n, d) = (x.len(), x[0].len());
        let mu: Vec<f64> = (0..d).map(|i| x.iter().map(|r| r[i]).sum::<f64>() / n as f64).collect();
        let c = DMatrix::from_fn(d, d, |i, j| {
            x.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1) as f64
        });
        (mu, c)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let eig = (&ca * &cb).complex_eigenvalues();
    let tr_sqrt: f64 = eig.iter().map(|z| z.sqrt().re).sum();
    let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    diff + ca.trace() + cb.trace() - 2.0 * tr_sqrt
}

fn fid_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mix = |d: usize, rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(d, d, |i, j| {
            let v: f64 = StandardNormal.sample(rng);
            0.4 * v + if i == j { 1.0 } else { 0.0 }
        })
    };
    let x = feature_set(gaussian(300, &[0.2; 8], &mix(8, &mut rng), &mut rng));
    let self_fid = fid(&x, &x).unwrap();

    let base: Vec<Vec<f64>> = (0..500).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
    let m = 1.7;
    let shifted: Vec<Vec<f64>> = base.iter().map(|r| vec![r[0] + m]).collect();
    let shift_err = (fid(&feature_set(base), &feature_set(shifted)).unwrap() - m * m).abs();

    let mut oracle_err: f64 = 0.0;
    for _ in 0..10 {
        let ma: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mb: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = gaussian(200, &ma, &mix(8, &mut rng), &mut rng);
        let b = gaussian(150, &mb, &mix(8, &mut rng), &mut rng);
        let got = fid(&feature_set(a.clone()), &feature_set(b.clone())).unwrap();
        oracle_err = oracle_err.max((got - fid_oracle(&a, &b)).abs());
    }

    let rows = gaussian(2000, &[0.0; 16], &DMatrix::identity(16, 16), &mut rng);
    let halves = fid(&feature_set(rows[..1000].to_vec()), &feature_set(rows[1000..].to_vec())).unwrap();
    let ok = self_fid < 1e-8 && shift_err < 1e-6 && oracle_err < 1e-6 && halves < 0.5;
    (
        ok,
        format!("fid(X,X) {self_fid:.2e}, 1-D shift error {shift_err:.2e}, 8-D oracle error {oracle_err:.2e}, halves {halves:.3}"),
    )
}

// ---------------------------------------------------------------------------
// shared toy setup

struct Toy {
    data: Dataset,
    train: Vec<Motion>,
    test: Vec<Motion>,
    body: Skeleton,
    recognizer: Recognizer,
    reference: Reference,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let data = generate_dataset(&DatasetSpec { seed: 0, ..DatasetSpec::default() }).unwrap();
        let (train_set, test_set) = (data.train(), data.test());
        let body = Skeleton::smpl_like();
        let recognizer = train_recognizer(&train_set, 24, data.num_actions(), &RecognizerConfig::default()).unwrap();
        let reference = Reference::new(&recognizer, &train_set, &test_set).unwrap();
        Toy { data, train: train_set, test: test_set, body, recognizer, reference }
    })
}

fn toy_recipe() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    RunConfig::from_toml_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_model_config() -> ModelConfig {
    ModelConfig { num_actions: 5, num_joints: 24, ..toy_recipe().model }
}

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..toy_recipe().train }
}

struct Trained {
    ckpt: Checkpoint,
    untrained: EvalReport,
    secs: f64,
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let toy = toy();
        let mut ckpt = Checkpoint::from_config(&toy_model_config(), toy.data.action_names.clone()).unwrap();
        let ec = toy_eval();
        let untrained = eval::evaluate_with_reference(&ckpt.model, &toy.recognizer, &toy.reference, &ec).unwrap();
        let t = Instant::now();
        let mut hooks = Hooks {
            on_epoch: Some(Box::new(|e: &EpochLog| {
                if e.epoch % 10 == 0 {
                    eprintln!("  toy epoch {} total {:.4} kl {:.3}", e.epoch, e.loss.total, e.loss.kl);
                }
            })),
            checkpoint_path: None,
        };
        train(&mut ckpt, &toy.train, &toy.body, &toy_train_config(0), &mut hooks).unwrap();
        Trained { ckpt, untrained, secs: t.elapsed().as_secs_f64() }
    })
}

fn toy_eval() -> EvalConfig {
    EvalConfig { seeds: 5, per_action: 40, duration: 60, ..EvalConfig::default() }
}

fn toy_training() -> Outcome {
    let toy = toy();
    let tr = trained();
    let rep = eval::evaluate_with_reference(&tr.ckpt.model, &toy.recognizer, &toy.reference, &toy_eval()).unwrap();
    let real = eval::evaluate_real(&toy.reference, &toy_eval()).unwrap();
    let acc = rep.accuracy.mean;
    let ratio = rep.fid_test.mean / tr.untrained.fid_test.mean;
    let div = rep.diversity.mean / real.diversity.mean;
    let ok = acc >= 90.0 && ratio <= 0.1 && (0.8..=1.2).contains(&div) && tr.secs <= 3600.0;
    (
        ok,
        format!(
            "{} epochs in {:.0}s; accuracy {acc:.1}%, FID_test {:.3} vs untrained {:.3} (ratio {ratio:.3}), \
             diversity {:.3} vs real {:.3} (ratio {div:.3})",
            toy_recipe().train.epochs, tr.secs, rep.fid_test.mean, tr.untrained.fid_test.mean, rep.diversity.mean, real.diversity.mean
        ),
    )
}

// ---------------------------------------------------------------------------
// variable duration

fn variable_duration() -> Outcome {
    let toy = toy();
    let fixed = &trained().ckpt;
    let durations: Vec<usize> = (40..=120).step_by(5).collect();
    let mut lengths_ok = true;
    let mut accs = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for &t in &durations {
        let gen = fixed.model.generate_many(&[0, 1, 2, 3, 4], t, &mut rng).unwrap();
        lengths_ok &= gen.iter().all(|m| m.len() == t);
        if (50..=70).contains(&t) || t == 100 {
            let n = if t == 100 { LONG_PER_ACTION } else { 40 };
            accs.insert(t, generated_accuracy(&fixed.model, &toy.recognizer, n, t, 0).unwrap());
        }
    }
    let mid_min = accs.range(50..=70).map(|(_, a)| *a).fold(f64::INFINITY, f64::min);
    let fixed100 = accs[&100];
    let mut wins = 0;
    let mut tried = Vec::new();
    for seed in 0..3u64 {
        let mut ckpt = checkpoint_from_bytes(&checkpoint_bytes(fixed).unwrap(), Path::new("copy")).unwrap();
        let mut cfg = toy_train_config(seed);
        cfg.learning_rate = FINETUNE_LR;
        finetune_variable(&mut ckpt, &toy.train, &toy.body, [60, 100], FINETUNE_EPOCHS, &cfg, &mut Hooks::default()).unwrap();
        let a = generated_accuracy(&ckpt.model, &toy.recognizer, LONG_PER_ACTION, 100, 0).unwrap();
        tried.push(a);
        if a > fixed100 {
            wins += 1;
        }
        if wins >= 2 || tried.len() - wins >= 2 {
            break;
        }
    }
    let ok = lengths_ok && mid_min >= 70.0 && wins >= 2;
    (
        ok,
        format!(
            "lengths {}; min accuracy over T in [50,70] {mid_min:.1}%; T=100 fixed {fixed100:.1}% vs finetuned {:?} \
             ({FINETUNE_EPOCHS} epochs at lr {FINETUNE_LR:e} each, {wins} wins)",
            if lengths_ok { "exact" } else { "WRONG" },
            tried.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// denoising

fn denoising() -> Outcome {
    let toy = toy();
    let model = &trained().ckpt.model;
    let crop = |ms: &[Motion]| -> Vec<Motion> { ms.iter().map(|m| m.crop(0, 60.min(m.len()))).collect() };
    let (train_noisy, test_noisy) = (crop(&toy.train), crop(&toy.test));
    let test_clean = denoise_many(model, &test_noisy).unwrap();
    let drops = test_noisy
        .iter()
        .zip(&test_clean)
        .filter(|(n, c)| jitter_score(c, &toy.body).unwrap() < jitter_score(n, &toy.body).unwrap())
        .count();
    let jitter_frac = drops as f64 / test_noisy.len() as f64;
    let before = toy.recognizer.predict(&test_noisy).unwrap();
    let after = toy.recognizer.predict(&test_clean).unwrap();
    let kept = before.iter().zip(&after).filter(|(a, b)| a == b).count() as f64 / before.len() as f64;

    let train_clean = denoise_many(model, &train_noisy).unwrap();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..3u64 {
        let rc = RecognizerConfig { seed, ..RecognizerConfig::default() };
        let noisy = accuracy(&train_recognizer(&train_noisy, 24, 5, &rc).unwrap(), &test_noisy).unwrap();
        let clean = accuracy(&train_recognizer(&train_clean, 24, 5, &rc).unwrap(), &test_clean).unwrap();
        pairs.push(format!("{clean:.1} vs {noisy:.1}"));
        if clean >= noisy {
            wins += 1;
        }
        if wins >= 2 || pairs.len() - wins >= 2 {
            break;
        }
    }
    let ok = jitter_frac >= 0.9 && kept >= 0.9 && wins >= 2;
    (
        ok,
        format!(
            "jitter dropped on {:.1}% of {} test motions, labels kept {:.1}%, denoised vs noisy recognizer accuracy [{}]",
            100.0 * jitter_frac,
            test_noisy.len(),
            100.0 * kept,
            pairs.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// ablation harness

fn ablation_harness() -> Outcome {
    let data = generate_dataset(&DatasetSpec {
        sequences_per_action: 40,
        duration: Duration::Range([60, 100]),
        seed: 3,
        ..DatasetSpec::default()
    })
    .unwrap();
    let (train_set, test_set) = (data.train(), data.test());
    let body = Skeleton::smpl_like();
    let recognizer = train_recognizer(&train_set, 24, 5, &RecognizerConfig::default()).unwrap();
    let reference = Reference::new(&recognizer, &train_set, &test_set).unwrap();
    let bench = Bench {
        train: &train_set,
        test: &test_set,
        action_names: &data.action_names,
        body: &body,
        recognizer: &recognizer,
        reference: &reference,
    };
    let mut cfg = AblationConfig::default();
    cfg.train.epochs = 6;
    cfg.train.learning_rate = 1e-3;
    cfg.eval = EvalConfig { seeds: 2, per_action: 10, diversity_pairs: 40, multimodality_pairs: 5, ..EvalConfig::default() };
    let expected: Vec<(Suite, Vec<&str>)> = vec![
        (Suite::Loss, vec!["L_J", "L_R", "L_V", "L_R + L_V"]),
        (Suite::Arch, vec!["Fully connected", "GRU", "Transformer", "a) w/ autoreg. decoder", "b) w/out μ_a^token, Σ_a^token", "c) w/out b_a^token"]),
        (Suite::Kl, vec!["λ_KL=1e-3", "λ_KL=1e-4", "λ_KL=1e-5", "λ_KL=1e-6", "λ_KL=1e-7"]),
        (Suite::Batch, vec!["Batch size = 10", "Batch size = 20", "Batch size = 30", "Batch size = 40"]),
        (Suite::Layers, vec!["2-layers", "4-layers", "6-layers", "8-layers"]),
        (Suite::Rotrep, vec!["Axis-angle", "Quaternion", "Rotation matrix", "6D continuous"]),
    ];
    let mut problems = Vec::new();
    let mut loss: Option<SuiteResult> = None;
    let mut rows = 0;
    for (suite, labels) in expected {
        let t = Instant::now();
        let result = match run_suite(suite, &bench, &cfg, None) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{} failed: {e}", suite.name()));
                continue;
            }
        };
        eprintln!("  suite {} in {:.0}s\n{}", suite.name(), t.elapsed().as_secs_f64(), result.format());
        let table = result.format();
        for l in labels {
            match result.row(l) {
                Some(r) if r.report.is_some() => rows += 1,
                Some(r) => problems.push(format!("{l}: {}", r.error.clone().unwrap_or_default())),
                None => problems.push(format!("missing row {l}")),
            }
            if !table.contains(l) {
                problems.push(format!("table lacks {l}"));
            }
        }
        if suite == Suite::Loss {
            loss = Some(result);
        }
    }
    let fid = |label: &str| loss.as_ref().and_then(|r| r.row(label)).and_then(|r| r.report.as_ref()).map(|r| r.fid_test.mean);
    let (rv, j) = (fid("L_R + L_V"), fid("L_J"));
    let ordered = matches!((rv, j), (Some(a), Some(b)) if a < b);
    let ok = problems.is_empty() && ordered;
    (
        ok,
        format!(
            "{rows} rows completed; FID_test L_R + L_V {} vs L_J {}{}",
            rv.map_or("n/a".into(), |v| format!("{v:.3}")),
            j.map_or("n/a".into(), |v| format!("{v:.3}")),
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// determinism

const SPEC: &str = "sequences_per_action = 10\nduration = [12, 16]\nseed = 1\n";
const RUN: &str = "[model]\nlatent_dim = 16\nlayers = 1\nheads = 2\nff_dim = 32\nfixed_length = 10\n\
[train]\nepochs = 2\nbatch_size = 5\nfixed_duration = 10\nlearning_rate = 1e-3\n";
const ABLATE: &str = "durations = [10, 14]\nfinetune_range = [10, 14]\nfinetune_epochs = 1\n\
[model]\nlatent_dim = 16\nlayers = 1\nheads = 2\nff_dim = 32\nfixed_length = 10\n\
[train]\nepochs = 1\nbatch_size = 10\nfixed_duration = 10\n\
[eval]\nseeds = 2\nper_action = 3\nduration = 10\ndiversity_pairs = 5\nmultimodality_pairs = 2\n\
[recognizer]\nepochs = 1\nmin_crop = 8\n";

fn run_cli(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(p("spec.toml"), SPEC).unwrap();
    std::fs::write(p("run.toml"), RUN).unwrap();
    std::fs::write(p("ablate.toml"), ABLATE).unwrap();
    let commands: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--spec".into(), p("spec.toml"), "--out".into(), p("data")],
        vec!["train".into(), "--config".into(), p("run.toml"), "--data".into(), p("data"), "--out".into(), p("m.ckpt"), "--seed".into(), "3".into()],
        vec![
            "finetune-var".into(), "--ckpt".into(), p("m.ckpt"), "--data".into(), p("data"), "--range".into(), "10".into(),
            "14".into(), "--epochs".into(), "1".into(), "--config".into(), p("run.toml"), "--out".into(), p("v.ckpt"),
        ],
        vec!["generate".into(), "--ckpt".into(), p("m.ckpt"), "--action".into(), "1".into(), "--duration".into(), "12".into(), "--seed".into(), "5".into(), "--out".into(), p("g.json")],
        vec![
            "evaluate".into(), "--ckpt".into(), p("m.ckpt"), "--data".into(), p("data"), "--seeds".into(), "2".into(),
            "--per-action".into(), "3".into(), "--recognizer-epochs".into(), "1".into(), "--out".into(), p("rep.md"),
        ],
        vec!["denoise".into(), "--ckpt".into(), p("m.ckpt"), "--in".into(), p("g.json"), "--action".into(), "1".into(), "--out".into(), p("d.json")],
        vec!["plot".into(), "--in".into(), p("g.json"), "--out".into(), p("g.png"), "--panels".into(), "4".into()],
        vec!["ablate".into(), "--suite".into(), "kl".into(), "--data".into(), p("data"), "--config".into(), p("ablate.toml"), "--out".into(), p("kl.md")],
    ];
    for c in commands {
        let args = std::iter::once("actor".to_string()).chain(c.iter().cloned());
        if let Err(e) = actor_core::cli::run_args(args) {
            panic!("{} failed: {e:?}", c[0]);
        }
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = run_cli(a.path());
    let fb = run_cli(b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let same_names = names == fb.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>();
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let required = ["m.ckpt", "v.ckpt", "g.json", "d.json", "g.png", "rep.md", "rep.json", "kl.md", "kl.json"];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !names.contains(r)).collect();
    let ok = same_names && differing.is_empty() && missing.is_empty();
    (
        ok,
        format!(
            "{} output files compared across two runs of 8 subcommands; differing {:?}, missing {:?}",
            fa.len(),
            differing,
            missing
        ),
    )
}
