//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `LID_ACCEPTANCE_SEEDS` (default 3) sets how many seeds the synthetic
//! reproduction trains; `LID_ACCEPTANCE_WORKDIR` keeps the trained systems
//! in a fixed directory instead of a temporary one.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dialect_lid::autodiff::{finite_diff_check, finite_diff_check_sampled, Tape, Tensor};
use dialect_lid::corpus::{synth_corpus, Corpus, SynthSpec};
use dialect_lid::ctc::{collapse, ctc_brute_force, ctc_forced_align, ctc_loss_grad, LogProbLattice};
use dialect_lid::eval::{evaluate, write_report, Metrics};
use dialect_lid::frontend::{Frontend, FrontendConfig, Waveform};
use dialect_lid::models::{ctc_loss, cross_entropy, one_hot, AcousticModel, LidHead, ModelConfig};
use dialect_lid::nn::{count_params, resnet14_forward, resnet14_specs, rnn_forward, ForwardCtx, ResNetConfig};
use dialect_lid::pipeline::{
    run_baseline, run_three_stage, run_two_stage, Dataset, StageId, System, SystemConfig, ThreeStageRun, TwoStageRun,
    AM_CKPT,
};
use dialect_lid::Real;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> LogProbLattice {
    let logits: Vec<Real> = (0..frames * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
    LogProbLattice::from_logits(frames, classes, &logits).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(1..=vocab)).collect()
}

fn ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut infeasible = 0;
    for _ in 0..200 {
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(1..=4);
        let len = rng.gen_range(1..=3);
        let labels = random_labels(&mut rng, len, vocab);
        let lattice = random_lattice(&mut rng, frames, vocab + 1);
        let brute = ctc_brute_force(&lattice, &labels).map_err(|e| e.to_string())?;
        match ctc_loss_grad(&lattice, &labels) {
            Ok((loss, _)) => worst = worst.max((loss - brute).abs() as f64),
            // Too few frames: the brute force must agree there is no path.
            Err(_) if brute.is_infinite() => infeasible += 1,
            Err(e) => return Err(format!("forward-backward failed where brute force gave {brute}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("200 cases ({infeasible} infeasible), max |Δloss| = {worst:.2e}, {elapsed:.2?}"),
    )
}

fn ctc_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let frames = rng.gen_range(4..=8);
        let vocab = rng.gen_range(2..=4);
        let len = rng.gen_range(1..=3);
        let labels = random_labels(&mut rng, len, vocab);
        let logits = random_tensor(&[frames, vocab + 1], &mut rng);
        let err = finite_diff_check(
            |tape, x| {
                let logp = tape.log_softmax(x, 1)?;
                ctc_loss(tape, &logp, &labels)
            },
            &logits,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err as f64);
    }
    check(worst < 1e-6, format!("20 lattices, max relative error {worst:.2e}"))
}

fn model_gradients() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::micro(4, 3);
    let am = AcousticModel::new(config.clone(), 3).map_err(|e| e.to_string())?;
    let head = LidHead::new(config.clone(), 4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[16, 40], &mut rng);
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    for (name, p) in am.params.trainable() {
        let coords: Vec<usize> = (0..2).map(|_| rng.gen_range(0..p.numel())).collect();
        let err = finite_diff_check_sampled(
            |tape, probe| {
                let params = am.params.with_replaced(name, probe.clone())?;
                let out = AcousticModel::forward_with(tape, &params, &config, &x, &mut ForwardCtx::train(0))?;
                ctc_loss(tape, &out.log_probs, &[1, 3])
            },
            p,
            1e-6,
            &coords,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(err as f64);
        checked += 1;
    }

    let (_, feats) = am
        .infer(&dialect_lid::frontend::FeatureMatrix::new(16, 40, x.to_vec()).unwrap())
        .map_err(|e| e.to_string())?;
    let target = one_hot(&[2], 3);
    for (name, p) in head.params.trainable() {
        let coords: Vec<usize> = (0..3).map(|_| rng.gen_range(0..p.numel())).collect();
        let err = finite_diff_check_sampled(
            |tape, probe| {
                let params = head.params.with_replaced(name, probe.clone())?;
                let logp = LidHead::forward_with(tape, &params, &config, &feats, 0.0, &mut ForwardCtx::train(0))?;
                cross_entropy(tape, &logp, &target)
            },
            p,
            1e-6,
            &coords,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(err as f64);
        checked += 1;
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("{checked} parameter tensors, max relative error {worst:.2e}, {elapsed:.2?}"),
    )
}

fn table_conformance() -> Outcome {
    let config = ModelConfig::full(66, 10);
    let am = AcousticModel::new(config.clone(), 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in [100usize, 160, 400] {
        let x = random_tensor(&[t, 40], &mut rng);
        let q = t / 4;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let (trunk, trace) = resnet14_forward(&mut tape, &am.params, "trunk", &x, &config.trunk, &mut ctx)
            .map_err(|e| e.to_string())?;
        let expected: Vec<(String, [usize; 3])> = [
            ("conv1", [t / 2, 64, 20]),
            ("maxpool", [q, 64, 10]),
            ("res_conv1", [q, 64, 5]),
            ("res_conv2", [q, 128, 3]),
            ("res_conv3", [q, 256, 2]),
            ("res_conv4", [q, 512, 1]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();
        if trace != expected {
            return Err(format!("T = {t}: trunk trace {trace:?}"));
        }
        if trunk.shape() != [q, 512] {
            return Err(format!("T = {t}: trunk output {:?}", trunk.shape()));
        }
        let rnn = rnn_forward(&mut tape, &am.params, "am.rnn", &trunk, &config.am_rnn, 0.0, &mut ctx)
            .map_err(|e| e.to_string())?;
        if rnn.shape() != [q, 512] {
            return Err(format!("T = {t}: BLSTM output {:?}", rnn.shape()));
        }
        let out = am.forward(&mut Tape::new(), &x, &mut ForwardCtx::eval()).map_err(|e| e.to_string())?;
        if out.intermediate.shape() != [q, 512] || out.log_probs.shape() != [q, 67] {
            return Err(format!("T = {t}: AM outputs {:?} / {:?}", out.intermediate.shape(), out.log_probs.shape()));
        }
    }
    let plain = ResNetConfig {
        no_bn: true,
        ..ResNetConfig::full()
    };
    let n = count_params(&resnet14_specs("trunk", &plain));
    let rel = (n as f64 - 5.36e6).abs() / 5.36e6;
    check(rel < 0.03, format!("shapes match for T = 100, 160, 400; trunk has {n} parameters ({:.2}% off)", rel * 100.0))
}

fn frontend() -> Outcome {
    let config = FrontendConfig::default();
    let fe = Frontend::new(config.clone(), 16000).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for len in [400usize, 401, 559, 560, 16000, 23_456] {
        let samples: Vec<Real> = (0..len)
            .map(|n| 0.3 * (n as Real * 0.07).sin() + rng.gen_range(-0.05..0.05))
            .collect();
        let wave = Waveform::new(samples.clone(), 16000).map_err(|e| e.to_string())?;
        let base = fe.features(&wave).map_err(|e| e.to_string())?;
        let expected = (len - 400) / 160 + 1;
        if base.frames != expected || base.n_mels != 40 || config.frame_count(len, 16000) != Some(expected) {
            return Err(format!("{len} samples: {} × {} (expected {expected} × 40)", base.frames, base.n_mels));
        }
        for gain in [0.01, 0.5, 3.0] {
            let scaled = Waveform::new(samples.iter().map(|v| v * gain).collect(), 16000).map_err(|e| e.to_string())?;
            let f = fe.features(&scaled).map_err(|e| e.to_string())?;
            for (a, b) in base.data.iter().zip(&f.data) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    check(worst <= 1e-6, format!("T formula exact, 40 columns, max gain deviation {worst:.2e}"))
}

/// Trained systems shared by criteria 5–8 and 10.
struct Reproduction {
    two: TwoStageRun,
    three: ThreeStageRun,
    baseline_metrics: Metrics,
    two_metrics: Metrics,
    three_metrics: Metrics,
    train: Dataset,
    test: Dataset,
    names: Vec<String>,
    am_bytes: (Vec<u8>, Vec<u8>),
    seed_results: Vec<(u64, f64, f64)>,
    first_seed_time: Duration,
}

fn reproduce(work: &Path, seeds: u64) -> Result<Reproduction, String> {
    let err = |e: dialect_lid::Error| e.to_string();
    let corpus_dir = work.join("corpus");
    let spec = SynthSpec::default();
    synth_corpus(&spec, &corpus_dir).map_err(err)?;
    let corpus = Corpus::load(&corpus_dir).map_err(err)?;
    let base_cfg = SystemConfig::default();
    let (train, test) = Dataset::load_corpus(&corpus, &base_cfg.frontend, None).map_err(err)?;
    let names: Vec<String> = (0..corpus.n_dialects()).map(|d| format!("d{d}")).collect();

    let mut seed_results = Vec::new();
    let mut first = None;
    for seed in 1..=seeds {
        let cfg = base_cfg.clone().with_seed(seed);
        let dir = work.join(format!("seed{seed}"));
        let start = Instant::now();
        let two = run_two_stage(&train, &cfg, &dir.join("two-stage"), None).map_err(err)?;
        let baseline = run_baseline(&train, &cfg, &dir.join("baseline")).map_err(err)?;
        let (two_m, _) = evaluate(&System::two_stage(&two), "two-stage", &names, &test).map_err(err)?;
        let (base_m, _) = evaluate(&System::baseline(&baseline), "baseline", &names, &test).map_err(err)?;
        eprintln!(
            "seed {seed}: two-stage {:.2}%, baseline {:.2}% ({:.0?})",
            two_m.acc_all(),
            base_m.acc_all(),
            start.elapsed()
        );
        seed_results.push((seed, two_m.acc_all(), base_m.acc_all()));
        if seed == 1 {
            let am_path = dir.join("two-stage").join(AM_CKPT);
            let after = std::fs::read(&am_path).map_err(|e| e.to_string())?;
            let before = two.am.checkpoint.to_bytes().map_err(err)?;
            // The three-stage system shares stage 1 with the two-stage one.
            let three = run_three_stage(&train, &cfg, &dir.join("three-stage"), Some(&two.am)).map_err(err)?;
            let elapsed = start.elapsed();
            let (three_m, _) = evaluate(&System::three_stage(&three), "three-stage", &names, &test).map_err(err)?;
            eprintln!("seed 1: three-stage {:.2}%, all three systems in {elapsed:.0?}", three_m.acc_all());
            first = Some((two, three, base_m, two_m, three_m, (before, after), elapsed));
        }
    }
    let (two, three, baseline_metrics, two_metrics, three_metrics, am_bytes, first_seed_time) =
        first.ok_or("no seeds were run")?;
    Ok(Reproduction {
        two,
        three,
        baseline_metrics,
        two_metrics,
        three_metrics,
        train,
        test,
        names,
        am_bytes,
        seed_results,
        first_seed_time,
    })
}

fn freeze_contract(r: &Reproduction) -> Outcome {
    let (before, after) = &r.two.am_file_hash;
    check(
        before == after && r.am_bytes.0 == r.am_bytes.1,
        format!("am.ckpt sha256 {}… before and after stage 2", &before[..12]),
    )
}

fn forced_alignment(r: &Reproduction) -> Outcome {
    let am_ckpt = &r.three.am.checkpoint;
    let am = AcousticModel {
        config: am_ckpt.meta.model.clone(),
        params: am_ckpt.params.clone(),
    };
    let mut aligned = 0;
    for u in &r.train.utterances {
        let Some(stored) = r.three.alignments.get(&u.utt_id) else {
            continue;
        };
        let (lattice, _) = am.infer(&u.features).map_err(|e| e.to_string())?;
        let a = ctc_forced_align(&lattice, &u.labels).map_err(|e| format!("{}: {e}", u.utt_id))?;
        if collapse(stored) != u.labels || collapse(&a.classes) != u.labels {
            return Err(format!("{}: alignment does not collapse to its labels", u.utt_id));
        }
        let monotone = a.states.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 2);
        let ends = a.states.first() <= Some(&1) && a.states.last().is_some_and(|&s| s + 2 >= 2 * u.labels.len() + 1);
        if !monotone || !ends {
            return Err(format!("{}: trellis path {:?} is not monotone", u.utt_id, a.states));
        }
        aligned += 1;
    }
    check(
        aligned > 0 && aligned + r.three.cnn.skipped.len() >= r.three.alignments.len(),
        format!("{aligned} training utterances collapse to their labels along monotone paths"),
    )
}

fn synthetic_reproduction(r: &Reproduction) -> Outcome {
    let wins = r.seed_results.iter().filter(|(_, two, base)| two >= base).count();
    let majority = 2 * wins > r.seed_results.len();
    let two = r.two_metrics.acc_all();
    let budget = r.first_seed_time <= Duration::from_secs(20 * 60);
    let per_seed: Vec<String> = r
        .seed_results
        .iter()
        .map(|(s, two, base)| format!("seed {s}: {two:.2} vs {base:.2}"))
        .collect();
    check(
        two >= 90.0 && majority && budget,
        format!(
            "two-stage {two:.2}%, three-stage {:.2}%, baseline {:.2}%; two-stage ≥ baseline in {wins}/{} seeds ({}); seed 1 trained in {:.0?}",
            r.three_metrics.acc_all(),
            r.baseline_metrics.acc_all(),
            r.seed_results.len(),
            per_seed.join(", "),
            r.first_seed_time,
        ),
    )
}

fn convergence_log(work: &Path, r: &Reproduction) -> Outcome {
    let dir = work.join("seed1");
    let load = |name: &str| {
        dialect_lid::pipeline::ConvergenceLog::load(&dir.join(name).join(dialect_lid::pipeline::CONVERGENCE_FILE))
            .map_err(|e| e.to_string())
    };
    let counts = [load("baseline")?, load("two-stage")?, load("three-stage")?].map(|l| l.entries.len());
    let am = r.two.convergence.epochs(StageId::Am).ok_or("no AM entry")?;
    let lid = r.two.convergence.epochs(StageId::Lid).ok_or("no LID entry")?;
    check(
        counts == [1, 2, 3] && lid <= am,
        format!("stage counts {counts:?}; two-stage converged in {am} (AM) then {lid} (LID) epochs"),
    )
}

fn evaluation_identities(work: &Path, r: &Reproduction) -> Outcome {
    let mut expected = vec![0usize; r.names.len()];
    for u in &r.test.utterances {
        expected[u.dialect] += 1;
    }
    for m in [&r.baseline_metrics, &r.two_metrics, &r.three_metrics] {
        if m.row_sums() != expected {
            return Err(format!("{}: row sums {:?}, class counts {expected:?}", m.system, m.row_sums()));
        }
        if m.short_correct + m.long_correct != m.correct() || m.short_total + m.long_total != m.total() {
            return Err(format!("{}: sub-task counts do not add up", m.system));
        }
        let weighted = (m.acc_short().unwrap_or(0.0) * m.short_total as f64
            + m.acc_long().unwrap_or(0.0) * m.long_total as f64)
            / m.total() as f64;
        if (weighted - m.acc_all()).abs() > 1e-12 {
            return Err(format!("{}: weighted sub-task mean {weighted} vs {}", m.system, m.acc_all()));
        }
    }
    let system = System::two_stage(&r.two);
    let mut reports = Vec::new();
    for k in 0..2 {
        let dir = work.join(format!("report{k}"));
        let (m, p) = evaluate(&system, "two-stage", &r.names, &r.test).map_err(|e| e.to_string())?;
        write_report(&m, &p, &dir).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        reports.push(files);
    }
    check(
        reports[0] == reports[1] && !reports[0].is_empty(),
        format!("row sums match class counts; acc_all is the weighted sub-task mean; {} report files byte-identical", reports[0].len()),
    )
}

fn main() -> ExitCode {
    if cfg!(feature = "f32") {
        println!("SKIP acceptance: tolerances assume 64-bit floats");
        return ExitCode::SUCCESS;
    }
    let seeds: u64 = std::env::var("LID_ACCEPTANCE_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(3)
        .max(1);
    let temp = tempfile::tempdir().expect("temporary directory");
    let work = std::env::var_os("LID_ACCEPTANCE_WORKDIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| temp.path().to_path_buf());

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "CTC oracle equivalence", ctc_oracle()),
        (2, "CTC gradient", ctc_gradient()),
        (3, "full-model gradient", model_gradients()),
        (4, "layer table conformance", table_conformance()),
    ];
    match reproduce(&work, seeds) {
        Ok(r) => {
            results.push((5, "freeze contract", freeze_contract(&r)));
            results.push((6, "forced alignment", forced_alignment(&r)));
            results.push((7, "synthetic reproduction", synthetic_reproduction(&r)));
            results.push((8, "convergence log", convergence_log(&work, &r)));
            results.push((10, "evaluation identities", evaluation_identities(&work, &r)));
        }
        Err(e) => {
            for (n, name) in [
                (5, "freeze contract"),
                (6, "forced alignment"),
                (7, "synthetic reproduction"),
                (8, "convergence log"),
                (10, "evaluation identities"),
            ] {
                results.push((n, name, Err(format!("training failed: {e}"))));
            }
        }
    }
    results.push((9, "frontend", frontend()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
