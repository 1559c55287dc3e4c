//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! the real stdout (not the captured test output), then asserts.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::gradcases::{composed_cases, primitive_cases};
use common::{ctc_brute_force, dtw_brute_force, edit_distance_oracle};
use cuedgen::cuer::{generate_corpus, CorpusSpec, CuerProfile};
use cuedgen::domain::CueConfig;
use cuedgen::features::{build_bundle, fit_stream_pcas, frame_count, mel_spectrogram, MelConfig, MelFilterbank, PCA_COMPONENTS};
use cuedgen::generator::{evaluate_loss, train_generator, Generator, GeneratorConfig, GeneratorPreset, GeneratorTrainConfig};
use cuedgen::mat::Mat;
use cuedgen::metrics::{align_count, attention_diagonality, dtw};
use cuedgen::nn::{ctc_nll, ctc_required_frames, ParamStore};
use cuedgen::pipeline::{
    load_features, load_recognizer, run_all, CorpusKind, ExperimentConfig, ExperimentReport, Layout, Split,
};
use cuedgen::recognizer::CtcExample;
use cuedgen::generator::StrategyTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

/// Heavy checks time themselves, so they never overlap.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, what: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("\n[{tag}] acceptance {id:>2} {what}: {detail}\n");
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse)
        })
        .collect()
}

#[test]
fn acceptance_01_ctc_forward_equals_path_enumeration() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 200 {
        let frames = r.random_range(1..=6);
        let classes = r.random_range(2..=4);
        let len = r.random_range(0..=3);
        let labels: Vec<usize> = (0..len).map(|_| r.random_range(1..classes)).collect();
        if ctc_required_frames(&labels) > frames {
            continue;
        }
        let logits: Vec<f64> = (0..frames * classes).map(|_| r.random_range(-3.0..3.0)).collect();
        let lp = log_softmax_rows(&logits, classes);
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let exhaustive = -ctc_brute_force(&probs, classes, &labels, 0).ln();
        let forward = ctc_nll(&lp, classes, &labels, 0).unwrap();
        worst = worst.max((forward - exhaustive).abs());
        done += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "CTC oracle",
        worst <= 1e-6 && secs < 10.0,
        format!("200 instances, max |NLL diff| {worst:.2e} (<= 1e-6), {secs:.2}s (< 10s)"),
    );
}

#[test]
fn acceptance_02_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for case in primitive_cases().into_iter().chain(composed_cases()) {
        for seed in 0..10 {
            let e = (case.run)(seed);
            checks += 1;
            if !(e <= worst.0) {
                worst = (e, format!("{} seed {seed}", case.name));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "gradient oracle",
        worst.0 < 1e-5 && secs < 120.0,
        format!("{checks} checks (10 seeds per case), worst rel err {:.2e} at {} (< 1e-5), {secs:.1}s (< 120s)", worst.0, worst.1),
    );
}

#[test]
fn acceptance_03_edit_distance_oracle_and_worked_examples() {
    let _g = serial();
    let mut r = rng(303);
    let mut mismatches = 0;
    for _ in 0..500 {
        let a: Vec<u8> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..4)).collect();
        let b: Vec<u8> = (0..r.random_range(0..=8)).map(|_| r.random_range(0..4)).collect();
        if align_count(&a, &b).unwrap().errors() != edit_distance_oracle(&a, &b) {
            mismatches += 1;
        }
    }
    let del = align_count(&['a', 'b', 'c'], &['a', 'c']).unwrap();
    let swap = align_count(&['a', 'b'], &['b', 'a']).unwrap();
    let del_ok = (del.d, del.s, del.i) == (1, 0, 0) && (100.0 * del.acc - 66.67).abs() < 0.005;
    let swap_ok = swap.s == 2 && swap.acc == 0.0;
    verdict(
        3,
        "edit-distance oracle",
        mismatches == 0 && del_ok && swap_ok,
        format!(
            "{mismatches}/500 mismatches; deletion case acc {:.2}% (66.67%), swap case S={} acc {:.2}% (0%)",
            100.0 * del.acc,
            swap.s,
            100.0 * swap.acc
        ),
    );
}

#[test]
fn acceptance_04_dtw_equals_brute_force() {
    let _g = serial();
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let dim = r.random_range(1..=3);
        let (ta, tb) = (r.random_range(1..=6), r.random_range(1..=6));
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0f32..1.0) as f64).collect()).collect()
        };
        let (a, b) = (draw(ta), draw(tb));
        let to_mat = |s: &[Vec<f64>]| Mat::from_fn(s.len(), dim, |i, j| s[i][j] as f32);
        let fast = dtw(&to_mat(&a), &to_mat(&b)).unwrap().cost;
        worst = worst.max((fast - dtw_brute_force(&a, &b)).abs());
    }
    verdict(4, "DTW oracle", worst <= 1e-9, format!("200 pairs, max |cost diff| {worst:.2e} (<= 1e-9)"));
}

#[test]
fn acceptance_05_dsp_exactness() {
    let _g = serial();
    let c = MelConfig::default();
    let (n1, n2) = (frame_count(22_050, &c).unwrap(), frame_count(4_410, &c).unwrap());
    let floor = (1e-5f64).ln() as f32;
    let silent = mel_spectrogram(&vec![0.0; 22_050], &c).unwrap();
    let floor_ok = silent.data.iter().all(|&v| v == floor);
    let bank = MelFilterbank::new(&c);
    let nearest = bank
        .centers_hz
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
        .unwrap()
        .0;
    let tone: Vec<f32> = (0..22_050)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 22_050.0).sin() as f32)
        .collect();
    let m = mel_spectrogram(&tone, &c).unwrap();
    let off_peak = (0..m.rows)
        .filter(|&t| {
            let row = m.row(t);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() != nearest
        })
        .count();
    verdict(
        5,
        "DSP exactness",
        n1 == 83 && n2 == 14 && floor_ok && off_peak == 0,
        format!(
            "frame_count(22050)={n1} (83), frame_count(4410)={n2} (14), silent mel at ln(1e-5): {floor_ok}, \
             440 Hz frames peaking off band {nearest}: {off_peak}/{}",
            m.rows
        ),
    );
}

#[test]
fn acceptance_06_pca_orthonormal_and_retains_99_percent() {
    let _g = serial();
    let ec = ExperimentConfig::default();
    let cue = CueConfig::default_config();
    let mut profile = CuerProfile::from_config(&cue, ec.av_f0_hz);
    profile.landmark_noise_std = ec.landmark_noise_std;
    let spec = CorpusSpec {
        n_utterances: ec.av_pretrain_n,
        length_range: ec.length_range,
        duration_range_ms: ec.duration_range_ms,
        seed: 2 * ec.data_seed,
    };
    let (utts, _) = generate_corpus(&spec, &profile, &cue).unwrap();
    let refs: Vec<_> = utts.iter().collect();
    let (hand, lips) = fit_stream_pcas(&refs, PCA_COMPONENTS).unwrap();
    let mut orth = 0.0f64;
    for m in [&hand, &lips] {
        for (i, a) in m.components.iter().enumerate() {
            for (j, b) in m.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                orth = orth.max((dot - f64::from(u8::from(i == j))).abs());
            }
        }
    }
    let (rh, rl) = (hand.retained_variance(), lips.retained_variance());
    verdict(
        6,
        "PCA",
        orth <= 1e-6 && rh >= 0.99 && rl >= 0.99 && hand.k() == 10 && lips.k() == 10,
        format!(
            "max |C C^T - I| {orth:.2e} (<= 1e-6); 10 components retain hand {:.4}, lips {:.4} (>= 0.99)",
            rh, rl
        ),
    );
}

#[test]
fn acceptance_07_overfit_sanity() {
    let _g = serial();
    let t0 = Instant::now();
    let cue = CueConfig::default_config();
    let mut profile = CuerProfile::from_config(&cue, 200.0);
    profile.landmark_noise_std = 0.0;
    let spec = CorpusSpec {
        n_utterances: 5,
        length_range: (5, 9),
        duration_range_ms: (70, 130),
        seed: 7,
    };
    let (utts, _) = generate_corpus(&spec, &profile, &cue).unwrap();
    let refs: Vec<_> = utts.iter().collect();
    let (ph, pl) = fit_stream_pcas(&refs, PCA_COMPONENTS).unwrap();
    let bundles: Vec<_> = utts
        .iter()
        .map(|u| build_bundle(u, &MelConfig::default(), &ph, &pl).unwrap())
        .collect();
    let model = Generator::new(GeneratorConfig::preset(GeneratorPreset::Desk, cue.inventory.len())).unwrap();
    let mut r = rng(0);
    let mut store: ParamStore<f32> = model.init_params(&mut r);
    let items: Vec<(&[usize], _)> = utts.iter().zip(&bundles).map(|(u, b)| (&u.seq.phonemes[..], b)).collect();
    let tc = GeneratorTrainConfig {
        steps: 3000,
        batch_size: 5,
        log_every: 0,
        ..Default::default()
    };
    train_generator(&model, &mut store, &items, &[], &tc, None).unwrap();
    let loss = evaluate_loss(&model, &store, &items, &tc.loss_weights, 5, 1).unwrap().total;
    let (mut min_diag, mut worst_len, mut worst_dtw) = (f64::INFINITY, 0.0f64, 0.0f64);
    for (ids, b) in &items {
        let tf = model.forward_teacher_forced(&store, ids, &b.mel, &mut r).unwrap();
        min_diag = min_diag.min(attention_diagonality(&tf.attention).unwrap());
        let out = model.infer(&store, ids, &mut r).unwrap();
        let target = b.frames() as f64;
        worst_len = worst_len.max((out.frames() as f64 - target).abs() / target);
        let d = dtw(&out.hand(PCA_COMPONENTS), &b.hand).unwrap();
        worst_dtw = worst_dtw.max(d.cost / d.path.len() as f64);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        7,
        "overfit sanity",
        loss < 0.05 && min_diag > 0.8 && worst_len <= 0.10 && secs < 600.0,
        format!(
            "teacher-forced loss {loss:.4} (< 0.05), min diagonality {min_diag:.3} (> 0.8), worst length error {:.1}% (<= 10%), \
             hand DTW cost/frame {worst_dtw:.3}, {secs:.0}s (< 600s)",
            100.0 * worst_len
        ),
    );
}

/// The full three-seed S1/S3 experiment at the default configuration, shared
/// by the recognizer gate, the transfer comparison and the protocol check.
struct FullRun {
    layout: Layout,
    cfg: ExperimentConfig,
    report: ExperimentReport,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = ExperimentConfig::default();
        let t0 = Instant::now();
        let report = run_all(&layout, &cfg, &SEEDS, &[StrategyTag::S1Scratch, StrategyTag::S3FrozenEncoder], false).unwrap();
        let elapsed = t0.elapsed();
        let mut out = std::io::stdout();
        for row in &report.rows {
            let _ = writeln!(
                out,
                "    {}{}: per seed {:?}, median {:.2}%",
                row.source,
                if row.finetune_last_layer { " +ft" } else { "" },
                row.per_seed.values().map(|a| format!("{:.2}%", 100.0 * a)).collect::<Vec<_>>(),
                100.0 * row.median
            );
        }
        FullRun {
            layout,
            cfg,
            report,
            elapsed,
            _dir: dir,
        }
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |a| format!("{:.2}%", 100.0 * a))
}

#[test]
fn acceptance_08_recognizer_quality_gate() {
    let _g = serial();
    let run = full_run();
    let cue = run.cfg.cue().unwrap();
    let (rec, store) = load_recognizer(&run.layout, &run.cfg).unwrap();
    let set = load_features(&run.layout.features(CorpusKind::Av), &run.layout.corpus(CorpusKind::Av), &cue).unwrap();
    let split: Split = cuedgen::io::read_json(&run.layout.corpus(CorpusKind::Av).join("split.json")).unwrap();
    let idx = set.indices(&split.test).unwrap();
    let labels: Vec<Vec<usize>> = idx.iter().map(|&i| cue.inventory.labels(&set.phonemes[i])).collect();
    let oracle: Vec<CtcExample> = idx
        .iter()
        .zip(&labels)
        .map(|(&i, l)| CtcExample {
            hand: &set.bundles[i].hand,
            lips: &set.bundles[i].lips,
            labels: l,
        })
        .collect();
    let acc_oracle = rec.accuracy(&store, &oracle).unwrap().acc;

    // Gaussian noise with each stream's pooled standard deviation.
    let std_of = |mats: Vec<&Mat>| {
        let vals: Vec<f64> = mats.iter().flat_map(|m| m.data.iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    let (sh, sl) = (
        std_of(idx.iter().map(|&i| &set.bundles[i].hand).collect()),
        std_of(idx.iter().map(|&i| &set.bundles[i].lips).collect()),
    );
    let mut r = rng(808);
    let noise: Vec<(Mat, Mat)> = idx
        .iter()
        .map(|&i| {
            let b = &set.bundles[i];
            let mut draw = |t: usize, d: usize, s: f64| {
                Mat::from_fn(t, d, |_, _| {
                    let (u1, u2): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
                    (s * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                })
            };
            (draw(b.frames(), b.hand.cols, sh), draw(b.frames(), b.lips.cols, sl))
        })
        .collect();
    let noisy: Vec<CtcExample> = noise
        .iter()
        .zip(&labels)
        .map(|((h, l), lab)| CtcExample { hand: h, lips: l, labels: lab })
        .collect();
    let acc_noise = rec.accuracy(&store, &noisy).unwrap().acc;
    verdict(
        8,
        "recognizer quality gate",
        acc_oracle >= 0.95 && acc_noise <= 0.10,
        format!(
            "held-out oracle acc {:.2}% (>= 95%) on {} utterances, random-noise acc {:.2}% (<= 10%)",
            100.0 * acc_oracle,
            idx.len(),
            100.0 * acc_noise
        ),
    );
}

#[test]
fn acceptance_09_transfer_learning_replication() {
    let _g = serial();
    let run = full_run();
    let (s1, s3) = (run.report.median("s1", false), run.report.median("s3", false));
    let secs = run.elapsed.as_secs_f64();
    let pass = matches!((s1, s3), (Some(a), Some(b)) if b >= a + 0.10 && b >= 0.70) && secs < 45.0 * 60.0;
    verdict(
        9,
        "transfer-learning replication",
        pass,
        format!(
            "median over seeds {SEEDS:?}: S3 {} vs S1 {} (S3 >= S1 + 10 points and S3 >= 70%), runtime {:.1} min (< 45 min)",
            pct(s3),
            pct(s1),
            secs / 60.0
        ),
    );
}

#[test]
fn acceptance_10_last_layer_finetune_does_not_hurt_s3() {
    let _g = serial();
    let run = full_run();
    let (plain, tuned) = (run.report.median("s3", false), run.report.median("s3", true));
    verdict(
        10,
        "protocol effect",
        matches!((plain, tuned), (Some(a), Some(b)) if b >= a),
        format!("S3 median {} without, {} with last-layer fine-tuning (with >= without)", pct(plain), pct(tuned)),
    );
}

/// Two full pipeline runs of a reduced configuration into fresh directories.
fn reduced() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        av_pretrain_n: 24,
        cs_train_n: 10,
        max_steps: 40,
        ..Default::default()
    };
    c.pretrain.val_every = 20;
    c.finetune.val_every = 20;
    c.recognizer_train.val_every = 20;
    c
}

fn eval_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = cuedgen::pipeline::files_under(&[root.to_path_buf()])
        .unwrap()
        .into_iter()
        .filter(|p| p.components().any(|c| c.as_os_str() == "eval") && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    files
}

#[test]
fn acceptance_11_determinism() {
    let _g = serial();
    let cfg = reduced();
    let tags = [StrategyTag::S1Scratch, StrategyTag::S3FrozenEncoder];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_all(&Layout::new(d.path()), &cfg, &[1], &tags, false).unwrap();
    }
    let (a, b) = (eval_files(dirs[0].path()), eval_files(dirs[1].path()));
    let rel = |root: &Path, p: &Path| p.strip_prefix(root).unwrap().to_path_buf();
    let same_names = a.iter().map(|p| rel(dirs[0].path(), p)).eq(b.iter().map(|p| rel(dirs[1].path(), p)));
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap())
        .map(|(x, _)| rel(dirs[0].path(), x).display().to_string())
        .collect();
    verdict(
        11,
        "determinism",
        same_names && !a.is_empty() && differing.is_empty(),
        format!(
            "{} accuracy reports compared byte for byte across two runs, {} differ {:?}",
            a.len(),
            differing.len(),
            differing
        ),
    );
}
