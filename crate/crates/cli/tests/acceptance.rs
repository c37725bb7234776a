//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when a
//! gating criterion fails. The optional full-scale run (criterion 8) only
//! runs with `ALIASCOPE_FULL_SCALE=1`.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aliascope::instrumentation::Spread;
use aliascope::nn::gradcheck::layer_suite;
use aliascope::nn::{train_with_progress, Network, Tensor};
use aliascope::spectral::{block_partition, downsampled_spectrum};
use aliascope::{
    adversarial_sweep, analyze_dataset, build_model, capture_traces, classify, dft2, downsample, evaluate,
    generate_dataset, AttackConfig, Category, DatasetSpec, Family, ImageSet, ModelSpec, RealGrid, Spectrum,
    ThresholdRule, TrainConfig,
};
use num_complex::Complex64;
use rand::Rng;

enum Verdict {
    Pass,
    Fail,
    Ignored,
}

struct Run {
    failures: usize,
}

impl Run {
    fn record(&mut self, n: u32, verdict: Verdict, detail: impl AsRef<str>) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Verdict::Ignored => "IGNORED",
        };
        println!("criterion {n:>2} {tag}: {}", detail.as_ref());
    }

    fn check(&mut self, n: u32, ok: bool, detail: impl AsRef<str>) {
        self.record(n, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }
}

fn max_error(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn spectral_oracle(run: &mut Run) {
    let started = Instant::now();
    let mut rng = oracles::rng(101);
    let sizes = [4, 8, 12, 16];
    let mut worst = 0.0f64;
    for g in 0..200 {
        let (m, n) = (sizes[g % 4], sizes[(g / 4) % 4]);
        let x = oracles::random_grid(&mut rng, m, n);
        let fast = dft2(&RealGrid::new(m, n, x.clone()).unwrap());
        worst = worst.max(max_error(fast.values(), &oracles::direct_dft2(&x, m, n)));
    }
    let secs = started.elapsed().as_secs_f64();
    run.check(
        1,
        worst <= 1e-9 && secs < 10.0,
        format!("dft2 vs direct DFT on 200 grids, max abs error {worst:.2e} (<= 1e-9), {secs:.2} s (< 10 s)"),
    );
}

fn block_identity(run: &mut Run) {
    let started = Instant::now();
    let mut rng = oracles::rng(102);
    let mut worst = 0.0f64;
    for g in 0..1000 {
        let r = if g % 2 == 0 { 2 } else { 4 };
        let m = r * rng.random_range(1..=6);
        let n = r * rng.random_range(1..=6);
        let x = RealGrid::new(m, n, oracles::random_grid(&mut rng, m, n)).unwrap();
        let direct = dft2(&downsample(&x, r).unwrap());
        let via_blocks = downsampled_spectrum(&block_partition(&dft2(&x), r).unwrap());
        worst = worst.max(max_error(direct.values(), via_blocks.values()));
    }
    let secs = started.elapsed().as_secs_f64();
    run.check(
        2,
        worst <= 1e-9 && secs < 30.0,
        format!("downsampled spectrum = scaled block sum on 1000 grids, r in {{2,4}}, max abs error {worst:.2e} (<= 1e-9), {secs:.2} s (< 30 s)"),
    );
}

fn classifier_oracle(run: &mut Run) {
    let mut rng = oracles::rng(103);
    let rule = ThresholdRule::new(10.0).unwrap();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let v = oracles::random_spectrum(&mut rng, 8, 8);
        let got = classify(&Spectrum::new(8, 8, v.clone()).unwrap(), 2, &rule).unwrap();
        if got.entries() != oracles::brute_classify(&v, 8, 8, 2, 10.0).as_slice() {
            mismatches += 1;
        }
    }
    let tone = |x: Vec<f64>| {
        let s = dft2(&RealGrid::new(12, 12, x).unwrap());
        let grid = classify(&s, 2, &rule).unwrap();
        let agrees = grid.entries() == oracles::brute_classify(s.values(), 12, 12, 2, 10.0).as_slice();
        (grid, agrees)
    };
    let (single, single_ok) = tone(oracles::single_tone_12());
    let (two, two_ok) = tone(oracles::two_tone_12());
    let hand = single_ok
        && two_ok
        && single.get(4, 0) == Category::NonAliased
        && single.get(2, 0) == Category::Aliased
        && two.get(2, 0) == Category::AliasedTangled;
    run.check(
        3,
        mismatches == 0 && hand,
        format!(
            "classify vs brute force on 1000 random 8x8 spectra: {mismatches} mismatches; 12x12 tone cases {}",
            if hand { "ok" } else { "wrong" }
        ),
    );
}

fn gradient_suite(run: &mut Run) {
    let started = Instant::now();
    let checks = layer_suite(0).expect("gradient suite runs");
    let secs = started.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let mut layers: Vec<&str> = checks.iter().map(|c| c.layer).collect();
    layers.sort();
    layers.dedup();
    let fewest = layers
        .iter()
        .map(|l| {
            let mut cases: Vec<&str> = checks
                .iter()
                .filter(|c| c.layer == *l)
                .map(|c| c.case.as_str())
                .collect();
            cases.dedup();
            cases.len()
        })
        .min()
        .unwrap_or(0);
    run.check(
        4,
        worst <= 1e-6 && fewest >= 5 && secs < 120.0,
        format!(
            "finite differences (h = 1e-5) over {} layers, {} checks, >= {fewest} shapes each, worst relative error {worst:.2e} (<= 1e-6), {secs:.1} s (< 120 s)",
            layers.len(),
            checks.len()
        ),
    );
}

fn random_images(rng: &mut impl Rng, count: usize, size: usize) -> Vec<f32> {
    (0..count * size * size)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect()
}

fn decomposition(run: &mut Run) {
    let mut rng = oracles::rng(105);
    let size = 16;
    let mut differing = Vec::new();
    for family in Family::ALL {
        let spec = if family.is_resnet() {
            ModelSpec::resnet(family, 4, 1, 10, size)
        } else {
            ModelSpec::fc(family, 12, 10, size)
        };
        // Warm up for one epoch so batch-norm statistics are not trivial.
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let data = ImageSet::new(1, size, size, 10, random_images(&mut rng, 40, size), labels).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr_drop_epoch: 1,
            ..TrainConfig::default()
        };
        let network = train_with_progress(build_model(&spec, 5).unwrap(), &data, &config, |_| {})
            .unwrap()
            .model
            .network;
        let same = (0..50).all(|_| {
            let x = Tensor::new([1, 1, size, size], random_images(&mut rng, 1, size)).unwrap();
            let plain = network.forward_eval(&x).unwrap();
            let (traced, _) = capture_traces(&network, &x).unwrap();
            plain.data().len() == traced.len()
                && plain
                    .data()
                    .iter()
                    .zip(&traced)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !same {
            differing.push(family.to_string());
        }
    }
    run.check(
        5,
        differing.is_empty(),
        format!("instrumented vs plain logits bit-identical for 5 families x 50 inputs; differing: {differing:?}"),
    );
}

struct Trained {
    network: Network<f32>,
    top1: f64,
}

fn train_and_test(spec: &ModelSpec, train: &ImageSet, test: &ImageSet, config: &TrainConfig) -> Trained {
    let checkpoint = train_with_progress(build_model(spec, 0).unwrap(), train, config, |_| {}).unwrap();
    let top1 = evaluate(&checkpoint.model.network, test, &[1]).unwrap()[0];
    Trained {
        network: checkpoint.model.network,
        top1,
    }
}

/// Hidden width whose parameter count is closest to `target`.
fn matched_hidden(family: Family, target: usize) -> ModelSpec {
    (1..4096)
        .map(|h| ModelSpec::fc(family, h, 100, 32))
        .min_by_key(|s| s.param_count().abs_diff(target))
        .unwrap()
}

fn desk_data(count: u32, seed: u64) -> ImageSet {
    generate_dataset(&DatasetSpec {
        n_freqs: 10,
        size: 32,
        count,
        noise_amplitude: 0.01,
        seed,
    })
    .unwrap()
    .to_image_set()
}

fn size_ordering(run: &mut Run, train: &ImageSet, test: &ImageSet) -> Trained {
    let started = Instant::now();
    // Thirty epochs with the drop at the same 70% point as the full schedule.
    let config = TrainConfig {
        epochs: 30,
        lr_drop_epoch: 21,
        ..TrainConfig::default()
    };
    let spec = ModelSpec::resnet(Family::ResnetC, 16, 2, 100, 32);
    let resnet = train_and_test(&spec, train, test, &config);
    let target = spec.param_count();
    let mut parts = vec![format!(
        "resnet-c w16 d2 ({target} params) top-1 {:.4} (>= 0.90)",
        resnet.top1
    )];
    let mut ok = resnet.top1 >= 0.90;
    for family in [Family::Fc1h, Family::Fc2h] {
        let fc_spec = matched_hidden(family, target);
        let params = fc_spec.param_count();
        let within = params.abs_diff(target) as f64 <= 0.25 * target as f64;
        let fc = train_and_test(&fc_spec, train, test, &config);
        ok &= within && fc.top1 < resnet.top1;
        parts.push(format!(
            "{family} hidden {} ({params} params) top-1 {:.4}",
            fc_spec.base_width, fc.top1
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs <= 1800.0;
    parts.push(format!("{secs:.0} s (<= 1800 s)"));
    run.check(6, ok, parts.join("; "));
    resnet
}

fn prevalence(run: &mut Run, resnet: &Trained, test: &ImageSet) {
    let rule = ThresholdRule::new(10.0).unwrap();
    let report = analyze_dataset(&resnet.network, test, &rule, None, "resnet-c w16 d2", "test").unwrap();
    let outer = report
        .outer_equal_weight
        .expect("resnet has downsampling points")
        .aliased_total();
    let per_point: Vec<String> = report
        .points
        .iter()
        .map(|p| format!("{} {:.3}", p.name, p.fractions.aliased_total()))
        .collect();
    run.check(
        7,
        outer > 0.25,
        format!(
            "outer equal-weight aliased + tangled fraction {outer:.4} (> 0.25); per point: {}",
            per_point.join(", ")
        ),
    );
}

fn full_scale(run: &mut Run) {
    if std::env::var("ALIASCOPE_FULL_SCALE").as_deref() != Ok("1") {
        run.record(
            8,
            Verdict::Ignored,
            "optional full-scale run; set ALIASCOPE_FULL_SCALE=1 to run it (hours)",
        );
        return;
    }
    let spec_of = |count, seed| DatasetSpec {
        n_freqs: 20,
        size: 32,
        count,
        noise_amplitude: 1.0,
        seed,
    };
    let train = generate_dataset(&spec_of(20000, 1)).unwrap().to_image_set();
    let test = generate_dataset(&spec_of(10000, 2)).unwrap().to_image_set();
    let spec = ModelSpec::resnet(Family::ResnetC, 16, 3, 400, 32);
    let trained = train_and_test(&spec, &train, &test, &TrainConfig::default());
    let rule = ThresholdRule::new(10.0).unwrap();
    let report = analyze_dataset(&trained.network, &test, &rule, None, "full", "test").unwrap();
    let outer = report.outer_equal_weight.map_or(0.0, |f| f.aliased_total());
    // Informational only: never counted as a failure.
    let verdict = if trained.top1 >= 0.95 && outer > 0.5 {
        Verdict::Pass
    } else {
        Verdict::Ignored
    };
    run.record(
        8,
        verdict,
        format!(
            "full scale top-1 {:.4} (>= 0.95), outer aliased fraction {outer:.4} (> 0.5)",
            trained.top1
        ),
    );
}

fn adversarial(run: &mut Run, resnet: &Trained, test: &ImageSet) {
    const SAMPLES: usize = 200;
    let epsilons = [0.0, 0.01, 0.02, 0.05];
    let rule = ThresholdRule::new(10.0).unwrap();
    let table = adversarial_sweep(
        &resnet.network,
        test,
        &epsilons,
        &rule,
        &AttackConfig::default(),
        Some(SAMPLES),
    )
    .unwrap();
    let clean = analyze_dataset(&resnet.network, test, &rule, Some(SAMPLES), "resnet", "test").unwrap();
    let zero = &table.rows[0];
    let spread = |shares: Vec<f64>| Spread::of(&shares);
    let mut zero_ok =
        zero.top1 == clean.accuracy.top1 && zero.top5 == clean.accuracy.top5 && zero.max_perturbation == 0.0;
    zero_ok &= zero.pooled
        == spread(
            clean
                .samples
                .iter()
                .filter_map(|s| s.pooled_fractions.map(|f| f.aliased_total()))
                .collect(),
        );
    for (p, s) in zero.per_point.iter().enumerate() {
        zero_ok &= Some(*s)
            == spread(
                clean
                    .samples
                    .iter()
                    .map(|r| r.per_point_fractions[p].aliased_total())
                    .collect(),
            );
    }
    let bound_ok = table.rows.iter().all(|r| r.max_perturbation <= r.epsilon);
    let last = table.rows.last().unwrap();
    let drop_ok = last.top1 < zero.top1;
    let mut shift = 0.0f64;
    for row in &table.rows {
        for (a, b) in row
            .per_point
            .iter()
            .chain(&row.pooled)
            .zip(zero.per_point.iter().chain(&zero.pooled))
        {
            shift = shift.max((a.median - b.median).abs());
        }
    }
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "eps {} top-1 {:.3} pooled median {:.4}",
                r.epsilon,
                r.top1,
                r.pooled.map_or(f64::NAN, |s| s.median)
            )
        })
        .collect();
    run.check(
        9,
        zero_ok && bound_ok && drop_ok && shift < 0.1,
        format!(
            "{SAMPLES} test samples, 100 PGD steps: eps 0 row equals clean metrics {zero_ok}; linf bound holds {bound_ok}; accuracy drops {drop_ok}; largest median shift {shift:.4} (< 0.1); {}",
            rows.join("; ")
        ),
    );
}

/// Runs the binary on a whitespace-separated command line.
fn cli(line: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_aliascope"))
        .args(line.split_whitespace())
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_session(dir: &Path) -> bool {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (train, test, model) = (p("train.oscd"), p("test.oscd"), p("model.alck"));
    let (analysis, sweep, arch) = (p("analysis"), p("sweep.csv"), p("arch.csv"));
    [
        format!("gen --n-freqs 3 --size 16 --count 180 --noise 0.1 --seed 1 --out {train}"),
        format!("gen --n-freqs 3 --size 16 --count 45 --noise 0.1 --seed 2 --out {test}"),
        format!(
            "train --arch resnet-c --width 4 --depth 1 --epochs 3 --batch-size 32 --lr 0.01 --lr-drop-epoch 2 \
             --data {train} --out {model} --quiet"
        ),
        format!("analyze --model {model} --data {test} --out {analysis}"),
        format!(
            "attack --model {model} --data {test} --eps 0,0.02,0.05 --steps 5 --random-start --seed 4 --out {sweep}"
        ),
        format!(
            "sweep-arch --families fc-2h,resnet-w --hidden 8 --widths 2 --depth 1 --epochs 1 --batch-size 32 \
             --data {train} --test {test} --out {arch} --quiet"
        ),
    ]
    .iter()
    .all(|line| cli(line))
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with("manifest.json") {
                let name = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((name, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(run: &mut Run) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ran = cli_session(a.path()) && cli_session(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let ok = ran && fa.len() == fb.len() && differing.is_empty();
    run.check(
        10,
        ok,
        format!(
            "gen, train, analyze, attack and sweep-arch run twice: {} artifacts compared (manifests excluded, they hold wall time), differing: {differing:?}",
            fa.len()
        ),
    );
}

fn main() {
    let mut run = Run { failures: 0 };
    spectral_oracle(&mut run);
    block_identity(&mut run);
    classifier_oracle(&mut run);
    gradient_suite(&mut run);
    decomposition(&mut run);
    let train = desk_data(5000, 1);
    let test = desk_data(1000, 2);
    let resnet = size_ordering(&mut run, &train, &test);
    prevalence(&mut run, &resnet, &test);
    full_scale(&mut run);
    adversarial(&mut run, &resnet, &test);
    reproducibility(&mut run);
    if run.failures > 0 {
        println!("{} gating criteria failed", run.failures);
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
