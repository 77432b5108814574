//! Acceptance run: one PASS/FAIL line per primary criterion. Exits nonzero
//! if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinynav::bench::{bench, bench_window, Engine};
use tinynav::window_buffer::SharedWindowBuffer;
use tinynav_core::eval::{eval_report, gradcam};
use tinynav_core::model::Head;
use tinynav_core::pipeline::{
    build_windows, shuffle_split, FrameWindow, Rotation, SplitDataset, WindowRing, DEFAULT_SPLIT,
};
use tinynav_core::protocol::{decode_stream, encode_frame, StreamDecoder};
use tinynav_core::quant::{calibrate, fidelity_report, requantize, FixedMultiplier, QuantModel};
use tinynav_core::sim::{
    run_closed_loop, ExpertPolicy, InferenceEngine, ModelPolicy, NoiseConfig, RunConfig, SimWorld,
};
use tinynav_core::tensor::{Activation, Conv2d, ConvSpec, Dense, Gradients, Layer, Sequential, Tape, Tensor};
use tinynav_core::train::{evaluate, train, TrainConfig};
use tinynav_core::{DepthFrame, FloatModel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Run {
    failures: usize,
}

impl Run {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !o.pass {
            self.failures += 1;
        }
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
    }
}

fn parameter_budget() -> Outcome {
    let m = FloatModel::init(0);
    let counted: usize = m.param_layers().iter().map(|(w, b)| w.len() + b.len()).sum();
    outcome(counted == 23_130 && m.param_count() == 23_130 && counted <= 50_000, format!("{counted} parameters"))
}

fn random_frame(rng: &mut ChaCha8Rng, max_side: usize) -> DepthFrame {
    let (rows, cols) = (rng.random_range(1..=max_side), rng.random_range(1..=max_side));
    // Timestamps are assigned by the host, not carried on the wire.
    DepthFrame::new(rng.random(), rows, cols, (0..rows * cols).map(|_| rng.random()).collect()).unwrap()
}

fn protocol_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut round_trips = 0;
    for _ in 0..1000 {
        let f = random_frame(&mut rng, 100);
        let bytes = encode_frame(&f).unwrap();
        let (out, stats) = decode_stream(&bytes);
        if out.len() == 1 && out[0] == f && encode_frame(&out[0]).unwrap() == bytes && stats.bytes_discarded == 0 {
            round_trips += 1;
        }
    }

    let (mut spurious, mut crashes, mut inconsistent, mut recovered, mut sent) = (0, 0, 0, 0usize, 0usize);
    for _ in 0..10_000 {
        let frames: Vec<DepthFrame> = (0..rng.random_range(1..=5)).map(|_| random_frame(&mut rng, 30)).collect();
        let mut stream = Vec::new();
        let mut intact = 0;
        for f in &frames {
            stream.extend((0..rng.random_range(0..8)).map(|_| rng.random::<u8>()));
            let mut bytes = encode_frame(f).unwrap();
            match rng.random_range(0..4) {
                0 => intact += 1,
                1 => {
                    let i = rng.random_range(0..bytes.len());
                    bytes[i] ^= rng.random_range(1..=255u8);
                }
                2 => {
                    bytes.remove(rng.random_range(0..bytes.len()));
                }
                _ => {
                    let i = rng.random_range(0..=bytes.len());
                    bytes.insert(i, rng.random());
                }
            }
            stream.extend(bytes);
        }
        if rng.random_bool(0.2) {
            stream.truncate(rng.random_range(0..=stream.len()));
        }
        sent += intact;
        let result = catch_unwind(|| {
            let mut dec = StreamDecoder::new();
            let mut out = Vec::new();
            let mut rest = &stream[..];
            let mut chunk_rng = ChaCha8Rng::seed_from_u64(stream.len() as u64);
            while !rest.is_empty() {
                let k = chunk_rng.random_range(1..=rest.len().min(600));
                out.extend(dec.feed(&rest[..k]));
                rest = &rest[k..];
            }
            (out, dec.stats(), dec.buffered())
        });
        let Ok((out, stats, buffered)) = result else {
            crashes += 1;
            continue;
        };
        spurious += out.iter().filter(|d| !frames.contains(d)).count();
        recovered += out.len();
        let consumed: u64 = out.iter().map(|f| (f.rows * f.cols + 22) as u64).sum();
        if stats.resyncs != stats.checksum_failures + stats.malformed
            || stats.frames_ok != out.len() as u64
            || consumed + stats.bytes_discarded + buffered as u64 != stream.len() as u64
        {
            inconsistent += 1;
        }
    }
    outcome(
        round_trips == 1000 && spurious == 0 && crashes == 0 && inconsistent == 0,
        format!(
            "{round_trips}/1000 byte-exact round trips; 10000 fuzzed streams: {spurious} invalid frames, {crashes} crashes, \
             {inconsistent} inconsistent counters, {recovered} frames recovered ({sent} sent undamaged)"
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Conv, ReLU, Flatten, Dense, Tanh, Dense, Sigmoid with random shapes.
fn tiny_net(rng: &mut ChaCha8Rng) -> (Sequential, Tensor, Tensor) {
    let side = rng.random_range(3..=6);
    let cin = rng.random_range(1..=3);
    let spec = ConvSpec::new(rng.random_range(1..=3), rng.random_range(1..=2), cin, rng.random_range(1..=4));
    let o = spec.out_size(side);
    let flat = o * o * spec.out_channels;
    let (hidden, outs) = (rng.random_range(2..=5), rng.random_range(1..=2));
    let net = Sequential::new(vec![
        Layer::Conv(Conv2d {
            spec,
            weights: random_tensor(rng, &spec.weight_dims(), 0.8),
            bias: random_tensor(rng, &[spec.out_channels], 0.3),
        }),
        Layer::Act(Activation::Relu),
        Layer::Flatten,
        Layer::Dense(Dense {
            weights: random_tensor(rng, &[flat, hidden], 0.8),
            bias: random_tensor(rng, &[hidden], 0.3),
        }),
        Layer::Act(Activation::Tanh),
        Layer::Dense(Dense {
            weights: random_tensor(rng, &[hidden, outs], 0.8),
            bias: random_tensor(rng, &[outs], 0.3),
        }),
        Layer::Act(Activation::Sigmoid),
    ]);
    let input = random_tensor(rng, &[side, side, cin], 1.0);
    let coeffs = random_tensor(rng, &[outs], 1.0);
    (net, input, coeffs)
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-5;
    let objective = |net: &Sequential, x: &Tensor, c: &Tensor| -> f64 {
        net.forward(x).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut configs, mut compared, mut worst) = (0, 0usize, 0.0f64);
    let mut failures = Vec::new();
    while configs < 25 {
        let (mut net, input, coeffs) = tiny_net(&mut rng);
        let mut tape = Tape::new();
        net.forward_traced(&input, &mut tape).unwrap();
        let near_kink = net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Act(Activation::Relu)))
            .any(|(i, _)| tape.values()[i].data().iter().any(|v| v.abs() < 1e-3));
        if near_kink {
            continue;
        }
        configs += 1;
        let mut grads = Gradients::zeros_like(&net);
        let input_grads = net.backward(&tape, &coeffs, &mut grads, true).unwrap();
        let mut compare = |analytic: f64, numeric: f64, what: String| {
            compared += 1;
            let err = (analytic - numeric).abs();
            let tol = 1e-6_f64.max(1e-4 * analytic.abs().max(numeric.abs()));
            worst = worst.max(err / tol);
            if err > tol {
                failures.push(what);
            }
        };
        for li in 0..net.layers.len() {
            if net.layers[li].params().is_none() {
                continue;
            }
            for which in 0..2 {
                let n = if which == 0 { grads.layers[li].0.len() } else { grads.layers[li].1.len() };
                for k in 0..n {
                    let nudge = |net: &mut Sequential, d: f64| {
                        let (w, b) = net.layers[li].params_mut().unwrap();
                        (if which == 0 { w } else { b }).data_mut()[k] += d;
                    };
                    nudge(&mut net, H);
                    let up = objective(&net, &input, &coeffs);
                    nudge(&mut net, -2.0 * H);
                    let down = objective(&net, &input, &coeffs);
                    nudge(&mut net, H);
                    let analytic = if which == 0 { grads.layers[li].0[k] } else { grads.layers[li].1[k] };
                    compare(analytic, (up - down) / (2.0 * H), format!("config {configs} layer {li}"));
                }
            }
        }
        let gin = input_grads[0].as_ref().unwrap();
        for k in 0..input.len() {
            let mut x = input.clone();
            x.data_mut()[k] += H;
            let up = objective(&net, &x, &coeffs);
            x.data_mut()[k] -= 2.0 * H;
            let down = objective(&net, &x, &coeffs);
            compare(gin.data()[k], (up - down) / (2.0 * H), format!("config {configs} input"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{configs} configurations, {compared} derivatives, worst error {worst:.3} of tolerance, {} mismatches",
            failures.len()
        ),
    )
}

fn requantize_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let acc: i32 = if i % 2 == 0 { rng.random_range(-(1 << 24)..(1 << 24)) } else { rng.random() };
        let m = rng.random_range(1e-7..1.0);
        let zp: i8 = rng.random();
        let exact = ((acc as f64 * m).round() + zp as f64).clamp(-128.0, 127.0);
        let got = requantize(acc, &FixedMultiplier::new(m).unwrap(), zp) as f64;
        worst = worst.max((got - exact).abs());
    }
    outcome(worst <= 1.0, format!("10000 pairs, max deviation {worst} LSB"))
}

type DependentCheck = fn(&Trained) -> Outcome;

struct Trained {
    split: SplitDataset,
    model: FloatModel,
    quant: QuantModel,
}

fn train_reference() -> Trained {
    let mut windows = Vec::new();
    let mut id = 0;
    for name in ["oval", "maze"] {
        let world = SimWorld::builtin(name).unwrap();
        for seed in 0..2 {
            let cfg = RunConfig { seconds: 90.0, seed, noise: NoiseConfig::DATASET, ..Default::default() };
            let run = run_closed_loop(&world, &mut ExpertPolicy::default(), &cfg).unwrap();
            windows.extend(build_windows(&run.to_recording(), id, Rotation::R0).unwrap());
            id += 1;
        }
    }
    let split = shuffle_split(windows, 7, DEFAULT_SPLIT, true).unwrap();
    let cfg = TrainConfig { epochs: 15, seed: 7, ..TrainConfig::default() };
    let (model, _) = train(&FloatModel::init(7), &split, &cfg).unwrap();
    let quant = calibrate(&model, &split.train).unwrap();
    Trained { split, model, quant }
}

fn quantization_fidelity(t: &Trained) -> Outcome {
    let f = fidelity_report(&t.model, &t.quant, &t.split.test).unwrap();
    let (s, th) = (f.steering_correlation.unwrap_or(f64::NAN), f.throttle_correlation.unwrap_or(f64::NAN));
    let originals = t.split.train.iter().filter(|w| !w.provenance.flipped).count();
    outcome(
        originals >= 2000 && s >= 0.99 && th >= 0.99,
        format!(
            "trained on {originals} expert windows ({} with flips), float vs int8 Pearson on {} test windows: steering {s:.5}, throttle {th:.5}",
            t.split.train.len(),
            t.split.test.len()
        ),
    )
}

fn held_out(t: &Trained) -> tinynav_core::eval::EvalReport {
    let truth: Vec<_> = t.split.test.iter().map(|w| w.label).collect();
    eval_report(&evaluate(&t.model, &t.split.test).unwrap().predictions, &truth).unwrap()
}

fn prediction_correlation(t: &Trained) -> Outcome {
    let r = held_out(t);
    let (s, th) = (r.steering.pearson_r.unwrap_or(f64::NAN), r.throttle.pearson_r.unwrap_or(f64::NAN));
    outcome(s >= 0.6 && th >= 0.6, format!("held-out Pearson r: steering {s:.3}, throttle {th:.3}"))
}

fn distribution_matching(t: &Trained) -> Outcome {
    let r = held_out(t);
    let (s, th) = (r.steering.distribution.overlap, r.throttle.distribution.overlap);
    outcome(s >= 0.7 && th >= 0.7, format!("held-out OVL: steering {s:.3}, throttle {th:.3}"))
}

fn closed_loop_laps(t: &Trained) -> Outcome {
    let cfg = RunConfig { seconds: 300.0, seed: 1, ..Default::default() };
    let oval = run_closed_loop(&SimWorld::builtin("oval").unwrap(), &mut ModelPolicy::new(&t.quant), &cfg).unwrap();
    let maze = run_closed_loop(&SimWorld::builtin("maze").unwrap(), &mut ModelPolicy::new(&t.quant), &cfg).unwrap();
    outcome(
        oval.laps >= 3 && oval.collisions == 0 && maze.laps >= 1 && maze.collisions <= 2,
        format!(
            "int8 over 300 s: oval {} laps / {} collisions, maze {} laps / {} contacts",
            oval.laps, oval.collisions, maze.laps, maze.collisions
        ),
    )
}

fn throttle_modulation(t: &Trained) -> Outcome {
    let world = SimWorld::builtin("deadend").unwrap();
    let (x0, _, x1, _) = world.bounds();
    let length = x1 - x0;
    let cfg = RunConfig { seconds: 30.0, seed: 1, ..Default::default() };
    let run = run_closed_loop(&world, &mut ModelPolicy::new(&t.quant), &cfg).unwrap();
    let (mut near, mut straight) = (Vec::new(), Vec::new());
    // The first 19 ticks only fill the window and carry no prediction.
    for e in run.log.iter().skip(19) {
        let x = e.pose.x - x0;
        let to_end = x.min(length - x);
        if to_end < 0.5 {
            near.push(e.command.throttle);
        } else if to_end > 1.0 {
            straight.push(e.command.throttle);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (n, s) = (mean(&near), mean(&straight));
    outcome(
        !near.is_empty() && !straight.is_empty() && s - n >= 0.15,
        format!(
            "mean throttle {s:.3} on straights ({} ticks) vs {n:.3} within 0.5 m of the end ({} ticks)",
            straight.len(),
            near.len()
        ),
    )
}

fn real_time(t: &Trained) -> Outcome {
    let report = bench(&t.quant, Engine::Int8, 1000).unwrap();
    let window = bench_window();
    let start = Instant::now();
    let mut n = 0;
    while start.elapsed() < Duration::from_secs(2) {
        std::hint::black_box(t.quant.infer(&window).unwrap());
        n += 1;
    }
    let sustained = n as f64 / start.elapsed().as_secs_f64();
    outcome(
        report.median_us < 50_000.0 && sustained >= 20.0,
        format!(
            "int8 median {:.1} us, p95 {:.1} us over {} runs; sustained {sustained:.0} inferences/s",
            report.median_us, report.p95_us, report.iterations
        ),
    )
}

fn gradcam_properties(t: &Trained) -> Outcome {
    let (mut nonneg, mut zeroed, mut invariant, mut cases) = (true, true, true, 0);
    let windows: Vec<&FrameWindow> = t.split.test.iter().step_by(t.split.test.len() / 25).take(25).collect();
    for (head, layer) in [(Head::Steering, 5), (Head::Throttle, 6)] {
        let mut zero = t.model.clone();
        zero.param_layers_mut()[layer].0.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let mut scaled = t.model.clone();
        scaled.param_layers_mut()[layer].0.data_mut().iter_mut().for_each(|w| *w *= 3.5);
        for w in &windows {
            cases += 1;
            let x = w.to_tensor();
            let base = gradcam(&t.model, &x, head).unwrap();
            nonneg &= base.raw.iter().chain(&base.upsampled).all(|v| *v >= 0.0);
            nonneg &= base.upsampled.iter().all(|v| *v <= 1.0 + 1e-12);
            let z = gradcam(&zero, &x, head).unwrap();
            zeroed &= z.raw.iter().chain(&z.upsampled).all(|v| *v == 0.0);
            let s = gradcam(&scaled, &x, head).unwrap();
            invariant &= base.upsampled.iter().zip(&s.upsampled).all(|(a, b)| (a - b).abs() <= 1e-9);
            invariant &= base.raw.iter().zip(&s.raw).all(|(a, b)| (3.5 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
    outcome(
        nonneg && zeroed && invariant,
        format!("{cases} maps: non-negative {nonneg}, zero head gives zero map {zeroed}, invariant under x3.5 head scaling {invariant}"),
    )
}

fn window_semantics() -> Outcome {
    let mut ring = WindowRing::new();
    for v in 1..=25u32 {
        ring.push(v);
    }
    let ordered = ring.snapshot().unwrap() == (6..=25).collect::<Vec<_>>();

    let buf = Arc::new(SharedWindowBuffer::new());
    let stop = Arc::new(AtomicBool::new(false));
    let producer = {
        let (buf, stop) = (Arc::clone(&buf), Arc::clone(&stop));
        std::thread::spawn(move || {
            let mut v = 0u64;
            while !stop.load(Ordering::Relaxed) {
                v += 1;
                buf.push(v);
                if v % 64 == 0 {
                    std::thread::yield_now();
                }
            }
            v
        })
    };
    let consumers: Vec<_> = (0..2)
        .map(|_| {
            let (buf, stop) = (Arc::clone(&buf), Arc::clone(&stop));
            std::thread::spawn(move || {
                let (mut good, mut bad, mut last_end) = (0u64, 0u64, 0u64);
                while !stop.load(Ordering::Relaxed) {
                    let Ok(snap) = buf.snapshot() else { continue };
                    let vals: Vec<u64> = snap.iter().map(|a| **a).collect();
                    let coherent =
                        vals.len() == 20 && vals.windows(2).all(|w| w[1] == w[0] + 1) && vals[19] >= last_end;
                    if coherent {
                        good += 1;
                        last_end = vals[19];
                    } else {
                        bad += 1;
                    }
                }
                (good, bad)
            })
        })
        .collect();
    std::thread::sleep(Duration::from_secs(10));
    stop.store(true, Ordering::Relaxed);
    let pushed = producer.join().unwrap();
    let (good, bad) = consumers.into_iter().map(|c| c.join().unwrap()).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    outcome(
        ordered && bad == 0 && good > 0,
        format!(
            "1..25 gives 6..25: {ordered}; 10 s stress: {pushed} pushes, {good} coherent snapshots, {bad} incoherent"
        ),
    )
}

fn main() {
    let mut run = Run { failures: 0 };
    let t0 = Instant::now();
    run.check("parameter budget", parameter_budget);
    run.check("protocol conformance", protocol_conformance);
    run.check("gradient correctness", gradient_correctness);
    run.check("requantize bound", requantize_bound);

    let t = Instant::now();
    let trained = catch_unwind(train_reference);
    match &trained {
        Ok(tr) => println!(
            "     (reference model: {} train / {} test windows, trained and calibrated in {:.1} s)",
            tr.split.train.len(),
            tr.split.test.len(),
            t.elapsed().as_secs_f64()
        ),
        Err(_) => println!("     (reference model training panicked)"),
    }
    let dependent: [(&str, DependentCheck); 7] = [
        ("quantization fidelity", quantization_fidelity),
        ("prediction correlation", prediction_correlation),
        ("distribution matching", distribution_matching),
        ("closed-loop laps", closed_loop_laps),
        ("throttle modulation", throttle_modulation),
        ("real-time budget", real_time),
        ("grad-cam properties", gradcam_properties),
    ];
    for (name, f) in dependent {
        match &trained {
            Ok(tr) => run.check(name, || f(tr)),
            Err(_) => run.check(name, || outcome(false, "no reference model")),
        }
    }
    run.check("window semantics", window_semantics);

    println!("{} of 12 criteria failed in {:.1} s", run.failures, t0.elapsed().as_secs_f64());
    if run.failures > 0 {
        std::process::exit(1);
    }
}
