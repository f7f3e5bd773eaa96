//! Timing probes for the training hot path. Ignored by default; run with
//! `cargo test --test perf_probe -- --ignored --nocapture` when tuning.

use std::time::Instant;

use mmcl_core::latent::{sample_batch_with_rng, LatentSpec};
use mmcl_core::mixing::sample_mixer;
use mmcl_core::nets::EncoderNet;
use mmcl_core::objective::{sym_info_nce, ObjectiveConfig, Similarity};
use mmcl_core::rng::numbered_rng;

#[test]
#[ignore]
fn hot_path_timings() {
    let k = 1024;
    let spec = LatentSpec::independent(5, 5, 5, 5, 0.75);
    let mixer_1 = sample_mixer(15, 3, 1e-3, 0.2, 1).unwrap();
    let mixer_2 = sample_mixer(15, 3, 1e-3, 0.2, 2).unwrap();
    let mut rng = numbered_rng(0, 5);
    let mut enc_rng = numbered_rng(0, 3);
    let mut enc1 = EncoderNet::mlp(15, 48, 7, 5, 0.2, false, &mut enc_rng).unwrap();
    let mut enc2 = EncoderNet::mlp(15, 48, 7, 5, 0.2, false, &mut enc_rng).unwrap();
    let cfg = ObjectiveConfig {
        temperature: 1.0,
        similarity: Similarity::NegEuclidean,
        batch_size: k,
    };

    let reps = 50;

    let t0 = Instant::now();
    let mut batches = Vec::new();
    for _ in 0..reps {
        batches.push(sample_batch_with_rng(&spec, k, &mut rng).unwrap());
    }
    println!("sampling:    {:6.2} ms/iter", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    let mut mixed = Vec::new();
    for b in &batches {
        let x1 = mixer_1.apply(&b.z1()).unwrap();
        let x2 = mixer_2.apply(&b.z2()).unwrap();
        mixed.push((x1, x2));
    }
    println!("mixing:      {:6.2} ms/iter", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    let mut encoded = Vec::new();
    for (x1, x2) in &mixed {
        let e1 = enc1.forward(x1).unwrap();
        let e2 = enc2.forward(x2).unwrap();
        encoded.push((e1, e2));
    }
    println!("enc fwd:     {:6.2} ms/iter", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    let mut grads = Vec::new();
    for (e1, e2) in &encoded {
        grads.push(sym_info_nce(e1, e2, &cfg).unwrap());
    }
    println!("objective:   {:6.2} ms/iter", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for (i, (x1, x2)) in mixed.iter().enumerate() {
        enc1.forward(x1).unwrap();
        let _g1 = enc1.backward(&grads[i].1).unwrap();
        enc2.forward(x2).unwrap();
        let _g2 = enc2.backward(&grads[i].2).unwrap();
    }
    println!("enc fwd+bwd: {:6.2} ms/iter", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

#[test]
#[ignore]
fn kernel_timings() {
    use mmcl_core::numeric::{column_sums_mirrored, exp_nonpos_slice, lane_max, lane_sum};
    let n = 1 << 20;
    let base: Vec<f64> = (0..n).map(|i| -((i % 977) as f64) * 0.013).collect();
    let reps = 30;

    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        let mut buf = base.clone();
        exp_nonpos_slice(&mut buf);
        sink += buf[17];
    }
    println!("exp 1M:      {:6.2} ms ({sink})", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut buf = base.clone();
        for v in buf.iter_mut() { *v = -(-*v).sqrt(); }
        sink += buf[17];
    }
    println!("sqrt 1M:     {:6.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut buf = base.clone();
        for v in buf.iter_mut() { *v *= 2.5 / (v.abs().max(1e-30)); }
        sink += buf[17];
    }
    println!("div 1M:      {:6.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut acc = 0.0;
        for i in 0..1024 { acc += lane_sum(&base[i * 1024..(i + 1) * 1024]); }
        sink += acc;
    }
    println!("lanesum 1M:  {:6.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut acc = 0.0;
        for i in 0..1024 { acc += lane_max(&base[i * 1024..(i + 1) * 1024]); }
        sink += acc;
    }
    println!("lanemax 1M:  {:6.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        sink += column_sums_mirrored(&base, 1024)[5];
    }
    println!("colsum 1M:   {:6.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let buf = base.clone();
        sink += buf[3];
    }
    println!("clone 8MB:   {:6.2} ms ({sink})", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // gemm (K x K) . (K x 5)
    let m = ndarray::Array2::<f64>::from_shape_vec((1024, 1024), base.clone()).unwrap();
    let b = ndarray::Array2::<f64>::from_shape_fn((1024, 5), |(i, j)| (i + j) as f64 * 0.001);
    let t0 = Instant::now();
    for _ in 0..reps {
        let c = m.dot(&b);
        sink += c[[0, 0]];
    }
    println!("skinny gemm: {:6.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
    let t0 = Instant::now();
    for _ in 0..reps {
        let c = m.t().dot(&b);
        sink += c[[0, 0]];
    }
    println!("skinny gemmT:{:6.2} ms ({sink})", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
