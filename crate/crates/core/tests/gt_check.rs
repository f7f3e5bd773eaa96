//! Ground-truth wiring diagnostic: encoding with the true content block
//! should sit near the analytic loss floor, far below the constant-encoder
//! ceiling. Ignored by default; a calibration aid, not a correctness gate.

use mmcl_core::latent::{sample_batch, LatentSpec};
use mmcl_core::objective::{sym_info_nce, ObjectiveConfig, Similarity};
use ndarray::s;

#[test]
#[ignore]
fn ground_truth_content_encoder_diagnostic() {
    let spec = LatentSpec::independent(5, 5, 5, 5, 0.75);
    let batch = sample_batch(&spec, 1024, 7).unwrap();
    let cfg = ObjectiveConfig {
        temperature: 1.0,
        similarity: Similarity::NegEuclidean,
        batch_size: 1024,
    };
    for scale in [1.0, 2.0, 4.0, 8.0] {
        let e1 = batch.content.mapv(|v| v * scale);
        let (loss, _, _) = sym_info_nce(&e1, &e1, &cfg).unwrap();
        println!("scale {scale}: content-encoder loss = {loss:.4}");
    }
    // what a half-learned encoder might output: 3 content + 2 style dims
    let z1 = batch.z1();
    let z2 = batch.z2();
    let mixed1 = z1.slice(s![.., 2..7]).to_owned();
    let mixed2 = z2.slice(s![.., 2..7]).to_owned();
    let (loss, _, _) = sym_info_nce(&mixed1, &mixed2, &cfg).unwrap();
    println!("mixed 3c+2s encoder: loss = {loss:.4}");
    let zeros = ndarray::Array2::zeros((1024, 5));
    let (loss_lnk, _, _) = sym_info_nce(&zeros, &zeros, &cfg).unwrap();
    println!(
        "constant encoder: loss = {loss_lnk:.4} (ln K = {:.4})",
        (1024f64).ln()
    );
}
