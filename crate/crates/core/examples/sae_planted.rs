// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train a sparse autoencoder on 1-sparse data built from eight hidden
//! directions and check that the decoder finds them.

use domainfit::curation::cosine;
use domainfit::rng::RngStream;
use domainfit::sae::{mean_l0, train_sae, SaeConfig};
use domainfit::{Result, Tensor};

fn main() -> Result<()> {
    let (dim, atoms, n) = (16, 8, 4096);
    let mut rng = RngStream::new(0);
    let dirs: Vec<Vec<f32>> = (0..atoms)
        .map(|_| {
            let v = rng.normal(&[dim], 1.0);
            let norm = v.norm();
            v.data().iter().map(|x| x / norm).collect()
        })
        .collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let k = rng.below(atoms);
            let c = 0.5 + 1.5 * rng.next_f32();
            dirs[k].iter().map(|x| c * x).collect()
        })
        .collect();
    let data = Tensor::from_rows(&rows);

    let mut cfg = SaeConfig::new(dim, 16);
    cfg.lambda = 1e-3;
    cfg.lr = 1e-3;
    cfg.batch_size = 64;
    cfg.steps = 3000;
    let (sae, trace) = train_sae(&cfg, &data)?;
    for (i, l) in trace.iter().enumerate().step_by(500) {
        println!("step {i:>4}: fvu {:.4} l1 {:.2} auxk {:.4}", l.fvu, l.l1, l.auxk);
    }

    let codes = sae.encode_batch(&data)?;
    println!("mean L0 {:.2}", mean_l0(&codes));
    for (k, d) in dirs.iter().enumerate() {
        let best = (0..16)
            .map(|j| cosine(sae.decoder.row(j), d))
            .fold(f32::NEG_INFINITY, f32::max);
        println!("direction {k}: best decoder cosine {best:.3}");
    }
    Ok(())
}
