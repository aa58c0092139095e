// SPDX-License-Identifier: MIT OR Apache-2.0

//! Curate from two clusters of sparse codes given a few seeds from one of
//! them, then measure how much the selection depends on the number of seeds.

use domainfit::curation::{curate, seed_sweep, EmbeddingIndex, SeedSet};
use domainfit::model::Hookpoint;
use domainfit::rng::RngStream;
use domainfit::saliency::Selector;
use domainfit::Result;

fn main() -> Result<()> {
    let mut rng = RngStream::new(0);
    let angle = 60f32.to_radians();
    let centers = [[1.0, 0.0], [angle.cos(), angle.sin()]];
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for i in 0..400 {
        let c = i % 2;
        let noise = rng.normal(&[2], 0.12);
        let scale = 0.5 + rng.next_f32();
        rows.push(
            (0..2)
                .map(|k| (scale * (centers[c][k] + noise.data()[k])).max(0.0))
                .collect::<Vec<f32>>(),
        );
        ids.push(format!("{}-{i:03}", ["a", "b"][c]));
    }
    let index = EmbeddingIndex {
        ids,
        codes: domainfit::Tensor::from_rows(&rows),
        sae_id: "toy".into(),
        hookpoint: Hookpoint::residual(0),
        selector: Selector::Jacobian,
    };
    let seeds = SeedSet {
        domain: "a".into(),
        samples: index.ids.iter().filter(|id| id.starts_with('a')).take(8).cloned().collect(),
    };

    let set = curate(&index, &seeds, 100)?;
    let hits = set.entries.iter().filter(|e| e.id.starts_with('a')).count();
    println!("top-100 precision {:.2}", hits as f32 / set.entries.len() as f32);
    for e in set.entries.iter().take(3) {
        println!("  {} {:.4}", e.id, e.score);
    }

    for row in seed_sweep(&index, &seeds, &[1, 2, 4, 8], &[50, 100], 1)? {
        println!("seeds {} M {:>3}: overlap with the 8-seed selection {:.2}", row.seeds, row.selected, row.overlap);
    }
    Ok(())
}
