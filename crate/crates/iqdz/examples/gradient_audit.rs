//! Audit the gradient engine: per-parameter comparison of analytic
//! backpropagation against central finite differences, on a toy graph and
//! on the full training loss.
//!
//!     cargo run --release --example gradient_audit

use iqdz::graph::Graph;
use iqdz::model::CodecModel;
use iqdz::rng::Rng;
use iqdz::synth::training_patches;
use iqdz::tensor::Tensor;
use iqdz::training::{TrainConfig, TrainGraph};

fn main() -> iqdz::Result<()> {
    // A small standalone graph, including a non-differentiable floor node
    // that the audit flags and skips.
    let mut g = Graph::new();
    let x = g.input(&[2, 3]);
    let w = g.param("w", Tensor::new(&[3, 2], vec![0.4, -0.2, 0.8, 0.1, -0.5, 0.3])?);
    let b = g.param("b", Tensor::from_vec(vec![0.05, -0.1]));
    let dead = g.param("unreachable", Tensor::scalar(1.25));
    let h = g.affine(x, w, b);
    let t = g.tanh(h);
    let fl = g.floor(dead);
    let fl2 = g.square(fl);
    let m = g.mean(t);
    let out = g.add(m, fl2);
    g.set_output(out);
    let input = Tensor::new(&[2, 3], vec![0.2, -0.6, 1.1, 0.9, 0.33, -0.4])?;
    let report = g.grad_check(&[input], 1e-6)?;
    println!("toy graph:");
    for e in &report.entries {
        if e.excluded {
            println!("  {:<12} excluded (only reaches the output through floor)", e.name);
        } else {
            println!("  {:<12} max rel err {:.3e}", e.name, e.max_rel_err);
        }
    }
    for n in &report.excluded_nodes {
        println!("  non-differentiable: {n}");
    }
    println!("  => {}", if report.pass { "PASS" } else { "FAIL" });

    // The full loss with frozen noise.
    let cfg = TrainConfig {
        patch_size: 4,
        latent_dim: 4,
        hidden_layers: 1,
        ..TrainConfig::default()
    };
    let model = CodecModel::init(4, 1, 4, 1, 3, 11);
    let patches = training_patches(1000, 4, 1, 11);
    let batch_size = 3;
    let mut data = Vec::new();
    for p in patches.iter().take(batch_size) {
        data.extend_from_slice(p);
    }
    let batch = Tensor::new(&[batch_size, 16], data)?;
    let mut rng = Rng::new(2);
    let noise = Tensor::new(&[batch_size, 4], cfg.noise().sample(batch_size * 4, &mut rng))?;
    let mut tg = TrainGraph::build(&model, &cfg, batch_size);
    let report = tg.graph.grad_check(&TrainGraph::inputs(&batch, &noise), 1e-5)?;
    println!(
        "full loss: {} parameters audited, worst rel err {:.3e} => {}",
        report.entries.len(),
        report.worst(),
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}
