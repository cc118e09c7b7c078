//! Runs the desk-scale reference experiment and prints its numbers.

use std::time::Instant;

use lowprec::desk;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let out = desk::run()?;
    for r in &out.float_history.records {
        println!("float epoch {:2}  loss {:.4}  accuracy {:.4}  sparsity {:.4}", r.epoch, r.loss, r.accuracy, r.mean_sparsity);
    }
    for l in &out.allocation.layers {
        let w = l.weight_fmt.map_or("-".to_string(), |f| f.to_string());
        println!("{:6} weights {:6} activations {}", l.name, w, l.act_fmt);
    }
    let s = &out.one_shot;
    println!(
        "one-shot: float {:.4}  weights-only {:.4}  weights+activations {:.4}  codes within 4 bits {:.3}, 8 bits {:.3}",
        s.float_accuracy, s.weights_only_accuracy, s.full_accuracy, s.fits_4_bits, s.fits_8_bits
    );
    for (name, ft) in [("deterministic", &out.deterministic), ("stochastic", &out.stochastic)] {
        println!("fine-tuned ({name}): accuracy {:.4}  sparsity {:.4}", ft.accuracy, ft.sparsity.mean);
    }
    println!(
        "mean sparsity: float {:.4}  one-shot {:.4}",
        out.float_sparsity.mean, out.one_shot_sparsity.mean
    );
    println!("elapsed {:.1?}", t0.elapsed());
    Ok(())
}
