//! Record a small convolutional network on a tape, run the reverse pass and
//! confirm the gradients against central differences.

use maestro::numerics::{finite_difference_check, Array, ConvLayer, ConvRank, GradCheckConfig, ParamStore, Tape};

fn main() -> maestro::Result<()> {
    let mut store = ParamStore::new();
    let conv = ConvLayer::new(&mut store, "conv", ConvRank::Bev, 3, 4, 3, 1)?;
    let input = Array::from_fn(&[3, 6, 6], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);

    let net = |tape: &mut Tape, store: &ParamStore| {
        let x = tape.constant(input.clone());
        let h = conv.forward(tape, store, x)?;
        let h = tape.sigmoid(h)?;
        let sq = tape.mul(h, h)?;
        tape.sum(sq)
    };

    let mut tape = Tape::new();
    let loss = net(&mut tape, &store)?;
    println!("loss {:.6} over {} recorded ops", tape.value(loss).item(), tape.op_names().len());
    tape.backward_scalar(loss, &mut store)?;
    for (_, p) in store.iter() {
        println!("  d/d{:<12} |g|max {:.4e}", p.name, p.grad.max_abs());
    }

    let report = finite_difference_check(net, &mut store, GradCheckConfig::default())?;
    for p in &report.params {
        println!("  {:<14} worst rel {:.2e} abs {:.2e}", p.name, p.max_rel_error, p.max_abs_error);
    }
    println!("gradient check {}", if report.pass { "passed" } else { "FAILED" });
    Ok(())
}
