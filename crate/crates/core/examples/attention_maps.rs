//! Prints attention weights of one head over a short sequence, with and
//! without the causal mask used by the decoder.

use caat_ehr::attention::{causal_mask, positional_encoding, sdpa};
use caat_ehr::tensor::{Graph, Tensor};

fn print_weights(title: &str, w: &Tensor) {
    println!("{title}");
    for r in 0..w.rows() {
        let cells: Vec<String> = w.row(r).iter().map(|p| format!("{p:.3}")).collect();
        println!("  t{r}: {}", cells.join(" "));
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = 5;
    let x = Tensor::from_rows(&[
        [1.0, 0.0, 0.5, 0.0],
        [0.9, 0.1, 0.4, 0.1],
        [0.0, 1.0, 0.0, 0.5],
        [0.1, 0.9, 0.1, 0.4],
        [1.0, 0.0, 0.5, 0.0],
    ])?;
    let pe = positional_encoding(t, 4);

    let mut g = Graph::new();
    let xv = g.constant(x);
    let pv = g.constant(pe);
    let with_pe = g.add(xv, pv)?;
    let open = sdpa(&mut g, xv, xv, xv, None)?;
    let positional = sdpa(&mut g, with_pe, with_pe, with_pe, None)?;
    let mask = causal_mask(t);
    let causal = sdpa(&mut g, xv, xv, xv, Some(&mask))?;

    print_weights("self-attention, no positions:", g.value(open.weights));
    print_weights("self-attention with sinusoidal positions:", g.value(positional.weights));
    print_weights("causal self-attention:", g.value(causal.weights));
    Ok(())
}
