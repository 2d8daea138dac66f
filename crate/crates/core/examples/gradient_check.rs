//! Compares reverse-mode gradients with central differences for a single
//! primitive and for a whole transformer block.
//!
//!     cargo run --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2g::encoder::TransformerBlock;
use s2g::numerics::{check_param_gradients, finite_difference_check, ParamStore, Tensor, DEFAULT_EPSILON};

fn main() -> s2g::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let point = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let readout = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let err = finite_difference_check(
        |t, x| {
            let y = t.softmax(x)?;
            t.weighted_sum(y, &readout)
        },
        &point,
        DEFAULT_EPSILON,
    )?;
    println!("softmax: max relative error {err:.2e}");

    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "block", 8, 2, 16, 0.0, &mut rng);
    let x = store.add("input", Tensor::randn(&[5, 8], 1.0, &mut rng));
    let readout = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let err = check_param_gradients(
        &store,
        |t| {
            let h = t.param(x)?;
            let y = block.forward(t, h, None)?;
            t.weighted_sum(y, &readout)
        },
        DEFAULT_EPSILON,
        usize::MAX,
    )?;
    println!("transformer block ({} values): max relative error {err:.2e}", store.num_values());
    Ok(())
}
