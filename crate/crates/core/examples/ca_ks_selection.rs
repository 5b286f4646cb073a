//! Cross-attention knowledge selection on a toy pair of feature matrices:
//! scores every teacher dimension, keeps the top `D_s` in rank order and
//! compares the embedding loss with the first-`D_s` choice.

use mcakd::distill::{ca_ks_select, embedding_loss, CaKsInstance, CaKsState, SelectionMode};
use mcakd::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mcakd::Result<()> {
    let (seq, d_t, d_s) = (6, 12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e_s = Mat::<f64>::from_fn(seq, d_s, |_, _| rng.random_range(-1.0..1.0));
    let e_t = Mat::<f64>::from_fn(seq, d_t, |_, _| rng.random_range(-1.0..1.0));

    let ck = CaKsState::<f64>::init(d_t, d_s, 8, 2, CaKsInstance::Embedding, 5)?;
    let sel = ca_ks_select(&e_t, &e_s, &ck)?;
    println!("scores:");
    for (d, s) in sel.scores.iter().enumerate() {
        let rank = sel.indices.iter().position(|&i| i == d);
        println!("  dim {d:2} {s:+.4}{}", rank.map_or(String::new(), |r| format!("  rank {r}")));
    }
    println!("selected {:?}", sel.indices);
    println!("filtered teacher features {:?}", sel.filtered.shape());
    for mode in [SelectionMode::CaKs, SelectionMode::FirstDims] {
        let (l, _) = embedding_loss(&e_t, &e_s, &ck, mode)?;
        println!("{mode:?}: l_embed = {l:.4}");
    }
    Ok(())
}
