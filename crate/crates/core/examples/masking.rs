//! Tokenizes one channel and draws the three mask strategies, printing
//! which tokens each one hides on the (t, k) plane of the first antenna
//! patch.

use mcakd::csi_data::{generate_channel, ChannelGenConfig};
use mcakd::tokenize_mask::{make_mask, patchify, unpatchify, MaskSpec, PatchSpec, TokenGrid};

fn main() -> mcakd::Result<()> {
    let gen = ChannelGenConfig::default();
    let h = generate_channel(&gen, 3)?;
    let spec = PatchSpec::new(2, 2, 2);
    let grid = TokenGrid::new(spec, h.dims())?;
    let tokens = patchify::<f32>(&h, spec)?;
    println!(
        "tensor {:?} -> {} tokens of width {}",
        h.dims(),
        tokens.tokens.rows,
        tokens.tokens.cols
    );
    assert_eq!(unpatchify(&tokens, spec, h.dims())?, h);

    let (gt, gk, _) = (h.dims().0 / spec.p_t, h.dims().1 / spec.p_k, 0);
    for mask_spec in [
        MaskSpec::Random { ratio: 0.5 },
        MaskSpec::Time { boundary: 8 },
        MaskSpec::Frequency { boundary: 4 },
    ] {
        let m = make_mask(mask_spec, &grid, 11)?;
        println!("\n{mask_spec:?}: {} visible, {} masked", m.visible_idx.len(), m.masked_idx.len());
        let flags = m.masked_flags();
        for k in (0..gk).rev() {
            let row: String = (0..gt)
                .map(|t| if flags[grid.token_index((t, k, 0))] { '#' } else { '.' })
                .collect();
            println!("  k{k:<2} {row}");
        }
    }
    Ok(())
}
