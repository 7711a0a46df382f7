//! Discount factors of the pretraining-task ablation table, recomputed from
//! its own entries.

use quadbev::evalkit::discount::{PRETRAIN_TABLE, PRETRAIN_TABLE_BASELINE};
use quadbev::evalkit::discount_factor;

fn main() -> quadbev::Result<()> {
    println!("{:>5} {:>10} {:>9} {:>9}", "row", "recomputed", "reported", "|diff|");
    for (name, row, reported) in PRETRAIN_TABLE {
        let d = discount_factor(&row, &PRETRAIN_TABLE_BASELINE)?;
        println!("{name:>5} {:>10.5} {reported:>9.3} {:>9.2e}", d.product, (d.product - reported).abs());
    }
    Ok(())
}
