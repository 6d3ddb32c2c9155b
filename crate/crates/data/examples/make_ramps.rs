//! Writes the two-class 8x8 ramp dataset used by `configs/desk.json`.
//!
//! cargo run -p protoguide-data --example make_ramps -- data/ramps

use std::path::PathBuf;

use protoguide_data::synthetic::{write_dataset, Pattern};

fn main() {
    let root = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/ramps"));
    let classes = [("horizontal", Pattern::HorizontalRamp), ("vertical", Pattern::VerticalRamp)];
    if let Err(e) = write_dataset(&root, &classes, 60, 8, 11) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    println!("wrote 2 x 60 images to {}", root.display());
}
