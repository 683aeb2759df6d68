//! Regenerates `assets/textured.png` from the procedural generator.

use splatperc::image_io::save_image;
use splatperc::testimage::{textured, TEXTURED_SIDE};

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "crates/core/assets/textured.png".into());
    save_image(&textured(TEXTURED_SIDE), &path).expect("write png");
    println!("wrote {path}");
}
