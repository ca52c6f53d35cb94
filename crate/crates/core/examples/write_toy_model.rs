//! Regenerates `assets/toy_body.json` from the generator in `mvpose::toy`.
fn main() {
    let file = mvpose::toy::toy_model_file();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_body.json");
    let text = serde_json::to_string(&file).expect("serialize toy model");
    std::fs::write(path, text + "\n").expect("write toy model");
    println!("wrote {path}");
}
