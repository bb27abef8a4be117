use gfl_core::taskgen::{generate_family, save_family, FamilyConfig};

fn main() {
    let cfg = FamilyConfig {
        classes: 2,
        nodes_per_class_min: 5,
        nodes_per_class_max: 6,
        p_in: 0.5,
        p_out: 0.1,
        feature_dim: 4,
        mean_separation: 1.0,
        feature_noise: 0.25,
        rotate_per_graph: true,
        train_graphs: 2,
        val_graphs: 1,
        test_graphs: 1,
        seed: 2024,
    };
    let family = generate_family(&cfg).unwrap();
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_family.gfl");
    save_family(&family, &path).unwrap();
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path).unwrap().len()
    );
}
