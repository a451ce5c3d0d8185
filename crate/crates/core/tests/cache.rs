//! Lives in its own binary because it sets a process-wide environment variable.

use ign::datasets::{Generator, CACHE_ENV};

#[test]
fn generated_datasets_are_cached_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(CACHE_ENV, dir.path());
    let g = Generator::Levy { n: 50, dim: 2 };
    let first = g.load_or_generate(0.05, 11).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 1);
    let second = g.load_or_generate(0.05, 11).unwrap();
    assert_eq!(first.x, second.x);
    assert_eq!(first.y, second.y);
    assert_eq!(second, g.generate(0.05, 11).unwrap());

    let blobs = Generator::Blobs {
        n: 30,
        classes: 3,
        separation: 4.0,
    };
    let a = blobs.load_or_generate(0.0, 1).unwrap();
    let b = blobs.load_or_generate(0.0, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}
