use fairembed_core::store::{load_captions, load_embeddings, save_captions, save_embeddings, split_set, Format, SplitFractions};
use fairembed_core::synth::{generate, SplitCounts, SynthSpec};
use fairembed_core::{Attribute, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Split};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { d: 24, context_dim: 4, counts: SplitCounts { train: 80, val: 10, test: 10 }, seed, ..SynthSpec::default() }
}

#[test]
fn jsonl_round_trip_is_lossless() {
    let data = generate(&small_spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.jsonl");
    save_embeddings(&data.images, &path, Format::Jsonl).unwrap();
    let back = load_embeddings(&path, Format::Jsonl).unwrap();
    assert_eq!(back, data.images);

    let cpath = dir.path().join("captions.jsonl");
    save_captions(&data.captions, &cpath).unwrap();
    assert_eq!(load_captions(&cpath).unwrap(), data.captions);
}

#[test]
fn packed_round_trip_keeps_vectors_and_labels() {
    let data = generate(&small_spec(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.packed");
    save_embeddings(&data.images, &path, Format::Packed).unwrap();
    let back = load_embeddings(&path, Format::Packed).unwrap();
    assert_eq!(back.d(), data.images.d());
    assert_eq!(back.vocabularies(), data.images.vocabularies());
    for (a, b) in back.records().iter().zip(data.images.records()) {
        assert_eq!(a.id, b.id);
        let as_f32: Vec<f64> = b.vector.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a.vector, as_f32, "vectors are stored as f32");
        for attr in Attribute::ALL {
            assert_eq!(a.label(attr), b.label(attr));
        }
    }
}

#[test]
fn truncated_packed_file_is_rejected() {
    let data = generate(&small_spec(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.packed");
    save_embeddings(&data.images, &path, Format::Packed).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_embeddings(&path, Format::Packed).is_err());
}

fn unsplit(n: usize) -> EmbeddingSet {
    let records = (0..n)
        .map(|i| EmbeddingRecord::new(format!("r{i:03}"), vec![i as f64 + 1.0, 1.0]).with_label(Attribute::Gender, i % 2))
        .collect();
    EmbeddingSet::new(2, vec![LabelVocabulary::fairface(Attribute::Gender)], "test", records).unwrap()
}

#[test]
fn split_depends_only_on_ids_labels_and_seed() {
    let set = unsplit(100);
    let a = split_set(&set, 11, SplitFractions::default()).unwrap();
    let b = split_set(&set, 11, SplitFractions::default()).unwrap();
    assert_eq!(a, b);

    // Input order does not matter.
    let mut reversed = set.records().to_vec();
    reversed.reverse();
    let c = split_set(&set.with_records(reversed).unwrap(), 11, SplitFractions::default()).unwrap();
    for r in a.records() {
        let other = c.records().iter().find(|o| o.id == r.id).unwrap();
        assert_eq!(r.split, other.split, "{}", r.id);
    }

    for split in Split::ALL {
        let per_label = a.subset(split).label_counts(Attribute::Gender).unwrap();
        let want = match split {
            Split::Train => 40,
            _ => 5,
        };
        assert_eq!(per_label, vec![want, want], "{split}");
    }
    assert_ne!(a, split_set(&set, 12, SplitFractions::default()).unwrap());
}
