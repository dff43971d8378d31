use genrec::data::{load_features_dir, load_interactions, synth_dataset, BipartiteGraph, Modality, Split, SynthSpec};

fn spec() -> SynthSpec {
    SynthSpec {
        users: 40,
        items: 70,
        density: 0.12,
        seed: 5,
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_dataset_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, bank, _) = synth_dataset(&spec()).unwrap();
    let path = dir.path().join("interactions.tsv");
    dataset.write(&path).unwrap();
    bank.write(dir.path()).unwrap();

    let back = load_interactions(&path, 5).unwrap();
    assert_eq!(back.user_ids(), dataset.user_ids());
    assert_eq!(back.item_ids(), dataset.item_ids());
    assert_eq!(back.interactions(), dataset.interactions());
    assert_eq!(back.stats(), dataset.stats());

    let fb = load_features_dir(dir.path(), back.n_items()).unwrap();
    for m in Modality::ALL {
        let (a, b) = (bank.get(m).unwrap(), fb.get(m).unwrap());
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
}

#[test]
fn splits_are_disjoint_and_cover_every_interaction() {
    let (dataset, _, _) = synth_dataset(&spec()).unwrap();
    let mut total = 0;
    for u in 0..dataset.n_users() {
        let parts = [Split::Train, Split::Valid, Split::Test].map(|s| dataset.items_in(u, s).to_vec());
        total += parts.iter().map(Vec::len).sum::<usize>();
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(parts[a].iter().all(|i| !parts[b].contains(i)));
            }
        }
    }
    assert_eq!(total, dataset.interactions().len());
}

#[test]
fn graph_matches_training_interactions() {
    let (dataset, _, _) = synth_dataset(&spec()).unwrap();
    let g = BipartiteGraph::build(&dataset);
    for u in 0..dataset.n_users() {
        assert_eq!(g.user_neighbors(u), dataset.train_items(u));
        for &i in g.user_neighbors(u) {
            assert!(g.item_neighbors(i).contains(&u));
        }
    }
}

#[test]
fn malformed_interaction_file_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tsv");
    std::fs::write(&path, "u1\ti1\nu2 i2\n").unwrap();
    let err = load_interactions(&path, 0).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
}
