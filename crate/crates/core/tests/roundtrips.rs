use motionrag::corpus::{
    generate_corpus, read_frames, synthesize_video, write_frames, Corpus, CorpusManifest,
    RenderDims,
};
use motionrag::retrieval::{HashingEmbedder, RetrievalIndex};
use motionrag::Error;

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_generation_is_byte_identical_and_loads_back() {
    let dims = RenderDims::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_corpus(7, 10, dims, a.path()).unwrap();
    let mb = generate_corpus(7, 10, dims, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let corpus = Corpus::open(a.path()).unwrap();
    assert_eq!(corpus.manifest, ma);
    for i in 0..10 {
        let v = corpus.video(i).unwrap();
        let fresh = synthesize_video(7, i, dims).unwrap();
        assert_eq!(v.frames, fresh.frames.mapv(|x| x as f32 as f64));
        assert_eq!(
            (v.motion, v.appearance, &v.caption),
            (fresh.motion, fresh.appearance, &fresh.caption)
        );
    }
    let reread = CorpusManifest::read(&a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reread, ma);
}

#[test]
fn damaged_corpora_are_rejected() {
    let dims = RenderDims::default();
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(2, 3, dims, dir.path()).unwrap();
    let frames = dir.path().join(&m.entries[1].frames);
    let bytes = std::fs::read(&frames).unwrap();
    std::fs::write(&frames, &bytes[..bytes.len() - 4]).unwrap();
    match Corpus::open(dir.path()) {
        Err(Error::FrameShapeMismatch { id, .. }) => assert_eq!(id, m.entries[1].id),
        other => panic!("expected FrameShapeMismatch, got {other:?}"),
    }
    assert!(matches!(
        read_frames(&frames, "v00001", dims),
        Err(Error::FrameShapeMismatch { .. })
    ));

    let manifest = dir.path().join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = lines[1];
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    assert!(matches!(
        CorpusManifest::read(&manifest),
        Err(Error::ManifestCorrupt(_))
    ));
}

#[test]
fn frames_files_round_trip_through_f32() {
    let dir = tempfile::tempdir().unwrap();
    let dims = RenderDims::default();
    let v = synthesize_video(3, 1, dims).unwrap();
    let path = dir.path().join("v.mrv");
    write_frames(&path, &v.frames).unwrap();
    let back = read_frames(&path, "v", dims).unwrap();
    write_frames(&dir.path().join("w.mrv"), &back).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("w.mrv")).unwrap()
    );
}

#[test]
fn index_files_round_trip_bit_exactly() {
    let dims = RenderDims::default();
    let videos: Vec<_> = (0..100)
        .map(|i| synthesize_video(5, i, dims).unwrap())
        .collect();
    let index = RetrievalIndex::from_captions(
        videos.iter().map(|v| (v.id.as_str(), v.caption.as_str())),
        &HashingEmbedder::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.mri");
    index.save(&path).unwrap();
    let back = RetrievalIndex::load(&path).unwrap();
    assert_eq!(back.to_bytes(), index.to_bytes());
    assert_eq!(back.records(), index.records());
    assert!(matches!(
        RetrievalIndex::load(dir.path().join("missing.mri")),
        Err(Error::Io { .. })
    ));
}
