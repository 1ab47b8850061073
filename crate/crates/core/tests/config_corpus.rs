use std::fs;

use collabonet::corpus::{parse_conll, write_conll, ParseOptions};
use collabonet::train::{RunConfig, TagScheme};
use collabonet::Tag;

const BIO: &str = "Aspirin\tB-Chemical\ninduced\tO\nasthma\tO\n\nHigh\tO\nblood\tB-Chemical\nsugar\tI-Chemical\n\n";

fn write(dir: &std::path::Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn config_file_loads_datasets_relative_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "train.bio", &BIO.repeat(4));
    write(dir.path(), "test.bioes", "x\tS-Gene\ny\tO\n\n");
    write(
        dir.path(),
        "run.cfg",
        "# two datasets\nseed = 3\nbatch_size = 4\n\
         dataset.chem.train = train.bio\ndataset.chem.scheme = bio\ndataset.chem.dev_size = 2\ndataset.chem.type = chemical\n\
         dataset.gene.train = test.bioes\ndataset.gene.dev = test.bioes\ndataset.gene.test = test.bioes\ndataset.gene.type = gene-protein\n",
    );
    let cfg = RunConfig::from_file(&dir.path().join("run.cfg")).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.datasets.len(), 2);
    assert_eq!(cfg.datasets[0].scheme, TagScheme::Bio);
    let ds = cfg.load_datasets().unwrap();
    assert_eq!(ds[0].name, "chem");
    assert_eq!(ds[0].train.len(), 6);
    assert_eq!(ds[0].dev.len(), 2);
    assert_eq!(ds[0].train[0].tags, vec![Tag::S, Tag::O, Tag::O]);
    assert_eq!(ds[0].train[1].tags, vec![Tag::O, Tag::B, Tag::E]);
    assert_eq!(ds[0].entity_suffix.as_deref(), Some("Chemical"));
    assert_eq!(ds[1].test.len(), 1);
}

#[test]
fn config_errors_are_reported() {
    assert!(RunConfig::parse("sede = 3\n").is_err());
    assert!(RunConfig::parse("dropout_clwe = 1.0\n").is_err());
    assert!(RunConfig::parse("d_lstm = 0\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(RunConfig::from_file(&dir.path().join("missing.cfg")).is_err());
    write(dir.path(), "bad.cfg", "dataset.x.train = nope.conll\ndataset.x.dev_size = 1\n");
    let cfg = RunConfig::from_file(&dir.path().join("bad.cfg")).unwrap();
    assert!(cfg.load_datasets().is_err());
}

#[test]
fn invalid_bioes_file_is_rejected_when_declared_bioes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "t.conll", "a\tB-X\nb\tO\n\n");
    write(dir.path(), "c.cfg", "dataset.x.train = t.conll\ndataset.x.dev = t.conll\n");
    let cfg = RunConfig::from_file(&dir.path().join("c.cfg")).unwrap();
    assert!(cfg.load_datasets().is_err());
}

#[test]
fn conll_file_roundtrip_keeps_suffix() {
    let text = "IL-2\tB-Gene\ngene\tE-Gene\nis\tO\n\nx\tS-Gene\n\n";
    let corpus = parse_conll(text.as_bytes(), "mem", &ParseOptions::default()).unwrap();
    assert_eq!(corpus.sentences.len(), 2);
    assert_eq!(write_conll(&corpus.sentences, corpus.entity_suffix.as_deref()), text);
}
