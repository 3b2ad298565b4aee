//! Shared fixtures for the benchmarks.

use dablog_core::datagen::{generate_corpus, to_records, GrammarSpec};
use dablog_core::keyset::{build_vocabulary, Granularity, KeyDeriver};
use dablog_core::sequencer::assemble_sessions;
use dablog_core::{KeySet, Session};

/// Desk-grammar sessions keyed at K1 with a vocabulary built from the same corpus.
pub fn desk_sessions(seed: u64, normal: usize, abnormal: usize) -> (KeySet, Vec<Session>) {
    let recs = to_records(&generate_corpus(&GrammarSpec::desk(seed), normal, abnormal).expect("desk grammar"));
    let d = KeyDeriver::new(Granularity::K1);
    let ks = build_vocabulary(&recs, &d).expect("vocabulary");
    let sessions = assemble_sessions(&recs, &ks, &d).expect("sessions");
    (ks, sessions)
}

/// Training sessions and a labeled test corpus, both keyed with the training vocabulary.
pub fn desk_split(seed: u64, train: usize, normal: usize, abnormal: usize) -> (KeySet, Vec<Session>, Vec<Session>) {
    let (ks, train) = desk_sessions(seed, train, 0);
    let mut g = GrammarSpec::desk(seed);
    g.seed = seed.wrapping_add(1);
    let recs = to_records(&generate_corpus(&g, normal, abnormal).expect("desk grammar"));
    let test = assemble_sessions(&recs, &ks, &KeyDeriver::new(Granularity::K1)).expect("sessions");
    (ks, train, test)
}
