//! The model checker against the published concurrency-set tables.

use std::collections::BTreeSet;
use std::time::Instant;

use flac::checker::fsa::{check_nonblocking, explore_fsa, FsaProtocol, FsaSpec, LocalState};
use LocalState::*;

mod common;
use common::table;

#[test]
fn tables_reproduced_for_two_and_three_participants() {
    for p in [FsaProtocol::FlacFf, FsaProtocol::FlacCf] {
        for n in [2, 3] {
            let t = Instant::now();
            let e = explore_fsa(&FsaSpec::for_protocol(p), n).unwrap();
            eprintln!("{p} n={n}: {} states in {:?}", e.census.reachable, t.elapsed());
            assert_eq!(e.table.cells, table(p), "{p} n={n}\n{}", e.table.to_text());
            assert_eq!(e.census.stuck, 0);
        }
    }
}

#[test]
fn cited_cells() {
    let ff = explore_fsa(&FsaSpec::flac_ff(), 2).unwrap();
    assert!(!ff.table.get(C, A));
    assert!(ff.table.get(Q, W));
    let cf = explore_fsa(&FsaSpec::flac_cf(), 2).unwrap();
    assert_eq!(cf.table.row(C), BTreeSet::from([Tc, C]));
}

#[test]
fn nonblocking_theorem() {
    let ff = FsaSpec::flac_ff();
    let cf = FsaSpec::flac_cf();
    let eff = explore_fsa(&ff, 2).unwrap();
    let ecf = explore_fsa(&cf, 2).unwrap();
    assert!(!check_nonblocking(&eff.table, &ff.committable));
    assert!(check_nonblocking(&ecf.table, &cf.committable));
    // The exploration's own committable sets give the same answers.
    assert!(!check_nonblocking(&eff.full, &eff.derived_committable));
    assert!(check_nonblocking(&ecf.full, &ecf.derived_committable));
}

#[test]
fn r_rows_reported_separately() {
    let ff = explore_fsa(&FsaSpec::flac_ff(), 2).unwrap();
    assert_eq!(ff.r_row, BTreeSet::from([Q, W, R, A]));
    let cf = explore_fsa(&FsaSpec::flac_cf(), 2).unwrap();
    assert_eq!(cf.r_row, BTreeSet::from([W, R, Tc]));
    assert_eq!(cf.derived_committable, BTreeSet::from([R, Tc, C]));
}
