//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use flac::checker::fsa::FsaProtocol;

/// FLAC_FF table, rows and columns q, w, a, c.
pub const FF_TABLE: [[bool; 4]; 4] = [
    [true, true, true, false],
    [true, true, true, true],
    [true, true, true, false],
    [false, true, false, true],
];

/// FLAC_CF table, rows and columns q, w, ta, tc, a, c.
pub const CF_TABLE: [[bool; 6]; 6] = [
    [true, true, true, false, false, false],
    [true, true, true, true, false, false],
    [true, true, true, false, true, false],
    [false, true, false, true, false, true],
    [false, false, true, false, true, false],
    [false, false, false, true, false, true],
];

pub fn table(p: FsaProtocol) -> Vec<Vec<bool>> {
    match p {
        FsaProtocol::FlacFf => FF_TABLE.iter().map(|r| r.to_vec()).collect(),
        FsaProtocol::FlacCf => CF_TABLE.iter().map(|r| r.to_vec()).collect(),
    }
}
