#![allow(dead_code)]

/// Fifty in-scope molecules covering rings, aromatics, heteroatoms,
/// halogens, stereo bonds and branching.
pub const MOLECULES: [&str; 50] = [
    "CCO",
    "CCCCCC",
    "CC(C)C",
    "CC(C)(C)C",
    "C1CCCCC1",
    "c1ccccc1",
    "Cc1ccccc1",
    "c1ccc2ccccc2c1",
    "c1ccncc1",
    "c1ccoc1",
    "c1ccsc1",
    "c1cc[nH]c1",
    "CC(=O)C",
    "CC(=O)O",
    "CCOC(=O)C",
    "CCN",
    "CCN(CC)CC",
    "CC#N",
    "C#C",
    "C=CC=C",
    "C/C=C/C",
    "C/C=C\\C",
    "ClC(Cl)Cl",
    "FC(F)(F)C(F)F",
    "BrCCBr",
    "ICC",
    "CS(=O)C",
    "CCS",
    "CSC",
    "OCCO",
    "OC(=O)CC(=O)O",
    "NC(=O)C",
    "CC(C)O",
    "CCCCO",
    "CCCCCCCCO",
    "CCCCCCCCCCCC",
    "Oc1ccccc1",
    "Nc1ccccc1",
    "O=Cc1ccccc1",
    "Clc1ccccc1Cl",
    "C1CCOC1",
    "C1COCCO1",
    "C1CC1",
    "C1=CCCC=C1",
    "CC1=CC(=O)CC(C)(C)C1",
    "CC(C)CC(C)(C)C",
    "COC(C)(C)C",
    "O=C1CCCCC1",
    "CN1CCCC1=O",
    "C[C@@H](O)CC",
];
