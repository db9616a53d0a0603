//! Frozen skeleton tables for the five worked designs. Labels are compared as
//! sorted abbreviation lists and coefficients as exact rationals.

mod common;

use common::tables::*;
use multitier::anova::Basis;

#[test]
fn meatloaf_tasting_table() {
    check_table("meatloaves", Basis::Spectral, MEATLOAVES).unwrap();
}

#[test]
fn cotton_spinning_table() {
    check_table("cotton", Basis::Spectral, COTTON).unwrap();
}

#[test]
fn cotton_spinning_canonical_table() {
    check_table("cotton", Basis::Canonical, COTTON_CANONICAL).unwrap();
}

#[test]
fn two_phase_sensory_table() {
    check_table("sensory", Basis::Spectral, SENSORY).unwrap();
}

#[test]
fn wheat_quality_table() {
    check_table("wheat", Basis::Spectral, WHEAT).unwrap();
}

#[test]
fn small_nonorthogonal_table() {
    check_table("small", Basis::Spectral, SMALL).unwrap();
}

#[test]
fn meatloaf_session_component_only_as_a_sum() {
    check_meatloaf_estimability().unwrap();
}

#[test]
fn cotton_estimability_by_basis() {
    check_cotton_estimability().unwrap();
}
