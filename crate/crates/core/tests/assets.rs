//! The bundled cost-table files must stay in lockstep with the built-in
//! defaults they document.

use std::path::Path;

use mpcmin::cost::CostTable;

fn asset(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets/cost_tables")
        .join(name);
    std::fs::read_to_string(path).expect("asset exists")
}

#[test]
fn default_asset_matches_builtin_table() {
    let parsed = CostTable::from_json(&asset("default.json")).unwrap();
    assert_eq!(parsed, CostTable::default());
}

#[test]
fn plain2pc_profile_is_multiplication_dominated() {
    let parsed = CostTable::from_json(&asset("plain2pc.json")).unwrap();
    for backend in ["dealer2pc", "rep3pc", "plain2pc"] {
        assert!(parsed.open_bytes(backend) >= 1024.0);
    }
    // non-arithmetic prices match the default table
    assert_eq!(parsed.nonarith, CostTable::default().nonarith);
}
