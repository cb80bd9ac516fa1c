use civsf_py::{config_hash, default_config, mask, reference_tables, run};

#[test]
fn default_config_hashes_like_empty_text() {
    assert_eq!(config_hash(&default_config()).unwrap(), config_hash("").unwrap());
}

#[test]
fn mask_columns_keep_visible_share() {
    let rows = mask(6, 16, 0.5, 9).unwrap();
    for g in 0..16 {
        assert_eq!(rows.iter().filter(|r| !r[g]).count(), 3);
    }
}

#[test]
fn tables_and_cli_are_reachable() {
    assert!(reference_tables().contains("0.0179"));
    assert_eq!(run(vec!["teleport".into()]), 2);
}
