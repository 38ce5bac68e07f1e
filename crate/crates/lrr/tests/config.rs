use lrr::config::{load_config, ConfigError, RunConfig, KEYS};

#[test]
fn empty_text_gives_defaults() {
    assert_eq!(RunConfig::parse_text("").unwrap(), RunConfig::default());
    assert_eq!(RunConfig::parse_text("# only a comment\n\n").unwrap(), RunConfig::default());
}

#[test]
fn values_parse_with_comments_and_spacing() {
    let c = RunConfig::parse_text("seed = 7\n  lr=0.002  # faster\nattack = pgd\nskip_threshold = 0.8\nlanguage = false\n").unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.lr, 0.002);
    assert_eq!(c.attack, "pgd");
    assert_eq!(c.skip_threshold, Some(0.8));
    assert!(!c.language);
}

#[test]
fn unknown_keys_and_bad_values_name_the_key() {
    assert_eq!(RunConfig::parse_text("sede = 1").unwrap_err(), ConfigError::UnknownKey("sede".into()));
    match RunConfig::parse_text("batch = eight").unwrap_err() {
        ConfigError::BadValue { key, .. } => assert_eq!(key, "batch"),
        e => panic!("{:?}", e),
    }
    assert!(matches!(RunConfig::parse_text("just words"), Err(ConfigError::Syntax { line: 1, .. })));
}

#[test]
fn flags_override_file_values() {
    let path = std::env::temp_dir().join(format!("lrr-cfg-{}.conf", std::process::id()));
    std::fs::write(&path, "seed = 3\nbatch = 4\n").unwrap();
    let c = load_config(Some(&path), &[("seed".into(), "9".into())]).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.batch, 4);
    assert!(matches!(load_config(Some(std::path::Path::new("/nonexistent/x.conf")), &[]), Err(ConfigError::Read(_))));
}

#[test]
fn rendered_config_parses_back() {
    let mut c = RunConfig::default();
    c.set("skip_threshold", "0.75").unwrap();
    c.set("bank", "banks/a.emb").unwrap();
    c.set("lr", "0.0003").unwrap();
    let text = c.render();
    assert_eq!(RunConfig::parse_text(&text).unwrap(), c);
    for k in KEYS {
        assert!(text.contains(k), "{} missing", k);
    }
}
