use pimdcc_web::{breakdown_json, demo_text, tune_json};

#[test]
fn demo_mentions_every_stage() {
    let t = demo_text(0).unwrap();
    for needle in ["dimension sets", "pruning", "expand", "sparse"] {
        assert!(t.contains(needle), "missing {needle}");
    }
}

#[test]
fn tune_then_breakdown_agree() {
    let r: serde_json::Value =
        serde_json::from_str(&tune_json("red", "1,512", "hbm-pim-like", "exhaustive").unwrap())
            .unwrap();
    let draft = r["draft"].as_str().unwrap();
    let strategy = r["strategy"].as_str().unwrap();
    let c: serde_json::Value = serde_json::from_str(
        &breakdown_json("red", "1,512", "hbm-pim-like", draft, strategy).unwrap(),
    )
    .unwrap();
    assert_eq!(c["cost"]["t_total"], r["cost"]["t_total"]);
}

#[test]
fn bad_inputs_are_messages() {
    assert!(tune_json("red", "1,x", "hbm-pim-like", "exhaustive").is_err());
    assert!(tune_json("red", "1,64", "gpu", "exhaustive").is_err());
    assert!(breakdown_json("red", "1,64", "hbm-pim-like", "[[1,1]]", "expand").is_err());
}
