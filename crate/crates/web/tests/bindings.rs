use gemma2_web::{mask_grid_text, param_count_text, render_chat_text, soft_cap_values};

#[test]
fn local_grid_shows_a_band() {
    let grid = mask_grid_text("local", 6, 2).unwrap();
    assert_eq!(grid, "#.....\n##....\n.##...\n..##..\n...##.\n....##\n");
}

#[test]
fn global_grid_is_lower_triangular() {
    let grid = mask_grid_text("global", 4, 1).unwrap();
    assert_eq!(grid, "#...\n##..\n###.\n####\n");
}

#[test]
fn grid_rejects_bad_input() {
    assert!(mask_grid_text("sideways", 4, 2).is_err());
    assert!(mask_grid_text("local", 0, 2).is_err());
    assert!(mask_grid_text("local", 65, 2).is_err());
    assert!(mask_grid_text("local", 4, 0).is_err());
}

#[test]
fn soft_cap_curve_stays_inside_the_cap() {
    let v = soft_cap_values(30.0, -500.0, 500.0, 101).unwrap();
    assert_eq!(v.len(), 202);
    assert_eq!(v[0], -500.0);
    assert_eq!(v[200], 500.0);
    assert!(v.chunks(2).all(|p| p[1].abs() < 30.0));
    assert!(soft_cap_values(0.0, -1.0, 1.0, 10).is_err());
    assert!(soft_cap_values(1.0, 1.0, -1.0, 10).is_err());
}

#[test]
fn chat_render_matches_the_template() {
    let out = render_chat_text("user: Knock knock.\nmodel: Who's there?\n", false).unwrap();
    assert_eq!(out, "<bos><start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\nWho's there?<end_of_turn><eos>");
    let open = render_chat_text("user: Hi\n", true).unwrap();
    assert!(open.ends_with("<start_of_turn>model\n"));
    assert!(render_chat_text("bot: hi\n", false).is_err());
    assert!(render_chat_text("", false).is_err());
}

#[test]
fn param_counts_of_the_smallest_preset() {
    let json = param_count_text("2B").unwrap();
    assert_eq!(json, r#"{"embedding":590118912,"non_embedding":2024517888}"#);
    assert!(param_count_text("3B").is_err());
}
