//! The built-in scenario library, embedded at compile time.

const FIG3: &str = include_str!("../../scenarios/fig3_2ap4sta_lan.toml");
const SEC72: &str = include_str!("../../scenarios/sec72_3ap6sta_lan.toml");
const SEC73: &str = include_str!("../../scenarios/sec73_mixed_lan_wan.toml");
const SEC74: &str = include_str!("../../scenarios/sec74_mobility.toml");
const SEC81: &str = include_str!("../../scenarios/sec81_shortlived.toml");
const SEC82: &str = include_str!("../../scenarios/sec82_ping.toml");
const TABLE2: &str = include_str!("../../scenarios/table2_sweep.toml");
const TABLE34: &str = include_str!("../../scenarios/table3_table4_sweep.toml");
const RATE_ADAPT: &str = include_str!("../../scenarios/rate_adapt.toml");

const NAMES: [(&str, &str); 9] = [
    ("fig3_2ap4sta_lan", FIG3),
    ("sec72_3ap6sta_lan", SEC72),
    ("sec73_mixed_lan_wan", SEC73),
    ("sec74_mobility", SEC74),
    ("sec81_shortlived", SEC81),
    ("sec82_ping", SEC82),
    ("table2_sweep", TABLE2),
    ("table3_table4_sweep", TABLE34),
    ("rate_adapt", RATE_ADAPT),
];

pub fn builtin_names() -> Vec<&'static str> {
    NAMES.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    NAMES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Scan-report datagrams matching the mobility scenario's scripted moves,
/// for replay through the `infer` front end.
pub fn sec74_scan_replay() -> &'static str {
    "SCAN 1 5000\n1 -38\n2 -80\n\n\
     SCAN 2 5100\n1 -40\n2 -78\n\n\
     SCAN 3 5200\n2 -39\n1 -79\n\n\
     SCAN 4 5300\n2 -41\n1 -81\n\n\
     SCAN 2 150000\n1 -62\n2 -54\n\n\
     SCAN 3 350000\n2 -70\n1 -58\n\n\
     SCAN 4 350100\n2 -68\n1 -60\n\n\
     SCAN 2 550000\n1 -40\n2 -78\n\n\
     SCAN 3 550100\n2 -39\n1 -79\n\n\
     SCAN 4 550200\n2 -41\n1 -81\n\n"
}
