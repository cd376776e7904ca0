use airslice_core::harness::{builtin_scenario, load_scenario, run_scenario};
use airslice_core::topology::ClientId;

fn main() {
    let text = builtin_scenario("sec81_shortlived").unwrap();
    let out = run_scenario(&load_scenario(text, &[]).unwrap(), None).unwrap();
    for c in out.metrics.conn_stats.iter().filter(|c| c.client == ClientId(1)) {
        println!(
            "{} srtt={:?} delivered={} retx={} rtos={} first_rtos_s={:?}",
            c.label,
            c.srtt_ms.map(|v| (v * 10.0).round() / 10.0),
            c.delivered_bytes,
            c.retransmits,
            c.rto_count,
            c.first_rtos_us.iter().map(|t| t / 1_000_000).collect::<Vec<_>>()
        );
    }
    let n1: Vec<f64> = out.metrics.responses.iter().filter(|r| r.client == ClientId(1)).map(|r| r.t_s).collect();
    println!("client1 completions at: {:?}", n1.iter().map(|t| t.round()).collect::<Vec<_>>());
    println!("unfinished: {:?}", out.metrics.unfinished_requests);
}
