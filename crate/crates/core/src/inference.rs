//! Client-assisted link dependence inference.
//!
//! Clients periodically scan their channel and report the beacon RSSI of
//! every co-channel AP they hear. A client is declared dependent on another
//! AP's clients when its own AP's beacon is not sufficiently stronger than
//! the foreign AP's beacon: in linear power terms, own/foreign < p_th.
//! RSSI arrives in dBm, so the test is rssi_own - rssi_foreign <
//! 10*log10(p_th) (about -5.23 dB at p_th = 0.3).

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ApId, ClientId, NetworkDescription};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("scan report from unknown client {0}")]
    UnknownClient(ClientId),
    #[error("scan report from client {0} has no measurements")]
    EmptyReport(ClientId),
    #[error("scan report from client {0} is missing its own AP {1}")]
    MissingOwnAp(ClientId, ApId),
    #[error("scan report from client {0} carries non-finite RSSI")]
    NonFiniteRssi(ClientId),
    #[error("p_th must be in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("report_ttl must be positive")]
    BadTtl,
    #[error("calibration needs at least one non-interfering scenario")]
    NoCalibrationData,
    #[error("malformed scan datagram at line {line}: {reason}")]
    MalformedDatagram { line: usize, reason: String },
}

/// One scan report: beacon RSSI per heard AP, as seen by one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub client: ClientId,
    pub timestamp_ms: u64,
    /// (AP, beacon RSSI in dBm).
    pub measurements: Vec<(ApId, f64)>,
}

impl ScanReport {
    pub fn rssi_of(&self, ap: ApId) -> Option<f64> {
        self.measurements
            .iter()
            .find(|(a, _)| *a == ap)
            .map(|(_, r)| *r)
    }
}

/// Tunables of the inference heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Linear beacon power ratio below which links are declared dependent.
    pub p_th: f64,
    /// Reports older than this (relative to the newest seen) are ignored.
    pub report_ttl_ms: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            p_th: 0.3,
            report_ttl_ms: 10_000,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.p_th > 0.0 && self.p_th <= 1.0) {
            return Err(InferenceError::BadThreshold(self.p_th));
        }
        if self.report_ttl_ms == 0 {
            return Err(InferenceError::BadTtl);
        }
        Ok(())
    }
}

/// Latest report per client. Single writer; reads are pure.
#[derive(Debug, Clone, Default)]
pub struct InferenceState {
    reports: BTreeMap<ClientId, ScanReport>,
    newest_ms: u64,
}

impl InferenceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn report_count(&self) -> usize {
        self.reports.len()
    }

    pub fn latest(&self, client: ClientId) -> Option<&ScanReport> {
        self.reports.get(&client)
    }

    /// Validates and stores a report, replacing any older one from the same
    /// client. Rejected reports leave the state unchanged.
    pub fn ingest(
        &mut self,
        net: &NetworkDescription,
        report: ScanReport,
    ) -> Result<(), InferenceError> {
        let Some(client) = net.client(report.client) else {
            return Err(InferenceError::UnknownClient(report.client));
        };
        if report.measurements.is_empty() {
            return Err(InferenceError::EmptyReport(report.client));
        }
        if report
            .measurements
            .iter()
            .any(|&(_, rssi)| !rssi.is_finite())
        {
            return Err(InferenceError::NonFiniteRssi(report.client));
        }
        if report.rssi_of(client.associated_ap).is_none() {
            return Err(InferenceError::MissingOwnAp(
                report.client,
                client.associated_ap,
            ));
        }
        if let Some(existing) = self.reports.get(&report.client) {
            if existing.timestamp_ms > report.timestamp_ms {
                // Stale duplicate; latest wins.
                return Ok(());
            }
        }
        self.newest_ms = self.newest_ms.max(report.timestamp_ms);
        self.reports.insert(report.client, report);
        Ok(())
    }

    fn fresh_reports<'a>(&'a self, cfg: &InferenceConfig) -> impl Iterator<Item = &'a ScanReport> {
        let horizon = self.newest_ms.saturating_sub(cfg.report_ttl_ms);
        self.reports.values().filter(move |r| {
            r.timestamp_ms >= horizon
        })
    }
}

/// dBm difference equivalent of the linear ratio threshold.
fn threshold_db(p_th: f64) -> f64 {
    10.0 * p_th.log10()
}

/// Linear power ratio of two dBm values, 10^((a-b)/10).
pub fn linear_ratio(a_dbm: f64, b_dbm: f64) -> f64 {
    10f64.powf((a_dbm - b_dbm) / 10.0)
}

/// Runs the relative-beacon-strength test over all fresh reports and returns
/// the implied client-pair dependencies as unordered pairs.
///
/// For reporting client j (associated with AP m on channel ch) and each
/// foreign co-channel AP k in j's report: if own/foreign beacon power ratio
/// is below p_th, j is declared dependent on every client of AP k. Clients
/// without a fresh report contribute no edges.
pub fn infer_type3_edges(
    state: &InferenceState,
    net: &NetworkDescription,
    cfg: &InferenceConfig,
) -> BTreeSet<(ClientId, ClientId)> {
    let mut edges = BTreeSet::new();
    let limit_db = threshold_db(cfg.p_th);
    for report in state.fresh_reports(cfg) {
        let Some(client) = net.client(report.client) else {
            continue;
        };
        let own_ap = client.associated_ap;
        let Some(own_rssi) = report.rssi_of(own_ap) else {
            continue;
        };
        let Some(channel) = net.ap(own_ap).map(|a| a.channel) else {
            continue;
        };
        for &(foreign_ap, foreign_rssi) in &report.measurements {
            if foreign_ap == own_ap {
                continue;
            }
            let Some(ap) = net.ap(foreign_ap) else {
                continue;
            };
            if ap.channel != channel {
                continue;
            }
            if own_rssi - foreign_rssi < limit_db {
                for other in net.clients_of(foreign_ap) {
                    if other != report.client {
                        let pair = if other < report.client {
                            (other, report.client)
                        } else {
                            (report.client, other)
                        };
                        edges.insert(pair);
                    }
                }
            }
        }
    }
    edges
}

/// One calibration placement: the four beacon RSSI values of a two-client,
/// two-AP layout plus whether simultaneous downloads showed interference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScenario {
    /// RSSI of AP1's beacon at client 1, dBm.
    pub p11_dbm: f64,
    /// RSSI of AP2's beacon at client 1, dBm.
    pub p21_dbm: f64,
    /// RSSI of AP2's beacon at client 2, dBm.
    pub p22_dbm: f64,
    /// RSSI of AP1's beacon at client 2, dBm.
    pub p12_dbm: f64,
    /// Whether standalone vs simultaneous throughput showed interference.
    pub interfered: bool,
}

/// Averages min(own/foreign) linear ratios over the non-interfering
/// placements; those ratios bound how small the ratio can get while the
/// links stay independent.
pub fn calibrate_pth(scenarios: &[CalibrationScenario]) -> Result<f64, InferenceError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scenarios {
        if s.interfered {
            continue;
        }
        let r1 = linear_ratio(s.p11_dbm, s.p21_dbm);
        let r2 = linear_ratio(s.p22_dbm, s.p12_dbm);
        sum += r1.min(r2);
        n += 1;
    }
    if n == 0 {
        return Err(InferenceError::NoCalibrationData);
    }
    Ok(sum / n as f64)
}

/// Text datagram form of a scan report:
///
/// ```text
/// SCAN <client_id> <timestamp_ms>
/// <ap_id> <rssi_dBm>
/// ...
/// <blank line>
/// ```
pub fn format_datagram(report: &ScanReport) -> String {
    let mut out = format!("SCAN {} {}\n", report.client, report.timestamp_ms);
    for (ap, rssi) in &report.measurements {
        out.push_str(&format!("{} {}\n", ap, rssi));
    }
    out.push('\n');
    out
}

/// Parses a stream of datagrams. Malformed datagrams are skipped and counted;
/// `warnings` receives one diagnostic per skip.
pub fn parse_datagrams(text: &str, warnings: &mut Vec<String>) -> Vec<ScanReport> {
    let mut reports = Vec::new();
    let mut current: Option<ScanReport> = None;
    let mut skip_block = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            if let Some(r) = current.take() {
                if r.measurements.is_empty() {
                    warnings.push(format!(
                        "line {}: datagram for client {} has no measurements",
                        idx + 1,
                        r.client
                    ));
                } else {
                    reports.push(r);
                }
            }
            skip_block = false;
            continue;
        }
        if skip_block {
            continue;
        }
        if let Some(rest) = line.strip_prefix("SCAN ") {
            if let Some(r) = current.take() {
                if r.measurements.is_empty() {
                    warnings.push(format!(
                        "line {}: datagram for client {} has no measurements",
                        idx + 1,
                        r.client
                    ));
                } else {
                    reports.push(r);
                }
            }
            let mut parts = rest.split_whitespace();
            let client = parts.next().and_then(|s| s.parse::<u32>().ok());
            let ts = parts.next().and_then(|s| s.parse::<u64>().ok());
            match (client, ts) {
                (Some(c), Some(t)) if parts.next().is_none() => {
                    current = Some(ScanReport {
                        client: ClientId(c),
                        timestamp_ms: t,
                        measurements: Vec::new(),
                    });
                }
                _ => {
                    warnings.push(format!("line {}: bad SCAN header '{}'", idx + 1, line));
                    skip_block = true;
                }
            }
        } else if let Some(report) = current.as_mut() {
            let mut parts = line.split_whitespace();
            let ap = parts.next().and_then(|s| s.parse::<u32>().ok());
            let rssi = parts.next().and_then(|s| s.parse::<f64>().ok());
            match (ap, rssi) {
                (Some(a), Some(r)) if parts.next().is_none() => {
                    report.measurements.push((ApId(a), r));
                }
                _ => {
                    warnings.push(format!(
                        "line {}: bad measurement line '{}'",
                        idx + 1,
                        line
                    ));
                }
            }
        } else {
            warnings.push(format!(
                "line {}: measurement outside a SCAN block: '{}'",
                idx + 1,
                line
            ));
        }
    }
    if let Some(r) = current.take() {
        if r.measurements.is_empty() {
            warnings.push(format!(
                "unterminated datagram for client {} has no measurements",
                r.client
            ));
        } else {
            reports.push(r);
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{ApRecord, ClientRecord, WanParams};

    fn c(id: u32) -> ClientId {
        ClientId(id)
    }

    fn net() -> NetworkDescription {
        NetworkDescription {
            aps: vec![
                ApRecord {
                    id: ApId(1),
                    channel: 11,
                    position: None,
                },
                ApRecord {
                    id: ApId(2),
                    channel: 11,
                    position: None,
                },
                ApRecord {
                    id: ApId(3),
                    channel: 6,
                    position: None,
                },
            ],
            clients: vec![
                ClientRecord {
                    id: c(1),
                    associated_ap: ApId(1),
                    phy_rate: 54.0,
                    position: None,
                },
                ClientRecord {
                    id: c(2),
                    associated_ap: ApId(2),
                    phy_rate: 54.0,
                    position: None,
                },
                ClientRecord {
                    id: c(3),
                    associated_ap: ApId(2),
                    phy_rate: 54.0,
                    position: None,
                },
            ],
            static_ap_conflicts: Default::default(),
            wan: WanParams {
                r_in: 8.0,
                r_out: 8.0,
                rtpd: 150.0,
            },
            proxy_enabled: false,
        }
    }

    fn report(client: u32, ts: u64, meas: &[(u32, f64)]) -> ScanReport {
        ScanReport {
            client: c(client),
            timestamp_ms: ts,
            measurements: meas.iter().map(|&(a, r)| (ApId(a), r)).collect(),
        }
    }

    #[test]
    fn latest_report_wins() {
        let net = net();
        let mut st = InferenceState::new();
        st.ingest(&net, report(1, 0, &[(1, -40.0)])).unwrap();
        st.ingest(&net, report(1, 1000, &[(1, -45.0)])).unwrap();
        assert_eq!(st.report_count(), 1);
        assert_eq!(st.latest(c(1)).unwrap().timestamp_ms, 1000);
        // Out-of-order older report does not clobber the newer one.
        st.ingest(&net, report(1, 500, &[(1, -60.0)])).unwrap();
        assert_eq!(st.latest(c(1)).unwrap().timestamp_ms, 1000);
    }

    #[test]
    fn report_missing_own_ap_is_rejected() {
        let net = net();
        let mut st = InferenceState::new();
        let err = st.ingest(&net, report(1, 0, &[(2, -40.0)]));
        assert!(matches!(err, Err(InferenceError::MissingOwnAp(_, _))));
        assert_eq!(st.report_count(), 0);
    }

    #[test]
    fn report_for_unknown_client_is_rejected() {
        let net = net();
        let mut st = InferenceState::new();
        assert!(matches!(
            st.ingest(&net, report(9, 0, &[(1, -40.0)])),
            Err(InferenceError::UnknownClient(_))
        ));
    }

    #[test]
    fn ratio_straddles_threshold() {
        // Client 1 on AP1: own -40, foreign -45 -> ratio 10^0.5 = 3.16 >= 0.3,
        // no edge from client 1's test. Client 2 on AP2: own -60, foreign
        // (AP1) -52 -> ratio 10^-0.8 = 0.158 < 0.3 -> edge (1, 2).
        let net = net();
        let cfg = InferenceConfig::default();
        let mut st = InferenceState::new();
        st.ingest(&net, report(1, 0, &[(1, -40.0), (2, -45.0)]))
            .unwrap();
        st.ingest(&net, report(2, 0, &[(2, -60.0), (1, -52.0)]))
            .unwrap();
        let edges = infer_type3_edges(&st, &net, &cfg);
        assert_eq!(edges.into_iter().collect::<Vec<_>>(), vec![(c(1), c(2))]);
    }

    #[test]
    fn own_ap_only_report_yields_no_edges() {
        let net = net();
        let cfg = InferenceConfig::default();
        let mut st = InferenceState::new();
        st.ingest(&net, report(1, 0, &[(1, -80.0)])).unwrap();
        assert!(infer_type3_edges(&st, &net, &cfg).is_empty());
    }

    #[test]
    fn different_channel_ap_is_skipped() {
        let net = net();
        let cfg = InferenceConfig::default();
        let mut st = InferenceState::new();
        // AP3 is on channel 6; even a much stronger beacon is ignored.
        st.ingest(&net, report(1, 0, &[(1, -80.0), (3, -20.0)]))
            .unwrap();
        assert!(infer_type3_edges(&st, &net, &cfg).is_empty());
    }

    #[test]
    fn stale_reports_are_dropped_at_read_time() {
        let net = net();
        let cfg = InferenceConfig {
            p_th: 0.3,
            report_ttl_ms: 10_000,
        };
        let mut st = InferenceState::new();
        st.ingest(&net, report(1, 0, &[(1, -80.0), (2, -40.0)]))
            .unwrap();
        let edges = infer_type3_edges(&st, &net, &cfg);
        assert_eq!(edges.len(), 2); // clients 2 and 3 are on AP2
        st.ingest(&net, report(2, 20_000, &[(2, -40.0)])).unwrap();
        // Client 1's report is now older than the TTL horizon.
        assert!(infer_type3_edges(&st, &net, &cfg).is_empty());
    }

    #[test]
    fn edge_set_is_monotone_in_pth() {
        let net = net();
        let mut st = InferenceState::new();
        st.ingest(&net, report(1, 0, &[(1, -50.0), (2, -47.0)]))
            .unwrap();
        st.ingest(&net, report(2, 0, &[(2, -55.0), (1, -54.0)]))
            .unwrap();
        let mut prev = BTreeSet::new();
        for pth in [0.05, 0.2, 0.5, 0.9, 1.0] {
            let cfg = InferenceConfig {
                p_th: pth,
                report_ttl_ms: 10_000,
            };
            let edges = infer_type3_edges(&st, &net, &cfg);
            assert!(prev.is_subset(&edges), "not monotone at p_th={pth}");
            prev = edges;
        }
    }

    #[test]
    fn calibration_examples() {
        // ratios 0.4 and 0.6 -> min 0.4
        let s1 = CalibrationScenario {
            p11_dbm: 10.0 * 0.4f64.log10(),
            p21_dbm: 0.0,
            p22_dbm: 10.0 * 0.6f64.log10(),
            p12_dbm: 0.0,
            interfered: false,
        };
        assert!((calibrate_pth(&[s1]).unwrap() - 0.4).abs() < 1e-12);

        let s2 = CalibrationScenario {
            p11_dbm: 10.0 * 0.2f64.log10(),
            p21_dbm: 0.0,
            p22_dbm: 0.0,
            p12_dbm: 0.0,
            interfered: false,
        };
        let s3 = CalibrationScenario {
            p11_dbm: 10.0 * 0.4f64.log10(),
            p21_dbm: 0.0,
            p22_dbm: 0.0,
            p12_dbm: 0.0,
            interfered: false,
        };
        assert!((calibrate_pth(&[s2, s3]).unwrap() - 0.3).abs() < 1e-12);

        let all_bad = CalibrationScenario {
            interfered: true,
            ..s1
        };
        assert!(matches!(
            calibrate_pth(&[all_bad]),
            Err(InferenceError::NoCalibrationData)
        ));
    }

    #[test]
    fn datagram_round_trip_and_malformed_lines() {
        let r = report(2, 1234, &[(1, -52.5), (2, -60.0)]);
        let text = format_datagram(&r);
        let mut warnings = Vec::new();
        let parsed = parse_datagrams(&text, &mut warnings);
        assert!(warnings.is_empty());
        assert_eq!(parsed, vec![r]);

        let bad = "SCAN x 5\n1 -40\n\nSCAN 1 5\n1 -40\nbogus line here\n\n";
        let mut warnings = Vec::new();
        let parsed = parse_datagrams(bad, &mut warnings);
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].client, c(1));
        assert_eq!(warnings.len(), 2);
    }
}
