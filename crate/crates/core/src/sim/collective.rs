//! Ring collectives under an α–β link model.

use crate::parallelism::CommOp;
use crate::platform::NetworkModel;

/// Seconds for `op` over `participants` arranged as a ring in the given order.
///
/// Each ring step moves one `payload / n` chunk over every ring link at once;
/// a step lasts as long as its slowest link. AllReduce takes `2(n-1)` steps
/// (reduce-scatter then all-gather), AllGather `n-1`.
pub fn collective_time(op: CommOp, payload_bytes: f64, participants: &[String], network: &NetworkModel) -> f64 {
    let n = participants.len();
    if n < 2 {
        return 0.0;
    }
    match op {
        CommOp::PointToPoint => network
            .link(&participants[0], &participants[1])
            .transfer_time(payload_bytes),
        CommOp::AllReduce | CommOp::AllGather => {
            let chunk = payload_bytes / n as f64;
            let step = (0..n)
                .map(|i| {
                    network
                        .link(&participants[i], &participants[(i + 1) % n])
                        .transfer_time(chunk)
                })
                .fold(0.0, f64::max);
            let steps = if op == CommOp::AllReduce { 2 * (n - 1) } else { n - 1 };
            steps as f64 * step
        }
    }
}

/// Bytes each participant puts on the wire.
pub fn wire_bytes_per_device(op: CommOp, payload_bytes: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let n = n as f64;
    match op {
        CommOp::AllReduce => 2.0 * (n - 1.0) / n * payload_bytes,
        CommOp::AllGather => (n - 1.0) / n * payload_bytes,
        CommOp::PointToPoint => payload_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn closed_forms() {
        let net = NetworkModel::uniform(1e9, 0.0);
        let t = collective_time(CommOp::AllReduce, 494.1e6, &ring(4), &net);
        assert!((t - 2.0 * 3.0 * (494.1e6 / 4.0) / 125e6).abs() < 1e-12);
        assert!((t - 5.9292).abs() < 1e-3);

        let lat = NetworkModel::uniform(1e9, 0.002);
        assert_eq!(collective_time(CommOp::PointToPoint, 0.0, &ring(2), &lat), 0.002);
        let v = 3e6;
        let t2 = collective_time(CommOp::AllReduce, v, &ring(2), &lat);
        assert!((t2 - (v / 125e6 + 2.0 * 0.002)).abs() < 1e-15);
        assert_eq!(collective_time(CommOp::AllGather, v, &ring(1), &lat), 0.0);
    }

    #[test]
    fn slowest_ring_link_sets_the_pace() {
        let net = NetworkModel::uniform(1e9, 0.0).with_link("d1", "d2", 1e8, 0.0);
        let t = collective_time(CommOp::AllGather, 3e6, &ring(3), &net);
        assert!((t - 2.0 * 1e6 / 12.5e6).abs() < 1e-12);
    }
}
