//! Capacity-counter stand-in for the baseband unit pool.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pdu::{codes, Label, Pdu, PduType, ACK_OK};

#[derive(Debug, Clone, PartialEq)]
pub struct BbuConfig {
    /// Bandwidth units available in total.
    pub capacity: u32,
    /// Probability that an allocation is refused (ack = 7).
    pub failure_rate: f64,
    /// Probability that an allocation is silently dropped (never acked).
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for BbuConfig {
    fn default() -> Self {
        BbuConfig {
            capacity: 100,
            failure_rate: 0.0,
            drop_rate: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BbuAllocation {
    pub bandwidth_units: u32,
}

#[derive(Debug)]
pub struct BbuManager {
    config: BbuConfig,
    available: u32,
    allocations: HashMap<String, BbuAllocation>,
    /// Units allocated minus units released, per correlation key.
    balance: HashMap<String, i64>,
    rng: ChaCha8Rng,
}

impl BbuManager {
    pub fn new(config: BbuConfig) -> Self {
        BbuManager {
            available: config.capacity,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            allocations: HashMap::new(),
            balance: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.config.capacity
    }

    pub fn available(&self) -> u32 {
        self.available
    }

    pub fn balance(&self, key: &str) -> i64 {
        self.balance.get(key).copied().unwrap_or(0)
    }

    pub fn allocation(&self, key: &str) -> Option<BbuAllocation> {
        self.allocations.get(key).copied()
    }

    /// Answers one Manage_BBU request. `None` means the request is dropped.
    ///
    /// Verbs (the `code` binding): `allocate` (default) takes
    /// `bandwidth_units` under the `user_data` key; `release` returns whatever
    /// the key holds and always succeeds.
    pub fn handle_manage_bbu(&mut self, pdu: &Pdu) -> Option<Pdu> {
        let reply = Pdu::new(PduType::ManageBbu, pdu.request_id);
        if pdu.pdu_type != PduType::ManageBbu || pdu.ack != 0 {
            return Some(reply.with_ack(codes::UNSUPPORTED));
        }
        let key = pdu.get_str(Label::UserData).unwrap_or("").to_string();
        match pdu.get_str(Label::Code).unwrap_or("allocate") {
            "allocate" => {
                let units = match pdu.get_str(Label::BandwidthUnits).map(str::parse::<u32>) {
                    None => 1,
                    Some(Ok(u)) => u,
                    Some(Err(_)) => return Some(reply.with_ack(codes::BBU_FAILURE)),
                };
                if self.config.drop_rate > 0.0 && self.rng.random_bool(self.config.drop_rate) {
                    return None;
                }
                if self.config.failure_rate > 0.0
                    && self.rng.random_bool(self.config.failure_rate)
                {
                    return Some(reply.with_ack(codes::BBU_FAILURE));
                }
                if let Some(existing) = self.allocations.get(&key) {
                    return Some(
                        reply
                            .with_ack(ACK_OK)
                            .with_label(Label::BandwidthUnits, existing.bandwidth_units.to_string()),
                    );
                }
                if units > self.available {
                    return Some(reply.with_ack(codes::BBU_FAILURE));
                }
                self.available -= units;
                self.allocations.insert(
                    key.clone(),
                    BbuAllocation {
                        bandwidth_units: units,
                    },
                );
                *self.balance.entry(key).or_default() += units as i64;
                Some(
                    reply
                        .with_ack(ACK_OK)
                        .with_label(Label::BandwidthUnits, units.to_string()),
                )
            }
            "release" => {
                if let Some(a) = self.allocations.remove(&key) {
                    self.available += a.bandwidth_units;
                    *self.balance.entry(key).or_default() -= a.bandwidth_units as i64;
                }
                Some(reply.with_ack(ACK_OK))
            }
            _ => Some(reply.with_ack(codes::UNSUPPORTED)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alloc(id: u32, key: &str, units: u32) -> Pdu {
        Pdu::new(PduType::ManageBbu, id)
            .with_label(Label::Code, "allocate")
            .with_label(Label::BandwidthUnits, units.to_string())
            .with_label(Label::UserData, key)
    }

    fn release(id: u32, key: &str) -> Pdu {
        Pdu::new(PduType::ManageBbu, id)
            .with_label(Label::Code, "release")
            .with_label(Label::UserData, key)
    }

    #[test]
    fn allocate_and_release() {
        let mut bbu = BbuManager::new(BbuConfig::default());
        let r = bbu.handle_manage_bbu(&alloc(1, "a", 30)).unwrap();
        assert_eq!((r.request_id, r.ack), (1, ACK_OK));
        assert_eq!(bbu.available(), 70);
        // Idempotent per key.
        bbu.handle_manage_bbu(&alloc(2, "a", 30)).unwrap();
        assert_eq!(bbu.available(), 70);
        assert_eq!(bbu.handle_manage_bbu(&release(3, "a")).unwrap().ack, ACK_OK);
        assert_eq!(bbu.available(), 100);
        assert_eq!(bbu.balance("a"), 0);
        // Releasing an unknown key is a no-op.
        assert_eq!(bbu.handle_manage_bbu(&release(4, "zz")).unwrap().ack, ACK_OK);
        assert_eq!(bbu.available(), 100);
    }

    #[test]
    fn over_capacity_refused() {
        let mut bbu = BbuManager::new(BbuConfig {
            capacity: 5,
            ..BbuConfig::default()
        });
        let r = bbu.handle_manage_bbu(&alloc(1, "a", 6)).unwrap();
        assert_eq!(r.ack, codes::BBU_FAILURE);
        assert_eq!(bbu.available(), 5);
    }

    #[test]
    fn injections() {
        let mut failing = BbuManager::new(BbuConfig {
            failure_rate: 1.0,
            ..BbuConfig::default()
        });
        assert_eq!(
            failing.handle_manage_bbu(&alloc(1, "a", 1)).unwrap().ack,
            codes::BBU_FAILURE
        );
        let mut silent = BbuManager::new(BbuConfig {
            drop_rate: 1.0,
            ..BbuConfig::default()
        });
        assert!(silent.handle_manage_bbu(&alloc(1, "a", 1)).is_none());
        assert_eq!(silent.available(), 100);
        // Releases are never dropped.
        assert!(silent.handle_manage_bbu(&release(2, "a")).is_some());
    }
}
