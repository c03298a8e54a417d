//! Gas sweeps over panel sizes with repeated deployments and latency
//! statistics.

use std::io::{self, Write};
use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use super::latency::{DeployKind, LatencyModel};
use crate::congress::{congress_deploy_gas, CongressFactory};
use crate::cryptopipe::KeyPair;
use crate::datashare::{datashare_deploy_gas, ContractFactory, DataShareError, DepositBreakdown};
use crate::ledger::{Address, GasPolicy, Ledger, Role, Wei};
use crate::negotiation::{accept, propose, AgreementTerms, KeyDirectory, Margin};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("deployment failed at {voters} voters: {source}")]
    Deploy { voters: usize, source: DataShareError },
}

impl SweepError {
    pub fn code(&self) -> &'static str {
        match self {
            SweepError::InvalidRange(_) => "InvalidRange",
            SweepError::Deploy { .. } => "DeployFailed",
        }
    }
}

/// Summary of one sample set. Variance is the population variance; the
/// error bar is the distance from the mean to the minimum and maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub variance: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
    pub err_low: f64,
    pub err_high: f64,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Option<Stats> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Stats { mean, variance, stddev: variance.sqrt(), min, max, err_low: mean - min, err_high: max - mean })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub voters: usize,
    /// Gas charged to the deployer, identical across repetitions.
    pub gas: u64,
    pub latencies: Vec<f64>,
    pub stats: Stats,
}

fn model_gas(kind: DeployKind, voters: usize) -> u64 {
    match kind {
        DeployKind::DataShare => datashare_deploy_gas(voters).0,
        DeployKind::Congress => congress_deploy_gas(voters).0,
    }
}

/// Creates a contract with `voters` arbiters on a fresh ledger and, for the
/// congress kind, raises a breach on it. Returns the gas charged for the
/// measured deployment.
fn measure(kind: DeployKind, voters: usize, keys: &mut ChaCha20Rng) -> Result<u64, DataShareError> {
    let policy = GasPolicy::default();
    let mut ledger = Ledger::new(policy)?;
    let funds = Wei(1_000_000_000);
    let operator = ledger.create_account(funds, Role::Operator);
    let mut factory = ContractFactory::deploy(&mut ledger, operator)?;
    let mut congress = CongressFactory::deploy(&mut ledger, operator)?;
    let requester = ledger.create_account(funds, Role::Requester);
    let provider = ledger.create_account(funds, Role::Provider);
    let arbiters: Vec<Address> = (0..voters).map(|_| ledger.create_account(Wei::ZERO, Role::Arbiter)).collect();
    let rk = KeyPair::generate(keys);
    let pk = KeyPair::generate(keys);
    let mut dir = KeyDirectory::new();
    dir.insert(requester, rk.public());
    dir.insert(provider, pk.public());
    let terms = AgreementTerms {
        requester_name: "requester".into(),
        requester_address: requester,
        provider_name: "provider".into(),
        provider_address: provider,
        payment: Wei(1_000),
        requester_deposit: Wei(1_000),
        provider_deposit: Wei(1_000),
        gas_money: Wei(100_000),
        breach_condition: "sweep".into(),
        voter_list: arbiters,
        quorum: 1,
        voting_time: 60,
        voting_margin: Margin::from_fraction(0.5),
        contract_lifetime: 3_600,
        default_compensation: Wei(2_000),
    };
    let packet = propose(requester, &rk, terms).map_err(DataShareError::UnsealedTerms)?;
    let sealed = accept(provider, &pk, &dir, &packet).map_err(DataShareError::UnsealedTerms)?;
    let total = DepositBreakdown::for_terms(&sealed)?.total;

    let before = ledger.balance(requester)?;
    let contract = factory.create(&mut ledger, &dir, sealed, total)?;
    let after_create = ledger.balance(requester)?;
    let spent = match kind {
        DeployKind::DataShare => before.0 - after_create.0 - total.0,
        DeployKind::Congress => {
            factory.raise_breach(&mut ledger, &mut congress, contract, requester, "sweep", None)?;
            after_create.0 - ledger.balance(requester)?.0
        }
    };
    Ok((spent / policy.gas_price) as u64)
}

pub fn gas_sweep(
    kind: DeployKind,
    voters: RangeInclusive<usize>,
    reps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, SweepError> {
    let (lo, hi) = (*voters.start(), *voters.end());
    if lo == 0 || lo > hi {
        return Err(SweepError::InvalidRange(format!("voters {lo}..{hi}")));
    }
    if reps == 0 {
        return Err(SweepError::InvalidRange("reps must be at least 1".into()));
    }
    let limit = GasPolicy::default().block_gas_limit;
    if model_gas(kind, hi) > limit {
        return Err(SweepError::InvalidRange(format!("{hi} voters exceeds the block gas limit")));
    }
    let mut keys = ChaCha20Rng::seed_from_u64(seed);
    keys.set_stream(1);
    let mut latency_rng = ChaCha20Rng::seed_from_u64(seed);
    latency_rng.set_stream(2);
    let mut latency = LatencyModel::from_rng(latency_rng);

    let mut rows = Vec::with_capacity(hi - lo + 1);
    for v in voters {
        let mut gas = None;
        let mut latencies = Vec::with_capacity(reps);
        for _ in 0..reps {
            let g = measure(kind, v, &mut keys).map_err(|source| SweepError::Deploy { voters: v, source })?;
            debug_assert!(gas.is_none_or(|prev| prev == g));
            gas = Some(g);
            latencies.push(latency.sample(kind));
        }
        let stats = Stats::of(&latencies).expect("reps is positive");
        rows.push(SweepRow { voters: v, gas: gas.expect("reps is positive"), latencies, stats });
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[SweepRow], mut w: W) -> io::Result<()> {
    writeln!(w, "voters,gas,rep,latency_s,mean_s,var_s2,stddev_s")?;
    for row in rows {
        for (rep, x) in row.latencies.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                row.voters,
                row.gas,
                rep + 1,
                x,
                row.stats.mean,
                row.stats.variance,
                row.stats.stddev
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_on_fixed_samples() {
        let s = Stats::of(&[20.0, 30.0, 40.0, 50.0, 35.0]).unwrap();
        assert_eq!(s.mean, 35.0);
        assert_eq!(s.variance, 100.0);
        assert_eq!(s.stddev, 10.0);
        assert_eq!((s.err_low, s.err_high), (15.0, 15.0));

        let s = Stats::of(&[25.0, 25.0, 40.0, 30.0]).unwrap();
        assert_eq!(s.mean, 30.0);
        assert_eq!(s.variance, 37.5);
        assert_eq!((s.min, s.max), (25.0, 40.0));
        assert_eq!((s.err_low, s.err_high), (5.0, 10.0));
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn measured_gas_matches_models() {
        let mut keys = ChaCha20Rng::seed_from_u64(1);
        for v in [1, 4, 10] {
            assert_eq!(measure(DeployKind::DataShare, v, &mut keys).unwrap(), datashare_deploy_gas(v).0);
            assert_eq!(measure(DeployKind::Congress, v, &mut keys).unwrap(), congress_deploy_gas(v).0);
        }
    }

    #[test]
    fn invalid_ranges() {
        assert_eq!(gas_sweep(DeployKind::DataShare, 0..=3, 1, 0).unwrap_err().code(), "InvalidRange");
        #[allow(clippy::reversed_empty_ranges)]
        let r = 5..=3;
        assert_eq!(gas_sweep(DeployKind::DataShare, r, 1, 0).unwrap_err().code(), "InvalidRange");
        assert_eq!(gas_sweep(DeployKind::Congress, 1..=3, 0, 0).unwrap_err().code(), "InvalidRange");
    }

    #[test]
    fn csv_shape() {
        let rows = gas_sweep(DeployKind::Congress, 1..=2, 3, 9).unwrap();
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("1,2181014,1,"));
        assert!(lines[6].starts_with("2,2181309,3,"));
    }
}
