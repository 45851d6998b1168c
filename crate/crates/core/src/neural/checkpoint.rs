use std::path::Path;

use super::network::{Network, NetworkSpec};
use super::train::TrainedNetwork;
use crate::error::{Error, Result};
use crate::io::{read_raw, write_raw, Header};

/// A stored parameter vector with the network spec it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
}

fn spec_table(spec: &NetworkSpec) -> Result<toml::Table> {
    toml::Table::try_from(spec).map_err(|e| Error::Config {
        path: None,
        message: e.to_string(),
    })
}

/// Writes `θ*` as raw `f64` with a sidecar holding the spec, a hash of the
/// spec, the seed and the iteration count.
pub fn save_checkpoint(path: &Path, network: &Network, trained: &TrainedNetwork) -> Result<()> {
    let spec = spec_table(network.spec())?;
    let text = toml::to_string(&spec).expect("table serialises");
    let mut header = Header::new();
    header.insert("spec_hash".into(), format!("{:016x}", fnv1a(text.as_bytes())).into());
    header.insert("seed".into(), (trained.config.seed as i64).into());
    header.insert("iterations".into(), (trained.config.iterations as i64).into());
    header.insert("lambda".into(), trained.config.lambda.into());
    header.insert("final_loss".into(), trained.final_loss.into());
    header.insert("n_params".into(), (network.n_params() as i64).into());
    header.insert("spec".into(), toml::Value::Table(spec));
    write_raw(path, &trained.theta, &header)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (theta, header) = read_raw(path)?;
    let bad = |m: &str| Error::Config {
        path: Some(path.to_owned()),
        message: m.into(),
    };
    let spec: NetworkSpec = header
        .get("spec")
        .cloned()
        .ok_or_else(|| bad("checkpoint sidecar has no spec"))?
        .try_into()
        .map_err(|e: toml::de::Error| bad(&e.to_string()))?;
    let int = |k: &str| header.get(k).and_then(|v| v.as_integer()).unwrap_or(0);
    Ok(Checkpoint {
        spec,
        theta,
        seed: int("seed") as u64,
        iterations: int("iterations") as usize,
        final_loss: header.get("final_loss").and_then(|v| v.as_float()).unwrap_or(f64::NAN),
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::TrainConfig;

    #[test]
    fn roundtrip() {
        let spec = NetworkSpec {
            height: 5,
            width: 4,
            channels: 2,
            input_seed: 77,
            ..Default::default()
        };
        let net = Network::new(&spec).unwrap();
        let trained = TrainedNetwork {
            theta: net.init_params(3),
            config: TrainConfig {
                seed: 3,
                iterations: 10,
                ..Default::default()
            },
            loss_trace: vec![1.0, 0.5],
            final_loss: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.f64");
        save_checkpoint(&path, &net, &trained).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.theta, trained.theta);
        assert_eq!((back.seed, back.iterations), (3, 10));
    }
}
