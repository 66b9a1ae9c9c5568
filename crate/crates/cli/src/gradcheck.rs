use std::fmt;
use std::str::FromStr;

use scse_core::gradsuite::{self, GradBlock, GradReport};
use scse_core::se::SeVariant;
use scse_core::zoo::{ArchKind, ArchSpec};
use scse_core::{Error, Result};

/// What `--block` names: a single op/block/loss or a whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Block(GradBlock),
    Net,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "net" {
            return Ok(Self::Net);
        }
        s.parse().map(Self::Block).map_err(|_| {
            let names: Vec<&str> = GradBlock::ALL.iter().map(|b| b.as_str()).collect();
            Error::Config(format!(
                "unknown block '{s}' (expected net or one of {})",
                names.join(", ")
            ))
        })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Block(b) => b.fmt(f),
            Self::Net => f.write_str("net"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub target: Target,
    pub eps: Option<f64>,
    pub seed: u64,
    pub arch: ArchKind,
    pub se: SeVariant,
    pub fraction: f64,
    pub size: usize,
}

pub fn run(o: &Options) -> Result<GradReport> {
    if let Some(eps) = o.eps {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("--eps must be positive, got {eps}")));
        }
    }
    match o.target {
        Target::Block(b) => gradsuite::check_block(
            b,
            o.seed,
            o.eps.unwrap_or(scse_core::gradcheck::DEFAULT_EPS),
        ),
        Target::Net => {
            if !(o.fraction > 0.0 && o.fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "--fraction must be in (0, 1], got {}",
                    o.fraction
                )));
            }
            gradsuite::check_network(
                &ArchSpec::desk(o.arch, o.se),
                o.seed,
                o.eps.unwrap_or(gradsuite::NETWORK_EPS),
                o.fraction,
                o.size,
            )
        }
    }
}

pub fn render(r: &GradReport) -> String {
    let mut out = String::from("group,checked,max_relative_error\n");
    for g in &r.groups {
        out.push_str(&format!(
            "{},{},{:.3e}\n",
            g.name, g.checked, g.max_relative_error
        ));
    }
    out.push_str(&format!(
        "{} {}: max relative error {:.3e} (tolerance {:.0e})\n",
        if r.passed() { "PASS" } else { "FAIL" },
        r.subject,
        r.max_relative_error(),
        r.tolerance
    ));
    out
}
